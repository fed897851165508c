// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Trains the full desk-scale pipeline once (flow estimators,
// teacher, three distillation variants) and then verifies each numbered
// criterion, printing one PASS/FAIL line per criterion plus supplementary
// [check] lines for trained-artifact invariants. Exit code is the number of
// failed lines.
//
// Usage: acceptance [--fast] [workdir]
//   --fast   reduced step counts for smoke iterations (not the official gate)

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "d2vr/config.hpp"
#include "d2vr/diffusion.hpp"
#include "d2vr/distill.hpp"
#include "d2vr/drfa.hpp"
#include "d2vr/metrics.hpp"
#include "d2vr/synthgen.hpp"
#include "../support/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace d2vr;
using diffusion::DenoiserNet;
using diffusion::NoiseSchedule;
using synthgen::SequencePair;

namespace {

struct Gate {
    int failed = 0;
    void criterion(int id, const std::string& name, bool pass, const std::string& detail) {
        std::printf("[%s] criterion %2d: %s (%s)\n", pass ? "PASS" : "FAIL", id, name.c_str(),
                    detail.c_str());
        std::fflush(stdout);
        if (!pass) ++failed;
    }
    void check(const std::string& name, bool pass, const std::string& detail) {
        std::printf("[%s] check: %s (%s)\n", pass ? "pass" : "FAIL", name.c_str(), detail.c_str());
        std::fflush(stdout);
        if (!pass) ++failed;
    }
};

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list args;
    va_start(args, f);
    std::vsnprintf(buf, sizeof(buf), f, args);
    va_end(args);
    return buf;
}

double elapsed_s(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// mean per-frame PSNR of a whole split restoration
double mean_psnr(const std::vector<synthgen::VideoSequence>& restored,
                 const std::vector<SequencePair>& pairs) {
    double acc = 0.0;
    for (size_t i = 0; i < pairs.size(); ++i) {
        double p = 0.0;
        for (int t = 0; t < pairs[i].clean.T(); ++t)
            p += metrics::psnr(restored[i].frame(t), pairs[i].clean.frame(t));
        acc += p / pairs[i].clean.T();
    }
    return acc / pairs.size();
}

double mean_hf(const std::vector<synthgen::VideoSequence>& restored) {
    double acc = 0.0;
    for (const auto& r : restored) {
        double h = 0.0;
        for (int t = 0; t < r.T(); ++t) h += metrics::hf_energy(r.frame(t));
        acc += h / r.T();
    }
    return acc / restored.size();
}

double mean_tlpips(const std::vector<synthgen::VideoSequence>& restored,
                   const std::vector<SequencePair>& pairs, const distill::FeatureFn& phi) {
    double acc = 0.0;
    for (size_t i = 0; i < pairs.size(); ++i)
        acc += metrics::tlpips_metric(restored[i], pairs[i].clean, phi);
    return acc / restored.size();
}

std::vector<synthgen::VideoSequence> restore_split(const DenoiserNet& net,
                                                   const drfa::DrfaParams& flow,
                                                   const std::vector<SequencePair>& pairs,
                                                   diffusion::RestoreMode mode,
                                                   const diffusion::SamplerConfig& scfg,
                                                   const NoiseSchedule& sched, uint64_t seed0) {
    std::vector<synthgen::VideoSequence> out(pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i)
        out[i] = diffusion::restore_sequence(net, flow, pairs[i].degraded, mode, scfg, sched,
                                             seed0 + i)
                     .restored;
    return out;
}

double split_epe(const drfa::DrfaParams& params, const std::vector<SequencePair>& pairs,
                 std::vector<double>* per_seq = nullptr) {
    double total = 0.0;
    for (const auto& pair : pairs) {
        double seq = 0.0;
        for (int t = 0; t + 1 < pair.clean.T(); ++t) {
            Tensor pred =
                drfa::estimate_flow(pair.degraded.frame(t), pair.degraded.frame(t + 1), params).flow;
            seq += metrics::epe(pred, pair.clean.flow_pair(t));
        }
        seq /= pair.clean.T() - 1;
        if (per_seq) per_seq->push_back(seq);
        total += seq;
    }
    return total / pairs.size();
}

int run_cli(const std::string& bin, const std::string& args) {
    const std::string cmd = bin + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

}  // namespace

int main(int argc, char** argv) {
    bool fast = false;
    fs::path work = "acceptance_work";
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--fast")
            fast = true;
        else
            work = a;
    }
    fs::remove_all(work);
    fs::create_directories(work);
    Gate gate;
    const auto wall0 = std::chrono::steady_clock::now();

    // ---------------------------------------------------------------- fast criteria
    {  // 1: autodiff gradient checks
        const auto t0 = std::chrono::steady_clock::now();
        double lin = 0, non = 0;
        for (uint64_t seed = 1; seed <= 10; ++seed) {
            auto rep = kit::check_op_gradients(seed);
            lin = std::max(lin, rep.linear_worst);
            non = std::max(non, rep.nonlinear_worst);
        }
        gate.criterion(1, "autodiff finite-difference checks", lin < 1e-4 && non < 1e-3,
                       fmt("linear %.2e < 1e-4, nonlinear %.2e < 1e-3, %.1fs", lin, non,
                           elapsed_s(t0)));
    }

    {  // 2: confidence gating reduces to the unbiased attention at C == 1
        Rng rng(42);
        const int n = 64, d = 32;
        Tensor Q = rand_uniform({n, d}, rng, -1.f, 1.f);
        Tensor K = rand_uniform({n, d}, rng, -1.f, 1.f);
        drfa::PosTable pos;
        pos.radius = 7;
        pos.table = rand_uniform({15 * 15}, rng, -0.5f, 0.5f);
        Tensor biased = softmax(
            drfa::attention_scores(Q, K, pos, 8, 8, Tensor::full({n}, 1.f), 1e-6f), 1);
        Tensor plain = softmax(drfa::attention_scores(Q, K, pos, 8, 8, Tensor(), 1e-6f), 1);
        float worst = 0.f;
        for (int i = 0; i < n * n; ++i)
            worst = std::max(worst, std::fabs(biased.data()[i] - plain.data()[i]));
        gate.criterion(2, "confidence gating degenerates to vanilla aggregation", worst < 1e-6f,
                       fmt("max weight delta %.2e < 1e-6", worst));
    }

    {  // 3: key-side suppression of a corrupted key
        const int n = 64;
        Tensor Q = Tensor::zeros({n, 16}), K = Tensor::zeros({n, 16});
        drfa::PosTable pos;
        pos.radius = 7;
        pos.table = Tensor::zeros({15 * 15});
        std::vector<float> c(n, 1.f);
        c[17] = 1e-6f;
        Tensor w = softmax(
            drfa::attention_scores(Q, K, pos, 8, 8, Tensor::from({n}, c), 1e-6f), 1);
        float worst_ratio = 1e30f;
        for (int r = 0; r < n; ++r)
            worst_ratio = std::min(worst_ratio, (1.f / n) / w.data()[r * n + 17]);
        gate.criterion(3, "corrupted key suppressed vs uniform", worst_ratio >= 1e3f,
                       fmt("suppression factor %.1e >= 1e3", worst_ratio));
    }

    NoiseSchedule sched = diffusion::make_schedule();

    {  // 5: forward-process moments
        const auto t0 = std::chrono::steady_clock::now();
        Rng rng(7);
        bool ok = true;
        std::string detail;
        for (int s : {1, 250, 500, 750, 999}) {
            const int n = 100000;
            const float x0v = 0.41f;
            Tensor xs = diffusion::forward_diffuse(Tensor::full({n}, x0v), s, randn({n}, rng),
                                                   sched);
            double sum = 0, sum2 = 0;
            for (int i = 0; i < n; ++i) {
                sum += xs.data()[i];
                sum2 += static_cast<double>(xs.data()[i]) * xs.data()[i];
            }
            const double m = sum / n, sd = std::sqrt(sum2 / n - m * m);
            const bool mean_ok = std::fabs(m - sched.alpha[s] * x0v) <
                                 3.0 * sched.theta[s] / std::sqrt(static_cast<double>(n));
            const bool std_ok = std::fabs(sd - sched.theta[s]) < 0.01 * sched.theta[s];
            if (!(mean_ok && std_ok)) {
                ok = false;
                detail = fmt("s=%d mean %.4f vs %.4f, std %.4f vs %.4f", s, m,
                             sched.alpha[s] * x0v, sd, sched.theta[s]);
            }
        }
        gate.criterion(5, "forward-process moments over 1e5 draws", ok,
                       ok ? fmt("all 5 levels within 3 sigma / 1%%, %.1fs", elapsed_s(t0)) : detail);
    }

    {  // 6: plug-in oracle sampler inversion
        Rng rng(9);
        Tensor x0 = rand_uniform({1, 32, 32}, rng, -0.9f, 0.9f);
        Tensor eps = randn({1, 32, 32}, rng);
        diffusion::EpsFn oracle = [&](const Tensor&, int) { return eps; };
        Tensor x = diffusion::forward_diffuse(x0, 750, eps, sched);
        Tensor rec = diffusion::student_rollout(oracle, x, {750, 500, 250, 0}, sched);
        float worst = 0.f;
        for (int i = 0; i < x0.numel(); ++i)
            worst = std::max(worst, std::fabs(rec.data()[i] - x0.data()[i]));
        gate.criterion(6, "4-step sampler inverts the oracle denoiser", worst < 1e-5f,
                       fmt("max abs error %.2e < 1e-5", worst));
    }

    {  // 11: metric identities
        Rng rng(11);
        Tensor x = rand_uniform({1, 16, 16}, rng);
        synthgen::VideoSequence seq = synthgen::generate_clean(3, synthgen::CleanSpec{.T = 3});
        distill::PerceptualNet phi = distill::PerceptualNet::fixed(1);
        metrics::FlowFn zero_flow = [](const Tensor& a, const Tensor&) {
            return Tensor::zeros({2, a.shape()[1], a.shape()[2]});
        };
        const bool ok = metrics::psnr(x, x) == metrics::kPsnrSentinel &&
                        std::fabs(metrics::ssim(x, x) - 1.0) < 1e-6 &&
                        metrics::epe(Tensor::zeros({2, 4, 4}), Tensor::zeros({2, 4, 4})) == 0.0 &&
                        metrics::tof(seq, seq, zero_flow) == 0.0 &&
                        metrics::tlpips_metric(seq, seq, phi.fn()) == 0.0 &&
                        metrics::hf_energy(Tensor::full({1, 8, 8}, 0.3f)) == 0.0;
        gate.criterion(11, "metric identities", ok,
                       "psnr sentinel, ssim(x,x)=1, epe=0, tof=0, tlpips=0, hf(const)=0");
    }

    // ---------------------------------------------------------------- datasets
    const auto data_t0 = std::chrono::steady_clock::now();
    synthgen::DatasetConfig dcfg;
    dcfg.train_lo = 0;
    dcfg.train_hi = fast ? 16 : 32;
    dcfg.eval_lo = 100;
    dcfg.eval_hi = 120;  // 20 eval sequences always
    dcfg.clean.T = 8;
    dcfg.motion = "mix";
    dcfg.degradation.noise_sigma = 0.1f;
    dcfg.degradation.blur_sigma = 1.0f;
    dcfg.degradation.occlusion_fraction = 0.3f;
    dcfg.degradation.downsample_factor = 2;
    auto train_pairs = synthgen::make_split(dcfg, true);
    auto eval_pairs = synthgen::make_split(dcfg, false);

    synthgen::DatasetConfig clean_cfg = dcfg;  // degradation-free config for the pinned backend
    clean_cfg.degradation = synthgen::DegradationSpec{};
    auto clean_train = synthgen::make_split(clean_cfg, true);

    std::printf("[info] datasets ready: %zu train / %zu eval, %.1fs\n", train_pairs.size(),
                eval_pairs.size(), elapsed_s(data_t0));

    // ---------------------------------------------------------------- flow training
    const int flow_steps = fast ? 300 : 1500;
    drfa::DrfaConfig fc_conf;
    fc_conf.use_confidence = true;
    drfa::DrfaConfig fc_plain = fc_conf;
    fc_plain.use_confidence = false;

    drfa::DrfaParams flow_conf = drfa::init_drfa(fc_conf, 100);
    drfa::DrfaParams flow_plain = drfa::init_drfa(fc_plain, 100);
    drfa::DrfaParams flow_pinned = drfa::init_drfa(fc_conf, 100);  // clean-trained tOF backend
    std::vector<float> curve_conf, curve_plain;

    const auto flow_t0 = std::chrono::steady_clock::now();
    {
        drfa::FlowTrainConfig tc;
        tc.steps = flow_steps;
        tc.batch = 6;
        tc.lr = 2e-4f;
        tc.seed = 500;
        std::thread t1([&] { curve_conf = drfa::train_flow(train_pairs, flow_conf, tc); });
        std::thread t2([&] { curve_plain = drfa::train_flow(train_pairs, flow_plain, tc); });
        t1.join();
        t2.join();
        drfa::FlowTrainConfig pc = tc;
        drfa::train_flow(clean_train, flow_pinned, pc);
    }
    std::printf("[info] flow training done (3 runs of %d steps), %.1fs\n", flow_steps,
                elapsed_s(flow_t0));

    {  // 4: flow robustness against the no-confidence ablation
        std::vector<double> epe_conf, epe_plain;
        const double mean_conf = split_epe(flow_conf, eval_pairs, &epe_conf);
        const double mean_plain = split_epe(flow_plain, eval_pairs, &epe_plain);
        int improved = 0;
        for (size_t i = 0; i < epe_conf.size(); ++i)
            if (epe_conf[i] < epe_plain[i]) ++improved;
        gate.criterion(4, "confidence gating lowers EPE under degradation",
                       mean_conf < mean_plain && improved >= 16,
                       fmt("EPE %.3f vs %.3f px, improved %d/20, %.0fs train", mean_conf,
                           mean_plain, improved, elapsed_s(flow_t0)));
    }

    {  // checks tied to the trained flow model
        // identical frames give near-zero flow
        double zero_flow_mag = 0.0;
        int count = 0;
        for (int i = 0; i < 4; ++i) {
            Tensor f = eval_pairs[i].degraded.frame(0);
            Tensor fl = drfa::estimate_flow(f, f, flow_conf).flow;
            for (int k = 0; k < fl.numel(); ++k) zero_flow_mag += std::fabs(fl.data()[k]);
            count += fl.numel();
        }
        zero_flow_mag /= count;
        gate.check("identical frames give |flow| < 0.1 px", zero_flow_mag < 0.1,
                   fmt("mean |flow| %.4f", zero_flow_mag));

        // clean translation EPE < 0.5 px in the interior
        synthgen::CleanSpec ts;
        ts.kind = synthgen::MotionKind::translate;
        double interior_epe = 0.0;
        int n_seq = 0;
        for (uint64_t s : {200ull, 201ull, 202ull, 203ull}) {
            synthgen::VideoSequence v = synthgen::generate_clean(s, ts);
            Tensor pred = drfa::estimate_flow(v.frame(0), v.frame(1), flow_conf).flow;
            Tensor gt = v.flow_pair(0);
            double acc = 0.0;
            int cnt = 0;
            const int H = v.H(), W = v.W();
            for (int y = 4; y < H - 4; ++y)
                for (int x = 4; x < W - 4; ++x) {
                    const double dx = pred.data()[y * W + x] - gt.data()[y * W + x];
                    const double dy =
                        pred.data()[H * W + y * W + x] - gt.data()[H * W + y * W + x];
                    acc += std::sqrt(dx * dx + dy * dy);
                    ++cnt;
                }
            interior_epe += acc / cnt;
            ++n_seq;
        }
        interior_epe /= n_seq;
        gate.check("clean translation interior EPE < 0.5 px", interior_epe < 0.5,
                   fmt("EPE %.3f", interior_epe));

        // integer-shift equivariance within 0.2 px (interior)
        {
            synthgen::VideoSequence v = synthgen::generate_clean(204, ts);
            Tensor a = v.frame(0), b = v.frame(1);
            const int H = v.H(), W = v.W(), sx = 2, sy = 1;
            auto shift = [&](const Tensor& img) {
                Tensor out = Tensor::zeros(img.shape());
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        const int ys = std::clamp(y - sy, 0, H - 1);
                        const int xs = std::clamp(x - sx, 0, W - 1);
                        out.data()[y * W + x] = img.data()[ys * W + xs];
                    }
                return out;
            };
            Tensor f0 = drfa::estimate_flow(a, b, flow_conf).flow;
            Tensor f1 = drfa::estimate_flow(shift(a), shift(b), flow_conf).flow;
            double diff = 0.0;
            int cnt = 0;
            for (int p = 0; p < 2; ++p)
                for (int y = 8; y < H - 8; ++y)
                    for (int x = 8; x < W - 8; ++x) {
                        diff += std::fabs(f1.data()[p * H * W + y * W + x] -
                                          f0.data()[p * H * W + (y - sy) * W + (x - sx)]);
                        ++cnt;
                    }
            diff /= cnt;
            gate.check("integer shift equivariance within 0.2 px", diff < 0.2,
                       fmt("mean |delta flow| %.3f", diff));
        }

        // confidence is lower on occluded pixels than on clean ones
        double occ_conf = 0.0, clean_conf = 0.0;
        long occ_n = 0, clean_n = 0;
        for (size_t i = 0; i < 8 && i < eval_pairs.size(); ++i) {
            const auto& pair = eval_pairs[i];
            for (int t = 0; t + 1 < pair.degraded.T(); ++t) {
                drfa::FlowField f =
                    drfa::estimate_flow(pair.degraded.frame(t), pair.degraded.frame(t + 1),
                                        flow_conf);
                const int H = pair.degraded.H(), W = pair.degraded.W();
                const float* mask = pair.degraded.occlusion_mask.data() +
                                    static_cast<size_t>(t) * H * W;
                for (int k = 0; k < H * W; ++k) {
                    if (mask[k] > 0.5f) {
                        occ_conf += f.confidence.data()[k];
                        ++occ_n;
                    } else {
                        clean_conf += f.confidence.data()[k];
                        ++clean_n;
                    }
                }
            }
        }
        occ_conf /= occ_n;
        clean_conf /= clean_n;
        gate.check("confidence drops on occluded pixels", occ_conf < clean_conf,
                   fmt("occluded %.3f < clean %.3f", occ_conf, clean_conf));

        // training-loss moving average is non-increasing at a 500-step lag
        bool monotone = true;
        if (curve_conf.size() >= 1000) {
            auto ma = [&](size_t end) {
                double s = 0.0;
                for (size_t i = end - 500; i < end; ++i) s += curve_conf[i];
                return s / 500.0;
            };
            for (size_t end = 1000; end <= curve_conf.size(); end += 100)
                if (ma(end) > ma(end - 500) + 1e-3) monotone = false;
        }
        gate.check("flow loss 500-step moving average non-increasing", monotone,
                   fmt("final loss %.4f", curve_conf.back()));

        // zero-motion training drives predictions to zero
        synthgen::DatasetConfig zcfg;
        zcfg.train_lo = 0;
        zcfg.train_hi = 6;
        zcfg.eval_lo = 6;
        zcfg.eval_hi = 7;
        zcfg.clean.T = 4;
        zcfg.motion = "translate";
        zcfg.clean.velocity_override = true;
        zcfg.clean.vx = zcfg.clean.vy = 0.f;
        auto zdata = synthgen::make_split(zcfg, true);
        drfa::DrfaParams zp = drfa::init_drfa(fc_conf, 7);
        drfa::FlowTrainConfig ztc;
        ztc.steps = fast ? 150 : 300;
        ztc.batch = 4;
        auto zcurve = drfa::train_flow(zdata, zp, ztc);
        double zmag = 0.0;
        Tensor zf = drfa::estimate_flow(zdata[0].degraded.frame(0), zdata[0].degraded.frame(1), zp)
                        .flow;
        for (int i = 0; i < zf.numel(); ++i) zmag += std::fabs(zf.data()[i]);
        zmag /= zf.numel();
        gate.check("zero-motion training gives |flow| < 0.1 px", zmag < 0.1,
                   fmt("mean |flow| %.4f, final loss %.4f < first %.4f", zmag, zcurve.back(),
                       zcurve.front()));
    }

    // ---------------------------------------------------------------- teacher
    const auto teach_t0 = std::chrono::steady_clock::now();
    flow_conf.state.set_requires_grad(false);
    auto prepared = diffusion::prepare_sequences(train_pairs, flow_conf);
    diffusion::DenoiserConfig ncfg;
    ncfg.base = 20;
    DenoiserNet teacher = diffusion::init_denoiser(ncfg, 300);
    diffusion::TeacherTrainConfig ttc;
    ttc.steps = fast ? 800 : 3000;
    ttc.batch = 8;
    ttc.lr = 2e-4f;
    auto teacher_curve = diffusion::train_teacher(teacher, prepared, sched, ttc);
    teacher.state.set_requires_grad(false);
    std::printf("[info] teacher trained (%d steps), eps-MSE %.4f -> %.4f, %.0fs\n", ttc.steps,
                teacher_curve.front(), teacher_curve.back(), elapsed_s(teach_t0));

    {  // teacher loss property
        const int w = std::min<size_t>(500, teacher_curve.size() / 2);
        double head = 0, tail = 0;
        for (int i = 0; i < w; ++i) {
            head += teacher_curve[i];
            tail += teacher_curve[teacher_curve.size() - 1 - i];
        }
        gate.check("teacher eps-loss final window < 0.7x initial", tail < 0.7 * head,
                   fmt("%.4f vs %.4f", tail / w, head / w));
    }

    // ---------------------------------------------------------------- distillation
    const auto dist_t0 = std::chrono::steady_clock::now();
    distill::DistillConfig base_cfg;
    base_cfg.total_steps = fast ? 500 : 2000;
    base_cfg.batch = 4;
    base_cfg.clip_len = 4;
    base_cfg.seed = 900;

    distill::DistillOutput full, wo_adv, wo_tlpips;
    {
        distill::DistillConfig cfg_full = base_cfg;
        distill::DistillConfig cfg_wo_adv = base_cfg;
        cfg_wo_adv.lambda1 = 0.f;
        distill::DistillConfig cfg_wo_tl = base_cfg;
        cfg_wo_tl.lambda2 = 0.f;
        std::thread t1([&] { full = distill::distill_run(teacher, prepared, sched, cfg_full); });
        std::thread t2(
            [&] { wo_adv = distill::distill_run(teacher, prepared, sched, cfg_wo_adv); });
        t1.join();
        t2.join();
        wo_tlpips = distill::distill_run(teacher, prepared, sched, cfg_wo_tl);
    }
    std::printf("[info] distillation done (3 variants x %d steps), %.0fs\n", base_cfg.total_steps,
                elapsed_s(dist_t0));

    // ---------------------------------------------------------------- evaluations
    const auto eval_t0 = std::chrono::steady_clock::now();
    diffusion::SamplerConfig scfg;
    distill::PerceptualNet phi = distill::PerceptualNet::fixed(1);

    auto rest_student = restore_split(full.student, flow_conf, eval_pairs,
                                      diffusion::RestoreMode::student, scfg, sched, 5000);
    auto rest_teacher4 = restore_split(teacher, flow_conf, eval_pairs,
                                       diffusion::RestoreMode::student, scfg, sched, 5000);
    auto rest_wo_adv = restore_split(wo_adv.student, flow_conf, eval_pairs,
                                     diffusion::RestoreMode::student, scfg, sched, 5000);
    auto rest_wo_tl = restore_split(wo_tlpips.student, flow_conf, eval_pairs,
                                    diffusion::RestoreMode::student, scfg, sched, 5000);

    const double psnr_student = mean_psnr(rest_student, eval_pairs);
    const double psnr_teacher4 = mean_psnr(rest_teacher4, eval_pairs);
    const double psnr_wo_adv = mean_psnr(rest_wo_adv, eval_pairs);
    const double hf_full = mean_hf(rest_student);
    const double hf_wo_adv = mean_hf(rest_wo_adv);
    const double tl_full = mean_tlpips(rest_student, eval_pairs, phi.fn());
    const double tl_wo = mean_tlpips(rest_wo_tl, eval_pairs, phi.fn());
    std::printf("[info] evals done, %.0fs\n", elapsed_s(eval_t0));

    gate.criterion(7, "distilled 4-step student beats the teacher net at 4 steps",
                   psnr_student >= psnr_teacher4 + 0.5,
                   fmt("PSNR %.2f vs %.2f dB (gain %.2f >= 0.5)", psnr_student, psnr_teacher4,
                       psnr_student - psnr_teacher4));

    gate.criterion(8, "adversarial term trades pixel fidelity for sharpness",
                   psnr_wo_adv > psnr_student && hf_wo_adv < hf_full,
                   fmt("PSNR %.2f > %.2f, hf %.5f < %.5f", psnr_wo_adv, psnr_student, hf_wo_adv,
                       hf_full));

    gate.criterion(9, "temporal term curbs the measured flicker", tl_wo >= 1.5 * tl_full,
                   fmt("tLPIPS %.2f vs %.2f (ratio %.2f >= 1.5)", tl_wo, tl_full,
                       tl_full > 0 ? tl_wo / tl_full : 999.0));

    {  // check: teacher restoration beats the degraded input
        diffusion::SamplerConfig tcfg48;
        auto rest_teacher48 =
            restore_split(teacher, flow_conf, {eval_pairs.begin(), eval_pairs.begin() + 6},
                          diffusion::RestoreMode::teacher, tcfg48, sched, 5000);
        std::vector<SequencePair> sub(eval_pairs.begin(), eval_pairs.begin() + 6);
        const double psnr_teacher48 = mean_psnr(rest_teacher48, sub);
        std::vector<synthgen::VideoSequence> degraded;
        for (const auto& p : sub) degraded.push_back(p.degraded);
        const double psnr_input = mean_psnr(degraded, sub);
        gate.check("48-step teacher improves over the degraded input", psnr_teacher48 > psnr_input,
                   fmt("%.2f > %.2f dB", psnr_teacher48, psnr_input));
    }

    {  // check: warping the previous output lowers tOF on static clips
        synthgen::CleanSpec st;
        st.T = 6;
        st.kind = synthgen::MotionKind::translate;
        st.velocity_override = true;
        st.vx = st.vy = 0.f;
        metrics::FlowFn pinned_fn = [&](const Tensor& a, const Tensor& b) {
            return drfa::estimate_flow(a, b, flow_pinned).flow;
        };
        double tof_rec = 0.0, tof_indep = 0.0;
        for (uint64_t s : {900ull, 901ull}) {
            synthgen::VideoSequence clean = synthgen::generate_clean(s, st);
            synthgen::VideoSequence lq = synthgen::degrade(clean, dcfg.degradation, s);
            auto rec =
                diffusion::restore_sequence(full.student, flow_conf, lq,
                                            diffusion::RestoreMode::student, scfg, sched, 42)
                    .restored;
            // per-frame independent restoration: every frame is a first frame
            synthgen::VideoSequence indep = rec;
            std::vector<float> buf(static_cast<size_t>(lq.frames.numel()));
            for (int t = 0; t < lq.T(); ++t) {
                auto cond = diffusion::make_condition(lq.frame(t), Tensor());
                Tensor fr = diffusion::student_sample(full.student, cond, sched, scfg.t_student,
                                                      7000 + 13 * t);
                std::copy(fr.data(), fr.data() + fr.numel(),
                          buf.begin() + static_cast<size_t>(t) * fr.numel());
            }
            indep.frames = Tensor::from(lq.frames.shape(), std::move(buf));
            tof_rec += metrics::tof(rec, clean, pinned_fn);
            tof_indep += metrics::tof(indep, clean, pinned_fn);
        }
        gate.check("frame-recurrent warping lowers tOF on static clips", tof_rec < tof_indep,
                   fmt("tOF %.4f < %.4f", tof_rec / 2, tof_indep / 2));
    }

    {  // check: conditioning channel matters on the trained teacher
        auto cond_a = diffusion::make_condition(eval_pairs[0].degraded.frame(1),
                                                eval_pairs[0].clean.frame(0));
        auto cond_b = diffusion::make_condition(eval_pairs[0].degraded.frame(1), Tensor());
        Rng rng(5);
        Tensor x = randn({1, 32, 32}, rng);
        Tensor ea = diffusion::predict_eps(teacher, x, 250, cond_a);
        Tensor eb = diffusion::predict_eps(teacher, x, 250, cond_b);
        float delta = 0.f;
        for (int i = 0; i < ea.numel(); ++i)
            delta = std::max(delta, std::fabs(ea.data()[i] - eb.data()[i]));
        gate.check("warped_prev conditioning moves the trained teacher's output", delta > 0.f,
                   fmt("max |delta eps| %.4f", delta));
    }

    {  // 10: wall-clock speedup of the 4-step student
        diffusion::SamplerConfig t48;
        double ms_student = 0.0, ms_teacher = 0.0;
        for (int i = 0; i < 2; ++i) {
            ms_student += diffusion::restore_sequence(full.student, flow_conf,
                                                      eval_pairs[i].degraded,
                                                      diffusion::RestoreMode::student, scfg, sched,
                                                      77)
                              .ms_per_frame;
            ms_teacher += diffusion::restore_sequence(teacher, flow_conf, eval_pairs[i].degraded,
                                                      diffusion::RestoreMode::teacher, t48, sched,
                                                      77)
                              .ms_per_frame;
        }
        gate.criterion(10, "4-step restoration is at least 10x faster than 48-step",
                       ms_student * 10.0 <= ms_teacher,
                       fmt("%.1f vs %.1f ms/frame (ratio 1:%.1f)", ms_student / 2, ms_teacher / 2,
                           ms_teacher / std::max(1e-9, ms_student)));
    }

    // ---------------------------------------------------------------- CLI determinism
    {
        const char* bin_env = std::getenv("D2VR_BIN");
        std::string bin = bin_env ? bin_env : "./tools/d2vr";
        bool ok = fs::exists(bin);
        std::string detail = "binary: " + bin;
        if (ok) {
            const fs::path root = work / "cli";
            synthgen::DatasetConfig small = dcfg;
            small.train_lo = 0;
            small.train_hi = 2;
            small.eval_lo = 100;
            small.eval_hi = 103;
            synthgen::write_dataset(root / "data", small);
            drfa::save_drfa(root / "drfa", flow_conf);
            drfa::save_drfa(root / "drfa_pinned", flow_pinned);
            diffusion::save_denoiser(root / "student", full.student, {{"role", "student"}});

            auto restore_once = [&](const std::string& out) {
                return run_cli(bin, "restore --out " + (root / out).string() + " --input " +
                                        (root / "data/eval").string() + " --ckpt " +
                                        (root / "student").string() + " --drfa " +
                                        (root / "drfa").string() + " --mode student --seed 21");
            };
            ok = restore_once("r1") == 0;
            // rerun strictly from the snapshot
            ok = ok && run_cli(bin, "restore --out " + (root / "r2").string() + " --config " +
                                        (root / "r1/config_snapshot.txt").string() + " --input " +
                                        (root / "data/eval").string() + " --ckpt " +
                                        (root / "student").string() + " --drfa " +
                                        (root / "drfa").string()) == 0;
            auto eval_once = [&](const std::string& out, const std::string& frames) {
                return run_cli(bin, "eval --out " + (root / out).string() + " --restored " +
                                        (root / frames / "frames").string() + " --data " +
                                        (root / "data").string() + " --flow " +
                                        (root / "drfa_pinned").string());
            };
            ok = ok && eval_once("e1", "r1") == 0 && eval_once("e2", "r2") == 0;
            if (ok) {
                for (const auto& e : fs::directory_iterator(root / "r1/frames")) {
                    const auto rel = e.path().filename();
                    ok = ok && slurp(e.path() / "restored.d2tn") ==
                                   slurp(root / "r2/frames" / rel / "restored.d2tn");
                }
                ok = ok && slurp(root / "e1/reports/eval.jsonl") ==
                               slurp(root / "e2/reports/eval.jsonl");
                detail = "restore + eval reruns byte-identical";
            } else {
                detail = "CLI invocation failed";
            }
        }
        gate.criterion(12, "restore/eval snapshot reruns are bit-identical", ok, detail);
    }

    std::printf("%s: %d failure(s), total %.0fs\n", gate.failed ? "FAILED" : "OK", gate.failed,
                elapsed_s(wall0));
    return gate.failed ? 1 : 0;
}
