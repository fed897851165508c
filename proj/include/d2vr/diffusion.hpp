// SPDX-License-Identifier: Apache-2.0
//
// Pixel-space denoising diffusion: variance-preserving schedule, forward
// noising, a small conditional U-Net predicting the noise, an ancestral
// multi-step sampler (teacher) and a deterministic few-step sampler
// (student) over a fixed timestep set. Images cross this module's boundary
// in [0,1]; the samplers work in the symmetric [-1,1] space internally.
#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "d2vr/drfa.hpp"
#include "d2vr/errors.hpp"
#include "d2vr/nn.hpp"
#include "d2vr/optim.hpp"
#include "d2vr/serialize.hpp"
#include "d2vr/synthgen.hpp"
#include "d2vr/tensor.hpp"

namespace d2vr::diffusion {

// ---------------------------------------------------------------------------
// schedule and forward process
// ---------------------------------------------------------------------------

struct NoiseSchedule {
    int num_steps = 0;
    std::vector<float> alpha_bar;  // cumulative signal power
    std::vector<float> alpha;      // signal scale sqrt(alpha_bar)
    std::vector<float> theta;      // noise scale sqrt(1 - alpha_bar)

    void check_step(int s) const {
        if (s < 0 || s >= num_steps)
            throw ConfigError("timestep " + std::to_string(s) + " outside [0, " +
                              std::to_string(num_steps - 1) + "]");
    }
};

inline NoiseSchedule make_schedule(int num_steps = 1000, double beta_start = 1e-4,
                                   double beta_end = 2e-2) {
    if (num_steps < 1) throw ConfigError("schedule needs at least one step");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw ConfigError("betas must satisfy 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.num_steps = num_steps;
    s.alpha_bar.resize(num_steps);
    s.alpha.resize(num_steps);
    s.theta.resize(num_steps);
    double prod = 1.0;
    for (int i = 0; i < num_steps; ++i) {
        const double beta =
            num_steps == 1 ? beta_start
                           : beta_start + (beta_end - beta_start) * i / (num_steps - 1);
        prod *= 1.0 - beta;
        s.alpha_bar[i] = static_cast<float>(prod);
        s.alpha[i] = static_cast<float>(std::sqrt(prod));
        s.theta[i] = static_cast<float>(std::sqrt(1.0 - prod));
    }
    return s;
}

// x_s = alpha_s * x0 + theta_s * eps, evaluated exactly.
inline Tensor forward_diffuse(const Tensor& x0, int s, const Tensor& eps,
                              const NoiseSchedule& sched) {
    sched.check_step(s);
    if (x0.shape() != eps.shape())
        throw ShapeError("noise shape " + shape_str(eps.shape()) + " does not match " +
                         shape_str(x0.shape()));
    return x0 * sched.alpha[s] + eps * sched.theta[s];
}

// ---------------------------------------------------------------------------
// conditional denoiser
// ---------------------------------------------------------------------------

struct DenoiserConfig {
    int channels = 1;  // image channels
    int base = 20;     // width of the first level
    int emb_dim = 32;  // timestep embedding width
};

struct DenoiserNet {
    DenoiserConfig cfg;
    TrainState state;

    nn::Conv e0a, e0b, e1a, e1b, e2a, e2b;  // encoder (doubles as the GAN trunk)
    nn::Conv d1a, d1b, d0a, d0b, out;
    nn::Dense t1, t2;                              // timestep MLP
    nn::Dense temb0, temb1, temb2, tembd1, tembd0; // per-level projections
};

namespace detail_net {

inline void bind_encoder(DenoiserNet& n, const Rng& root, int in_ch) {
    TrainState& st = n.state;
    const int b = n.cfg.base;
    const float g2 = std::sqrt(2.f);
    n.e0a = nn::conv(st, "enc.l0a", in_ch, b, 3, 1, root, g2);
    n.e0b = nn::conv(st, "enc.l0b", b, b, 3, 1, root, g2);
    n.e1a = nn::conv(st, "enc.l1a", b, 2 * b, 3, 2, root, g2);
    n.e1b = nn::conv(st, "enc.l1b", 2 * b, 2 * b, 3, 1, root, g2);
    n.e2a = nn::conv(st, "enc.l2a", 2 * b, 3 * b, 3, 2, root, g2);
    n.e2b = nn::conv(st, "enc.l2b", 3 * b, 3 * b, 3, 1, root, g2);
    n.t1 = nn::dense(st, "temb.fc1", n.cfg.emb_dim, n.cfg.emb_dim, root);
    n.t2 = nn::dense(st, "temb.fc2", n.cfg.emb_dim, n.cfg.emb_dim, root);
    n.temb0 = nn::dense(st, "temb.l0", n.cfg.emb_dim, b, root, 0.5f);
    n.temb1 = nn::dense(st, "temb.l1", n.cfg.emb_dim, 2 * b, root, 0.5f);
    n.temb2 = nn::dense(st, "temb.l2", n.cfg.emb_dim, 3 * b, root, 0.5f);
}

inline void bind(DenoiserNet& n, uint64_t seed) {
    Rng root = Rng(seed).split("denoiser");
    TrainState& st = n.state;
    const int b = n.cfg.base;
    bind_encoder(n, root, 3 * n.cfg.channels);
    n.d1a = nn::conv(st, "dec.l1a", 5 * b, 2 * b, 1, 1, root, std::sqrt(2.f));
    n.d1b = nn::conv(st, "dec.l1b", 2 * b, 2 * b, 3, 1, root, std::sqrt(2.f));
    n.d0a = nn::conv(st, "dec.l0a", 3 * b, b, 1, 1, root, std::sqrt(2.f));
    n.d0b = nn::conv(st, "dec.l0b", b, b, 3, 1, root, std::sqrt(2.f));
    n.out = nn::conv(st, "dec.out", b, n.cfg.channels, 3, 1, root, 1.f, 0.2f);
    n.tembd1 = nn::dense(st, "temb.d1", n.cfg.emb_dim, 2 * b, root, 0.5f);
    n.tembd0 = nn::dense(st, "temb.d0", n.cfg.emb_dim, b, root, 0.5f);
}

inline Tensor sin_embedding(const std::vector<int>& steps, int dim) {
    const int half = dim / 2;
    std::vector<float> e(steps.size() * static_cast<size_t>(dim));
    for (size_t b = 0; b < steps.size(); ++b)
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
            e[b * dim + 2 * i] = static_cast<float>(std::sin(steps[b] * freq));
            e[b * dim + 2 * i + 1] = static_cast<float>(std::cos(steps[b] * freq));
        }
    return Tensor::from({static_cast<int>(steps.size()), dim}, std::move(e));
}

}  // namespace detail_net

inline DenoiserNet init_denoiser(const DenoiserConfig& cfg, uint64_t seed) {
    DenoiserNet n;
    n.cfg = cfg;
    detail_net::bind(n, seed);
    return n;
}

inline Manifest denoiser_meta(const DenoiserConfig& c) {
    return {{"kind", "denoiser"},
            {"channels", std::to_string(c.channels)},
            {"base", std::to_string(c.base)},
            {"emb_dim", std::to_string(c.emb_dim)}};
}

inline void save_denoiser(const std::filesystem::path& dir, const DenoiserNet& n,
                          const Manifest& extra = {}) {
    Manifest m = denoiser_meta(n.cfg);
    for (const auto& kv : extra) m.push_back(kv);
    save_checkpoint(dir, n.state, m);
}

// Deep copy with fresh optimizer moments (distillation starts from the
// teacher's weights).
inline DenoiserNet clone_denoiser(const DenoiserNet& src) {
    DenoiserNet n;
    n.cfg = src.cfg;
    for (const auto& p : src.state.params) n.state.add(p.name, p.value.detach());
    detail_net::bind(n, 0);
    return n;
}

inline DenoiserNet load_denoiser(const std::filesystem::path& dir) {
    const Manifest m = load_manifest(dir / "manifest.txt");
    if (manifest_get_or(m, "kind", "") != "denoiser")
        throw IoError("checkpoint at " + dir.string() + " is not a denoiser");
    DenoiserNet n;
    n.cfg.channels = std::stoi(manifest_get(m, "channels"));
    n.cfg.base = std::stoi(manifest_get(m, "base"));
    n.cfg.emb_dim = std::stoi(manifest_get(m, "emb_dim"));
    n.state = load_checkpoint(dir);
    detail_net::bind(n, 0);
    return n;
}

// Batched core. x_norm lives in [-1,1]; lq01 / prev01 in [0,1] are mapped to
// the symmetric range before concatenation.
inline Tensor denoiser_forward(const DenoiserNet& n, const Tensor& x_norm,
                               const std::vector<int>& steps, const Tensor& lq01,
                               const Tensor& prev01) {
    if (x_norm.ndim() != 4 || x_norm.shape() != lq01.shape() || x_norm.shape() != prev01.shape())
        throw ShapeError("denoiser expects three matching [B,C,H,W] stacks");
    const int B = x_norm.shape()[0], H = x_norm.shape()[2], W = x_norm.shape()[3];
    if (static_cast<int>(steps.size()) != B) throw ShapeError("one timestep per batch element");
    if (H % 4 || W % 4) throw ShapeError("spatial extents must be divisible by 4");

    Tensor emb = n.t2(relu(n.t1(detail_net::sin_embedding(steps, n.cfg.emb_dim))));
    auto lvl = [&](const nn::Dense& proj, int ch) { return reshape(proj(emb), {B, ch, 1, 1}); };
    const int b = n.cfg.base;

    Tensor xin = concat({x_norm, lq01 * 2.f - 1.f, prev01 * 2.f - 1.f}, 1);
    Tensor e0 = relu(n.e0a(xin) + lvl(n.temb0, b));
    e0 = relu(n.e0b(e0));
    Tensor e1 = relu(n.e1a(e0) + lvl(n.temb1, 2 * b));
    e1 = relu(n.e1b(e1));
    Tensor e2 = relu(n.e2a(e1) + lvl(n.temb2, 3 * b));
    e2 = relu(n.e2b(e2));
    Tensor d1 = relu(n.d1a(concat({upsample_bilinear(e2, H / 2, W / 2), e1}, 1)) + lvl(n.tembd1, 2 * b));
    d1 = relu(n.d1b(d1));
    Tensor d0 = relu(n.d0a(concat({upsample_bilinear(d1, H, W), e0}, 1)) + lvl(n.tembd0, b));
    d0 = relu(n.d0b(d0));
    return n.out(d0);
}

// Per-frame conditioning inputs in [0,1] pixel space.
struct ConditionPack {
    Tensor lq_frame;     // [C,H,W]
    Tensor warped_prev;  // [C,H,W]; all-zeros on the first frame
    bool first_frame = false;
};

inline ConditionPack make_condition(const Tensor& lq, const Tensor& warped_prev) {
    ConditionPack c;
    c.lq_frame = lq;
    if (warped_prev.defined()) {
        c.warped_prev = warped_prev;
    } else {
        c.first_frame = true;
        c.warped_prev = Tensor::zeros(lq.shape());
    }
    return c;
}

// eps_hat = net(concat(x_s, lq, warped_prev), embed(s)) for one sample.
inline Tensor predict_eps(const DenoiserNet& n, const Tensor& x_s, int s,
                          const ConditionPack& cond) {
    if (x_s.ndim() != 3 || x_s.shape() != cond.lq_frame.shape() ||
        x_s.shape() != cond.warped_prev.shape())
        throw ShapeError("predict_eps expects matching [C,H,W] tensors");
    const Shape sh = x_s.shape();
    Tensor y = denoiser_forward(n, reshape(x_s, {1, sh[0], sh[1], sh[2]}), {s},
                                reshape(cond.lq_frame, {1, sh[0], sh[1], sh[2]}),
                                reshape(cond.warped_prev, {1, sh[0], sh[1], sh[2]}));
    return reshape(y, sh);
}

// ---------------------------------------------------------------------------
// samplers
// ---------------------------------------------------------------------------

using EpsFn = std::function<Tensor(const Tensor& x_norm, int s)>;

inline EpsFn eps_fn_for(const DenoiserNet& n, const ConditionPack& cond) {
    return [&n, cond](const Tensor& x, int s) { return predict_eps(n, x, s, cond); };
}

inline std::vector<int> uniform_timesteps(int n_steps, int num_train_steps) {
    if (n_steps < 1) throw ConfigError("sampler needs at least one step");
    std::vector<int> ts(n_steps);
    for (int k = 0; k < n_steps; ++k)
        ts[k] = n_steps == 1 ? 0
                             : static_cast<int>(std::lround(
                                   static_cast<double>(num_train_steps - 1) * (n_steps - 1 - k) /
                                   (n_steps - 1)));
    return ts;
}

constexpr float kSamplerClamp = 1.5f;

// Ancestral sampling over uniformly spaced timesteps; returns a [0,1] frame.
inline Tensor teacher_sample(const DenoiserNet& net, const ConditionPack& cond,
                             const NoiseSchedule& sched, int n_steps, uint64_t seed) {
    NoGradGuard ng;
    const auto ts = uniform_timesteps(n_steps, sched.num_steps);
    Rng rng = Rng(seed).split("teacher-sample");
    const Shape sh = cond.lq_frame.shape();
    Tensor x = randn(sh, rng);
    const EpsFn eps_fn = eps_fn_for(net, cond);
    for (size_t k = 0; k < ts.size(); ++k) {
        const int s = ts[k];
        Tensor eps_hat = eps_fn(x, s);
        Tensor x0 = clamp((x - eps_hat * sched.theta[s]) / sched.alpha[s], -kSamplerClamp,
                          kSamplerClamp);
        if (k + 1 == ts.size()) {
            x = x0;
            break;
        }
        const int sn = ts[k + 1];
        // posterior noise scale for the subsampled chain
        const double th_s = sched.theta[s], th_n = sched.theta[sn];
        const double ratio = sched.alpha_bar[s] / sched.alpha_bar[sn];
        const double sigma = th_n / th_s * std::sqrt(std::max(0.0, 1.0 - ratio));
        const double dir = std::sqrt(std::max(0.0, th_n * th_n - sigma * sigma));
        x = x0 * sched.alpha[sn] + eps_hat * static_cast<float>(dir) +
            randn(sh, rng) * static_cast<float>(sigma);
    }
    return clamp((x + 1.f) * 0.5f, 0.f, 1.f);
}

inline void check_student_steps(const std::vector<int>& t_student, const NoiseSchedule& sched) {
    if (t_student.empty() || t_student.back() != 0)
        throw ConfigError("student timesteps must end at 0");
    for (size_t i = 0; i < t_student.size(); ++i) {
        sched.check_step(t_student[i]);
        if (i && t_student[i] >= t_student[i - 1])
            throw ConfigError("student timesteps must be strictly decreasing");
    }
}

// Deterministic few-step update in the normalized space; keeps the graph, so
// the distillation trainer can differentiate through every step. At each s:
// x0 = (x - theta_s eps)/alpha_s, then x <- alpha_s' x0 + theta_s' eps.
inline Tensor student_rollout(const EpsFn& eps_fn, Tensor x, const std::vector<int>& t_student,
                              const NoiseSchedule& sched) {
    check_student_steps(t_student, sched);
    Tensor x0;
    for (size_t k = 0; k < t_student.size(); ++k) {
        const int s = t_student[k];
        Tensor eps_hat = eps_fn(x, s);
        x0 = (x - eps_hat * sched.theta[s]) / sched.alpha[s];
        if (k + 1 < t_student.size()) {
            const int sn = t_student[k + 1];
            x = x0 * sched.alpha[sn] + eps_hat * sched.theta[sn];
        }
    }
    return clamp(x0, -kSamplerClamp, kSamplerClamp);
}

// Inference entry point: starts from noise scaled to the first level and
// returns a [0,1] frame.
inline Tensor student_sample(const DenoiserNet& net, const ConditionPack& cond,
                             const NoiseSchedule& sched, const std::vector<int>& t_student,
                             uint64_t seed) {
    NoGradGuard ng;
    check_student_steps(t_student, sched);
    Rng rng = Rng(seed).split("student-sample");
    Tensor x = randn(cond.lq_frame.shape(), rng) * sched.theta[t_student.front()];
    Tensor x0 = student_rollout(eps_fn_for(net, cond), x, t_student, sched);
    return clamp((x0 + 1.f) * 0.5f, 0.f, 1.f);
}

// ---------------------------------------------------------------------------
// teacher training (epsilon-prediction MSE)
// ---------------------------------------------------------------------------

// Flow fields and teacher-forced warped previous frames are fixed once the
// flow module is frozen, so they are computed per clip up front.
struct PreparedSeq {
    synthgen::VideoSequence clean;
    synthgen::VideoSequence degraded;
    Tensor flow;         // [T,2,H,W]; entry 0 unused
    Tensor warped_clean; // [T,C,H,W]; warped previous clean frame, zeros at t=0
};

inline std::vector<PreparedSeq> prepare_sequences(const std::vector<synthgen::SequencePair>& data,
                                                  const drfa::DrfaParams& flow_params) {
    NoGradGuard ng;
    std::vector<PreparedSeq> out;
    out.reserve(data.size());
    for (const auto& pair : data) {
        PreparedSeq ps;
        ps.clean = pair.clean;
        ps.degraded = pair.degraded;
        const int T = pair.clean.T(), C = pair.clean.C(), H = pair.clean.H(), W = pair.clean.W();
        std::vector<float> flow(static_cast<size_t>(T) * 2 * H * W, 0.f);
        std::vector<float> warped(static_cast<size_t>(T) * C * H * W, 0.f);
        for (int t = 1; t < T; ++t) {
            drfa::FlowField f =
                drfa::estimate_flow(pair.degraded.frame(t), pair.degraded.frame(t - 1), flow_params);
            std::copy(f.flow.data(), f.flow.data() + 2 * H * W,
                      flow.begin() + static_cast<size_t>(t) * 2 * H * W);
            Tensor w = drfa::warp(pair.clean.frame(t - 1), f);
            std::copy(w.data(), w.data() + static_cast<size_t>(C) * H * W,
                      warped.begin() + static_cast<size_t>(t) * C * H * W);
        }
        ps.flow = Tensor::from({T, 2, H, W}, std::move(flow));
        ps.warped_clean = Tensor::from({T, C, H, W}, std::move(warped));
        out.push_back(std::move(ps));
    }
    return out;
}

inline Tensor slice_frame(const Tensor& stack, int t) {
    Shape sh(stack.shape().begin() + 1, stack.shape().end());
    const size_t block = static_cast<size_t>(numel(sh));
    return Tensor::from(sh, std::vector<float>(stack.data() + block * t,
                                               stack.data() + block * (t + 1)));
}

struct TeacherTrainConfig {
    int steps = 3000;
    int batch = 8;
    float lr = 2e-4f;
    uint64_t seed = 2;
};

inline std::vector<float> train_teacher(DenoiserNet& net, const std::vector<PreparedSeq>& data,
                                        const NoiseSchedule& sched, const TeacherTrainConfig& cfg) {
    if (data.empty()) throw ConfigError("empty teacher training set");
    Rng order = Rng(cfg.seed).split("teacher-order");
    Rng noise = Rng(cfg.seed).split("teacher-noise");
    Rng tstep = Rng(cfg.seed).split("teacher-step");
    std::vector<float> curve;
    curve.reserve(cfg.steps);
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<Tensor> xs, lqs, prevs, epss;
        std::vector<int> ss;
        for (int k = 0; k < cfg.batch; ++k) {
            const auto& seq = data[order.below(data.size())];
            const int t = static_cast<int>(order.below(static_cast<uint64_t>(seq.clean.T())));
            const int s = static_cast<int>(tstep.below(static_cast<uint64_t>(sched.num_steps)));
            Tensor clean = seq.clean.frame(t) * 2.f - 1.f;
            Tensor eps = randn(clean.shape(), noise);
            xs.push_back(forward_diffuse(clean, s, eps, sched));
            epss.push_back(eps);
            lqs.push_back(seq.degraded.frame(t));
            prevs.push_back(slice_frame(seq.warped_clean, t));
            ss.push_back(s);
        }
        Tensor eps_hat = denoiser_forward(net, stack0(xs), ss, stack0(lqs), stack0(prevs));
        Tensor loss = mean(square(eps_hat - stack0(epss)));
        backward(loss);
        adam_step(net.state, cfg.lr);
        curve.push_back(loss.item());
    }
    return curve;
}

// ---------------------------------------------------------------------------
// frame-recurrent restoration
// ---------------------------------------------------------------------------

enum class RestoreMode { teacher, student };

struct SamplerConfig {
    int teacher_steps = 48;
    std::vector<int> t_student = {750, 500, 250, 0};
};

struct RestoreResult {
    synthgen::VideoSequence restored;
    int denoiser_calls_per_frame = 0;
    double ms_per_frame = 0.0;
};

// Frame 1 is restored with zero warped_prev; frame t >= 2 conditions on the
// previous output warped by the flow aligning it to the current frame.
inline RestoreResult restore_sequence(const DenoiserNet& net, const drfa::DrfaParams& flow_params,
                                      const synthgen::VideoSequence& lq, RestoreMode mode,
                                      const SamplerConfig& scfg, const NoiseSchedule& sched,
                                      uint64_t seed) {
    if (!lq.frames.defined() || lq.T() < 1) throw ConfigError("empty input sequence");
    NoGradGuard ng;
    const int T = lq.T(), C = lq.C(), H = lq.H(), W = lq.W();
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<float> out(static_cast<size_t>(T) * C * H * W);
    Tensor prev_restored;
    Rng root(seed);
    for (int t = 0; t < T; ++t) {
        ConditionPack cond;
        if (t == 0) {
            cond = make_condition(lq.frame(0), Tensor());
        } else {
            drfa::FlowField f = drfa::estimate_flow(lq.frame(t), lq.frame(t - 1), flow_params);
            cond = make_condition(lq.frame(t), drfa::warp(prev_restored, f));
        }
        const uint64_t frame_seed = root.split(static_cast<uint64_t>(t)).next_u64();
        Tensor frame = mode == RestoreMode::teacher
                           ? teacher_sample(net, cond, sched, scfg.teacher_steps, frame_seed)
                           : student_sample(net, cond, sched, scfg.t_student, frame_seed);
        std::copy(frame.data(), frame.data() + frame.numel(),
                  out.begin() + static_cast<size_t>(t) * C * H * W);
        prev_restored = frame;
    }
    const auto t1 = std::chrono::steady_clock::now();
    RestoreResult res;
    res.restored.frames = Tensor::from({T, C, H, W}, std::move(out));
    res.restored.seed = lq.seed;
    res.restored.motion = lq.motion;
    res.denoiser_calls_per_frame =
        mode == RestoreMode::teacher ? scfg.teacher_steps : static_cast<int>(scfg.t_student.size());
    res.ms_per_frame = std::chrono::duration<double, std::milli>(t1 - t0).count() / T;
    return res;
}

}  // namespace d2vr::diffusion
