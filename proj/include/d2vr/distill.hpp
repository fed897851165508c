// SPDX-License-Identifier: Apache-2.0
//
// Few-step adversarial distillation. The student (initialized from the
// teacher) rolls out its deterministic few-step sampler with temporal
// conditioning; its objective combines a score-distillation term against the
// frozen teacher, an adversarial term judged at the student's own timestep
// set, and a temporal perceptual-difference term. Generator and discriminator
// alternate with Adam at a shared learning rate.
#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "d2vr/diffusion.hpp"
#include "d2vr/drfa.hpp"
#include "d2vr/errors.hpp"
#include "d2vr/nn.hpp"
#include "d2vr/synthgen.hpp"
#include "d2vr/tensor.hpp"

namespace d2vr::distill {

struct DistillConfig {
    float lambda1 = 0.05f;  // adversarial generator weight
    float lambda2 = 0.1f;   // temporal perceptual weight
    std::vector<int> t_student = {750, 500, 250, 0};
    int total_steps = 2000;  // desk default; the paper preset raises this
    float lr = 2e-5f;
    int batch = 4;     // frames per step; batch / clip_len clips are rolled out
    int clip_len = 4;  // frames per training clip
    int sds_lo = 20, sds_hi = 980;
    std::string sds_weight = "uniform";
    uint64_t seed = 3;

    void validate() const {
        if (lambda1 < 0.f || lambda2 < 0.f) throw ConfigError("loss weights must be nonnegative");
        if (clip_len < 2) throw ConfigError("clips need at least two frames");
        if (batch < clip_len || batch % clip_len != 0)
            throw ConfigError("batch must be a positive multiple of clip_len");
        if (sds_lo < 0 || sds_hi <= sds_lo) throw ConfigError("bad SDS timestep range");
        if (sds_weight != "uniform") throw ConfigError("unknown sds_weight_fn '" + sds_weight + "'");
        if (total_steps < 1) throw ConfigError("total_steps must be positive");
    }
};

// ---------------------------------------------------------------------------
// fixed perceptual feature extractor (phi)
// ---------------------------------------------------------------------------

using FeatureFn = std::function<std::vector<Tensor>(const Tensor& frame01)>;

// Seeded 3-level random conv pyramid with channel-normalized outputs; frozen
// for the whole project so loss and metric values stay comparable.
struct PerceptualNet {
    TrainState state;
    nn::Conv c1, c2, c3;

    static PerceptualNet fixed(int channels, uint64_t seed = 0xD2F1) {
        PerceptualNet p;
        Rng root = Rng(seed).split("perceptual");
        p.c1 = nn::conv(p.state, "phi.c1", channels, 12, 3, 2, root, std::sqrt(2.f));
        p.c2 = nn::conv(p.state, "phi.c2", 12, 24, 3, 2, root, std::sqrt(2.f));
        p.c3 = nn::conv(p.state, "phi.c3", 24, 32, 3, 2, root, std::sqrt(2.f));
        p.state.set_requires_grad(false);
        return p;
    }

    // L2-normalizes the channel vector at every spatial position.
    static Tensor channel_norm(const Tensor& f) {
        Tensor sumsq = reduce(ReduceOp::sum, square(f), 1);
        const Shape& s = f.shape();
        Tensor norm = exp(log(sumsq + 1e-8f) * 0.5f);  // sqrt via exp/log
        return f / reshape(norm, {s[0], 1, s[2], s[3]});
    }

    std::vector<Tensor> features(const Tensor& frame01) const {
        const bool single = frame01.ndim() == 3;
        Tensor x = single ? reshape(frame01, {1, frame01.shape()[0], frame01.shape()[1],
                                              frame01.shape()[2]})
                          : frame01;
        x = x * 2.f - 1.f;
        Tensor f1 = relu(c1(x));
        Tensor f2 = relu(c2(f1));
        Tensor f3 = relu(c3(f2));
        return {channel_norm(f1), channel_norm(f2), channel_norm(f3)};
    }

    FeatureFn fn() const {
        return [this](const Tensor& frame) { return features(frame); };
    }
};

// ---------------------------------------------------------------------------
// loss terms
// ---------------------------------------------------------------------------

// Score-distillation surrogate. Value equals mean((eps_teacher - eps)^2); its
// gradient with respect to x0_hat is proportional to (eps_teacher - eps)
// carried through x_s = alpha_s x0_hat + theta_s eps, with the teacher held
// constant. x0_hat is a normalized-space [C,H,W] sample on the student graph.
inline Tensor sds_distill_loss_fn(const Tensor& x0_hat, const diffusion::EpsFn& teacher_eps,
                                  const diffusion::NoiseSchedule& sched, Rng& rng, int lo = 20,
                                  int hi = 980) {
    const int s = lo + static_cast<int>(rng.below(static_cast<uint64_t>(hi - lo + 1)));
    Rng noise(rng.next_u64());
    Tensor eps = randn(x0_hat.shape(), noise);
    Tensor x_s = x0_hat * sched.alpha[s] + eps * sched.theta[s];

    Tensor eps_teacher;
    {
        NoGradGuard ng;
        eps_teacher = teacher_eps(x_s.detach(), s);
    }
    // constant anchor c = x_s - (eps_teacher - eps); pulling x_s toward c has
    // exactly the SDS gradient and the stated squared-error value
    Tensor anchor;
    {
        NoGradGuard ng;
        anchor = x_s.detach() - (eps_teacher - eps);
    }
    return mean(square(x_s - anchor));
}

inline Tensor sds_distill_loss(const Tensor& x0_hat, const diffusion::DenoiserNet& teacher,
                               const diffusion::ConditionPack& cond,
                               const diffusion::NoiseSchedule& sched, Rng& rng, int lo = 20,
                               int hi = 980) {
    return sds_distill_loss_fn(
        x0_hat,
        [&teacher, &cond](const Tensor& x, int s) {
            return diffusion::predict_eps(teacher, x, s, cond);
        },
        sched, rng, lo, hi);
}

// E[D(x_hat_s)] with the discriminator's parameters excluded from the graph.
template <class DiscFwd>
inline Tensor gen_adv_loss_with(const DiscFwd& disc_fwd, const Tensor& x_hat_s,
                                const std::vector<int>& steps) {
    return mean(disc_fwd(x_hat_s, steps));
}

// Eq-literal discriminator objective: mean[(1 - D(fake)) + D(real diffused)].
// Minimizing drives D(fake) -> 1 and D(real) -> 0 (D scores "fakeness").
template <class DiscFwd>
inline Tensor disc_loss_with(const DiscFwd& disc_fwd, const Tensor& x_hat_s_detached,
                             const Tensor& x0_norm, const std::vector<int>& steps,
                             const Tensor& eps, const diffusion::NoiseSchedule& sched) {
    if (x_hat_s_detached.shape() != x0_norm.shape() || eps.shape() != x0_norm.shape())
        throw ShapeError("disc_loss expects matching fake/real/noise stacks");
    std::vector<Tensor> reals;
    for (int b = 0; b < x0_norm.shape()[0]; ++b)
        reals.push_back(diffusion::forward_diffuse(select0(x0_norm, b), steps[b],
                                                   select0(eps, b), sched));
    Tensor real_s = stack0(reals);
    Tensor fake_term = 1.f - disc_fwd(x_hat_s_detached, steps);
    Tensor real_term = disc_fwd(real_s, steps);
    return mean(fake_term + real_term);
}

// Matches the magnitude of perceptual change between consecutive generated
// frames to the ground-truth change, summed over the T-1 valid pairs.
inline Tensor t_lpips_loss(const std::vector<Tensor>& gen_frames,
                           const std::vector<Tensor>& gt_frames, const FeatureFn& phi) {
    if (gen_frames.size() < 2) throw ConfigError("temporal loss needs at least two frames");
    if (gen_frames.size() != gt_frames.size())
        throw ShapeError("generated and reference sequences differ in length");
    Tensor total;
    std::vector<Tensor> prev_gen = phi(gen_frames[0]), prev_gt = phi(gt_frames[0]);
    for (size_t t = 1; t < gen_frames.size(); ++t) {
        std::vector<Tensor> cur_gen = phi(gen_frames[t]), cur_gt = phi(gt_frames[t]);
        Tensor frame_term;
        for (size_t l = 0; l < cur_gen.size(); ++l) {
            Tensor d = (cur_gen[l] - prev_gen[l]) - (cur_gt[l] - prev_gt[l]);
            Tensor m = mean(square(d)) / static_cast<float>(cur_gen.size());
            frame_term = l == 0 ? m : frame_term + m;
        }
        total = t == 1 ? frame_term : total + frame_term;
        prev_gen = std::move(cur_gen);
        prev_gt = std::move(cur_gt);
    }
    return total;
}

// L = L_distill + lambda1 * L_adv_G + lambda2 * L_T-LPIPS
inline Tensor total_gen_loss(const Tensor& l_distill, const Tensor& l_adv_g,
                             const Tensor& l_tlpips, const DistillConfig& cfg) {
    return l_distill + l_adv_g * cfg.lambda1 + l_tlpips * cfg.lambda2;
}

// ---------------------------------------------------------------------------
// discriminator
// ---------------------------------------------------------------------------

struct Discriminator {
    diffusion::DenoiserConfig cfg;
    TrainState state;
    nn::Conv e0a, e0b, e1a, e1b, e2a, e2b;
    nn::Dense t1, t2, temb0, temb1, temb2;
    nn::Dense head;
};

namespace detail_net {
inline void bind_disc(Discriminator& d, uint64_t seed) {
    Rng root = Rng(seed).split("discriminator");
    diffusion::DenoiserNet shim;
    shim.cfg = d.cfg;
    shim.state = std::move(d.state);
    diffusion::detail_net::bind_encoder(shim, root, d.cfg.channels);
    d.state = std::move(shim.state);
    d.e0a = shim.e0a;
    d.e0b = shim.e0b;
    d.e1a = shim.e1a;
    d.e1b = shim.e1b;
    d.e2a = shim.e2a;
    d.e2b = shim.e2b;
    d.t1 = shim.t1;
    d.t2 = shim.t2;
    d.temb0 = shim.temb0;
    d.temb1 = shim.temb1;
    d.temb2 = shim.temb2;
    d.head = nn::dense(d.state, "head", 3 * d.cfg.base, 1, root, 0.5f);
}
}  // namespace detail_net

// Fresh copy of the denoiser encoder, initialized from the trained teacher.
// The first convolution keeps only the x_s slice of the teacher's input
// channels; the scoring head is fresh.
inline Discriminator make_discriminator(const diffusion::DenoiserNet& teacher, uint64_t seed) {
    Discriminator d;
    d.cfg = teacher.cfg;
    detail_net::bind_disc(d, seed);
    const int C = d.cfg.channels;
    for (auto& p : d.state.params) {
        if (p.name == "head.w" || p.name == "head.b") continue;
        if (!teacher.state.has(p.name)) continue;
        Tensor src = teacher.state.find(p.name);
        if (p.name == "enc.l0a.w") {
            // teacher reads concat(x_s, lq, warped_prev); keep the x_s slice
            const Shape& ws = src.shape();
            const int O = ws[0], k = ws[2];
            std::vector<float> sliced(static_cast<size_t>(O) * C * k * k);
            for (int o = 0; o < O; ++o)
                for (int c = 0; c < C; ++c)
                    std::copy(src.data() + ((static_cast<size_t>(o) * ws[1] + c) * k * k),
                              src.data() + ((static_cast<size_t>(o) * ws[1] + c) * k * k) + k * k,
                              sliced.begin() + ((static_cast<size_t>(o) * C + c) * k * k));
            std::copy(sliced.begin(), sliced.end(), p.value.data());
        } else if (src.shape() == p.value.shape()) {
            std::copy(src.data(), src.data() + src.numel(), p.value.data());
        }
    }
    return d;
}

// Timestep-conditioned fakeness score in (0,1), one scalar per batch element.
inline Tensor disc_forward(const Discriminator& d, const Tensor& x_norm,
                           const std::vector<int>& steps) {
    if (x_norm.ndim() != 4) throw ShapeError("discriminator expects [B,C,H,W]");
    const int B = x_norm.shape()[0];
    if (static_cast<int>(steps.size()) != B) throw ShapeError("one timestep per element");
    Tensor emb = d.t2(relu(d.t1(diffusion::detail_net::sin_embedding(steps, d.cfg.emb_dim))));
    auto lvl = [&](const nn::Dense& proj, int ch) { return reshape(proj(emb), {B, ch, 1, 1}); };
    const int b = d.cfg.base;
    Tensor e0 = relu(d.e0a(x_norm) + lvl(d.temb0, b));
    e0 = relu(d.e0b(e0));
    Tensor e1 = relu(d.e1a(e0) + lvl(d.temb1, 2 * b));
    e1 = relu(d.e1b(e1));
    Tensor e2 = relu(d.e2a(e1) + lvl(d.temb2, 3 * b));
    e2 = relu(d.e2b(e2));
    Tensor pooled = reduce(ReduceOp::mean, reduce(ReduceOp::mean, e2, 3), 2);  // [B,3b]
    return sigmoid(d.head(pooled));
}

inline Manifest disc_meta(const diffusion::DenoiserConfig& c) {
    return {{"kind", "discriminator"},
            {"channels", std::to_string(c.channels)},
            {"base", std::to_string(c.base)},
            {"emb_dim", std::to_string(c.emb_dim)}};
}

inline void save_discriminator(const std::filesystem::path& dir, const Discriminator& d) {
    save_checkpoint(dir, d.state, disc_meta(d.cfg));
}

inline Discriminator load_discriminator(const std::filesystem::path& dir) {
    const Manifest m = load_manifest(dir / "manifest.txt");
    if (manifest_get_or(m, "kind", "") != "discriminator")
        throw IoError("checkpoint at " + dir.string() + " is not a discriminator");
    Discriminator d;
    d.cfg.channels = std::stoi(manifest_get(m, "channels"));
    d.cfg.base = std::stoi(manifest_get(m, "base"));
    d.cfg.emb_dim = std::stoi(manifest_get(m, "emb_dim"));
    d.state = load_checkpoint(dir);
    detail_net::bind_disc(d, 0);
    return d;
}

// Concrete-discriminator wrappers around the generic loss shapes.
inline Tensor gen_adv_loss(const Discriminator& d, const Tensor& x_hat_s,
                           const std::vector<int>& steps) {
    return gen_adv_loss_with(
        [&](const Tensor& x, const std::vector<int>& s) { return disc_forward(d, x, s); }, x_hat_s,
        steps);
}

inline Tensor disc_loss(const Discriminator& d, const Tensor& x_hat_s_detached,
                        const Tensor& x0_norm, const std::vector<int>& steps, const Tensor& eps,
                        const diffusion::NoiseSchedule& sched) {
    return disc_loss_with(
        [&](const Tensor& x, const std::vector<int>& s) { return disc_forward(d, x, s); },
        x_hat_s_detached, x0_norm, steps, eps, sched);
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct LossRow {
    int step = 0;
    float l_distill = 0.f, l_adv_g = 0.f, l_tlpips = 0.f, l_total = 0.f, l_disc = 0.f;
};

inline std::string loss_csv_header() { return "step,l_distill,l_adv_g,l_tlpips,l_total,l_disc"; }

inline std::string loss_csv_row(const LossRow& r) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%d,%.6g,%.6g,%.6g,%.6g,%.6g", r.step, r.l_distill, r.l_adv_g,
                  r.l_tlpips, r.l_total, r.l_disc);
    return buf;
}

struct DistillOutput {
    diffusion::DenoiserNet student;
    Discriminator disc;
    std::vector<LossRow> log;
    std::vector<int> adv_timesteps;  // every timestep used by an adversarial branch
};

// Alternating generator/discriminator optimization over frame-recurrent
// student rollouts. The flow module and the teacher stay frozen; the warped
// previous output enters as a constant (no backprop through time).
inline DistillOutput distill_run(const diffusion::DenoiserNet& teacher,
                                 const std::vector<diffusion::PreparedSeq>& data,
                                 const diffusion::NoiseSchedule& sched, const DistillConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw ConfigError("empty distillation set");
    for (const auto& seq : data)
        if (seq.clean.T() < cfg.clip_len) throw ConfigError("sequences shorter than clip_len");
    diffusion::check_student_steps(cfg.t_student, sched);

    DistillOutput out;
    out.student = diffusion::clone_denoiser(teacher);
    out.disc = make_discriminator(teacher, cfg.seed + 1);
    const bool use_adv = cfg.lambda1 > 0.f;
    const bool use_tlpips = cfg.lambda2 > 0.f;
    PerceptualNet phi = PerceptualNet::fixed(teacher.cfg.channels);

    Rng order = Rng(cfg.seed).split("order");
    Rng noise = Rng(cfg.seed).split("noise");
    Rng sds_rng = Rng(cfg.seed).split("sds");
    Rng adv_rng = Rng(cfg.seed).split("adv");

    const int clips = cfg.batch / cfg.clip_len;
    for (int step = 0; step < cfg.total_steps; ++step) {
        LossRow row;
        row.step = step;

        std::vector<Tensor> x0_all;  // normalized student samples (graph)
        std::vector<Tensor> clean_all;
        std::vector<std::vector<Tensor>> clip_gen, clip_gt;
        Tensor l_distill;

        for (int c = 0; c < clips; ++c) {
            const auto& seq = data[order.below(data.size())];
            const int span = seq.clean.T() - cfg.clip_len;
            const int t0 = span > 0 ? static_cast<int>(order.below(static_cast<uint64_t>(span + 1)))
                                    : 0;
            Tensor prev01;  // detached previous output
            std::vector<Tensor> gen_frames, gt_frames;
            for (int k = 0; k < cfg.clip_len; ++k) {
                const int t = t0 + k;
                Tensor lq = seq.degraded.frame(t);
                diffusion::ConditionPack cond;
                if (k == 0) {
                    cond = diffusion::make_condition(lq, Tensor());
                } else {
                    drfa::FlowField f;
                    f.flow = diffusion::slice_frame(seq.flow, t);
                    cond = diffusion::make_condition(lq, drfa::warp(prev01, f));
                }
                Tensor x_init = randn(lq.shape(), noise) * sched.theta[cfg.t_student.front()];
                Tensor x0_hat = diffusion::student_rollout(
                    diffusion::eps_fn_for(out.student, cond), x_init, cfg.t_student, sched);
                Tensor frame01 = clamp((x0_hat + 1.f) * 0.5f, 0.f, 1.f);
                prev01 = frame01.detach();

                Tensor sds = sds_distill_loss(x0_hat, teacher, cond, sched, sds_rng, cfg.sds_lo,
                                              cfg.sds_hi) /
                             static_cast<float>(cfg.batch);
                l_distill = l_distill.defined() ? l_distill + sds : sds;

                x0_all.push_back(std::move(x0_hat));
                clean_all.push_back(seq.clean.frame(t) * 2.f - 1.f);
                gen_frames.push_back(std::move(frame01));
                gt_frames.push_back(seq.clean.frame(t));
            }
            clip_gen.push_back(std::move(gen_frames));
            clip_gt.push_back(std::move(gt_frames));
        }
        Tensor l_adv = Tensor::scalar(0.f);
        std::vector<int> adv_steps;
        Tensor x_hat_s;  // re-noised student samples, shared shape [B,C,H,W]
        if (use_adv) {
            std::vector<Tensor> renoised;
            for (auto& x0_hat : x0_all) {
                const int s = cfg.t_student[adv_rng.below(cfg.t_student.size())];
                adv_steps.push_back(s);
                Tensor eps = randn(x0_hat.shape(), noise);
                renoised.push_back(x0_hat * sched.alpha[s] + eps * sched.theta[s]);
            }
            x_hat_s = stack0(renoised);
            out.disc.state.set_requires_grad(false);
            l_adv = gen_adv_loss(out.disc, x_hat_s, adv_steps);
            out.disc.state.set_requires_grad(true);
            out.adv_timesteps.insert(out.adv_timesteps.end(), adv_steps.begin(), adv_steps.end());
        }

        Tensor l_tlpips = Tensor::scalar(0.f);
        if (use_tlpips) {
            for (size_t c = 0; c < clip_gen.size(); ++c) {
                Tensor term = t_lpips_loss(clip_gen[c], clip_gt[c], phi.fn());
                l_tlpips = c == 0 ? term : l_tlpips + term;
            }
            l_tlpips = l_tlpips / static_cast<float>(clip_gen.size());
        }

        Tensor total = total_gen_loss(l_distill, l_adv, l_tlpips, cfg);
        backward(total);
        adam_step(out.student.state, cfg.lr);

        row.l_adv_g = use_adv ? l_adv.item() : 0.f;
        row.l_tlpips = use_tlpips ? l_tlpips.item() : 0.f;
        row.l_distill = l_distill.item();
        row.l_total = total.item();

        if (use_adv) {
            std::vector<int> d_steps;
            std::vector<Tensor> fakes;
            for (auto& x0_hat : x0_all) {
                const int s = cfg.t_student[adv_rng.below(cfg.t_student.size())];
                d_steps.push_back(s);
                Tensor eps = randn(x0_hat.shape(), noise);
                Tensor x0_const = x0_hat.detach();
                fakes.push_back(x0_const * sched.alpha[s] + eps * sched.theta[s]);
            }
            out.adv_timesteps.insert(out.adv_timesteps.end(), d_steps.begin(), d_steps.end());
            Tensor eps_real = randn(stack0(clean_all).shape(), noise);
            Tensor l_disc = disc_loss(out.disc, stack0(fakes), stack0(clean_all), d_steps,
                                      eps_real, sched);
            backward(l_disc);
            adam_step(out.disc.state, cfg.lr);
            row.l_disc = l_disc.item();
        }
        out.log.push_back(row);
    }
    return out;
}

}  // namespace d2vr::distill
