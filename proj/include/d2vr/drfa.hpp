// SPDX-License-Identifier: Apache-2.0
//
// Degradation-robust flow alignment: a compact RAFT-style estimator (feature
// pyramid at 1/4 resolution, all-pairs correlation, recurrent refinement)
// whose global motion aggregation is gated by a learned confidence map.
// Attention logits toward key j carry an additive bias log(C_j + eps), so
// low-confidence positions are softly excluded from the motion consensus.
#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "d2vr/errors.hpp"
#include "d2vr/image.hpp"
#include "d2vr/nn.hpp"
#include "d2vr/optim.hpp"
#include "d2vr/serialize.hpp"
#include "d2vr/synthgen.hpp"
#include "d2vr/tensor.hpp"

namespace d2vr::drfa {

// Displacement map: target pixel p matches source location p + flow(p).
struct FlowField {
    Tensor flow;        // [2,H,W], planes (dx, dy)
    Tensor confidence;  // [H,W] in (0,1) when available
};

struct DrfaConfig {
    int channels = 1;
    int feat_dim = 32;     // correlation feature width d
    int context_dim = 24;  // context features fed to the update block
    int motion_dim = 24;   // motion feature width (also the aggregated width)
    int hidden_dim = 24;   // recurrent state width
    int iterations = 4;    // refinement steps K
    int pos_radius = 7;    // learned relative-position table radius R
    int lookup_radius = 3; // correlation lookup window radius
    float eps = 1e-6f;     // confidence bias epsilon
    bool use_confidence = true;
};

// ---------------------------------------------------------------------------
// attention building blocks (public contract of the aggregation stage)
// ---------------------------------------------------------------------------

// Learned scalar table over clamped relative offsets at feature resolution.
struct PosTable {
    Tensor table;  // [(2R+1)*(2R+1)]
    int radius = 7;

    // Materializes the pairwise bias for an h x w grid as [n,n].
    Tensor bias(int h, int w) const {
        const int n = h * w;
        const int span = 2 * radius + 1;
        std::vector<int> idx(static_cast<size_t>(n) * n);
        for (int i = 0; i < n; ++i) {
            const int yi = i / w, xi = i % w;
            for (int j = 0; j < n; ++j) {
                const int dy = std::clamp(j / w - yi, -radius, radius);
                const int dx = std::clamp(j % w - xi, -radius, radius);
                idx[static_cast<size_t>(i) * n + j] = (dy + radius) * span + (dx + radius);
            }
        }
        std::vector<float> out(idx.size());
        for (size_t k = 0; k < idx.size(); ++k) out[k] = table.data()[idx[k]];
        auto ti = table.impl();
        return detail::make_op({n, n}, std::move(out), {table}, [ti, idx](TensorImpl& self) {
            if (!detail::wants_grad(*ti)) return;
            auto& g = detail::ensure_grad(*ti);
            for (size_t k = 0; k < idx.size(); ++k) g[idx[k]] += self.grad[k];
        });
    }
};

// S_ij = <Q_i, K_j>/sqrt(d) + Pos(i,j) + log(C_j + eps). The confidence bias
// attaches to the key side: column j of every row.
inline Tensor attention_scores(const Tensor& Q, const Tensor& K, const PosTable& pos, int h, int w,
                               const Tensor& confidence, float eps) {
    if (Q.ndim() != 2 || K.ndim() != 2 || Q.shape() != K.shape())
        throw ShapeError("attention_scores expects matching [n,d] queries and keys");
    const int n = Q.shape()[0], d = Q.shape()[1];
    if (n != h * w) throw ShapeError("attention grid does not match n");
    if (eps <= 0.f) throw ConfigError("attention eps must be positive");
    Tensor scores = matmul(Q, transpose2d(K)) * (1.f / std::sqrt(static_cast<float>(d)));
    scores = scores + pos.bias(h, w);
    if (confidence.defined()) {
        if (confidence.numel() != n) throw ShapeError("confidence must have one entry per key");
        scores = scores + reshape(log(confidence + eps), {1, n});
    }
    for (int i = 0; i < scores.numel(); ++i)
        if (!std::isfinite(scores.data()[i])) throw NumericsError("non-finite attention score");
    return scores;
}

// P = softmax_rows(scores) . V
inline Tensor aggregate(const Tensor& scores, const Tensor& V) {
    return matmul(softmax(scores, 1), V);
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

struct DrfaParams {
    DrfaConfig cfg;
    TrainState state;

    nn::Conv fe1, fe2, fe3;        // feature encoder (shared across the pair)
    nn::Conv ce1, ce2, ce3;        // context encoder (reference frame)
    nn::Conv ctx_hidden, ctx_inp;  // recurrent state init and context input
    nn::Conv phi1, phi2;           // confidence head (only with use_confidence)
    nn::Conv q_proj, k_proj, v_proj;
    PosTable pos;
    nn::Conv me1, me2;             // motion encoder
    nn::Conv gru_z, gru_r, gru_h;  // conv GRU
    nn::Conv fh1, fh2;             // flow delta head
};

namespace detail_net {

inline void bind(DrfaParams& p, uint64_t seed) {
    const auto& c = p.cfg;
    TrainState& st = p.state;
    Rng root = Rng(seed).split("drfa");
    const float g2 = std::sqrt(2.f);
    p.fe1 = nn::conv(st, "fenc.c1", c.channels, 16, 3, 2, root, g2);
    p.fe2 = nn::conv(st, "fenc.c2", 16, c.feat_dim, 3, 2, root, g2);
    p.fe3 = nn::conv(st, "fenc.c3", c.feat_dim, c.feat_dim, 3, 1, root, 1.f);
    p.ce1 = nn::conv(st, "cenc.c1", c.channels, 16, 3, 2, root, g2);
    p.ce2 = nn::conv(st, "cenc.c2", 16, c.feat_dim, 3, 2, root, g2);
    p.ce3 = nn::conv(st, "cenc.c3", c.feat_dim, c.feat_dim, 3, 1, root, 1.f);
    p.ctx_hidden = nn::conv(st, "ctx.hidden", c.feat_dim, c.hidden_dim, 1, 1, root, 1.f);
    p.ctx_inp = nn::conv(st, "ctx.inp", c.feat_dim, c.context_dim, 1, 1, root, g2);
    if (c.use_confidence) {
        p.phi1 = nn::conv(st, "conf.c1", c.feat_dim, c.feat_dim / 2, 3, 1, root, g2);
        p.phi2 = nn::conv(st, "conf.c2", c.feat_dim / 2, 1, 3, 1, root, 1.f);
    }
    p.q_proj = nn::conv(st, "attn.q", c.feat_dim, c.feat_dim, 1, 1, root, 1.f);
    p.k_proj = nn::conv(st, "attn.k", c.feat_dim, c.feat_dim, 1, 1, root, 1.f);
    p.v_proj = nn::conv(st, "attn.v", c.motion_dim, c.motion_dim, 1, 1, root, 1.f);
    const int span = 2 * c.pos_radius + 1;
    p.pos.radius = c.pos_radius;
    p.pos.table = nn::param(st, "attn.pos", {span * span}, root, 0.f);
    const int look = (2 * c.lookup_radius + 1) * (2 * c.lookup_radius + 1);
    p.me1 = nn::conv(st, "menc.c1", look + 2, 32, 1, 1, root, g2);
    p.me2 = nn::conv(st, "menc.c2", 32, c.motion_dim, 3, 1, root, g2);
    const int xin = c.context_dim + 2 * c.motion_dim;
    p.gru_z = nn::conv(st, "gru.z", c.hidden_dim + xin, c.hidden_dim, 1, 1, root, 1.f);
    p.gru_r = nn::conv(st, "gru.r", c.hidden_dim + xin, c.hidden_dim, 1, 1, root, 1.f);
    p.gru_h = nn::conv(st, "gru.h", c.hidden_dim + xin, c.hidden_dim, 3, 1, root, 1.f);
    p.fh1 = nn::conv(st, "flow.c1", c.hidden_dim, 24, 3, 1, root, g2);
    p.fh2 = nn::conv(st, "flow.c2", 24, 2, 3, 1, root, 1.f, 0.1f);
}

}  // namespace detail_net

inline DrfaParams init_drfa(const DrfaConfig& cfg, uint64_t seed) {
    DrfaParams p;
    p.cfg = cfg;
    detail_net::bind(p, seed);
    return p;
}

inline Manifest drfa_meta(const DrfaConfig& c) {
    char eps[32];
    std::snprintf(eps, sizeof(eps), "%g", c.eps);
    return {{"kind", "drfa"},
            {"channels", std::to_string(c.channels)},
            {"feat_dim", std::to_string(c.feat_dim)},
            {"context_dim", std::to_string(c.context_dim)},
            {"motion_dim", std::to_string(c.motion_dim)},
            {"hidden_dim", std::to_string(c.hidden_dim)},
            {"iterations", std::to_string(c.iterations)},
            {"pos_radius", std::to_string(c.pos_radius)},
            {"lookup_radius", std::to_string(c.lookup_radius)},
            {"eps", eps},
            {"use_confidence", c.use_confidence ? "1" : "0"}};
}

inline void save_drfa(const std::filesystem::path& dir, const DrfaParams& p,
                      const Manifest& extra = {}) {
    Manifest m = drfa_meta(p.cfg);
    for (const auto& kv : extra) m.push_back(kv);
    save_checkpoint(dir, p.state, m);
}

inline DrfaParams load_drfa(const std::filesystem::path& dir) {
    const Manifest m = load_manifest(dir / "manifest.txt");
    if (manifest_get_or(m, "kind", "") != "drfa")
        throw IoError("checkpoint at " + dir.string() + " is not a flow checkpoint");
    DrfaParams p;
    p.cfg.channels = std::stoi(manifest_get(m, "channels"));
    p.cfg.feat_dim = std::stoi(manifest_get(m, "feat_dim"));
    p.cfg.context_dim = std::stoi(manifest_get(m, "context_dim"));
    p.cfg.motion_dim = std::stoi(manifest_get(m, "motion_dim"));
    p.cfg.hidden_dim = std::stoi(manifest_get(m, "hidden_dim"));
    p.cfg.iterations = std::stoi(manifest_get(m, "iterations"));
    p.cfg.pos_radius = std::stoi(manifest_get(m, "pos_radius"));
    p.cfg.lookup_radius = std::stoi(manifest_get(m, "lookup_radius"));
    p.cfg.eps = std::stof(manifest_get(m, "eps"));
    p.cfg.use_confidence = manifest_get(m, "use_confidence") == "1";
    p.state = load_checkpoint(dir);
    detail_net::bind(p, 0);
    return p;
}

// C = sigmoid(Phi(f_ctx)); accepts [d,h,w] (returns [h,w]) or [B,d,h,w]
// (returns [B,1,h,w]).
inline Tensor confidence_map(const Tensor& f_ctx, const nn::Conv& phi1, const nn::Conv& phi2) {
    const bool single = f_ctx.ndim() == 3;
    Tensor x = single ? reshape(f_ctx, {1, f_ctx.shape()[0], f_ctx.shape()[1], f_ctx.shape()[2]})
                      : f_ctx;
    Tensor c = sigmoid(phi2(relu(phi1(x))));
    if (single) return reshape(c, {x.shape()[2], x.shape()[3]});
    return c;
}

inline Tensor confidence_map(const Tensor& f_ctx, const DrfaParams& p) {
    if (!p.cfg.use_confidence) throw ConfigError("confidence head disabled in this config");
    return confidence_map(f_ctx, p.phi1, p.phi2);
}

// ---------------------------------------------------------------------------
// correlation volume and lookup
// ---------------------------------------------------------------------------

namespace detail_net {

// Bilinear window lookup into the all-pairs correlation matrix. Coordinates
// come from the (detached) current flow; gradients propagate to the
// correlation entries only.
inline Tensor corr_lookup(const Tensor& corr, const std::vector<float>& flow, int h, int w,
                          int radius) {
    const int n = h * w;
    const int span = 2 * radius + 1;
    const int ch = span * span;
    std::vector<float> out(static_cast<size_t>(ch) * n);
    std::vector<int> gather_idx(static_cast<size_t>(ch) * n * 4);
    std::vector<float> gather_w(static_cast<size_t>(ch) * n * 4);
    const float* cdata = corr.data();
    for (int i = 0; i < n; ++i) {
        const int yi = i / w, xi = i % w;
        const float fx = flow[i];          // dx plane
        const float fy = flow[n + i];      // dy plane
        const float* row = cdata + static_cast<size_t>(i) * n;
        for (int oy = -radius; oy <= radius; ++oy)
            for (int ox = -radius; ox <= radius; ++ox) {
                // zero outside the valid grid; a clamped window would flood
                // border pixels with duplicated scores
                const float sx = xi + fx + ox;
                const float sy = yi + fy + oy;
                const int c = (oy + radius) * span + (ox + radius);
                const size_t o = static_cast<size_t>(c) * n + i;
                const size_t base = o * 4;
                const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
                const float ax = sx - x0, ay = sy - y0;
                float acc = 0.f;
                int slot = 0;
                for (int dy = 0; dy <= 1; ++dy)
                    for (int dx = 0; dx <= 1; ++dx) {
                        const int xx = x0 + dx, yy = y0 + dy;
                        const float wgt = (dx ? ax : 1 - ax) * (dy ? ay : 1 - ay);
                        if (xx >= 0 && xx < w && yy >= 0 && yy < h && wgt > 0.f) {
                            acc += row[yy * w + xx] * wgt;
                            gather_idx[base + slot] = i * n + yy * w + xx;
                            gather_w[base + slot] = wgt;
                        } else {
                            gather_idx[base + slot] = 0;
                            gather_w[base + slot] = 0.f;
                        }
                        ++slot;
                    }
                out[o] = acc;
            }
    }
    auto ci = corr.impl();
    return d2vr::detail::make_op(
        {ch, h, w}, std::move(out), {corr}, [ci, gather_idx, gather_w](TensorImpl& self) {
            if (!d2vr::detail::wants_grad(*ci)) return;
            auto& g = d2vr::detail::ensure_grad(*ci);
            for (size_t o = 0; o < self.grad.size(); ++o) {
                const float go = self.grad[o];
                const size_t base = o * 4;
                for (int k = 0; k < 4; ++k) g[gather_idx[base + k]] += go * gather_w[base + k];
            }
        });
}

// Unit-normalizes each position's channel vector, so the correlation volume
// holds bounded cosine scores.
inline Tensor channel_l2_normalize(const Tensor& x) {
    Tensor sumsq = reduce(ReduceOp::sum, square(x), 1);
    const Shape& s = x.shape();
    Tensor norm = exp(log(sumsq + 1e-8f) * 0.5f);
    return x / reshape(norm, {s[0], 1, s[2], s[3]});
}

inline Tensor encode_features(const DrfaParams& p, const Tensor& x) {
    Tensor h = relu(nn::instance_norm(p.fe1(x)));
    h = relu(nn::instance_norm(p.fe2(h)));
    return channel_l2_normalize(p.fe3(h));
}

inline Tensor encode_context(const DrfaParams& p, const Tensor& x) {
    Tensor h = relu(nn::instance_norm(p.ce1(x)));
    h = relu(nn::instance_norm(p.ce2(h)));
    return p.ce3(h);
}

}  // namespace detail_net

struct FlowForward {
    std::vector<Tensor> flows;  // one full-resolution [B,2,H,W] per iteration
    Tensor confidence;          // [B,1,h,w] at feature resolution (when enabled)
};

// Batched estimator core; frames are [B,C,H,W] in [0,1].
inline FlowForward flow_forward(const DrfaParams& p, const Tensor& frame_a, const Tensor& frame_b) {
    if (frame_a.ndim() != 4 || frame_a.shape() != frame_b.shape())
        throw ShapeError("flow_forward expects matching [B,C,H,W] frames");
    const auto& cfg = p.cfg;
    const int B = frame_a.shape()[0], H = frame_a.shape()[2], W = frame_a.shape()[3];
    const int h = H / 4, w = W / 4, n = h * w;
    if (h < 2 || w < 2) throw ShapeError("frames too small for 1/4-resolution features");

    Tensor fa = detail_net::encode_features(p, frame_a);
    Tensor fb = detail_net::encode_features(p, frame_b);
    Tensor ctx = detail_net::encode_context(p, frame_a);
    Tensor hidden = tanh(p.ctx_hidden(ctx));
    Tensor cin = relu(p.ctx_inp(ctx));

    Tensor conf;
    if (cfg.use_confidence) conf = confidence_map(ctx, p.phi1, p.phi2);

    // per-sample correlation volumes and attention scores
    const float inv_sqrt_d = 1.f / std::sqrt(static_cast<float>(cfg.feat_dim));
    Tensor pos_bias = p.pos.bias(h, w);
    Tensor q_all = p.q_proj(ctx), k_all = p.k_proj(ctx);
    std::vector<Tensor> corr(B), attn(B);
    for (int s = 0; s < B; ++s) {
        Tensor fa_s = transpose2d(reshape(select0(fa, s), {cfg.feat_dim, n}));  // [n,d]
        Tensor fb_s = reshape(select0(fb, s), {cfg.feat_dim, n});
        corr[s] = matmul(fa_s, fb_s);  // cosine scores in [-1, 1]

        Tensor q_s = transpose2d(reshape(select0(q_all, s), {cfg.feat_dim, n}));
        Tensor k_s = transpose2d(reshape(select0(k_all, s), {cfg.feat_dim, n}));
        Tensor scores = matmul(q_s, transpose2d(k_s)) * inv_sqrt_d;
        scores = scores + pos_bias;
        if (cfg.use_confidence) {
            Tensor c_s = reshape(select0(conf, s), {n});
            scores = scores + reshape(log(c_s + cfg.eps), {1, n});
        }
        attn[s] = softmax(scores, 1);
    }

    FlowForward out;
    out.confidence = conf;
    Tensor flow4 = Tensor::zeros({B, 2, h, w});
    for (int it = 0; it < cfg.iterations; ++it) {
        // correlation window features at the (detached) current flow
        std::vector<Tensor> feats(B);
        for (int s = 0; s < B; ++s) {
            std::vector<float> fl(static_cast<size_t>(2) * n);
            const float* fd = flow4.data() + static_cast<size_t>(s) * 2 * n;
            std::copy(fd, fd + 2 * n, fl.begin());
            feats[s] = detail_net::corr_lookup(corr[s], fl, h, w, cfg.lookup_radius);
        }
        Tensor corr_feat = stack0(feats);  // [B,ch,h,w]

        Tensor m = relu(p.me2(relu(p.me1(concat({corr_feat, flow4}, 1)))));

        // confidence-aware global aggregation of motion features
        Tensor v_all = p.v_proj(m);
        std::vector<Tensor> agg(B);
        for (int s = 0; s < B; ++s) {
            Tensor v_s = transpose2d(reshape(select0(v_all, s), {cfg.motion_dim, n}));  // [n,dv]
            agg[s] = reshape(transpose2d(matmul(attn[s], v_s)), {cfg.motion_dim, h, w});
        }
        Tensor pooled = stack0(agg);  // [B,dv,h,w]

        Tensor x = concat({cin, m, pooled}, 1);
        Tensor hx = concat({hidden, x}, 1);
        Tensor z = sigmoid(p.gru_z(hx));
        Tensor r = sigmoid(p.gru_r(hx));
        Tensor htil = tanh(p.gru_h(concat({r * hidden, x}, 1)));
        hidden = (1.f - z) * hidden + z * htil;

        Tensor delta = p.fh2(relu(p.fh1(hidden)));
        flow4 = flow4 + delta;
        out.flows.push_back(upsample_bilinear(flow4, H, W) * 4.f);
    }
    return out;
}

// Estimates the flow aligning frame_b onto frame_a: warp(frame_b, flow) ~ frame_a.
inline FlowField estimate_flow(const Tensor& frame_a, const Tensor& frame_b, const DrfaParams& p) {
    if (frame_a.ndim() != 3 || frame_a.shape() != frame_b.shape())
        throw ShapeError("estimate_flow expects matching [C,H,W] frames");
    NoGradGuard ng;
    const int C = frame_a.shape()[0], H = frame_a.shape()[1], W = frame_a.shape()[2];
    auto fwd = flow_forward(p, reshape(frame_a, {1, C, H, W}), reshape(frame_b, {1, C, H, W}));
    Tensor flow = reshape(fwd.flows.back(), {2, H, W});
    const float bound = static_cast<float>(std::max(H, W));
    std::vector<float> clamped = flow.vec();
    for (auto& v : clamped) v = std::clamp(v, -bound, bound);
    FlowField field;
    field.flow = Tensor::from({2, H, W}, std::move(clamped));
    if (fwd.confidence.defined()) {
        field.confidence = resize_bilinear(
            Tensor::from({1, H / 4, W / 4}, fwd.confidence.vec()), H, W);
        field.confidence = reshape(field.confidence, {H, W});
    }
    return field;
}

inline Tensor warp(const Tensor& image, const FlowField& field) {
    return warp_bilinear(image, field.flow);
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct FlowTrainConfig {
    int steps = 1200;
    int batch = 6;
    float lr = 2e-4f;
    float gamma = 0.8f;  // per-iteration supervision decay
    uint64_t seed = 1;
};

// Supervised training with gamma-weighted L1 over iteration outputs. Returns
// the per-step loss curve.
inline std::vector<float> train_flow(const std::vector<synthgen::SequencePair>& data,
                                     DrfaParams& params, const FlowTrainConfig& cfg) {
    if (data.empty()) throw ConfigError("empty flow training set");
    for (const auto& pair : data)
        if (!pair.clean.has_flow()) throw ConfigError("flow training needs ground-truth flow");

    Rng order = Rng(cfg.seed).split("flow-order");
    std::vector<float> curve;
    curve.reserve(cfg.steps);
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<Tensor> av, bv, gv;
        for (int k = 0; k < cfg.batch; ++k) {
            const auto& pair = data[order.below(data.size())];
            const int t = static_cast<int>(order.below(static_cast<uint64_t>(pair.clean.T() - 1)));
            av.push_back(pair.degraded.frame(t));
            bv.push_back(pair.degraded.frame(t + 1));
            gv.push_back(pair.clean.flow_pair(t));
        }
        Tensor A = stack0(av), Bf = stack0(bv), G = stack0(gv);
        auto fwd = flow_forward(params, A, Bf);
        Tensor loss;
        const int K = static_cast<int>(fwd.flows.size());
        for (int k = 0; k < K; ++k) {
            const float wgt = std::pow(cfg.gamma, static_cast<float>(K - 1 - k));
            Tensor term = mean(abs(fwd.flows[k] - G)) * wgt;
            loss = k == 0 ? term : loss + term;
        }
        backward(loss);
        adam_step(params.state, cfg.lr);
        curve.push_back(loss.item());
    }
    return curve;
}

}  // namespace d2vr::drfa
