// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics: PSNR, single-scale SSIM, flow end-point error, and the
// two temporal-consistency measures (flow-difference tOF and the perceptual
// frame-difference metric, reported x100). The flow backend for tOF is
// injected so one pinned estimator can serve every experiment.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "d2vr/distill.hpp"
#include "d2vr/errors.hpp"
#include "d2vr/synthgen.hpp"
#include "d2vr/tensor.hpp"

namespace d2vr::metrics {

constexpr double kPsnrSentinel = 99.0;  // reported when MSE is exactly zero

inline double psnr(const Tensor& x, const Tensor& y, double max_val = 1.0) {
    if (x.shape() != y.shape())
        throw ShapeError("psnr expects matching shapes, got " + shape_str(x.shape()) + " vs " +
                         shape_str(y.shape()));
    double mse = 0.0;
    const int n = x.numel();
    for (int i = 0; i < n; ++i) {
        const double d = static_cast<double>(x.data()[i]) - y.data()[i];
        mse += d * d;
    }
    mse /= n;
    if (mse == 0.0) return kPsnrSentinel;
    return 10.0 * std::log10(max_val * max_val / mse);
}

namespace detail {
inline std::vector<double> gaussian_window_11() {
    std::vector<double> w(121);
    const double sigma = 1.5;
    double sum = 0.0;
    for (int y = 0; y < 11; ++y)
        for (int x = 0; x < 11; ++x) {
            const double dy = y - 5, dx = x - 5;
            w[y * 11 + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            sum += w[y * 11 + x];
        }
    for (auto& v : w) v /= sum;
    return w;
}
}  // namespace detail

// Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), C1=(0.01L)^2,
// C2=(0.03L)^2 with L=1, averaged over the valid window positions and over
// channels.
inline double ssim(const Tensor& x, const Tensor& y) {
    if (x.shape() != y.shape()) throw ShapeError("ssim expects matching shapes");
    if (x.ndim() != 3) throw ShapeError("ssim expects [C,H,W]");
    const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    if (H < 11 || W < 11) throw ShapeError("ssim needs at least 11x11 images");
    static const std::vector<double> win = detail::gaussian_window_11();
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double total = 0.0;
    long count = 0;
    for (int c = 0; c < C; ++c) {
        const float* px = x.data() + static_cast<size_t>(c) * H * W;
        const float* py = y.data() + static_cast<size_t>(c) * H * W;
        for (int oy = 0; oy + 11 <= H; ++oy)
            for (int ox = 0; ox + 11 <= W; ++ox) {
                double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
                for (int ky = 0; ky < 11; ++ky)
                    for (int kx = 0; kx < 11; ++kx) {
                        const double wv = win[ky * 11 + kx];
                        const double vx = px[(oy + ky) * W + ox + kx];
                        const double vy = py[(oy + ky) * W + ox + kx];
                        mx += wv * vx;
                        my += wv * vy;
                        mxx += wv * vx * vx;
                        myy += wv * vy * vy;
                        mxy += wv * vx * vy;
                    }
                const double sx = mxx - mx * mx, sy = myy - my * my, sxy = mxy - mx * my;
                total += ((2 * mx * my + c1) * (2 * sxy + c2)) /
                         ((mx * mx + my * my + c1) * (sx + sy + c2));
                ++count;
            }
    }
    return total / count;
}

// Mean Euclidean end-point error between two [2,H,W] flow fields.
inline double epe(const Tensor& flow_pred, const Tensor& flow_gt) {
    if (flow_pred.shape() != flow_gt.shape() || flow_pred.ndim() != 3 ||
        flow_pred.shape()[0] != 2)
        throw ShapeError("epe expects matching [2,H,W] fields");
    const int n = flow_pred.shape()[1] * flow_pred.shape()[2];
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const double dx = static_cast<double>(flow_pred.data()[i]) - flow_gt.data()[i];
        const double dy = static_cast<double>(flow_pred.data()[n + i]) - flow_gt.data()[n + i];
        acc += std::sqrt(dx * dx + dy * dy);
    }
    return acc / n;
}

// flow backend: (earlier frame, later frame) -> [2,H,W]
using FlowFn = std::function<Tensor(const Tensor& frame_a, const Tensor& frame_b)>;

// Mean absolute difference between flows computed on the generated and
// reference sequences (L1 norm over the field, averaged over frame pairs).
inline double tof(const synthgen::VideoSequence& gen, const synthgen::VideoSequence& gt,
                  const FlowFn& flow_fn) {
    if (gen.T() != gt.T() || gen.frames.shape() != gt.frames.shape())
        throw ShapeError("tof expects sequences of identical shape");
    if (gen.T() < 2) throw ConfigError("tof needs at least two frames");
    double acc = 0.0;
    for (int t = 1; t < gen.T(); ++t) {
        Tensor fg = flow_fn(gen.frame(t - 1), gen.frame(t));
        Tensor fr = flow_fn(gt.frame(t - 1), gt.frame(t));
        if (fg.shape() != fr.shape()) throw ShapeError("flow backend returned mismatched fields");
        double pair = 0.0;
        for (int i = 0; i < fg.numel(); ++i)
            pair += std::fabs(static_cast<double>(fg.data()[i]) - fr.data()[i]);
        acc += pair / fg.numel();
    }
    return acc / (gen.T() - 1);
}

// Evaluation-mode temporal perceptual metric, reported x100.
inline double tlpips_metric(const synthgen::VideoSequence& gen, const synthgen::VideoSequence& gt,
                            const distill::FeatureFn& phi) {
    if (gen.T() != gt.T()) throw ShapeError("tlpips expects equal-length sequences");
    if (gen.T() < 2) throw ConfigError("tlpips needs at least two frames");
    NoGradGuard ng;
    std::vector<Tensor> gen_frames, gt_frames;
    for (int t = 0; t < gen.T(); ++t) {
        gen_frames.push_back(gen.frame(t));
        gt_frames.push_back(gt.frame(t));
    }
    return 100.0 * distill::t_lpips_loss(gen_frames, gt_frames, phi).item();
}

// Mean squared 3x3 Laplacian response over the valid region; a sharpness
// proxy (0 for constant images, maximal for checkerboards).
inline double hf_energy(const Tensor& frame) {
    if (frame.ndim() != 3) throw ShapeError("hf_energy expects [C,H,W]");
    const int C = frame.shape()[0], H = frame.shape()[1], W = frame.shape()[2];
    double acc = 0.0;
    long count = 0;
    for (int c = 0; c < C; ++c) {
        const float* p = frame.data() + static_cast<size_t>(c) * H * W;
        for (int y = 1; y + 1 < H; ++y)
            for (int x = 1; x + 1 < W; ++x) {
                const double r = p[(y - 1) * W + x] + p[(y + 1) * W + x] + p[y * W + x - 1] +
                                 p[y * W + x + 1] - 4.0 * p[y * W + x];
                acc += r * r;
                ++count;
            }
    }
    return count ? acc / count : 0.0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct SequenceMetrics {
    std::string id;
    double psnr = 0, ssim = 0, tof = 0, tlpips = 0, hf_energy = 0;
};

struct MetricReport {
    std::string config_hash;
    std::string checkpoint_id;
    std::vector<SequenceMetrics> rows;

    SequenceMetrics summary() const {
        SequenceMetrics s;
        s.id = "mean";
        if (rows.empty()) return s;
        for (const auto& r : rows) {
            s.psnr += r.psnr;
            s.ssim += r.ssim;
            s.tof += r.tof;
            s.tlpips += r.tlpips;
            s.hf_energy += r.hf_energy;
        }
        const double n = static_cast<double>(rows.size());
        s.psnr /= n;
        s.ssim /= n;
        s.tof /= n;
        s.tlpips /= n;
        s.hf_energy /= n;
        return s;
    }
};

// Full-reference metrics of one restored sequence against its ground truth.
inline SequenceMetrics evaluate_sequence(const std::string& id,
                                         const synthgen::VideoSequence& restored,
                                         const synthgen::VideoSequence& clean,
                                         const FlowFn& flow_fn, const distill::FeatureFn& phi) {
    if (restored.frames.shape() != clean.frames.shape())
        throw ShapeError("restored and reference sequences differ in shape");
    SequenceMetrics m;
    m.id = id;
    for (int t = 0; t < restored.T(); ++t) {
        m.psnr += psnr(restored.frame(t), clean.frame(t));
        m.ssim += ssim(restored.frame(t), clean.frame(t));
        m.hf_energy += hf_energy(restored.frame(t));
    }
    m.psnr /= restored.T();
    m.ssim /= restored.T();
    m.hf_energy /= restored.T();
    if (restored.T() >= 2) {
        m.tof = tof(restored, clean, flow_fn);
        m.tlpips = tlpips_metric(restored, clean, phi);
    }
    return m;
}

}  // namespace d2vr::metrics
