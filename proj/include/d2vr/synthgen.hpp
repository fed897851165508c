// SPDX-License-Identifier: Apache-2.0
//
// Synthetic video sequences with analytically known optical flow, plus
// parameterized degradations (blur, resampling, noise, block occlusions).
// Textures are smooth analytic functions (sinusoid mixtures plus Gaussian
// bumps), so frames can be rendered exactly under any rigid motion.
#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "d2vr/errors.hpp"
#include "d2vr/image.hpp"
#include "d2vr/rng.hpp"
#include "d2vr/serialize.hpp"
#include "d2vr/tensor.hpp"

namespace d2vr::synthgen {

enum class MotionKind { translate, rotate, multi_blob };

inline std::string to_string(MotionKind k) {
    switch (k) {
        case MotionKind::translate: return "translate";
        case MotionKind::rotate: return "rotate";
        default: return "multi_blob";
    }
}

inline MotionKind motion_from_string(const std::string& s) {
    if (s == "translate") return MotionKind::translate;
    if (s == "rotate") return MotionKind::rotate;
    if (s == "multi_blob") return MotionKind::multi_blob;
    throw ConfigError("unknown motion kind '" + s + "'");
}

struct DegradationSpec {
    float noise_sigma = 0.f;
    float blur_sigma = 0.f;
    float occlusion_fraction = 0.f;
    int downsample_factor = 1;

    bool is_identity() const {
        return noise_sigma == 0.f && blur_sigma == 0.f && occlusion_fraction == 0.f &&
               downsample_factor == 1;
    }
    void validate() const {
        if (noise_sigma < 0.f || blur_sigma < 0.f) throw ConfigError("negative degradation sigma");
        if (occlusion_fraction < 0.f || occlusion_fraction > 1.f)
            throw ConfigError("occlusion_fraction must lie in [0,1]");
        if (downsample_factor < 1) throw ConfigError("downsample_factor must be >= 1");
    }
};

struct VideoSequence {
    Tensor frames;          // [T,C,H,W], values in [0,1]
    Tensor gt_flow;         // [T-1,2,H,W] when known
    Tensor occlusion_mask;  // [T,1,H,W], 1 marks corrupted pixels
    DegradationSpec degradation;
    uint64_t seed = 0;
    std::string motion = "none";

    int T() const { return frames.shape()[0]; }
    int C() const { return frames.shape()[1]; }
    int H() const { return frames.shape()[2]; }
    int W() const { return frames.shape()[3]; }
    bool has_flow() const { return gt_flow.defined(); }

    Tensor frame(int t) const {
        const size_t plane = static_cast<size_t>(C()) * H() * W();
        return Tensor::from({C(), H(), W()},
                            std::vector<float>(frames.data() + plane * t, frames.data() + plane * (t + 1)));
    }
    // forward flow for the pair (t, t+1): warp(frame(t+1), flow_pair(t)) ~ frame(t)
    Tensor flow_pair(int t) const {
        const size_t plane = 2 * static_cast<size_t>(H()) * W();
        return Tensor::from({2, H(), W()},
                            std::vector<float>(gt_flow.data() + plane * t, gt_flow.data() + plane * (t + 1)));
    }
};

struct CleanSpec {
    int T = 8;
    int C = 1;
    int H = 32;
    int W = 32;
    MotionKind kind = MotionKind::translate;
    bool velocity_override = false;  // when set, translate uses (vx, vy) as given
    float vx = 0.f, vy = 0.f;
    float rot_theta = 0.f;  // 0 -> drawn from the seed
};

namespace detail {

// Smooth analytic texture: sinusoid mixture plus a few Gaussian bumps.
struct Texture {
    struct Wave {
        float ux, uy, phase, amp;
    };
    struct Bump {
        float cx, cy, inv2s2, amp;
    };
    std::vector<Wave> waves;
    std::vector<Bump> bumps;

    float eval(float x, float y) const {
        float v = 0.5f;
        for (const auto& w : waves)
            v += w.amp * std::sin(2.f * 3.14159265f * (w.ux * x + w.uy * y) + w.phase);
        for (const auto& b : bumps) {
            const float dx = x - b.cx, dy = y - b.cy;
            v += b.amp * std::exp(-(dx * dx + dy * dy) * b.inv2s2);
        }
        return std::clamp(v, 0.02f, 0.98f);
    }
};

inline Texture make_texture(Rng rng, int h, int w) {
    Texture tex;
    const int n_waves = 6;
    float budget = 0.22f;
    for (int i = 0; i < n_waves; ++i) {
        const float lambda = static_cast<float>(rng.uniform(8.0, 20.0));
        const float theta = static_cast<float>(rng.uniform(0.0, 2.0 * 3.14159265));
        Texture::Wave wv;
        wv.ux = std::cos(theta) / lambda;
        wv.uy = std::sin(theta) / lambda;
        wv.phase = static_cast<float>(rng.uniform(0.0, 2.0 * 3.14159265));
        wv.amp = budget / n_waves * static_cast<float>(rng.uniform(0.5, 1.5));
        tex.waves.push_back(wv);
    }
    // dense localized bumps give the correlation volume sharp, trackable peaks
    for (int i = 0; i < 8; ++i) {
        Texture::Bump b;
        b.cx = static_cast<float>(rng.uniform(0.1, 0.9)) * w;
        b.cy = static_cast<float>(rng.uniform(0.1, 0.9)) * h;
        const float sigma = static_cast<float>(rng.uniform(1.2, 3.2));
        b.inv2s2 = 1.f / (2.f * sigma * sigma);
        const float mag = static_cast<float>(rng.uniform(0.08, 0.15));
        b.amp = rng.uniform() < 0.5 ? mag : -mag;
        tex.bumps.push_back(b);
    }
    return tex;
}

struct Blob {
    float cx, cy, sigma, vx, vy, shade;
};

}  // namespace detail

// Renders T frames moved by an analytically known displacement and fills
// gt_flow with the exact per-pair field.
inline VideoSequence generate_clean(uint64_t seed, const CleanSpec& spec) {
    if (spec.H < 8 || spec.W < 8) throw ConfigError("frames must be at least 8x8");
    if (spec.T < 2) throw ConfigError("need at least two frames");
    if (spec.C != 1 && spec.C != 3) throw ConfigError("channel count must be 1 or 3");

    Rng root = Rng(seed).split("clean");
    const int T = spec.T, C = spec.C, H = spec.H, W = spec.W;
    const float cx = (W - 1) / 2.f, cy = (H - 1) / 2.f;

    // motion parameters
    float vx = 0.f, vy = 0.f, theta = 0.f;
    if (spec.kind == MotionKind::translate) {
        if (spec.velocity_override) {
            vx = spec.vx;
            vy = spec.vy;
        } else {
            Rng mr = root.split("motion");
            do {
                vx = static_cast<float>(mr.range_int(-4, 4));
                vy = static_cast<float>(mr.range_int(-4, 4));
            } while (vx == 0.f && vy == 0.f);
        }
    } else if (spec.kind == MotionKind::rotate) {
        if (spec.rot_theta != 0.f) {
            theta = spec.rot_theta;
        } else {
            Rng mr = root.split("motion");
            theta = static_cast<float>(mr.uniform(0.08, 0.22));
            if (mr.uniform() < 0.5) theta = -theta;
        }
    }

    std::vector<detail::Texture> textures;
    for (int c = 0; c < C; ++c) textures.push_back(detail::make_texture(root.split(c + 100), H, W));

    std::vector<detail::Blob> blobs;
    if (spec.kind == MotionKind::multi_blob) {
        Rng br = root.split("blobs");
        for (int b = 0; b < 3; ++b) {
            detail::Blob bl;
            bl.cx = static_cast<float>(br.uniform(0.2, 0.8)) * W;
            bl.cy = static_cast<float>(br.uniform(0.2, 0.8)) * H;
            bl.sigma = static_cast<float>(br.uniform(2.5, 4.5));
            do {
                bl.vx = static_cast<float>(br.range_int(-2, 2));
                bl.vy = static_cast<float>(br.range_int(-2, 2));
            } while (bl.vx == 0.f && bl.vy == 0.f);
            bl.shade = static_cast<float>(br.uniform(0.25, 0.75));
            blobs.push_back(bl);
        }
    }

    VideoSequence v;
    v.seed = seed;
    v.motion = to_string(spec.kind);
    std::vector<float> frames(static_cast<size_t>(T) * C * H * W);
    for (int t = 0; t < T; ++t)
        for (int c = 0; c < C; ++c) {
            float* dst = frames.data() + (static_cast<size_t>(t) * C + c) * H * W;
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    float val;
                    if (spec.kind == MotionKind::translate) {
                        val = textures[c].eval(x - t * vx, y - t * vy);
                    } else if (spec.kind == MotionKind::rotate) {
                        const float a = -t * theta;
                        const float rx = std::cos(a) * (x - cx) - std::sin(a) * (y - cy) + cx;
                        const float ry = std::sin(a) * (x - cx) + std::cos(a) * (y - cy) + cy;
                        val = textures[c].eval(rx, ry);
                    } else {
                        val = textures[c].eval(x, y);
                        for (const auto& b : blobs) {
                            const float dx = x - (b.cx + t * b.vx), dy = y - (b.cy + t * b.vy);
                            const float wgt = std::exp(-(dx * dx + dy * dy) / (2.f * b.sigma * b.sigma));
                            val = val * (1.f - wgt) + b.shade * wgt;
                        }
                        val = std::clamp(val, 0.02f, 0.98f);
                    }
                    dst[y * W + x] = val;
                }
        }
    v.frames = Tensor::from({T, C, H, W}, std::move(frames));

    std::vector<float> flow(static_cast<size_t>(T - 1) * 2 * H * W);
    for (int t = 0; t < T - 1; ++t) {
        float* fx = flow.data() + static_cast<size_t>(t) * 2 * H * W;
        float* fy = fx + static_cast<size_t>(H) * W;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                float gx, gy;
                if (spec.kind == MotionKind::translate) {
                    gx = vx;
                    gy = vy;
                } else if (spec.kind == MotionKind::rotate) {
                    gx = std::cos(theta) * (x - cx) - std::sin(theta) * (y - cy) + cx - x;
                    gy = std::sin(theta) * (x - cx) + std::cos(theta) * (y - cy) + cy - y;
                } else {
                    gx = gy = 0.f;
                    float best = 0.4f;  // background below this weight
                    for (const auto& b : blobs) {
                        const float dx = x - (b.cx + t * b.vx), dy = y - (b.cy + t * b.vy);
                        const float wgt = std::exp(-(dx * dx + dy * dy) / (2.f * b.sigma * b.sigma));
                        if (wgt > best) {
                            best = wgt;
                            gx = b.vx;
                            gy = b.vy;
                        }
                    }
                }
                fx[y * W + x] = gx;
                fy[y * W + x] = gy;
            }
    }
    v.gt_flow = Tensor::from({T - 1, 2, H, W}, std::move(flow));
    return v;
}

// Applies blur, down/up resampling, additive Gaussian noise and block
// occlusions in that order, clamping to [0,1]. Shapes and gt_flow are
// preserved; the occlusion mask of each frame is recorded.
inline VideoSequence degrade(const VideoSequence& src, const DegradationSpec& spec, uint64_t seed) {
    spec.validate();
    const int T = src.T(), C = src.C(), H = src.H(), W = src.W();
    VideoSequence out;
    out.seed = src.seed;
    out.motion = src.motion;
    out.degradation = spec;
    if (src.has_flow()) out.gt_flow = src.gt_flow.detach();

    if (spec.is_identity()) {
        out.frames = src.frames.detach();
        out.occlusion_mask = Tensor::zeros({T, 1, H, W});
        return out;
    }

    Rng root = Rng(seed).split("degrade");
    std::vector<float> frames(static_cast<size_t>(T) * C * H * W);
    std::vector<float> mask(static_cast<size_t>(T) * H * W, 0.f);

    const int tile = 4;
    const int tiles_y = (H + tile - 1) / tile;
    const int tiles_x = (W + tile - 1) / tile;
    const int n_tiles = tiles_y * tiles_x;
    const int k_occl = static_cast<int>(std::lround(spec.occlusion_fraction * n_tiles));

    for (int t = 0; t < T; ++t) {
        Rng fr = root.split(static_cast<uint64_t>(t));
        Tensor frame = src.frame(t);
        if (spec.blur_sigma > 0.f) frame = gaussian_blur(frame, spec.blur_sigma);
        if (spec.downsample_factor > 1)
            frame = resize_bilinear(box_downsample(frame, spec.downsample_factor), H, W);

        float* dst = frames.data() + static_cast<size_t>(t) * C * H * W;
        std::copy(frame.data(), frame.data() + static_cast<size_t>(C) * H * W, dst);

        if (spec.noise_sigma > 0.f) {
            Rng nr = fr.split("noise");
            for (size_t i = 0; i < static_cast<size_t>(C) * H * W; ++i)
                dst[i] += spec.noise_sigma * static_cast<float>(nr.normal());
        }

        if (k_occl > 0) {
            Rng orr = fr.split("occl");
            // partial Fisher-Yates over the tile grid
            std::vector<int> tiles(n_tiles);
            for (int i = 0; i < n_tiles; ++i) tiles[i] = i;
            for (int i = 0; i < k_occl; ++i) {
                const int j = i + static_cast<int>(orr.below(static_cast<uint64_t>(n_tiles - i)));
                std::swap(tiles[i], tiles[j]);
            }
            float* m = mask.data() + static_cast<size_t>(t) * H * W;
            for (int i = 0; i < k_occl; ++i) {
                const int ty = tiles[i] / tiles_x, tx = tiles[i] % tiles_x;
                const float gray = static_cast<float>(orr.uniform());
                for (int y = ty * tile; y < std::min((ty + 1) * tile, H); ++y)
                    for (int x = tx * tile; x < std::min((tx + 1) * tile, W); ++x) {
                        for (int c = 0; c < C; ++c) dst[(static_cast<size_t>(c) * H + y) * W + x] = gray;
                        m[y * W + x] = 1.f;
                    }
            }
        }
        for (size_t i = 0; i < static_cast<size_t>(C) * H * W; ++i) dst[i] = std::clamp(dst[i], 0.f, 1.f);
    }
    out.frames = Tensor::from({T, C, H, W}, std::move(frames));
    Shape ms = {T, 1, H, W};
    out.occlusion_mask = Tensor::from(ms, std::move(mask));
    return out;
}

// ---------------------------------------------------------------------------
// dataset generation and on-disk layout
// ---------------------------------------------------------------------------

struct SequencePair {
    VideoSequence clean;
    VideoSequence degraded;
};

struct DatasetConfig {
    uint64_t train_lo = 0, train_hi = 80;
    uint64_t eval_lo = 80, eval_hi = 100;
    CleanSpec clean;
    DegradationSpec degradation;
    std::string motion = "translate";  // translate | rotate | multi_blob | mix

    void validate() const {
        if (train_lo >= train_hi || eval_lo >= eval_hi) throw ConfigError("empty seed range");
        if (train_lo < eval_hi && eval_lo < train_hi)
            throw ConfigError("train and eval seed ranges overlap");
        degradation.validate();
    }
};

inline MotionKind resolve_motion(const std::string& motion, uint64_t seed) {
    if (motion == "mix")
        return Rng(seed).split("pick").uniform() < 0.5 ? MotionKind::translate : MotionKind::rotate;
    return motion_from_string(motion);
}

inline SequencePair make_pair(uint64_t seed, const DatasetConfig& cfg) {
    CleanSpec cs = cfg.clean;
    cs.kind = resolve_motion(cfg.motion, seed);
    SequencePair pair;
    pair.clean = generate_clean(seed, cs);
    pair.degraded = degrade(pair.clean, cfg.degradation, seed);
    return pair;
}

namespace detail {
inline void run_indexed(int n, int threads, const std::function<void(int)>& fn) {
    threads = std::max(1, threads);
    if (threads == 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (int t = 0; t < std::min(threads, n); ++t)
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    for (auto& th : pool) th.join();
}
}  // namespace detail

inline Manifest sequence_manifest(const VideoSequence& v) {
    Manifest m;
    m.emplace_back("seed", std::to_string(v.seed));
    m.emplace_back("motion", v.motion);
    m.emplace_back("frames", std::to_string(v.T()));
    m.emplace_back("channels", std::to_string(v.C()));
    m.emplace_back("height", std::to_string(v.H()));
    m.emplace_back("width", std::to_string(v.W()));
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", v.degradation.noise_sigma);
    m.emplace_back("noise_sigma", buf);
    std::snprintf(buf, sizeof(buf), "%g", v.degradation.blur_sigma);
    m.emplace_back("blur_sigma", buf);
    std::snprintf(buf, sizeof(buf), "%g", v.degradation.occlusion_fraction);
    m.emplace_back("occlusion_fraction", buf);
    m.emplace_back("downsample_factor", std::to_string(v.degradation.downsample_factor));
    m.emplace_back("has_flow", v.has_flow() ? "1" : "0");
    return m;
}

inline void save_pair(const std::filesystem::path& dir, const SequencePair& pair) {
    std::filesystem::create_directories(dir);
    save_tensor(dir / "clean.d2tn", pair.clean.frames);
    save_tensor(dir / "lq.d2tn", pair.degraded.frames);
    if (pair.clean.has_flow()) save_tensor(dir / "flow.d2tn", pair.clean.gt_flow);
    if (pair.degraded.occlusion_mask.defined())
        save_tensor(dir / "occl.d2tn", pair.degraded.occlusion_mask);
    save_manifest(dir / "manifest.txt", sequence_manifest(pair.degraded));
}

inline SequencePair load_pair(const std::filesystem::path& dir) {
    const Manifest m = load_manifest(dir / "manifest.txt");
    SequencePair pair;
    pair.clean.frames = load_tensor(dir / "clean.d2tn");
    pair.degraded.frames = load_tensor(dir / "lq.d2tn");
    pair.clean.seed = pair.degraded.seed = std::strtoull(manifest_get(m, "seed").c_str(), nullptr, 10);
    pair.clean.motion = pair.degraded.motion = manifest_get(m, "motion");
    pair.degraded.degradation.noise_sigma = std::stof(manifest_get(m, "noise_sigma"));
    pair.degraded.degradation.blur_sigma = std::stof(manifest_get(m, "blur_sigma"));
    pair.degraded.degradation.occlusion_fraction = std::stof(manifest_get(m, "occlusion_fraction"));
    pair.degraded.degradation.downsample_factor = std::stoi(manifest_get(m, "downsample_factor"));
    if (manifest_get(m, "has_flow") == "1") {
        pair.clean.gt_flow = load_tensor(dir / "flow.d2tn");
        pair.degraded.gt_flow = pair.clean.gt_flow.detach();
    }
    if (std::filesystem::exists(dir / "occl.d2tn"))
        pair.degraded.occlusion_mask = load_tensor(dir / "occl.d2tn");
    return pair;
}

inline Manifest dataset_manifest(const DatasetConfig& cfg) {
    Manifest m;
    m.emplace_back("format", "d2vr-dataset-v1");
    m.emplace_back("train_lo", std::to_string(cfg.train_lo));
    m.emplace_back("train_hi", std::to_string(cfg.train_hi));
    m.emplace_back("eval_lo", std::to_string(cfg.eval_lo));
    m.emplace_back("eval_hi", std::to_string(cfg.eval_hi));
    m.emplace_back("motion", cfg.motion);
    m.emplace_back("frames", std::to_string(cfg.clean.T));
    m.emplace_back("channels", std::to_string(cfg.clean.C));
    m.emplace_back("height", std::to_string(cfg.clean.H));
    m.emplace_back("width", std::to_string(cfg.clean.W));
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", cfg.degradation.noise_sigma);
    m.emplace_back("noise_sigma", buf);
    std::snprintf(buf, sizeof(buf), "%g", cfg.degradation.blur_sigma);
    m.emplace_back("blur_sigma", buf);
    std::snprintf(buf, sizeof(buf), "%g", cfg.degradation.occlusion_fraction);
    m.emplace_back("occlusion_fraction", buf);
    m.emplace_back("downsample_factor", std::to_string(cfg.degradation.downsample_factor));
    return m;
}

// Writes train/ and eval/ splits plus the root manifest. Deterministic for a
// fixed config regardless of the worker count.
inline void write_dataset(const std::filesystem::path& root, const DatasetConfig& cfg,
                          int threads = 1) {
    cfg.validate();
    std::filesystem::create_directories(root / "train");
    std::filesystem::create_directories(root / "eval");
    const int n_train = static_cast<int>(cfg.train_hi - cfg.train_lo);
    const int n_eval = static_cast<int>(cfg.eval_hi - cfg.eval_lo);
    detail::run_indexed(n_train + n_eval, threads, [&](int i) {
        const bool train = i < n_train;
        const uint64_t seed = train ? cfg.train_lo + i : cfg.eval_lo + (i - n_train);
        char name[32];
        std::snprintf(name, sizeof(name), "seq_%05llu", static_cast<unsigned long long>(seed));
        save_pair(root / (train ? "train" : "eval") / name, make_pair(seed, cfg));
    });
    save_manifest(root / "manifest.txt", dataset_manifest(cfg));
}

inline std::vector<std::filesystem::path> list_split(const std::filesystem::path& root,
                                                     const std::string& split) {
    std::vector<std::filesystem::path> dirs;
    const auto base = root / split;
    if (!std::filesystem::exists(base)) throw IoError("dataset split missing: " + base.string());
    for (const auto& e : std::filesystem::directory_iterator(base))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    return dirs;
}

// In-memory split for trainers and tests.
inline std::vector<SequencePair> make_split(const DatasetConfig& cfg, bool train) {
    cfg.validate();
    std::vector<SequencePair> out;
    const uint64_t lo = train ? cfg.train_lo : cfg.eval_lo;
    const uint64_t hi = train ? cfg.train_hi : cfg.eval_hi;
    for (uint64_t s = lo; s < hi; ++s) out.push_back(make_pair(s, cfg));
    return out;
}

}  // namespace d2vr::synthgen
