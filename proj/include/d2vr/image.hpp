// SPDX-License-Identifier: Apache-2.0
//
// Plain image utilities on raw tensors (no autodiff): bilinear backward
// warping, separable Gaussian blur, box down / bilinear up resampling, and
// 8-bit PGM/PPM dumps for human inspection.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "d2vr/errors.hpp"
#include "d2vr/tensor.hpp"

namespace d2vr {

// Bilinear lookup with edge-clamped coordinates.
inline float sample_bilinear(const float* plane, int h, int w, float y, float x) {
    y = std::clamp(y, 0.f, static_cast<float>(h - 1));
    x = std::clamp(x, 0.f, static_cast<float>(w - 1));
    const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
    const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const float fy = y - y0, fx = x - x0;
    const float top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
    const float bot = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
    return top * (1 - fy) + bot * fy;
}

// Backward warp: out(p) = image(p + flow(p)). image is [C,H,W], flow [2,H,W]
// holding (dx, dy) planes in that order.
inline Tensor warp_bilinear(const Tensor& image, const Tensor& flow) {
    if (image.ndim() != 3 || flow.ndim() != 3 || flow.shape()[0] != 2 ||
        flow.shape()[1] != image.shape()[1] || flow.shape()[2] != image.shape()[2])
        throw ShapeError("warp expects image [C,H,W] with flow [2,H,W], got " +
                         shape_str(image.shape()) + " and " + shape_str(flow.shape()));
    const int C = image.shape()[0], H = image.shape()[1], W = image.shape()[2];
    const float* dx = flow.data();
    const float* dy = flow.data() + static_cast<size_t>(H) * W;
    std::vector<float> out(static_cast<size_t>(C) * H * W);
    for (int c = 0; c < C; ++c) {
        const float* plane = image.data() + static_cast<size_t>(c) * H * W;
        float* dst = out.data() + static_cast<size_t>(c) * H * W;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const size_t i = static_cast<size_t>(y) * W + x;
                dst[i] = sample_bilinear(plane, H, W, y + dy[i], x + dx[i]);
            }
    }
    return Tensor::from({C, H, W}, std::move(out));
}

// Separable Gaussian blur with replicated edges; sigma <= 0 is the identity.
inline Tensor gaussian_blur(const Tensor& image, float sigma) {
    if (image.ndim() != 3) throw ShapeError("gaussian_blur expects [C,H,W]");
    if (sigma <= 0.f) return image.detach();
    const int C = image.shape()[0], H = image.shape()[1], W = image.shape()[2];
    const int radius = std::max(1, static_cast<int>(std::ceil(3.f * sigma)));
    std::vector<float> kernel(2 * radius + 1);
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5f * (i * i) / (sigma * sigma));
        norm += kernel[i + radius];
    }
    for (auto& k : kernel) k = static_cast<float>(k / norm);

    std::vector<float> tmp(static_cast<size_t>(C) * H * W), out(tmp.size());
    for (int c = 0; c < C; ++c) {
        const float* src = image.data() + static_cast<size_t>(c) * H * W;
        float* mid = tmp.data() + static_cast<size_t>(c) * H * W;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[i + radius] * src[y * W + std::clamp(x + i, 0, W - 1)];
                mid[y * W + x] = static_cast<float>(acc);
            }
        float* dst = out.data() + static_cast<size_t>(c) * H * W;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[i + radius] * mid[std::clamp(y + i, 0, H - 1) * W + x];
                dst[y * W + x] = static_cast<float>(acc);
            }
    }
    return Tensor::from(image.shape(), std::move(out));
}

// Exact box average over factor x factor blocks.
inline Tensor box_downsample(const Tensor& image, int factor) {
    if (image.ndim() != 3) throw ShapeError("box_downsample expects [C,H,W]");
    if (factor < 1) throw ConfigError("downsample factor must be >= 1");
    if (factor == 1) return image.detach();
    const int C = image.shape()[0], H = image.shape()[1], W = image.shape()[2];
    if (H % factor || W % factor)
        throw ConfigError("image extents must be divisible by the downsample factor");
    const int h = H / factor, w = W / factor;
    std::vector<float> out(static_cast<size_t>(C) * h * w);
    const float inv = 1.f / (factor * factor);
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < h; ++oy)
            for (int ox = 0; ox < w; ++ox) {
                double acc = 0.0;
                for (int ky = 0; ky < factor; ++ky)
                    for (int kx = 0; kx < factor; ++kx)
                        acc += image.data()[(static_cast<size_t>(c) * H + oy * factor + ky) * W +
                                            ox * factor + kx];
                out[(static_cast<size_t>(c) * h + oy) * w + ox] = static_cast<float>(acc * inv);
            }
    return Tensor::from({C, h, w}, std::move(out));
}

inline Tensor resize_bilinear(const Tensor& image, int out_h, int out_w) {
    if (image.ndim() != 3) throw ShapeError("resize_bilinear expects [C,H,W]");
    NoGradGuard ng;
    Shape s = image.shape();
    Tensor up = upsample_bilinear(reshape(image, {1, s[0], s[1], s[2]}), out_h, out_w);
    return Tensor::from({s[0], out_h, out_w}, up.vec());
}

// ---------------------------------------------------------------------------
// 8-bit image dumps
// ---------------------------------------------------------------------------

inline unsigned char to_byte(float v) {
    return static_cast<unsigned char>(std::clamp(std::lround(255.f * v), 0L, 255L));
}

// P5 for 1 channel. Values are round(255 * x) clamped to [0, 255].
inline void write_pgm(const std::filesystem::path& path, const Tensor& image) {
    if (image.ndim() != 3 || image.shape()[0] != 1) throw ShapeError("write_pgm expects [1,H,W]");
    const int H = image.shape()[1], W = image.shape()[2];
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string());
    os << "P5\n" << W << " " << H << "\n255\n";
    for (int i = 0; i < H * W; ++i) os.put(static_cast<char>(to_byte(image.data()[i])));
}

// P6 for 3 channels (channel-planar input).
inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
    if (image.ndim() != 3 || image.shape()[0] != 3) throw ShapeError("write_ppm expects [3,H,W]");
    const int H = image.shape()[1], W = image.shape()[2];
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string());
    os << "P6\n" << W << " " << H << "\n255\n";
    const size_t plane = static_cast<size_t>(H) * W;
    for (size_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c) os.put(static_cast<char>(to_byte(image.data()[c * plane + i])));
}

inline void write_frame_preview(const std::filesystem::path& path, const Tensor& chw) {
    if (chw.ndim() != 3) throw ShapeError("preview expects [C,H,W]");
    if (chw.shape()[0] == 3) {
        write_ppm(path, chw);
    } else {
        const size_t plane = static_cast<size_t>(chw.shape()[1]) * chw.shape()[2];
        write_pgm(path, Tensor::from({1, chw.shape()[1], chw.shape()[2]},
                                     std::vector<float>(chw.data(), chw.data() + plane)));
    }
}

// Hue-by-angle, saturation-by-magnitude flow rendering.
inline void write_flow_ppm(const std::filesystem::path& path, const Tensor& flow, float max_mag) {
    if (flow.ndim() != 3 || flow.shape()[0] != 2) throw ShapeError("flow preview expects [2,H,W]");
    const int H = flow.shape()[1], W = flow.shape()[2];
    const size_t plane = static_cast<size_t>(H) * W;
    std::vector<float> rgb(3 * plane);
    for (size_t i = 0; i < plane; ++i) {
        const float dx = flow.data()[i], dy = flow.data()[plane + i];
        const float mag = std::min(1.f, std::sqrt(dx * dx + dy * dy) / std::max(max_mag, 1e-6f));
        const float ang = std::atan2(dy, dx);  // [-pi, pi]
        const float hue = (ang + 3.14159265f) / (2.f * 3.14159265f) * 6.f;
        const int sector = std::min(5, static_cast<int>(hue));
        const float f = hue - sector;
        float r = 0, g = 0, b = 0;
        switch (sector) {
            case 0: r = 1; g = f; break;
            case 1: r = 1 - f; g = 1; break;
            case 2: g = 1; b = f; break;
            case 3: g = 1 - f; b = 1; break;
            case 4: r = f; b = 1; break;
            default: r = 1; b = 1 - f; break;
        }
        rgb[i] = 1.f - mag * (1.f - r);
        rgb[plane + i] = 1.f - mag * (1.f - g);
        rgb[2 * plane + i] = 1.f - mag * (1.f - b);
    }
    write_ppm(path, Tensor::from({3, H, W}, std::move(rgb)));
}

}  // namespace d2vr
