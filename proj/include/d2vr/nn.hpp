// SPDX-License-Identifier: Apache-2.0
//
// Small building blocks shared by the flow and diffusion networks. Parameters
// are registered in a TrainState by name; constructing a block over a state
// that already holds the name binds to the stored tensor (checkpoint load),
// otherwise the parameter is drawn from a per-name RNG stream, so adding or
// removing one block never shifts the initialization of another.
#pragma once

#include <cmath>
#include <string>

#include "d2vr/optim.hpp"
#include "d2vr/rng.hpp"
#include "d2vr/tensor.hpp"

namespace d2vr::nn {

inline Tensor param(TrainState& state, const std::string& name, const Shape& shape,
                    const Rng& root, float stddev) {
    if (state.has(name)) {
        Tensor t = state.find(name);
        if (t.shape() != shape)
            throw ConfigError("parameter '" + name + "' has shape " + shape_str(t.shape()) +
                              ", expected " + shape_str(shape));
        return t;
    }
    Rng stream = root.split(name);
    if (stddev == 0.f) return state.add(name, Tensor::zeros(shape));
    return state.add(name, randn(shape, stream) * stddev);
}

// Adds a per-channel bias [C] onto [B,C,H,W].
inline Tensor bias_nchw(const Tensor& x, const Tensor& b) {
    return x + reshape(b, {b.shape()[0], 1, 1});
}

// Parameter-free instance normalization over the spatial dims of [B,C,H,W].
inline Tensor instance_norm(const Tensor& x, float eps = 1e-5f) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("instance_norm expects [B,C,H,W]");
    Tensor mu = reshape(reduce(ReduceOp::mean, reduce(ReduceOp::mean, x, 3), 2), {s[0], s[1], 1, 1});
    Tensor centered = x - mu;
    Tensor var = reshape(reduce(ReduceOp::mean, reduce(ReduceOp::mean, square(centered), 3), 2),
                         {s[0], s[1], 1, 1});
    return centered / exp(log(var + eps) * 0.5f);
}

struct Conv {
    Tensor w;  // [O, C, k, k]
    Tensor b;  // [O]
    int stride = 1;
    Padding pad = Padding::same;

    Tensor operator()(const Tensor& x) const { return bias_nchw(conv2d(x, w, stride, pad), b); }
};

inline Conv conv(TrainState& state, const std::string& name, int in_ch, int out_ch, int k,
                 int stride, const Rng& root, float gain = std::sqrt(2.f), float scale = 1.f) {
    Conv c;
    const float stddev = scale * gain / std::sqrt(static_cast<float>(in_ch * k * k));
    c.w = param(state, name + ".w", {out_ch, in_ch, k, k}, root, stddev);
    c.b = param(state, name + ".b", {out_ch}, root, 0.f);
    c.stride = stride;
    return c;
}

struct Dense {
    Tensor w;  // [in, out]
    Tensor b;  // [out]

    // x: [B, in] -> [B, out]
    Tensor operator()(const Tensor& x) const { return matmul(x, w) + reshape(b, {1, b.shape()[0]}); }
};

inline Dense dense(TrainState& state, const std::string& name, int in_dim, int out_dim,
                   const Rng& root, float scale = 1.f) {
    Dense d;
    const float stddev = scale / std::sqrt(static_cast<float>(in_dim));
    d.w = param(state, name + ".w", {in_dim, out_dim}, root, stddev);
    d.b = param(state, name + ".b", {out_dim}, root, 0.f);
    return d;
}

}  // namespace d2vr::nn
