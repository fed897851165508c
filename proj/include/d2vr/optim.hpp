// SPDX-License-Identifier: Apache-2.0
//
// Training state (named parameters + Adam moments + RNG words + step counter)
// and the Adam update. The whole struct round-trips bit-exactly through the
// checkpoint format in serialize.hpp.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "d2vr/errors.hpp"
#include "d2vr/tensor.hpp"

namespace d2vr {

struct NamedParam {
    std::string name;
    Tensor value;
    std::vector<float> m;  // first moment
    std::vector<float> v;  // second moment
};

struct TrainState {
    std::vector<NamedParam> params;
    int64_t step = 0;
    uint64_t rng_key = 0;
    uint64_t rng_counter = 0;

    Tensor& add(std::string name, Tensor t) {
        t.with_grad();
        params.push_back({std::move(name), std::move(t), {}, {}});
        return params.back().value;
    }

    Tensor find(const std::string& name) const {
        for (const auto& p : params)
            if (p.name == name) return p.value;
        throw ConfigError("no parameter named '" + name + "'");
    }

    bool has(const std::string& name) const {
        for (const auto& p : params)
            if (p.name == name) return true;
        return false;
    }

    void zero_grads() {
        for (auto& p : params) p.value.zero_grad();
    }

    void set_requires_grad(bool on) {
        for (auto& p : params) p.value.impl()->requires_grad = on;
    }
};

// Standard Adam with bias correction. Consumes and clears the gradients.
inline void adam_step(TrainState& state, float lr, float beta1 = 0.9f, float beta2 = 0.999f,
                      float eps = 1e-8f) {
    for (const auto& p : state.params)
        if (!p.value.has_grad()) throw OptimError("parameter '" + p.name + "' has no gradient");

    state.step += 1;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(state.step));
    for (auto& p : state.params) {
        const auto& g = p.value.grad();
        const size_t n = g.size();
        if (p.m.empty()) p.m.assign(n, 0.f);
        if (p.v.empty()) p.v.assign(n, 0.f);
        float* w = p.value.data();
        for (size_t i = 0; i < n; ++i) {
            p.m[i] = beta1 * p.m[i] + (1.f - beta1) * g[i];
            p.v[i] = beta2 * p.v[i] + (1.f - beta2) * g[i] * g[i];
            const double mh = p.m[i] / bc1;
            const double vh = p.v[i] / bc2;
            w[i] -= static_cast<float>(lr * mh / (std::sqrt(vh) + eps));
        }
    }
    state.zero_grads();
}

}  // namespace d2vr
