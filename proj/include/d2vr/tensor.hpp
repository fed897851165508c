// SPDX-License-Identifier: Apache-2.0
//
// Dense float32 tensors with reverse-mode automatic differentiation on a
// dynamic tape. Reductions accumulate in double. Broadcasting follows
// trailing-dimension alignment (right-aligned, extents equal or 1).
//
// Determinism: identical inputs produce bit-identical outputs; a graph is
// confined to one thread. The dense inner products of matmul/conv2d are
// evaluated by Eigen, everything else is explicit loops.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "d2vr/errors.hpp"
#include "d2vr/rng.hpp"

namespace d2vr {

using Shape = std::vector<int>;

inline int numel(const Shape& s) {
    int n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {
inline bool& grad_mode() {
    thread_local bool on = true;
    return on;
}
}  // namespace detail

// RAII guard disabling graph recording (inference paths).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::vector<float> grad;

    // tape
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;
    bool consumed = false;

    bool is_leaf() const { return parents.empty(); }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor from(Shape shape, std::vector<float> data) {
        check_shape(shape);
        if (static_cast<int>(data.size()) != d2vr::numel(shape))
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match " +
                             shape_str(shape));
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->data = std::move(data);
        return Tensor(impl);
    }
    static Tensor zeros(Shape shape) { return full(std::move(shape), 0.f); }
    static Tensor full(Shape shape, float v) {
        check_shape(shape);
        auto impl = std::make_shared<TensorImpl>();
        impl->data.assign(static_cast<size_t>(d2vr::numel(shape)), v);
        impl->shape = std::move(shape);
        return Tensor(impl);
    }
    static Tensor scalar(float v) { return full({}, v); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int numel() const { return d2vr::numel(impl_->shape); }
    float* data() { return impl_->data.data(); }
    const float* data() const { return impl_->data.data(); }
    const std::vector<float>& vec() const { return impl_->data; }

    float item() const {
        if (numel() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
        return impl_->data[0];
    }

    Tensor with_grad() const {
        impl_->requires_grad = true;
        return *this;
    }
    bool requires_grad() const { return impl_->requires_grad; }
    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<float>& grad() const {
        if (impl_->grad.empty()) throw OptimError("gradient not populated");
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    // Detached deep copy; never part of any graph.
    Tensor detach() const {
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = impl_->shape;
        impl->data = impl_->data;
        return Tensor(impl);
    }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    static void check_shape(const Shape& s) {
        for (int e : s)
            if (e <= 0) throw ShapeError("extents must be positive, got " + shape_str(s));
    }
    std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline std::vector<float>& ensure_grad(TensorImpl& t) {
    if (t.grad.empty()) t.grad.assign(static_cast<size_t>(numel(t.shape)), 0.f);
    return t.grad;
}

inline bool wants_grad(const TensorImpl& t) { return t.requires_grad; }

inline Tensor make_op(Shape shape, std::vector<float> data, std::initializer_list<Tensor> inputs,
                      std::function<void(TensorImpl&)> bw) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    if (grad_mode()) {
        bool rg = false;
        for (const auto& t : inputs) rg = rg || t.impl()->requires_grad;
        if (rg) {
            impl->requires_grad = true;
            for (const auto& t : inputs) impl->parents.push_back(t.impl());
            impl->backward_fn = std::move(bw);
        }
    }
    return Tensor(impl);
}

// Right-aligned broadcast result shape.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const int nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (int d = 0; d < nd; ++d) {
        const int ea = d < nd - static_cast<int>(a.size()) ? 1 : a[d - (nd - a.size())];
        const int eb = d < nd - static_cast<int>(b.size()) ? 1 : b[d - (nd - b.size())];
        if (ea != eb && ea != 1 && eb != 1)
            throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        out[d] = std::max(ea, eb);
    }
    return out;
}

// Per-dimension index stride of `s` inside broadcast result `out` (0 where broadcast).
inline std::vector<size_t> broadcast_strides(const Shape& out, const Shape& s) {
    const int nd = static_cast<int>(out.size());
    std::vector<size_t> st(nd, 0);
    size_t stride = 1;
    const int off = nd - static_cast<int>(s.size());
    for (int d = nd - 1; d >= 0; --d) {
        const int e = d < off ? 1 : s[d - off];
        st[d] = (e == 1) ? 0 : stride;
        if (d >= off) stride *= static_cast<size_t>(e);
    }
    return st;
}

template <class F>
inline void for_each_broadcast(const Shape& out, const std::vector<size_t>& sa,
                               const std::vector<size_t>& sb, F&& f) {
    const size_t total = static_cast<size_t>(numel(out));
    const int nd = static_cast<int>(out.size());
    std::vector<int> idx(nd, 0);
    size_t ia = 0, ib = 0;
    for (size_t o = 0; o < total; ++o) {
        f(o, ia, ib);
        for (int d = nd - 1; d >= 0; --d) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d]) break;
            idx[d] = 0;
            ia -= sa[d] * static_cast<size_t>(out[d]);
            ib -= sb[d] * static_cast<size_t>(out[d]);
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

enum class EwOp { add, sub, mul, div, exp, log, sigmoid, relu, square };

namespace detail {

inline float stable_sigmoid(float x) {
    float y;
    if (x >= 0.f) {
        y = 1.f / (1.f + std::exp(-x));
    } else {
        const float e = std::exp(x);
        y = e / (1.f + e);
    }
    // keep the codomain strictly inside (0, 1)
    const float hi = 1.f - 6e-8f;
    return std::min(std::max(y, std::numeric_limits<float>::min()), hi);
}

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd bwd) {
    const size_t n = static_cast<size_t>(a.numel());
    std::vector<float> out(n);
    const float* src = a.data();
    for (size_t i = 0; i < n; ++i) out[i] = fwd(src[i]);
    auto ai = a.impl();
    return make_op(a.shape(), std::move(out), {a}, [ai, bwd](TensorImpl& self) {
        if (!wants_grad(*ai)) return;
        auto& g = ensure_grad(*ai);
        const size_t n = g.size();
        for (size_t i = 0; i < n; ++i) g[i] += bwd(ai->data[i], self.data[i]) * self.grad[i];
    });
}

template <class Fwd, class BwdA, class BwdB>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    const size_t n = static_cast<size_t>(numel(out_shape));
    std::vector<float> out(n);
    const float* pa = a.data();
    const float* pb = b.data();
    const bool same = a.shape() == b.shape();
    std::vector<size_t> sa, sb;
    if (same) {
        for (size_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
    } else {
        sa = broadcast_strides(out_shape, a.shape());
        sb = broadcast_strides(out_shape, b.shape());
        for_each_broadcast(out_shape, sa, sb,
                           [&](size_t o, size_t ia, size_t ib) { out[o] = fwd(pa[ia], pb[ib]); });
    }
    auto ai = a.impl();
    auto bi = b.impl();
    return make_op(out_shape, std::move(out), {a, b},
                   [ai, bi, same, sa, sb, bwd_a, bwd_b, out_shape](TensorImpl& self) {
                       const bool ga = wants_grad(*ai), gb = wants_grad(*bi);
                       if (!ga && !gb) return;
                       if (ga) ensure_grad(*ai);
                       if (gb) ensure_grad(*bi);
                       const float* pa = ai->data.data();
                       const float* pb = bi->data.data();
                       auto body = [&](size_t o, size_t ia, size_t ib) {
                           const float g = self.grad[o];
                           if (ga) ai->grad[ia] += bwd_a(pa[ia], pb[ib], self.data[o]) * g;
                           if (gb) bi->grad[ib] += bwd_b(pa[ia], pb[ib], self.data[o]) * g;
                       };
                       if (same) {
                           const size_t n = self.grad.size();
                           for (size_t i = 0; i < n; ++i) body(i, i, i);
                       } else {
                           for_each_broadcast(out_shape, sa, sb, body);
                       }
                   });
}

}  // namespace detail

inline Tensor elementwise(EwOp op, const Tensor& a, const Tensor& b) {
    using detail::binary_op;
    switch (op) {
        case EwOp::add:
            return binary_op(
                a, b, [](float x, float y) { return x + y; },
                [](float, float, float) { return 1.f; }, [](float, float, float) { return 1.f; });
        case EwOp::sub:
            return binary_op(
                a, b, [](float x, float y) { return x - y; },
                [](float, float, float) { return 1.f; }, [](float, float, float) { return -1.f; });
        case EwOp::mul:
            return binary_op(
                a, b, [](float x, float y) { return x * y; },
                [](float, float y, float) { return y; }, [](float x, float, float) { return x; });
        case EwOp::div: {
            const float* pb = b.data();
            const size_t nb = static_cast<size_t>(b.numel());
            for (size_t i = 0; i < nb; ++i)
                if (pb[i] == 0.f) throw DomainError("division by zero");
            return binary_op(
                a, b, [](float x, float y) { return x / y; },
                [](float, float y, float) { return 1.f / y; },
                [](float, float y, float z) { return -z / y; });
        }
        default:
            throw ShapeError("binary elementwise op expected");
    }
}

inline Tensor elementwise(EwOp op, const Tensor& a) {
    using detail::unary_op;
    switch (op) {
        case EwOp::exp: {
            Tensor y = unary_op(
                a, [](float x) { return std::exp(x); },
                [](float, float y) { return y; });
            for (int i = 0; i < y.numel(); ++i)
                if (!std::isfinite(y.data()[i])) throw NumericsError("exp overflow");
            return y;
        }
        case EwOp::log: {
            const float* p = a.data();
            for (int i = 0; i < a.numel(); ++i)
                if (p[i] <= 0.f) throw DomainError("log of nonpositive value");
            return unary_op(
                a, [](float x) { return std::log(x); },
                [](float x, float) { return 1.f / x; });
        }
        case EwOp::sigmoid:
            return unary_op(a, detail::stable_sigmoid,
                            [](float, float y) { return y * (1.f - y); });
        case EwOp::relu:
            return unary_op(
                a, [](float x) { return x > 0.f ? x : 0.f; },
                [](float x, float) { return x > 0.f ? 1.f : 0.f; });
        case EwOp::square:
            return unary_op(
                a, [](float x) { return x * x; }, [](float x, float) { return 2.f * x; });
        default:
            throw ShapeError("unary elementwise op expected");
    }
}

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(EwOp::add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(EwOp::sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(EwOp::mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return elementwise(EwOp::div, a, b); }
inline Tensor exp(const Tensor& a) { return elementwise(EwOp::exp, a); }
inline Tensor log(const Tensor& a) { return elementwise(EwOp::log, a); }
inline Tensor sigmoid(const Tensor& a) { return elementwise(EwOp::sigmoid, a); }
inline Tensor relu(const Tensor& a) { return elementwise(EwOp::relu, a); }
inline Tensor square(const Tensor& a) { return elementwise(EwOp::square, a); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, float s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, float s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator*(const Tensor& a, float s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator/(const Tensor& a, float s) { return div(a, Tensor::scalar(s)); }
inline Tensor operator+(float s, const Tensor& a) { return add(Tensor::scalar(s), a); }
inline Tensor operator-(float s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor operator*(float s, const Tensor& a) { return mul(Tensor::scalar(s), a); }
inline Tensor operator-(const Tensor& a) { return mul(Tensor::scalar(-1.f), a); }

inline Tensor tanh(const Tensor& a) { return sigmoid(a * 2.f) * 2.f - 1.f; }
inline Tensor abs(const Tensor& a) { return relu(a) + relu(-a); }
// Hard clamp with pass-through gradient inside the bounds.
inline Tensor clamp(const Tensor& a, float lo, float hi) {
    Tensor low = relu(a - lo) + lo;
    return hi - (relu(hi - low));
}

// ---------------------------------------------------------------------------
// matmul / softmax / reduce
// ---------------------------------------------------------------------------

namespace detail {
using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw ShapeError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<float> out(static_cast<size_t>(m) * n);
    {
        detail::CMapMat A(a.data(), m, k), B(b.data(), k, n);
        detail::MapMat C(out.data(), m, n);
        C.noalias() = A * B;
    }
    auto ai = a.impl();
    auto bi = b.impl();
    return detail::make_op({m, n}, std::move(out), {a, b}, [ai, bi, m, k, n](TensorImpl& self) {
        detail::CMapMat G(self.grad.data(), m, n);
        if (detail::wants_grad(*ai)) {
            detail::ensure_grad(*ai);
            detail::MapMat dA(ai->grad.data(), m, k);
            detail::CMapMat B(bi->data.data(), k, n);
            dA.noalias() += G * B.transpose();
        }
        if (detail::wants_grad(*bi)) {
            detail::ensure_grad(*bi);
            detail::MapMat dB(bi->grad.data(), k, n);
            detail::CMapMat A(ai->data.data(), m, k);
            dB.noalias() += A.transpose() * G;
        }
    });
}

inline Tensor transpose2d(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("transpose2d expects rank-2");
    const int m = a.shape()[0], n = a.shape()[1];
    std::vector<float> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
    auto ai = a.impl();
    return detail::make_op({n, m}, std::move(out), {a}, [ai, m, n](TensorImpl& self) {
        if (!detail::wants_grad(*ai)) return;
        auto& g = detail::ensure_grad(*ai);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) g[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j) * m + i];
    });
}

namespace detail {
inline void axis_split(const Shape& s, int axis, size_t& outer, size_t& n, size_t& inner) {
    outer = 1;
    inner = 1;
    n = static_cast<size_t>(s[axis]);
    for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(s[d]);
    for (int d = axis + 1; d < static_cast<int>(s.size()); ++d) inner *= static_cast<size_t>(s[d]);
}
}  // namespace detail

// Max-subtracted softmax along one axis; the normalizing sum runs in double.
inline Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.ndim())
        throw ShapeError("softmax axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
    size_t outer, n, inner;
    detail::axis_split(x.shape(), axis, outer, n, inner);
    std::vector<float> out(static_cast<size_t>(x.numel()));
    const float* src = x.data();
    for (size_t o = 0; o < outer; ++o)
        for (size_t in = 0; in < inner; ++in) {
            const size_t base = o * n * inner + in;
            float mx = src[base];
            for (size_t i = 1; i < n; ++i) mx = std::max(mx, src[base + i * inner]);
            double sum = 0.0;
            for (size_t i = 0; i < n; ++i) {
                const double e = std::exp(static_cast<double>(src[base + i * inner]) - mx);
                out[base + i * inner] = static_cast<float>(e);
                sum += e;
            }
            const double norm = 1.0 / sum;
            for (size_t i = 0; i < n; ++i)
                out[base + i * inner] = static_cast<float>(out[base + i * inner] * norm);
        }
    auto xi = x.impl();
    return detail::make_op(x.shape(), std::move(out), {x}, [xi, outer, n, inner](TensorImpl& self) {
        if (!detail::wants_grad(*xi)) return;
        auto& g = detail::ensure_grad(*xi);
        for (size_t o = 0; o < outer; ++o)
            for (size_t in = 0; in < inner; ++in) {
                const size_t base = o * n * inner + in;
                double dot = 0.0;
                for (size_t i = 0; i < n; ++i) {
                    const size_t k = base + i * inner;
                    dot += static_cast<double>(self.grad[k]) * self.data[k];
                }
                for (size_t i = 0; i < n; ++i) {
                    const size_t k = base + i * inner;
                    g[k] += self.data[k] * (self.grad[k] - static_cast<float>(dot));
                }
            }
    });
}

enum class ReduceOp { sum, mean, max };

inline Tensor reduce(ReduceOp op, const Tensor& x, std::optional<int> axis = std::nullopt) {
    if (axis) {
        if (*axis < 0 || *axis >= x.ndim())
            throw ShapeError("reduce axis " + std::to_string(*axis) + " out of range for " +
                             shape_str(x.shape()));
        size_t outer, n, inner;
        detail::axis_split(x.shape(), *axis, outer, n, inner);
        Shape out_shape;
        for (int d = 0; d < x.ndim(); ++d)
            if (d != *axis) out_shape.push_back(x.shape()[d]);
        std::vector<float> out(outer * inner);
        std::vector<int> arg;
        if (op == ReduceOp::max) arg.resize(outer * inner);
        const float* src = x.data();
        for (size_t o = 0; o < outer; ++o)
            for (size_t in = 0; in < inner; ++in) {
                const size_t base = o * n * inner + in;
                if (op == ReduceOp::max) {
                    float best = src[base];
                    int best_i = 0;
                    for (size_t i = 1; i < n; ++i)
                        if (src[base + i * inner] > best) {
                            best = src[base + i * inner];
                            best_i = static_cast<int>(i);
                        }
                    out[o * inner + in] = best;
                    arg[o * inner + in] = best_i;
                } else {
                    double acc = 0.0;
                    for (size_t i = 0; i < n; ++i) acc += src[base + i * inner];
                    if (op == ReduceOp::mean) acc /= static_cast<double>(n);
                    out[o * inner + in] = static_cast<float>(acc);
                }
            }
        auto xi = x.impl();
        return detail::make_op(
            std::move(out_shape), std::move(out), {x},
            [xi, outer, n, inner, op, arg](TensorImpl& self) {
                if (!detail::wants_grad(*xi)) return;
                auto& g = detail::ensure_grad(*xi);
                const float scale = op == ReduceOp::mean ? 1.f / static_cast<float>(n) : 1.f;
                for (size_t o = 0; o < outer; ++o)
                    for (size_t in = 0; in < inner; ++in) {
                        const float go = self.grad[o * inner + in];
                        const size_t base = o * n * inner + in;
                        if (op == ReduceOp::max) {
                            g[base + static_cast<size_t>(arg[o * inner + in]) * inner] += go;
                        } else {
                            for (size_t i = 0; i < n; ++i) g[base + i * inner] += go * scale;
                        }
                    }
            });
    }

    // full reduction to a rank-0 scalar
    const size_t n = static_cast<size_t>(x.numel());
    const float* src = x.data();
    float value;
    int arg = 0;
    if (op == ReduceOp::max) {
        float best = src[0];
        for (size_t i = 1; i < n; ++i)
            if (src[i] > best) {
                best = src[i];
                arg = static_cast<int>(i);
            }
        value = best;
    } else {
        double acc = 0.0;
        for (size_t i = 0; i < n; ++i) acc += src[i];
        if (op == ReduceOp::mean) acc /= static_cast<double>(n);
        value = static_cast<float>(acc);
    }
    auto xi = x.impl();
    return detail::make_op({}, {value}, {x}, [xi, n, op, arg](TensorImpl& self) {
        if (!detail::wants_grad(*xi)) return;
        auto& g = detail::ensure_grad(*xi);
        const float go = self.grad[0];
        if (op == ReduceOp::max) {
            g[static_cast<size_t>(arg)] += go;
        } else {
            const float scale = op == ReduceOp::mean ? 1.f / static_cast<float>(n) : 1.f;
            for (size_t i = 0; i < n; ++i) g[i] += go * scale;
        }
    });
}

inline Tensor sum(const Tensor& x) { return reduce(ReduceOp::sum, x); }
inline Tensor mean(const Tensor& x) { return reduce(ReduceOp::mean, x); }

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.numel())
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    auto xi = x.impl();
    return detail::make_op(std::move(shape), x.vec(), {x}, [xi](TensorImpl& self) {
        if (!detail::wants_grad(*xi)) return;
        auto& g = detail::ensure_grad(*xi);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of nothing");
    const Shape& s0 = parts[0].shape();
    if (axis < 0 || axis >= static_cast<int>(s0.size())) throw ShapeError("concat axis out of range");
    int total_axis = 0;
    for (const auto& p : parts) {
        if (p.ndim() != static_cast<int>(s0.size())) throw ShapeError("concat rank mismatch");
        for (int d = 0; d < p.ndim(); ++d)
            if (d != axis && p.shape()[d] != s0[d])
                throw ShapeError("concat extent mismatch at dim " + std::to_string(d));
        total_axis += p.shape()[axis];
    }
    Shape out_shape = s0;
    out_shape[axis] = total_axis;
    size_t outer, n_out, inner;
    detail::axis_split(out_shape, axis, outer, n_out, inner);
    std::vector<float> out(static_cast<size_t>(numel(out_shape)));
    size_t offset = 0;
    for (const auto& p : parts) {
        const size_t np = static_cast<size_t>(p.shape()[axis]);
        const float* src = p.data();
        for (size_t o = 0; o < outer; ++o)
            std::memcpy(&out[(o * n_out + offset) * inner], &src[o * np * inner],
                        np * inner * sizeof(float));
        offset += np;
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = out_shape;
    impl->data = std::move(out);
    if (detail::grad_mode()) {
        bool rg = false;
        for (const auto& p : parts) rg = rg || p.impl()->requires_grad;
        if (rg) {
            impl->requires_grad = true;
            std::vector<std::shared_ptr<TensorImpl>> srcs;
            for (const auto& p : parts) {
                impl->parents.push_back(p.impl());
                srcs.push_back(p.impl());
            }
            impl->backward_fn = [srcs, outer, n_out, inner, axis](TensorImpl& self) {
                size_t offset = 0;
                for (const auto& si : srcs) {
                    const size_t np = static_cast<size_t>(si->shape[axis]);
                    if (detail::wants_grad(*si)) {
                        auto& g = detail::ensure_grad(*si);
                        for (size_t o = 0; o < outer; ++o) {
                            const float* gsrc = &self.grad[(o * n_out + offset) * inner];
                            float* gdst = &g[o * np * inner];
                            for (size_t i = 0; i < np * inner; ++i) gdst[i] += gsrc[i];
                        }
                    }
                    offset += np;
                }
            };
        }
    }
    return Tensor(impl);
}

// Index along the leading axis, dropping it.
inline Tensor select0(const Tensor& x, int index) {
    if (x.ndim() < 1 || index < 0 || index >= x.shape()[0]) throw ShapeError("select0 out of range");
    Shape out_shape(x.shape().begin() + 1, x.shape().end());
    const size_t block = static_cast<size_t>(numel(out_shape));
    std::vector<float> out(x.data() + block * index, x.data() + block * (index + 1));
    auto xi = x.impl();
    return detail::make_op(std::move(out_shape), std::move(out), {x}, [xi, index, block](TensorImpl& self) {
        if (!detail::wants_grad(*xi)) return;
        auto& g = detail::ensure_grad(*xi);
        for (size_t i = 0; i < block; ++i) g[block * static_cast<size_t>(index) + i] += self.grad[i];
    });
}

inline Tensor stack0(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("stack0 of nothing");
    Shape part_shape = parts[0].shape();
    Shape out_shape;
    out_shape.push_back(static_cast<int>(parts.size()));
    out_shape.insert(out_shape.end(), part_shape.begin(), part_shape.end());
    const size_t block = static_cast<size_t>(numel(part_shape));
    std::vector<float> out;
    out.reserve(block * parts.size());
    for (const auto& p : parts) {
        if (p.shape() != part_shape) throw ShapeError("stack0 shape mismatch");
        out.insert(out.end(), p.data(), p.data() + block);
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(out_shape);
    impl->data = std::move(out);
    if (detail::grad_mode()) {
        bool rg = false;
        for (const auto& p : parts) rg = rg || p.impl()->requires_grad;
        if (rg) {
            impl->requires_grad = true;
            std::vector<std::shared_ptr<TensorImpl>> srcs;
            for (const auto& p : parts) {
                impl->parents.push_back(p.impl());
                srcs.push_back(p.impl());
            }
            impl->backward_fn = [srcs, block](TensorImpl& self) {
                for (size_t k = 0; k < srcs.size(); ++k) {
                    if (!detail::wants_grad(*srcs[k])) continue;
                    auto& g = detail::ensure_grad(*srcs[k]);
                    const float* gs = &self.grad[k * block];
                    for (size_t i = 0; i < block; ++i) g[i] += gs[i];
                }
            };
        }
    }
    return Tensor(impl);
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation, zero padding) via im2col + GEMM
// ---------------------------------------------------------------------------

enum class Padding { same, valid };

namespace detail {

struct ConvGeom {
    int B, C, H, W, O, kh, kw, stride, ph, pw, out_h, out_w;
};

inline ConvGeom conv_geometry(const Shape& xs, const Shape& ws, int stride, Padding pad) {
    if (xs.size() != 4 || ws.size() != 4) throw ShapeError("conv2d expects rank-4 input and kernel");
    ConvGeom g;
    g.B = xs[0];
    g.C = xs[1];
    g.H = xs[2];
    g.W = xs[3];
    g.O = ws[0];
    g.kh = ws[2];
    g.kw = ws[3];
    if (ws[1] != g.C)
        throw ShapeError("conv2d channel mismatch: input " + shape_str(xs) + " kernel " +
                         shape_str(ws));
    if (g.kh % 2 == 0 || g.kw % 2 == 0) throw ShapeError("conv2d kernel extents must be odd");
    if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
    g.stride = stride;
    g.ph = pad == Padding::same ? (g.kh - 1) / 2 : 0;
    g.pw = pad == Padding::same ? (g.kw - 1) / 2 : 0;
    g.out_h = (g.H + 2 * g.ph - g.kh) / stride + 1;
    g.out_w = (g.W + 2 * g.pw - g.kw) / stride + 1;
    if (g.out_h < 1 || g.out_w < 1) throw ShapeError("conv2d output would be empty");
    return g;
}

inline void im2col(const float* x, const ConvGeom& g, float* col) {
    // col is [C*kh*kw, out_h*out_w] row-major for one batch element
    const int ohw = g.out_h * g.out_w;
    for (int c = 0; c < g.C; ++c)
        for (int ky = 0; ky < g.kh; ++ky)
            for (int kx = 0; kx < g.kw; ++kx) {
                float* dst = col + (static_cast<size_t>(c) * g.kh * g.kw + ky * g.kw + kx) * ohw;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.ph + ky;
                    if (iy < 0 || iy >= g.H) {
                        std::fill(dst, dst + g.out_w, 0.f);
                        dst += g.out_w;
                        continue;
                    }
                    const float* row = x + (static_cast<size_t>(c) * g.H + iy) * g.W;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pw + kx;
                        *dst++ = (ix < 0 || ix >= g.W) ? 0.f : row[ix];
                    }
                }
            }
}

inline void col2im_accum(const float* col, const ConvGeom& g, float* gx) {
    const int ohw = g.out_h * g.out_w;
    for (int c = 0; c < g.C; ++c)
        for (int ky = 0; ky < g.kh; ++ky)
            for (int kx = 0; kx < g.kw; ++kx) {
                const float* src = col + (static_cast<size_t>(c) * g.kh * g.kw + ky * g.kw + kx) * ohw;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.ph + ky;
                    if (iy < 0 || iy >= g.H) {
                        src += g.out_w;
                        continue;
                    }
                    float* row = gx + (static_cast<size_t>(c) * g.H + iy) * g.W;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pw + kx;
                        if (ix >= 0 && ix < g.W) row[ix] += src[ox];
                    }
                    src += g.out_w;
                }
            }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride = 1, Padding pad = Padding::same) {
    const auto g = detail::conv_geometry(x.shape(), w.shape(), stride, pad);
    const int ck = g.C * g.kh * g.kw;
    const int ohw = g.out_h * g.out_w;
    std::vector<float> out(static_cast<size_t>(g.B) * g.O * ohw);
    std::vector<float> col(static_cast<size_t>(ck) * ohw);
    detail::CMapMat W(w.data(), g.O, ck);
    for (int b = 0; b < g.B; ++b) {
        detail::im2col(x.data() + static_cast<size_t>(b) * g.C * g.H * g.W, g, col.data());
        detail::CMapMat Col(col.data(), ck, ohw);
        detail::MapMat Out(out.data() + static_cast<size_t>(b) * g.O * ohw, g.O, ohw);
        Out.noalias() = W * Col;
    }
    auto xi = x.impl();
    auto wi = w.impl();
    return detail::make_op({g.B, g.O, g.out_h, g.out_w}, std::move(out), {x, w},
                           [xi, wi, g, ck, ohw](TensorImpl& self) {
                               const bool gx = detail::wants_grad(*xi);
                               const bool gw = detail::wants_grad(*wi);
                               if (!gx && !gw) return;
                               if (gx) detail::ensure_grad(*xi);
                               if (gw) detail::ensure_grad(*wi);
                               std::vector<float> col(static_cast<size_t>(ck) * ohw);
                               std::vector<float> dcol(static_cast<size_t>(ck) * ohw);
                               detail::CMapMat W(wi->data.data(), g.O, ck);
                               for (int b = 0; b < g.B; ++b) {
                                   detail::CMapMat G(self.grad.data() + static_cast<size_t>(b) * g.O * ohw,
                                                     g.O, ohw);
                                   if (gw) {
                                       detail::im2col(
                                           xi->data.data() + static_cast<size_t>(b) * g.C * g.H * g.W, g,
                                           col.data());
                                       detail::CMapMat Col(col.data(), ck, ohw);
                                       detail::MapMat dW(wi->grad.data(), g.O, ck);
                                       dW.noalias() += G * Col.transpose();
                                   }
                                   if (gx) {
                                       detail::MapMat dCol(dcol.data(), ck, ohw);
                                       dCol.noalias() = W.transpose() * G;
                                       detail::col2im_accum(
                                           dcol.data(), g,
                                           xi->grad.data() + static_cast<size_t>(b) * g.C * g.H * g.W);
                                   }
                               }
                           });
}

// ---------------------------------------------------------------------------
// bilinear interpolation resize (rank-4, resizes the trailing two dims)
// ---------------------------------------------------------------------------

inline Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w) {
    if (x.ndim() != 4) throw ShapeError("upsample_bilinear expects rank-4");
    if (out_h < 1 || out_w < 1) throw ShapeError("upsample_bilinear target must be positive");
    const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const double sy = static_cast<double>(H) / out_h;
    const double sx = static_cast<double>(W) / out_w;
    // precompute per-row/col source offsets and weights
    std::vector<int> y0(out_h), y1(out_h), x0(out_w), x1(out_w);
    std::vector<float> fy(out_h), fx(out_w);
    for (int oy = 0; oy < out_h; ++oy) {
        double s = std::clamp((oy + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
        y0[oy] = static_cast<int>(s);
        y1[oy] = std::min(y0[oy] + 1, H - 1);
        fy[oy] = static_cast<float>(s - y0[oy]);
    }
    for (int ox = 0; ox < out_w; ++ox) {
        double s = std::clamp((ox + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
        x0[ox] = static_cast<int>(s);
        x1[ox] = std::min(x0[ox] + 1, W - 1);
        fx[ox] = static_cast<float>(s - x0[ox]);
    }
    std::vector<float> out(static_cast<size_t>(B) * C * out_h * out_w);
    const float* src = x.data();
    size_t o = 0;
    for (int bc = 0; bc < B * C; ++bc) {
        const float* plane = src + static_cast<size_t>(bc) * H * W;
        for (int oy = 0; oy < out_h; ++oy)
            for (int ox = 0; ox < out_w; ++ox) {
                const float a = plane[y0[oy] * W + x0[ox]], b = plane[y0[oy] * W + x1[ox]];
                const float c = plane[y1[oy] * W + x0[ox]], d = plane[y1[oy] * W + x1[ox]];
                out[o++] = (a * (1 - fx[ox]) + b * fx[ox]) * (1 - fy[oy]) +
                           (c * (1 - fx[ox]) + d * fx[ox]) * fy[oy];
            }
    }
    auto xi = x.impl();
    return detail::make_op(
        {B, C, out_h, out_w}, std::move(out), {x},
        [xi, B, C, H, W, out_h, out_w, y0, y1, x0, x1, fy, fx](TensorImpl& self) {
            if (!detail::wants_grad(*xi)) return;
            auto& g = detail::ensure_grad(*xi);
            size_t o = 0;
            for (int bc = 0; bc < B * C; ++bc) {
                float* plane = g.data() + static_cast<size_t>(bc) * H * W;
                for (int oy = 0; oy < out_h; ++oy)
                    for (int ox = 0; ox < out_w; ++ox) {
                        const float go = self.grad[o++];
                        plane[y0[oy] * W + x0[ox]] += go * (1 - fx[ox]) * (1 - fy[oy]);
                        plane[y0[oy] * W + x1[ox]] += go * fx[ox] * (1 - fy[oy]);
                        plane[y1[oy] * W + x0[ox]] += go * (1 - fx[ox]) * fy[oy];
                        plane[y1[oy] * W + x1[ox]] += go * fx[ox] * fy[oy];
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// backward pass
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
    auto root = loss.impl();
    if (!root) throw GraphConsumedError("backward on an empty tensor");
    if (numel(root->shape) != 1)
        throw ShapeError("backward needs a scalar loss, got " + shape_str(root->shape));
    if (!root->requires_grad) throw GraphConsumedError("loss is not part of a live graph");

    // DFS postorder over parent edges; reverse postorder = backward schedule.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (node->consumed)
            throw GraphConsumedError("graph already consumed by a previous backward");
        if (next < node->parents.size()) {
            TensorImpl* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad.assign(1, 1.f);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    // release saved activations; leaves keep their gradients
    for (TensorImpl* node : order) {
        if (node->is_leaf()) continue;
        node->consumed = true;
        node->backward_fn = nullptr;
        node->parents.clear();
        node->grad.clear();
    }
}

// ---------------------------------------------------------------------------
// random fills
// ---------------------------------------------------------------------------

inline Tensor randn(Shape shape, Rng& rng) {
    std::vector<float> v(static_cast<size_t>(numel(shape)));
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return Tensor::from(std::move(shape), std::move(v));
}

inline Tensor rand_uniform(Shape shape, Rng& rng, float lo = 0.f, float hi = 1.f) {
    std::vector<float> v(static_cast<size_t>(numel(shape)));
    for (auto& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace d2vr
