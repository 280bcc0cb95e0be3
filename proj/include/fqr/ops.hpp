// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "fqr/array.hpp"

namespace fqr {

namespace detail {

inline void require(bool cond, const char* op, const std::string& msg) {
    if (!cond) throw ShapeError(std::string(op) + ": " + msg);
}

inline void require_same_shape(const char* op, const Array& a, const Array& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
    }
}

// C[M,N] += A[M,K] * B[K,N], all row-major contiguous.
inline void gemm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
inline void gemm_nt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        double* crow = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
inline void gemm_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const double* arow = a + static_cast<std::size_t>(p) * m;
        const double* brow = b + static_cast<std::size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename Fwd, typename Bwd>
Array unary_op(const char* op, const Array& x, Fwd fwd, Bwd dfdx) {
    check_finite(op, x);
    const int n = x.numel();
    Array y = Array::zeros(x.shape());
    auto xd = x.data();
    auto yd = y.mutable_data();
    for (int i = 0; i < n; ++i) yd[i] = fwd(xd[i]);
    record(op, {x}, y, [xs = x.impl(), ys = y.impl(), dfdx]() {
        if (!wants_grad(xs)) return;
        const std::size_t n = xs->data.size();
        for (std::size_t i = 0; i < n; ++i) {
            xs->grad[i] += dfdx(xs->data[i], ys->data[i]) * ys->grad[i];
        }
    });
    return y;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (same shape only; scalar broadcasting has its own ops)
// ---------------------------------------------------------------------------

inline Array add(const Array& a, const Array& b) {
    detail::require_same_shape("add", a, b);
    detail::check_finite("add", a);
    detail::check_finite("add", b);
    Array y = Array::zeros(a.shape());
    auto ad = a.data(), bd = b.data();
    auto yd = y.mutable_data();
    for (int i = 0; i < a.numel(); ++i) yd[i] = ad[i] + bd[i];
    detail::record("add", {a, b}, y, [as = a.impl(), bs = b.impl(), ys = y.impl()]() {
        const std::size_t n = ys->data.size();
        if (detail::wants_grad(as))
            for (std::size_t i = 0; i < n; ++i) as->grad[i] += ys->grad[i];
        if (detail::wants_grad(bs))
            for (std::size_t i = 0; i < n; ++i) bs->grad[i] += ys->grad[i];
    });
    return y;
}

inline Array sub(const Array& a, const Array& b) {
    detail::require_same_shape("sub", a, b);
    detail::check_finite("sub", a);
    detail::check_finite("sub", b);
    Array y = Array::zeros(a.shape());
    auto ad = a.data(), bd = b.data();
    auto yd = y.mutable_data();
    for (int i = 0; i < a.numel(); ++i) yd[i] = ad[i] - bd[i];
    detail::record("sub", {a, b}, y, [as = a.impl(), bs = b.impl(), ys = y.impl()]() {
        const std::size_t n = ys->data.size();
        if (detail::wants_grad(as))
            for (std::size_t i = 0; i < n; ++i) as->grad[i] += ys->grad[i];
        if (detail::wants_grad(bs))
            for (std::size_t i = 0; i < n; ++i) bs->grad[i] -= ys->grad[i];
    });
    return y;
}

inline Array mul(const Array& a, const Array& b) {
    detail::require_same_shape("mul", a, b);
    detail::check_finite("mul", a);
    detail::check_finite("mul", b);
    Array y = Array::zeros(a.shape());
    auto ad = a.data(), bd = b.data();
    auto yd = y.mutable_data();
    for (int i = 0; i < a.numel(); ++i) yd[i] = ad[i] * bd[i];
    detail::record("mul", {a, b}, y, [as = a.impl(), bs = b.impl(), ys = y.impl()]() {
        const std::size_t n = ys->data.size();
        if (detail::wants_grad(as))
            for (std::size_t i = 0; i < n; ++i) as->grad[i] += bs->data[i] * ys->grad[i];
        if (detail::wants_grad(bs))
            for (std::size_t i = 0; i < n; ++i) bs->grad[i] += as->data[i] * ys->grad[i];
    });
    return y;
}

inline Array div(const Array& a, const Array& b) {
    detail::require_same_shape("div", a, b);
    detail::check_finite("div", a);
    detail::check_finite("div", b);
    Array y = Array::zeros(a.shape());
    auto ad = a.data(), bd = b.data();
    auto yd = y.mutable_data();
    for (int i = 0; i < a.numel(); ++i) yd[i] = ad[i] / bd[i];
    detail::record("div", {a, b}, y, [as = a.impl(), bs = b.impl(), ys = y.impl()]() {
        const std::size_t n = ys->data.size();
        if (detail::wants_grad(as))
            for (std::size_t i = 0; i < n; ++i) as->grad[i] += ys->grad[i] / bs->data[i];
        if (detail::wants_grad(bs))
            for (std::size_t i = 0; i < n; ++i)
                bs->grad[i] -= ys->grad[i] * as->data[i] / (bs->data[i] * bs->data[i]);
    });
    return y;
}

// Ties route the gradient to the first argument.
inline Array maximum(const Array& a, const Array& b) {
    detail::require_same_shape("maximum", a, b);
    Array y = Array::zeros(a.shape());
    auto ad = a.data(), bd = b.data();
    auto yd = y.mutable_data();
    for (int i = 0; i < a.numel(); ++i) yd[i] = ad[i] >= bd[i] ? ad[i] : bd[i];
    detail::record("maximum", {a, b}, y, [as = a.impl(), bs = b.impl(), ys = y.impl()]() {
        const std::size_t n = ys->data.size();
        for (std::size_t i = 0; i < n; ++i) {
            if (as->data[i] >= bs->data[i]) {
                if (detail::wants_grad(as)) as->grad[i] += ys->grad[i];
            } else if (detail::wants_grad(bs)) {
                bs->grad[i] += ys->grad[i];
            }
        }
    });
    return y;
}

inline Array minimum(const Array& a, const Array& b) {
    detail::require_same_shape("minimum", a, b);
    Array y = Array::zeros(a.shape());
    auto ad = a.data(), bd = b.data();
    auto yd = y.mutable_data();
    for (int i = 0; i < a.numel(); ++i) yd[i] = ad[i] <= bd[i] ? ad[i] : bd[i];
    detail::record("minimum", {a, b}, y, [as = a.impl(), bs = b.impl(), ys = y.impl()]() {
        const std::size_t n = ys->data.size();
        for (std::size_t i = 0; i < n; ++i) {
            if (as->data[i] <= bs->data[i]) {
                if (detail::wants_grad(as)) as->grad[i] += ys->grad[i];
            } else if (detail::wants_grad(bs)) {
                bs->grad[i] += ys->grad[i];
            }
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// Scalar-with-array ops
// ---------------------------------------------------------------------------

inline Array add_scalar(const Array& x, double c) {
    return detail::unary_op("add_scalar", x,
                            [c](double v) { return v + c; },
                            [](double, double) { return 1.0; });
}

inline Array mul_scalar(const Array& x, double c) {
    return detail::unary_op("mul_scalar", x,
                            [c](double v) { return v * c; },
                            [c](double, double) { return c; });
}

inline Array neg(const Array& x) { return mul_scalar(x, -1.0); }

// x^c with constant exponent; x must be positive unless c is a nonnegative integer.
inline Array pow_scalar(const Array& x, double c) {
    return detail::unary_op("pow_scalar", x,
                            [c](double v) { return std::pow(v, c); },
                            [c](double v, double) { return c * std::pow(v, c - 1.0); });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

inline Array relu(const Array& x) {
    return detail::unary_op("relu", x,
                            [](double v) { return v > 0.0 ? v : 0.0; },
                            [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Array absolute(const Array& x) {
    return detail::unary_op("abs", x,
                            [](double v) { return std::fabs(v); },
                            [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Array sigmoid(const Array& x) {
    return detail::unary_op("sigmoid", x,
                            [](double v) {
                                if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
                                double e = std::exp(v);
                                return e / (1.0 + e);
                            },
                            [](double, double y) { return y * (1.0 - y); });
}

inline Array exp_op(const Array& x) {
    return detail::unary_op("exp", x,
                            [](double v) { return std::exp(v); },
                            [](double, double y) { return y; });
}

inline Array log_op(const Array& x) {
    return detail::unary_op("log", x,
                            [](double v) { return std::log(v); },
                            [](double v, double) { return 1.0 / v; });
}

// Gradient passes only where lo <= x <= hi (clipped elements get zero grad).
inline Array clamp(const Array& x, double lo, double hi) {
    detail::require(lo <= hi, "clamp", "lo > hi");
    return detail::unary_op("clamp", x,
                            [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
                            [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Softmax / reductions
// ---------------------------------------------------------------------------

inline Array softmax(const Array& x, int axis) {
    detail::check_finite("softmax", x);
    const int r = x.rank();
    if (axis < 0) axis += r;
    detail::require(axis >= 0 && axis < r, "softmax",
                    "axis out of range for " + shape_str(x.shape()));
    int outer = 1, inner = 1;
    const int extent = x.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);

    Array y = Array::zeros(x.shape());
    auto xd = x.data();
    auto yd = y.mutable_data();
    for (int o = 0; o < outer; ++o) {
        for (int in = 0; in < inner; ++in) {
            const std::size_t base = static_cast<std::size_t>(o) * extent * inner + in;
            double mx = -1e300;
            for (int k = 0; k < extent; ++k) mx = std::max(mx, xd[base + static_cast<std::size_t>(k) * inner]);
            double sum = 0.0;
            for (int k = 0; k < extent; ++k) {
                double e = std::exp(xd[base + static_cast<std::size_t>(k) * inner] - mx);
                yd[base + static_cast<std::size_t>(k) * inner] = e;
                sum += e;
            }
            for (int k = 0; k < extent; ++k) yd[base + static_cast<std::size_t>(k) * inner] /= sum;
        }
    }
    detail::record("softmax", {x}, y,
                   [xs = x.impl(), ys = y.impl(), outer, inner, extent]() {
                       if (!detail::wants_grad(xs)) return;
                       for (int o = 0; o < outer; ++o) {
                           for (int in = 0; in < inner; ++in) {
                               const std::size_t base =
                                   static_cast<std::size_t>(o) * extent * inner + in;
                               double dot = 0.0;
                               for (int k = 0; k < extent; ++k) {
                                   const std::size_t idx = base + static_cast<std::size_t>(k) * inner;
                                   dot += ys->grad[idx] * ys->data[idx];
                               }
                               for (int k = 0; k < extent; ++k) {
                                   const std::size_t idx = base + static_cast<std::size_t>(k) * inner;
                                   xs->grad[idx] += ys->data[idx] * (ys->grad[idx] - dot);
                               }
                           }
                       }
                   });
    return y;
}

inline Array sum_all(const Array& x) {
    detail::check_finite("sum", x);
    double s = 0.0;
    for (double v : x.data()) s += v;
    Array y = Array::scalar(s);
    detail::record("sum", {x}, y, [xs = x.impl(), ys = y.impl()]() {
        if (!detail::wants_grad(xs)) return;
        const double g = ys->grad[0];
        for (double& gv : xs->grad) gv += g;
    });
    return y;
}

inline Array mean_all(const Array& x) {
    detail::check_finite("mean", x);
    const double inv = 1.0 / static_cast<double>(x.numel());
    double s = 0.0;
    for (double v : x.data()) s += v;
    Array y = Array::scalar(s * inv);
    detail::record("mean", {x}, y, [xs = x.impl(), ys = y.impl(), inv]() {
        if (!detail::wants_grad(xs)) return;
        const double g = ys->grad[0] * inv;
        for (double& gv : xs->grad) gv += g;
    });
    return y;
}

// Sum over the last axis; rank-1 input reduces to a scalar of shape [1].
inline Array sum_last(const Array& x) {
    detail::check_finite("sum_last", x);
    const int r = x.rank();
    const int d = x.dim(r - 1);
    Shape out_shape;
    if (r == 1) {
        out_shape = {1};
    } else {
        out_shape.assign(x.shape().begin(), x.shape().end() - 1);
    }
    const int rows = static_cast<int>(shape_numel(out_shape));
    Array y = Array::zeros(out_shape);
    auto xd = x.data();
    auto yd = y.mutable_data();
    for (int i = 0; i < rows; ++i) {
        double s = 0.0;
        const std::size_t base = static_cast<std::size_t>(i) * d;
        for (int k = 0; k < d; ++k) s += xd[base + k];
        yd[i] = s;
    }
    detail::record("sum_last", {x}, y, [xs = x.impl(), ys = y.impl(), rows, d]() {
        if (!detail::wants_grad(xs)) return;
        for (int i = 0; i < rows; ++i) {
            const double g = ys->grad[i];
            const std::size_t base = static_cast<std::size_t>(i) * d;
            for (int k = 0; k < d; ++k) xs->grad[base + k] += g;
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Array matmul(const Array& a, const Array& b) {
    detail::require(a.rank() == 2 && b.rank() == 2, "matmul",
                    "expects rank-2 inputs, got " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
    detail::require(a.dim(1) == b.dim(0), "matmul",
                    "inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    detail::check_finite("matmul", a);
    detail::check_finite("matmul", b);
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Array y = Array::zeros({m, n});
    detail::gemm_acc(a.data().data(), b.data().data(), y.mutable_data().data(), m, k, n);
    detail::record("matmul", {a, b}, y, [as = a.impl(), bs = b.impl(), ys = y.impl(), m, k, n]() {
        if (detail::wants_grad(as))
            detail::gemm_nt_acc(ys->grad.data(), bs->data.data(), as->grad.data(), m, n, k);
        if (detail::wants_grad(bs))
            detail::gemm_tn_acc(as->data.data(), ys->grad.data(), bs->grad.data(), k, m, n);
    });
    return y;
}

inline Array bmm(const Array& a, const Array& b) {
    detail::require(a.rank() == 3 && b.rank() == 3, "bmm",
                    "expects rank-3 inputs, got " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
    detail::require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1), "bmm",
                    "incompatible: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    detail::check_finite("bmm", a);
    detail::check_finite("bmm", b);
    const int bt = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Array y = Array::zeros({bt, m, n});
    for (int t = 0; t < bt; ++t) {
        detail::gemm_acc(a.data().data() + static_cast<std::size_t>(t) * m * k,
                         b.data().data() + static_cast<std::size_t>(t) * k * n,
                         y.mutable_data().data() + static_cast<std::size_t>(t) * m * n, m, k, n);
    }
    detail::record("bmm", {a, b}, y, [as = a.impl(), bs = b.impl(), ys = y.impl(), bt, m, k, n]() {
        for (int t = 0; t < bt; ++t) {
            const std::size_t ao = static_cast<std::size_t>(t) * m * k;
            const std::size_t bo = static_cast<std::size_t>(t) * k * n;
            const std::size_t yo = static_cast<std::size_t>(t) * m * n;
            if (detail::wants_grad(as))
                detail::gemm_nt_acc(ys->grad.data() + yo, bs->data.data() + bo,
                                    as->grad.data() + ao, m, n, k);
            if (detail::wants_grad(bs))
                detail::gemm_tn_acc(as->data.data() + ao, ys->grad.data() + yo,
                                    bs->grad.data() + bo, k, m, n);
        }
    });
    return y;
}

// Broadcast-add a row vector v[N] to every row of x[..., N].
inline Array add_rowvec(const Array& x, const Array& v) {
    detail::require(v.rank() == 1, "add_rowvec", "vector must be rank 1");
    const int d = v.dim(0);
    detail::require(x.dim(x.rank() - 1) == d, "add_rowvec",
                    "last dim of " + shape_str(x.shape()) + " != " + shape_str(v.shape()));
    const int rows = x.numel() / d;
    Array y = Array::zeros(x.shape());
    auto xd = x.data();
    auto vd = v.data();
    auto yd = y.mutable_data();
    for (int i = 0; i < rows; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) yd[base + j] = xd[base + j] + vd[j];
    }
    detail::record("add_rowvec", {x, v}, y,
                   [xs = x.impl(), vs = v.impl(), ys = y.impl(), rows, d]() {
                       if (detail::wants_grad(xs)) {
                           const std::size_t n = ys->data.size();
                           for (std::size_t i = 0; i < n; ++i) xs->grad[i] += ys->grad[i];
                       }
                       if (detail::wants_grad(vs)) {
                           for (int i = 0; i < rows; ++i) {
                               const std::size_t base = static_cast<std::size_t>(i) * d;
                               for (int j = 0; j < d; ++j) vs->grad[j] += ys->grad[base + j];
                           }
                       }
                   });
    return y;
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

inline Array reshape(const Array& x, Shape new_shape) {
    detail::require(shape_numel(new_shape) == x.numel(), "reshape",
                    shape_str(x.shape()) + " -> " + shape_str(new_shape) + " changes element count");
    Array y = Array::from(std::move(new_shape), std::vector<double>(x.data().begin(), x.data().end()));
    detail::record("reshape", {x}, y, [xs = x.impl(), ys = y.impl()]() {
        if (!detail::wants_grad(xs)) return;
        const std::size_t n = ys->data.size();
        for (std::size_t i = 0; i < n; ++i) xs->grad[i] += ys->grad[i];
    });
    return y;
}

inline Array transpose(const Array& x, const std::vector<int>& perm) {
    const int r = x.rank();
    detail::require(static_cast<int>(perm.size()) == r, "transpose", "perm rank mismatch");
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    for (int p : perm) {
        detail::require(p >= 0 && p < r && !seen[static_cast<std::size_t>(p)], "transpose",
                        "invalid permutation");
        seen[static_cast<std::size_t>(p)] = true;
    }
    Shape out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = x.dim(perm[static_cast<std::size_t>(i)]);

    std::vector<std::size_t> in_strides(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        in_strides[static_cast<std::size_t>(i)] =
            in_strides[static_cast<std::size_t>(i + 1)] * static_cast<std::size_t>(x.dim(i + 1));

    // For each output position, the source stride per output axis.
    std::vector<std::size_t> src_strides(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i)
        src_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

    const int n = x.numel();
    std::vector<std::size_t> mapping(static_cast<std::size_t>(n));
    {
        std::vector<int> idx(static_cast<std::size_t>(r), 0);
        for (int flat = 0; flat < n; ++flat) {
            std::size_t src = 0;
            for (int i = 0; i < r; ++i)
                src += static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * src_strides[static_cast<std::size_t>(i)];
            mapping[static_cast<std::size_t>(flat)] = src;
            for (int i = r - 1; i >= 0; --i) {
                if (++idx[static_cast<std::size_t>(i)] < out_shape[static_cast<std::size_t>(i)]) break;
                idx[static_cast<std::size_t>(i)] = 0;
            }
        }
    }
    Array y = Array::zeros(out_shape);
    auto xd = x.data();
    auto yd = y.mutable_data();
    for (int i = 0; i < n; ++i) yd[i] = xd[mapping[static_cast<std::size_t>(i)]];
    detail::record("transpose", {x}, y,
                   [xs = x.impl(), ys = y.impl(), mapping = std::move(mapping)]() {
                       if (!detail::wants_grad(xs)) return;
                       const std::size_t n = ys->data.size();
                       for (std::size_t i = 0; i < n; ++i) xs->grad[mapping[i]] += ys->grad[i];
                   });
    return y;
}

// Concatenate along axis 0; trailing dims must agree.
inline Array concat0(const std::vector<Array>& parts) {
    detail::require(!parts.empty(), "concat0", "empty input list");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    int total = 0;
    for (const Array& p : parts) {
        Shape t(p.shape().begin() + 1, p.shape().end());
        detail::require(t == tail, "concat0",
                        "trailing dims differ: " + shape_str(parts[0].shape()) + " vs " +
                            shape_str(p.shape()));
        total += p.dim(0);
    }
    Shape out_shape;
    out_shape.push_back(total);
    out_shape.insert(out_shape.end(), tail.begin(), tail.end());
    Array y = Array::zeros(out_shape);
    auto yd = y.mutable_data();
    std::size_t offset = 0;
    for (const Array& p : parts) {
        auto pd = p.data();
        std::copy(pd.begin(), pd.end(), yd.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += pd.size();
    }

    Graph* g = Graph::active();
    bool need = false;
    for (const Array& p : parts)
        if (p.requires_grad()) need = true;
    if (g && need) {
        std::vector<detail::StoragePtr> ins;
        ins.reserve(parts.size());
        for (const Array& p : parts) {
            if (p.requires_grad()) p.impl()->ensure_grad();
            ins.push_back(p.impl());
        }
        y.set_requires_grad(true);
        auto ys = y.impl();
        auto ins_copy = ins;
        g->push("concat0", std::move(ins), y.impl(), [ins = std::move(ins_copy), ys]() {
            std::size_t offset = 0;
            for (const auto& p : ins) {
                const std::size_t n = p->data.size();
                if (detail::wants_grad(p)) {
                    for (std::size_t i = 0; i < n; ++i) p->grad[i] += ys->grad[offset + i];
                }
                offset += n;
            }
        });
    }
    return y;
}

// Gather along axis 0 by an index list; repeated indices accumulate in backward.
inline Array gather_rows(const Array& x, const std::vector<int>& indices) {
    detail::require(x.rank() >= 1, "gather_rows", "needs rank >= 1");
    const int n0 = x.dim(0);
    const int row = x.numel() / n0;
    for (int i : indices)
        detail::require(i >= 0 && i < n0, "gather_rows",
                        "index " + std::to_string(i) + " out of range [0," + std::to_string(n0) + ")");
    Shape out_shape = x.shape();
    out_shape[0] = static_cast<int>(indices.size());
    detail::require(!indices.empty(), "gather_rows", "empty index list");
    Array y = Array::zeros(out_shape);
    auto xd = x.data();
    auto yd = y.mutable_data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const std::size_t src = static_cast<std::size_t>(indices[i]) * row;
        const std::size_t dst = i * row;
        for (int j = 0; j < row; ++j) yd[dst + j] = xd[src + j];
    }
    detail::record("gather_rows", {x}, y,
                   [xs = x.impl(), ys = y.impl(), indices, row]() {
                       if (!detail::wants_grad(xs)) return;
                       for (std::size_t i = 0; i < indices.size(); ++i) {
                           const std::size_t dst = static_cast<std::size_t>(indices[i]) * row;
                           const std::size_t src = i * row;
                           for (int j = 0; j < row; ++j) xs->grad[dst + j] += ys->grad[src + j];
                       }
                   });
    return y;
}

// Column j of a rank-2 array as a rank-1 array.
inline Array select_col(const Array& x, int j) {
    detail::require(x.rank() == 2, "select_col", "needs rank 2, got " + shape_str(x.shape()));
    const int n = x.dim(0), m = x.dim(1);
    detail::require(j >= 0 && j < m, "select_col", "column out of range");
    Array y = Array::zeros({n});
    auto xd = x.data();
    auto yd = y.mutable_data();
    for (int i = 0; i < n; ++i) yd[i] = xd[static_cast<std::size_t>(i) * m + j];
    detail::record("select_col", {x}, y, [xs = x.impl(), ys = y.impl(), n, m, j]() {
        if (!detail::wants_grad(xs)) return;
        for (int i = 0; i < n; ++i) xs->grad[static_cast<std::size_t>(i) * m + j] += ys->grad[i];
    });
    return y;
}

// Stack rank-1 arrays of equal length as columns of an [N, k] array.
inline Array stack_cols(const std::vector<Array>& cols) {
    detail::require(!cols.empty(), "stack_cols", "empty input list");
    std::vector<Array> rows;
    rows.reserve(cols.size());
    for (const Array& c : cols) {
        detail::require(c.rank() == 1, "stack_cols", "inputs must be rank 1");
        rows.push_back(reshape(c, {1, c.dim(0)}));
    }
    return transpose(concat0(rows), {1, 0});
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis
// ---------------------------------------------------------------------------

inline Array layer_norm(const Array& x, const Array& gain, const Array& bias, double eps = 1e-5) {
    const int r = x.rank();
    detail::require(r >= 1, "layer_norm", "needs rank >= 1");
    const int d = x.dim(r - 1);
    detail::require(gain.rank() == 1 && gain.dim(0) == d, "layer_norm",
                    "gain shape " + shape_str(gain.shape()) + " != [" + std::to_string(d) + "]");
    detail::require(bias.rank() == 1 && bias.dim(0) == d, "layer_norm", "bias shape mismatch");
    detail::check_finite("layer_norm", x);
    const int rows = x.numel() / d;

    Array y = Array::zeros(x.shape());
    std::vector<double> inv_sigma(static_cast<std::size_t>(rows));
    std::vector<double> xhat(static_cast<std::size_t>(x.numel()));
    auto xd = x.data();
    auto gd = gain.data();
    auto bd = bias.data();
    auto yd = y.mutable_data();
    for (int i = 0; i < rows; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * d;
        double mean = 0.0;
        for (int k = 0; k < d; ++k) mean += xd[base + k];
        mean /= d;
        double var = 0.0;
        for (int k = 0; k < d; ++k) {
            const double c = xd[base + k] - mean;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_sigma[static_cast<std::size_t>(i)] = inv;
        for (int k = 0; k < d; ++k) {
            const double h = (xd[base + k] - mean) * inv;
            xhat[base + k] = h;
            yd[base + k] = h * gd[k] + bd[k];
        }
    }
    detail::record("layer_norm", {x, gain, bias}, y,
                   [xs = x.impl(), gs = gain.impl(), bs = bias.impl(), ys = y.impl(),
                    inv_sigma = std::move(inv_sigma), xhat = std::move(xhat), rows, d]() {
                       for (int i = 0; i < rows; ++i) {
                           const std::size_t base = static_cast<std::size_t>(i) * d;
                           const double inv = inv_sigma[static_cast<std::size_t>(i)];
                           double mean_u = 0.0, mean_uh = 0.0;
                           for (int k = 0; k < d; ++k) {
                               const double u = ys->grad[base + k] * gs->data[k];
                               mean_u += u;
                               mean_uh += u * xhat[base + k];
                           }
                           mean_u /= d;
                           mean_uh /= d;
                           if (detail::wants_grad(xs)) {
                               for (int k = 0; k < d; ++k) {
                                   const double u = ys->grad[base + k] * gs->data[k];
                                   xs->grad[base + k] += (u - mean_u - xhat[base + k] * mean_uh) * inv;
                               }
                           }
                           if (detail::wants_grad(gs)) {
                               for (int k = 0; k < d; ++k)
                                   gs->grad[k] += ys->grad[base + k] * xhat[base + k];
                           }
                           if (detail::wants_grad(bs)) {
                               for (int k = 0; k < d; ++k) bs->grad[k] += ys->grad[base + k];
                           }
                       }
                   });
    return y;
}

} // namespace fqr
