// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fqr/array.hpp"
#include "fqr/ops.hpp"

namespace fqr {

// 2D convolution on a single image, zero padding.
//   x: [Cin, H, W], w: [Cout, Cin, kh, kw], b: [Cout] or undefined.
// Output spatial extent: (H + 2*pad - kh) / stride + 1 (floored).
// A 3x3 stride-2 pad-1 conv therefore maps H -> ceil(H/2).
inline Array conv2d(const Array& x, const Array& w, const Array& b, int stride = 1, int pad = 0) {
    detail::require(x.rank() == 3, "conv2d", "input must be [C,H,W], got " + shape_str(x.shape()));
    detail::require(w.rank() == 4, "conv2d", "weight must be [Co,Ci,kh,kw], got " + shape_str(w.shape()));
    detail::require(x.dim(0) == w.dim(1), "conv2d",
                    "channel mismatch: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
    detail::require(stride >= 1 && pad >= 0, "conv2d", "bad stride/pad");
    detail::check_finite("conv2d", x);
    detail::check_finite("conv2d", w);
    const int cin = x.dim(0), h = x.dim(1), wdt = x.dim(2);
    const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (wdt + 2 * pad - kw) / stride + 1;
    detail::require(ho >= 1 && wo >= 1, "conv2d",
                    "kernel larger than padded input: " + shape_str(x.shape()));
    if (b.defined()) {
        detail::require(b.rank() == 1 && b.dim(0) == cout, "conv2d",
                        "bias shape " + shape_str(b.shape()) + " != [" + std::to_string(cout) + "]");
    }

    const int krows = cin * kh * kw;
    const int cols = ho * wo;
    std::vector<double> col(static_cast<std::size_t>(krows) * cols, 0.0);
    auto xd = x.data();
    for (int ci = 0; ci < cin; ++ci) {
        const double* xc = xd.data() + static_cast<std::size_t>(ci) * h * wdt;
        for (int u = 0; u < kh; ++u) {
            for (int v = 0; v < kw; ++v) {
                double* crow = col.data() + (static_cast<std::size_t>(ci) * kh * kw +
                                             static_cast<std::size_t>(u) * kw + v) * cols;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride + u - pad;
                    if (iy < 0 || iy >= h) continue;
                    const double* xrow = xc + static_cast<std::size_t>(iy) * wdt;
                    double* cr = crow + static_cast<std::size_t>(oy) * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride + v - pad;
                        if (ix >= 0 && ix < wdt) cr[ox] = xrow[ix];
                    }
                }
            }
        }
    }

    Array y = Array::zeros({cout, ho, wo});
    detail::gemm_acc(w.data().data(), col.data(), y.mutable_data().data(), cout, krows, cols);
    if (b.defined()) {
        auto bd = b.data();
        auto yd = y.mutable_data();
        for (int co = 0; co < cout; ++co) {
            double* yrow = yd.data() + static_cast<std::size_t>(co) * cols;
            for (int i = 0; i < cols; ++i) yrow[i] += bd[co];
        }
    }

    detail::record("conv2d", {x, w, b}, y,
                   [xs = x.impl(), ws = w.impl(), bs = b.defined() ? b.impl() : detail::StoragePtr(),
                    ys = y.impl(), col = std::move(col), cin, h, wdt, cout, kh, kw, ho, wo, stride,
                    pad]() {
                       const int krows = cin * kh * kw;
                       const int cols = ho * wo;
                       if (detail::wants_grad(ws)) {
                           detail::gemm_nt_acc(ys->grad.data(), col.data(), ws->grad.data(), cout,
                                               cols, krows);
                       }
                       if (bs && detail::wants_grad(bs)) {
                           for (int co = 0; co < cout; ++co) {
                               const double* g = ys->grad.data() + static_cast<std::size_t>(co) * cols;
                               double acc = 0.0;
                               for (int i = 0; i < cols; ++i) acc += g[i];
                               bs->grad[static_cast<std::size_t>(co)] += acc;
                           }
                       }
                       if (detail::wants_grad(xs)) {
                           std::vector<double> dcol(static_cast<std::size_t>(krows) * cols, 0.0);
                           detail::gemm_tn_acc(ws->data.data(), ys->grad.data(), dcol.data(), krows,
                                               cout, cols);
                           for (int ci = 0; ci < cin; ++ci) {
                               double* gx = xs->grad.data() + static_cast<std::size_t>(ci) * h * wdt;
                               for (int u = 0; u < kh; ++u) {
                                   for (int v = 0; v < kw; ++v) {
                                       const double* crow =
                                           dcol.data() + (static_cast<std::size_t>(ci) * kh * kw +
                                                          static_cast<std::size_t>(u) * kw + v) * cols;
                                       for (int oy = 0; oy < ho; ++oy) {
                                           const int iy = oy * stride + u - pad;
                                           if (iy < 0 || iy >= h) continue;
                                           double* gxr = gx + static_cast<std::size_t>(iy) * wdt;
                                           const double* cr = crow + static_cast<std::size_t>(oy) * wo;
                                           for (int ox = 0; ox < wo; ++ox) {
                                               const int ix = ox * stride + v - pad;
                                               if (ix >= 0 && ix < wdt) gxr[ix] += cr[ox];
                                           }
                                       }
                                   }
                               }
                           }
                       }
                   });
    return y;
}

// 2x2 stride-2 max pooling with ceil semantics: H -> ceil(H/2). Windows
// hanging over the edge shrink to the valid region.
inline Array maxpool2(const Array& x) {
    detail::require(x.rank() == 3, "maxpool2", "input must be [C,H,W], got " + shape_str(x.shape()));
    detail::check_finite("maxpool2", x);
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int ho = (h + 1) / 2, wo = (w + 1) / 2;
    Array y = Array::zeros({c, ho, wo});
    std::vector<int> argmax(static_cast<std::size_t>(c) * ho * wo);
    auto xd = x.data();
    auto yd = y.mutable_data();
    for (int ci = 0; ci < c; ++ci) {
        const double* xc = xd.data() + static_cast<std::size_t>(ci) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                double best = -1e300;
                int besti = -1;
                for (int dy = 0; dy < 2; ++dy) {
                    const int iy = 2 * oy + dy;
                    if (iy >= h) break;
                    for (int dx = 0; dx < 2; ++dx) {
                        const int ix = 2 * ox + dx;
                        if (ix >= w) break;
                        const int idx = iy * w + ix;
                        if (xc[idx] > best) {
                            best = xc[idx];
                            besti = idx;
                        }
                    }
                }
                yd[(static_cast<std::size_t>(ci) * ho + oy) * wo + ox] = best;
                argmax[(static_cast<std::size_t>(ci) * ho + oy) * wo + ox] =
                    ci * h * w + besti;
            }
        }
    }
    detail::record("maxpool2", {x}, y,
                   [xs = x.impl(), ys = y.impl(), argmax = std::move(argmax)]() {
                       if (!detail::wants_grad(xs)) return;
                       for (std::size_t i = 0; i < argmax.size(); ++i)
                           xs->grad[static_cast<std::size_t>(argmax[i])] += ys->grad[i];
                   });
    return y;
}

// Nearest-neighbor 2x upsample cropped to the requested extent (used by the
// FPN top-down path where target = ceil(source_image_extent / stride)).
inline Array upsample2x_to(const Array& x, int ho, int wo) {
    detail::require(x.rank() == 3, "upsample2x_to", "input must be [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    detail::require(ho >= h && ho <= 2 * h && wo >= w && wo <= 2 * w, "upsample2x_to",
                    "target " + std::to_string(ho) + "x" + std::to_string(wo) +
                        " not within 2x of source " + shape_str(x.shape()));
    Array y = Array::zeros({c, ho, wo});
    auto xd = x.data();
    auto yd = y.mutable_data();
    for (int ci = 0; ci < c; ++ci) {
        const double* xc = xd.data() + static_cast<std::size_t>(ci) * h * w;
        double* yc = yd.data() + static_cast<std::size_t>(ci) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
            const double* xrow = xc + static_cast<std::size_t>(oy / 2) * w;
            double* yrow = yc + static_cast<std::size_t>(oy) * wo;
            for (int ox = 0; ox < wo; ++ox) yrow[ox] = xrow[ox / 2];
        }
    }
    detail::record("upsample2x_to", {x}, y,
                   [xs = x.impl(), ys = y.impl(), c, h, w, ho, wo]() {
                       if (!detail::wants_grad(xs)) return;
                       for (int ci = 0; ci < c; ++ci) {
                           double* gx = xs->grad.data() + static_cast<std::size_t>(ci) * h * w;
                           const double* gy = ys->grad.data() + static_cast<std::size_t>(ci) * ho * wo;
                           for (int oy = 0; oy < ho; ++oy) {
                               double* gxr = gx + static_cast<std::size_t>(oy / 2) * w;
                               const double* gyr = gy + static_cast<std::size_t>(oy) * wo;
                               for (int ox = 0; ox < wo; ++ox) gxr[ox / 2] += gyr[ox];
                           }
                       }
                   });
    return y;
}

// Bilinear sampling of a [C,H,W] map at P fractional points (y_i, x_i) in
// continuous index coordinates (integer coordinates hit grid values exactly).
// Out-of-bounds coordinates are clamped to the valid rectangle. Differentiable
// with respect to the map; coordinates are treated as constants.
inline Array bilinear_sample(const Array& x, const std::vector<double>& ys_pts,
                             const std::vector<double>& xs_pts) {
    detail::require(x.rank() == 3, "bilinear_sample", "input must be [C,H,W]");
    detail::require(ys_pts.size() == xs_pts.size(), "bilinear_sample", "point list length mismatch");
    detail::check_finite("bilinear_sample", x);
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int p = static_cast<int>(ys_pts.size());
    detail::require(p >= 1, "bilinear_sample", "empty point list");

    struct Corner {
        int i00;
        int row_step, col_step;
        double fy, fx;
    };
    std::vector<Corner> corners(static_cast<std::size_t>(p));
    for (int i = 0; i < p; ++i) {
        double yc = std::min(std::max(ys_pts[static_cast<std::size_t>(i)], 0.0), static_cast<double>(h - 1));
        double xc = std::min(std::max(xs_pts[static_cast<std::size_t>(i)], 0.0), static_cast<double>(w - 1));
        int y0 = h >= 2 ? std::min(static_cast<int>(std::floor(yc)), h - 2) : 0;
        int x0 = w >= 2 ? std::min(static_cast<int>(std::floor(xc)), w - 2) : 0;
        corners[static_cast<std::size_t>(i)] = Corner{
            y0 * w + x0,
            h >= 2 ? w : 0,
            w >= 2 ? 1 : 0,
            yc - y0,
            xc - x0,
        };
    }

    Array y = Array::zeros({c, p});
    auto xd = x.data();
    auto yd = y.mutable_data();
    for (int ci = 0; ci < c; ++ci) {
        const double* xc = xd.data() + static_cast<std::size_t>(ci) * h * w;
        double* yrow = yd.data() + static_cast<std::size_t>(ci) * p;
        for (int i = 0; i < p; ++i) {
            const Corner& cr = corners[static_cast<std::size_t>(i)];
            const double v00 = xc[cr.i00];
            const double v01 = xc[cr.i00 + cr.col_step];
            const double v10 = xc[cr.i00 + cr.row_step];
            const double v11 = xc[cr.i00 + cr.row_step + cr.col_step];
            yrow[i] = (1.0 - cr.fy) * ((1.0 - cr.fx) * v00 + cr.fx * v01) +
                      cr.fy * ((1.0 - cr.fx) * v10 + cr.fx * v11);
        }
    }
    detail::record("bilinear_sample", {x}, y,
                   [xs = x.impl(), ysr = y.impl(), corners = std::move(corners), c, h, w, p]() {
                       if (!detail::wants_grad(xs)) return;
                       for (int ci = 0; ci < c; ++ci) {
                           double* gx = xs->grad.data() + static_cast<std::size_t>(ci) * h * w;
                           const double* gy = ysr->grad.data() + static_cast<std::size_t>(ci) * p;
                           for (int i = 0; i < p; ++i) {
                               const Corner& cr = corners[static_cast<std::size_t>(i)];
                               const double g = gy[i];
                               gx[cr.i00] += (1.0 - cr.fy) * (1.0 - cr.fx) * g;
                               gx[cr.i00 + cr.col_step] += (1.0 - cr.fy) * cr.fx * g;
                               gx[cr.i00 + cr.row_step] += cr.fy * (1.0 - cr.fx) * g;
                               gx[cr.i00 + cr.row_step + cr.col_step] += cr.fy * cr.fx * g;
                           }
                       }
                   });
    return y;
}

} // namespace fqr
