// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "fqr/array.hpp"
#include "fqr/assignment.hpp"
#include "fqr/backbone.hpp"
#include "fqr/geometry.hpp"
#include "fqr/image_ops.hpp"
#include "fqr/ops.hpp"
#include "fqr/params.hpp"

namespace fqr {

// Per-level dense prediction of the query generation network. ltrb holds the
// activated distances (exp of the raw output times the level stride), so all
// entries are nonnegative pixels.
struct DenseLevelPrediction {
    int level = 0;
    int stride = 0;
    Array objectness_logits; // [H, W]
    Array ltrb;              // [4, H, W]
    Array query_map;         // [D, H, W]
};

struct QgnConfig {
    int in_channels = 32;
    int query_dim = 64;
    double objectness_bias = -2.0;
};

// Anchor-free dense head: a shared 3x3 tower followed by 1x1 branches for
// objectness, box regression and query features. Weights are shared across
// pyramid levels.
struct QgnParams {
    Array tower_w, tower_b;
    Array obj_w, obj_b;
    Array ltrb_w, ltrb_b;
    Array query_w, query_b;
    QgnConfig cfg;

    QgnParams(ParamStore& store, Rng& rng, const QgnConfig& config) : cfg(config) {
        const int c = cfg.in_channels;
        tower_w = store.add("qgn.tower.w", init::conv_weight(rng, c, c, 3));
        tower_b = store.add("qgn.tower.b", init::constant({c}, 0.0));
        obj_w = store.add("qgn.obj.w", init::conv_weight(rng, 1, c, 1));
        obj_b = store.add("qgn.obj.b", init::constant({1}, cfg.objectness_bias));
        ltrb_w = store.add("qgn.ltrb.w", init::conv_weight(rng, 4, c, 1));
        ltrb_b = store.add("qgn.ltrb.b", init::constant({4}, 0.0));
        query_w = store.add("qgn.query.w", init::conv_weight(rng, cfg.query_dim, c, 1));
        query_b = store.add("qgn.query.b", init::constant({cfg.query_dim}, 0.0));
    }
};

// Raw regression outputs are clamped before the exp so early-training spikes
// cannot overflow; the clamp bound corresponds to distances far beyond any
// desk-scale image.
constexpr double kLtrbRawClamp = 12.0;

inline std::vector<DenseLevelPrediction> dense_head(const FeaturePyramid& pyramid,
                                                    const QgnParams& p) {
    std::vector<DenseLevelPrediction> preds;
    preds.reserve(pyramid.levels.size());
    for (const FeatureLevel& lvl : pyramid.levels) {
        Array tower = relu(conv2d(lvl.map, p.tower_w, p.tower_b, 1, 1));
        const int h = tower.dim(1), w = tower.dim(2);
        Array obj = reshape(conv2d(tower, p.obj_w, p.obj_b, 1, 0), {h, w});
        Array raw = conv2d(tower, p.ltrb_w, p.ltrb_b, 1, 0);
        Array ltrb = mul_scalar(exp_op(clamp(raw, -kLtrbRawClamp, kLtrbRawClamp)),
                                static_cast<double>(lvl.stride));
        Array qmap = conv2d(tower, p.query_w, p.query_b, 1, 0);
        preds.push_back(DenseLevelPrediction{lvl.level, lvl.stride, obj, ltrb, qmap});
    }
    return preds;
}

// Decode one location's ltrb distances into an image-space box, clipped to
// the image bounds. The location center is ((col+0.5)*stride, (row+0.5)*stride).
inline Box decode_location(int stride, int row, int col, const double ltrb[4], double img_w,
                           double img_h) {
    const double cx = (col + 0.5) * stride;
    const double cy = (row + 0.5) * stride;
    const Box raw{cx - ltrb[0], cy - ltrb[1], cx + ltrb[2], cy + ltrb[3]};
    return raw.clipped(img_w, img_h);
}

struct QueryProvenance {
    int level = 0, row = 0, col = 0;
};

// Fixed-size set of featurized queries: scores, boxes and feature vectors in
// one-to-one correspondence, each gathered from the same dense location.
struct QuerySet {
    std::vector<double> scores;           // K objectness probabilities
    std::vector<Box> boxes;               // K clipped boxes (plain values)
    Array boxes_arr;                      // [K,4] differentiable clipped boxes
    Array features;                       // [K,D]
    std::vector<QueryProvenance> provenance;
    bool shortfall = false;               // fewer locations than requested K

    int size() const { return static_cast<int>(scores.size()); }
};

// All dense predictions flattened across levels in (level,row,col) order.
// Keeps both the unclipped decode (used by the loss) and the clipped decode
// (used for query boxes).
struct DenseDecoded {
    Array logits;         // [N]
    Array boxes_raw;      // [N,4] unclipped
    Array boxes_clipped;  // [N,4]
    Array features;       // [N,D]
    std::vector<double> scores;
    std::vector<Box> boxes_plain; // clipped
    std::vector<std::pair<double, double>> centers;
    std::vector<QueryProvenance> locs;

    int size() const { return static_cast<int>(scores.size()); }
};

inline DenseDecoded flatten_dense(const std::vector<DenseLevelPrediction>& preds, double img_w,
                                  double img_h) {
    detail::require(!preds.empty(), "flatten_dense", "no dense predictions");
    DenseDecoded out;
    std::vector<Array> logit_parts, raw_parts, clip_parts, feat_parts;
    for (const DenseLevelPrediction& p : preds) {
        const int h = p.objectness_logits.dim(0);
        const int w = p.objectness_logits.dim(1);
        const int hw = h * w;
        const double stride = p.stride;

        logit_parts.push_back(reshape(p.objectness_logits, {hw}));
        feat_parts.push_back(transpose(reshape(p.query_map, {p.query_map.dim(0), hw}), {1, 0}));

        std::vector<double> cx(static_cast<std::size_t>(hw)), cy(static_cast<std::size_t>(hw));
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                cx[static_cast<std::size_t>(r * w + c)] = (c + 0.5) * stride;
                cy[static_cast<std::size_t>(r * w + c)] = (r + 0.5) * stride;
                out.centers.emplace_back((c + 0.5) * stride, (r + 0.5) * stride);
                out.locs.push_back(QueryProvenance{p.level, r, c});
            }
        }
        Array cx_arr = Array::from({hw}, std::move(cx));
        Array cy_arr = Array::from({hw}, std::move(cy));

        Array dist = transpose(reshape(p.ltrb, {4, hw}), {1, 0}); // [hw,4] as (l,t,r,b)
        Array x1 = sub(cx_arr, select_col(dist, 0));
        Array y1 = sub(cy_arr, select_col(dist, 1));
        Array x2 = add(cx_arr, select_col(dist, 2));
        Array y2 = add(cy_arr, select_col(dist, 3));
        raw_parts.push_back(stack_cols({x1, y1, x2, y2}));
        clip_parts.push_back(stack_cols({clamp(x1, 0.0, img_w), clamp(y1, 0.0, img_h),
                                         clamp(x2, 0.0, img_w), clamp(y2, 0.0, img_h)}));

        auto ld = p.objectness_logits.data();
        for (int i = 0; i < hw; ++i) {
            const double v = ld[i];
            out.scores.push_back(v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                          : std::exp(v) / (1.0 + std::exp(v)));
        }
    }
    out.logits = concat0(logit_parts);
    out.boxes_raw = concat0(raw_parts);
    out.boxes_clipped = concat0(clip_parts);
    out.features = concat0(feat_parts);
    out.boxes_plain = boxes_from_array(out.boxes_clipped);
    return out;
}

// Top-K selection over all levels by objectness, ties broken by
// (level,row,col) lexicographic order (== flattening order). Returns all
// locations and flags the shortfall when fewer than K exist.
inline QuerySet select_queries(const DenseDecoded& dense, int k) {
    detail::require(k >= 1, "select_queries", "K must be >= 1");
    const int n = dense.size();
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double sa = dense.scores[static_cast<std::size_t>(a)];
        const double sb = dense.scores[static_cast<std::size_t>(b)];
        if (sa != sb) return sa > sb;
        return a < b;
    });
    const int keep = std::min(k, n);

    QuerySet qs;
    qs.shortfall = keep < k;
    std::vector<int> sel(order.begin(), order.begin() + keep);
    qs.features = gather_rows(dense.features, sel);
    qs.boxes_arr = gather_rows(dense.boxes_clipped, sel);
    for (int idx : sel) {
        qs.scores.push_back(dense.scores[static_cast<std::size_t>(idx)]);
        qs.boxes.push_back(dense.boxes_plain[static_cast<std::size_t>(idx)]);
        qs.provenance.push_back(dense.locs[static_cast<std::size_t>(idx)]);
    }
    return qs;
}

inline QuerySet select_queries(const std::vector<DenseLevelPrediction>& preds, int k, double img_w,
                               double img_h) {
    return select_queries(flatten_dense(preds, img_w, img_h), k);
}

// QGN assignment on the flattened dense view (Hungarian over -Q_match with
// the in-box candidate restriction).
inline Assignment qgn_assign(const DenseDecoded& dense, const SceneAnnotation& gt,
                             const MatchQualityParams& params) {
    return qgn_assign(dense.scores, dense.boxes_plain, dense.centers, gt, params);
}

inline Array qgn_loss(const DenseDecoded& dense, const Assignment& assignment,
                      const SceneAnnotation& gt, const LossWeights& w) {
    return qgn_loss(dense.logits, dense.boxes_raw, assignment, gt, w);
}

} // namespace fqr
