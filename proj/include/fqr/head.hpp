// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "fqr/array.hpp"
#include "fqr/backbone.hpp"
#include "fqr/geometry.hpp"
#include "fqr/image_ops.hpp"
#include "fqr/ops.hpp"
#include "fqr/params.hpp"

namespace fqr {

// ---------------------------------------------------------------------------
// RoI-Align
// ---------------------------------------------------------------------------

struct RoiFeatures {
    Array grid; // [K, C, S, S], ordering matches the query set
};

// Pyramid level for a box by the standard area heuristic, with the canonical
// 224px-at-level-4 rule rescaled to the actual image size.
inline int roi_level_for_box(const Box& b, double img_w, double img_h, int lo, int hi) {
    const double size = std::sqrt(std::max(b.area(), 0.0));
    if (size <= 0.0) return lo;
    const double image_scale_factor = 800.0 / std::min(img_w, img_h);
    const int level = static_cast<int>(std::floor(4.0 + std::log2(size / 224.0 * image_scale_factor)));
    return std::clamp(level, lo, hi);
}

// S x S grid of bin averages; each bin is sampled at 2x2 bilinear points on
// the box's assigned pyramid level. Differentiable w.r.t. the feature maps;
// box coordinates are constants. Degenerate boxes collapse to point samples.
inline RoiFeatures roi_align(const FeaturePyramid& pyramid, const std::vector<Box>& boxes, int s) {
    detail::require(s >= 1, "roi_align", "S must be >= 1");
    detail::require(!boxes.empty(), "roi_align", "empty box list");
    const double img_w = pyramid.image_w, img_h = pyramid.image_h;

    std::vector<Array> per_box;
    per_box.reserve(boxes.size());
    for (const Box& b : boxes) {
        const FeatureLevel& lvl =
            pyramid.at_level(roi_level_for_box(b, img_w, img_h, pyramid.level_lo, pyramid.level_hi));
        const double stride = lvl.stride;
        const double bw = b.width() / s, bh = b.height() / s;

        std::vector<double> ys, xs;
        ys.reserve(static_cast<std::size_t>(s) * s * 4);
        xs.reserve(static_cast<std::size_t>(s) * s * 4);
        for (int by = 0; by < s; ++by) {
            for (int bx = 0; bx < s; ++bx) {
                for (int sy = 0; sy < 2; ++sy) {
                    for (int sx = 0; sx < 2; ++sx) {
                        const double iy = b.y1 + (by + (sy + 0.5) / 2.0) * bh;
                        const double ix = b.x1 + (bx + (sx + 0.5) / 2.0) * bw;
                        // Image point -> continuous feature index (cell centers
                        // sit at (i+0.5)*stride in image space).
                        ys.push_back(iy / stride - 0.5);
                        xs.push_back(ix / stride - 0.5);
                    }
                }
            }
        }
        const int c = lvl.map.dim(0);
        Array samples = bilinear_sample(lvl.map, ys, xs);          // [C, S*S*4]
        Array bins = mul_scalar(sum_last(reshape(samples, {c, s * s, 4})), 0.25);
        per_box.push_back(reshape(bins, {1, c, s, s}));
    }
    return RoiFeatures{concat0(per_box)};
}

// ---------------------------------------------------------------------------
// Multi-head self-attention block (post-norm residual)
// ---------------------------------------------------------------------------

struct AttentionParams {
    Array wq, bq, wk, bk, wv, bv, wo, bo, ln_g, ln_b;
    int d = 0, heads = 0;

    AttentionParams() = default;
    AttentionParams(ParamStore& store, Rng& rng, const std::string& prefix, int d_model,
                    int n_heads)
        : d(d_model), heads(n_heads) {
        if (n_heads < 1 || d_model % n_heads != 0) {
            throw ValueError("AttentionParams: d_model " + std::to_string(d_model) +
                             " not divisible by heads " + std::to_string(n_heads));
        }
        wq = store.add(prefix + ".wq", init::linear_weight(rng, d, d));
        bq = store.add(prefix + ".bq", init::constant({d}, 0.0));
        wk = store.add(prefix + ".wk", init::linear_weight(rng, d, d));
        bk = store.add(prefix + ".bk", init::constant({d}, 0.0));
        wv = store.add(prefix + ".wv", init::linear_weight(rng, d, d));
        bv = store.add(prefix + ".bv", init::constant({d}, 0.0));
        wo = store.add(prefix + ".wo", init::linear_weight(rng, d, d));
        bo = store.add(prefix + ".bo", init::constant({d}, 0.0));
        ln_g = store.add(prefix + ".ln.g", init::constant({d}, 1.0));
        ln_b = store.add(prefix + ".ln.b", init::constant({d}, 0.0));
    }
};

inline Array self_attention_block(const Array& x, const AttentionParams& p) {
    detail::require(x.rank() == 2 && x.dim(1) == p.d, "self_attention",
                    "input " + shape_str(x.shape()) + " does not match d_model " + std::to_string(p.d));
    const int k = x.dim(0), h = p.heads, dh = p.d / p.heads;

    auto heads_view = [&](const Array& m) {
        return transpose(reshape(m, {k, h, dh}), {1, 0, 2}); // [h, K, dh]
    };
    Array q = heads_view(add_rowvec(matmul(x, p.wq), p.bq));
    Array kk = heads_view(add_rowvec(matmul(x, p.wk), p.bk));
    Array v = heads_view(add_rowvec(matmul(x, p.wv), p.bv));

    Array scores = mul_scalar(bmm(q, transpose(kk, {0, 2, 1})), 1.0 / std::sqrt(dh));
    Array attn = softmax(scores, 2);
    Array ctx = reshape(transpose(bmm(attn, v), {1, 0, 2}), {k, p.d});
    Array out = add_rowvec(matmul(ctx, p.wo), p.bo);
    return layer_norm(add(x, out), p.ln_g, p.ln_b);
}

inline Array query_self_attention(const Array& queries, const AttentionParams& p) {
    return self_attention_block(queries, p);
}

// ---------------------------------------------------------------------------
// Dynamic convolution (per-query generated weights applied to RoI features)
// ---------------------------------------------------------------------------

struct DynamicConvParams {
    Array gen_w, gen_b; // query -> [C*cmid | cmid*C]
    Array out_w, out_b; // flattened S*S*C -> d
    Array ln_g, ln_b;
    int d = 0, c = 0, cmid = 0, s = 0;

    DynamicConvParams() = default;
    DynamicConvParams(ParamStore& store, Rng& rng, const std::string& prefix, int d_model,
                      int channels, int roi_size)
        : d(d_model), c(channels), cmid(d_model / 4), s(roi_size) {
        const int n_gen = 2 * c * cmid;
        gen_w = store.add(prefix + ".gen.w", init::linear_weight(rng, d, n_gen));
        gen_b = store.add(prefix + ".gen.b", init::constant({n_gen}, 0.0));
        out_w = store.add(prefix + ".out.w", init::linear_weight(rng, s * s * c, d));
        out_b = store.add(prefix + ".out.b", init::constant({d}, 0.0));
        ln_g = store.add(prefix + ".ln.g", init::constant({d}, 1.0));
        ln_b = store.add(prefix + ".ln.b", init::constant({d}, 0.0));
    }
};

namespace detail {

// Columns [lo, hi) of a rank-2 array, via transpose + row gather.
inline Array slice_cols(const Array& x, int lo, int hi) {
    std::vector<int> idx;
    idx.reserve(static_cast<std::size_t>(hi - lo));
    for (int i = lo; i < hi; ++i) idx.push_back(i);
    return transpose(gather_rows(transpose(x, {1, 0}), idx), {1, 0});
}

} // namespace detail

inline Array dynamic_conv(const RoiFeatures& roi, const Array& queries,
                          const DynamicConvParams& p) {
    const int k = queries.dim(0);
    detail::require(roi.grid.rank() == 4 && roi.grid.dim(0) == k && roi.grid.dim(1) == p.c &&
                        roi.grid.dim(2) == p.s && roi.grid.dim(3) == p.s,
                    "dynamic_conv", "roi grid " + shape_str(roi.grid.shape()) + " inconsistent");

    Array gen = add_rowvec(matmul(queries, p.gen_w), p.gen_b); // [K, 2*C*cmid]
    Array w1 = reshape(detail::slice_cols(gen, 0, p.c * p.cmid), {k, p.c, p.cmid});
    Array w2 = reshape(detail::slice_cols(gen, p.c * p.cmid, 2 * p.c * p.cmid), {k, p.cmid, p.c});

    Array x = reshape(transpose(roi.grid, {0, 2, 3, 1}), {k, p.s * p.s, p.c});
    Array h1 = relu(bmm(x, w1));  // [K, S*S, cmid]
    Array h2 = relu(bmm(h1, w2)); // [K, S*S, C]
    Array out = add_rowvec(matmul(reshape(h2, {k, p.s * p.s * p.c}), p.out_w), p.out_b);
    return layer_norm(add(queries, out), p.ln_g, p.ln_b);
}

// ---------------------------------------------------------------------------
// RoI-level self-attention: attention across per-RoI pooled vectors, added
// residually into the query stream.
// ---------------------------------------------------------------------------

struct RoiAttentionParams {
    Array proj_w, proj_b; // C -> d
    AttentionParams attn;

    RoiAttentionParams() = default;
    RoiAttentionParams(ParamStore& store, Rng& rng, const std::string& prefix, int d_model,
                       int channels, int heads)
        : attn(store, rng, prefix + ".attn", d_model, heads) {
        proj_w = store.add(prefix + ".proj.w", init::linear_weight(rng, channels, d_model));
        proj_b = store.add(prefix + ".proj.b", init::constant({d_model}, 0.0));
    }
};

inline Array roi_level_self_attention(const RoiFeatures& roi, const Array& queries,
                                      const RoiAttentionParams& p) {
    const int k = roi.grid.dim(0), c = roi.grid.dim(1), s = roi.grid.dim(2);
    Array pooled = mul_scalar(sum_last(reshape(roi.grid, {k, c, s * s})), 1.0 / (s * s));
    Array r = add_rowvec(matmul(pooled, p.proj_w), p.proj_b);
    return add(queries, self_attention_block(r, p.attn));
}

// ---------------------------------------------------------------------------
// Prediction FFN + one decoder stage
// ---------------------------------------------------------------------------

struct FfnParams {
    Array w1, b1, w2, b2, ln_g, ln_b;

    FfnParams() = default;
    FfnParams(ParamStore& store, Rng& rng, const std::string& prefix, int d, int hidden) {
        w1 = store.add(prefix + ".w1", init::linear_weight(rng, d, hidden));
        b1 = store.add(prefix + ".b1", init::constant({hidden}, 0.0));
        w2 = store.add(prefix + ".w2", init::linear_weight(rng, hidden, d));
        b2 = store.add(prefix + ".b2", init::constant({d}, 0.0));
        ln_g = store.add(prefix + ".ln.g", init::constant({d}, 1.0));
        ln_b = store.add(prefix + ".ln.b", init::constant({d}, 0.0));
    }
};

inline Array ffn_block(const Array& x, const FfnParams& p) {
    Array h = add_rowvec(matmul(relu(add_rowvec(matmul(x, p.w1), p.b1)), p.w2), p.b2);
    return layer_norm(add(x, h), p.ln_g, p.ln_b);
}

struct StageConfig {
    int d_model = 64;
    int channels = 32;
    int roi_size = 7;
    int heads = 4;
    int num_classes = 3;
    bool use_roi_self_attention = true;
    double cls_bias = -2.0;
};

struct StageParams {
    AttentionParams attn;
    RoiAttentionParams roi_attn; // present iff cfg.use_roi_self_attention
    DynamicConvParams dyn;
    FfnParams ffn;
    Array cls_w, cls_b;
    Array reg_w1, reg_b1, reg_w2, reg_b2;
    StageConfig cfg;

    StageParams(ParamStore& store, Rng& rng, const std::string& prefix, const StageConfig& config)
        : cfg(config) {
        const int d = cfg.d_model;
        attn = AttentionParams(store, rng, prefix + ".selfattn", d, cfg.heads);
        if (cfg.use_roi_self_attention) {
            roi_attn = RoiAttentionParams(store, rng, prefix + ".roiattn", d, cfg.channels, cfg.heads);
        }
        dyn = DynamicConvParams(store, rng, prefix + ".dynconv", d, cfg.channels, cfg.roi_size);
        ffn = FfnParams(store, rng, prefix + ".ffn", d, 2 * d);
        cls_w = store.add(prefix + ".cls.w", init::linear_weight(rng, d, cfg.num_classes));
        cls_b = store.add(prefix + ".cls.b", init::constant({cfg.num_classes}, cfg.cls_bias));
        reg_w1 = store.add(prefix + ".reg.w1", init::linear_weight(rng, d, d));
        reg_b1 = store.add(prefix + ".reg.b1", init::constant({d}, 0.0));
        reg_w2 = store.add(prefix + ".reg.w2", init::linear_weight(rng, d, 4));
        reg_b2 = store.add(prefix + ".reg.b2", init::constant({4}, 0.0));
    }
};

struct StageOutput {
    Array class_probs;   // [K, num_classes], per-class sigmoid
    Array boxes;         // [K, 4] clipped to the image
    Array boxes_unclipped; // [K, 4] pre-clip twin, used by the losses
    Array queries;       // [K, d] updated query features
};

// Scale deltas are clamped so exp cannot overflow on a wild early step.
constexpr double kDeltaScaleClamp = 6.0;

// Apply (dx,dy,dw,dh) deltas to boxes: centers move by dx*w / dy*h, sizes
// scale by exp. Differentiable in both the deltas and the input boxes.
inline std::pair<Array, Array> apply_box_deltas(const Array& boxes, const Array& deltas,
                                                double img_w, double img_h) {
    detail::require_same_shape("apply_box_deltas", boxes, deltas);
    Array x1 = select_col(boxes, 0), y1 = select_col(boxes, 1);
    Array x2 = select_col(boxes, 2), y2 = select_col(boxes, 3);
    Array w = sub(x2, x1), h = sub(y2, y1);
    Array cx = mul_scalar(add(x1, x2), 0.5), cy = mul_scalar(add(y1, y2), 0.5);

    Array ncx = add(cx, mul(select_col(deltas, 0), w));
    Array ncy = add(cy, mul(select_col(deltas, 1), h));
    Array nw = mul(w, exp_op(clamp(select_col(deltas, 2), -kDeltaScaleClamp, kDeltaScaleClamp)));
    Array nh = mul(h, exp_op(clamp(select_col(deltas, 3), -kDeltaScaleClamp, kDeltaScaleClamp)));

    Array nx1 = sub(ncx, mul_scalar(nw, 0.5)), nx2 = add(ncx, mul_scalar(nw, 0.5));
    Array ny1 = sub(ncy, mul_scalar(nh, 0.5)), ny2 = add(ncy, mul_scalar(nh, 0.5));
    Array raw = stack_cols({nx1, ny1, nx2, ny2});
    Array clipped = stack_cols({clamp(nx1, 0.0, img_w), clamp(ny1, 0.0, img_h),
                                clamp(nx2, 0.0, img_w), clamp(ny2, 0.0, img_h)});
    return {clipped, raw};
}

// One query-based R-CNN stage:
//   query self-attention -> RoI-Align -> [RoI-level self-attention] ->
//   dynamic convolution -> FFN -> classification + box regression.
inline StageOutput rcnn_stage(const FeaturePyramid& pyramid, const Array& queries,
                              const Array& boxes, const StageParams& p) {
    detail::require(boxes.rank() == 2 && boxes.dim(1) == 4 && boxes.dim(0) == queries.dim(0),
                    "rcnn_stage", "queries/boxes misaligned: " + shape_str(queries.shape()) +
                                      " vs " + shape_str(boxes.shape()));
    Array q = query_self_attention(queries, p.attn);
    RoiFeatures roi = roi_align(pyramid, boxes_from_array(boxes), p.cfg.roi_size);
    if (p.cfg.use_roi_self_attention) {
        q = roi_level_self_attention(roi, q, p.roi_attn);
    }
    q = dynamic_conv(roi, q, p.dyn);
    q = ffn_block(q, p.ffn);

    Array cls = sigmoid(add_rowvec(matmul(q, p.cls_w), p.cls_b));
    Array deltas =
        add_rowvec(matmul(relu(add_rowvec(matmul(q, p.reg_w1), p.reg_b1)), p.reg_w2), p.reg_b2);
    auto [clipped, raw] = apply_box_deltas(boxes, deltas, pyramid.image_w, pyramid.image_h);
    return StageOutput{cls, clipped, raw, q};
}

// Cascade of independently parameterized stages. Stage i > 1 consumes the
// previous stage's refined boxes (detached, as in standard iterative heads)
// and updated queries; all stage outputs are returned for supervision.
inline std::vector<StageOutput> cascade_forward(const FeaturePyramid& pyramid,
                                                const Array& initial_queries,
                                                const Array& initial_boxes,
                                                const std::vector<StageParams>& stages,
                                                std::vector<double>* stage_ms = nullptr) {
    detail::require(!stages.empty(), "cascade_forward", "needs at least one stage");
    std::vector<StageOutput> outputs;
    outputs.reserve(stages.size());
    Array q = initial_queries;
    Array b = initial_boxes;
    for (const StageParams& p : stages) {
        const auto t0 = std::chrono::steady_clock::now();
        StageOutput out = rcnn_stage(pyramid, q, b, p);
        if (stage_ms) {
            stage_ms->push_back(
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count());
        }
        q = out.queries;
        b = out.boxes.clone_values(false);
        outputs.push_back(std::move(out));
    }
    return outputs;
}

} // namespace fqr
