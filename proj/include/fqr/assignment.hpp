// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "fqr/array.hpp"
#include "fqr/geometry.hpp"
#include "fqr/hungarian.hpp"
#include "fqr/ops.hpp"

namespace fqr {

// Ground truth for one image: M boxes with class labels.
struct SceneAnnotation {
    std::vector<Box> boxes;
    std::vector<int> labels;

    int size() const { return static_cast<int>(boxes.size()); }

    void validate(double img_w, double img_h, int num_classes) const {
        if (boxes.size() != labels.size()) {
            throw ValueError("SceneAnnotation: box/label count mismatch");
        }
        for (std::size_t i = 0; i < boxes.size(); ++i) {
            const Box& b = boxes[i];
            if (!(b.x1 < b.x2 && b.y1 < b.y2)) {
                throw ValueError("SceneAnnotation: malformed box " + std::to_string(i));
            }
            if (b.x1 < 0 || b.y1 < 0 || b.x2 > img_w || b.y2 > img_h) {
                throw ValueError("SceneAnnotation: box " + std::to_string(i) + " outside image");
            }
            if (labels[i] < 0 || labels[i] >= num_classes) {
                throw ValueError("SceneAnnotation: label " + std::to_string(labels[i]) +
                                 " outside [0," + std::to_string(num_classes) + ")");
            }
        }
    }
};

struct MatchQualityParams {
    double alpha = 0.8; // geometric weight on IoU quality vs objectness
};

struct LossWeights {
    double lambda_obj = 1.0;
    double lambda_giou = 2.0;
    double lambda_cls = 2.0;
    double lambda_l1 = 5.0;
    double lambda_giou_rcnn = 2.0;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
};

constexpr double kProbEps = 1e-12;

// Focal loss for one probability; p is clamped away from {0,1}.
inline double focal_loss(double p, bool is_positive, double gamma, double alpha_f) {
    p = std::clamp(p, kProbEps, 1.0 - kProbEps);
    if (is_positive) return -alpha_f * std::pow(1.0 - p, gamma) * std::log(p);
    return -(1.0 - alpha_f) * std::pow(p, gamma) * std::log(1.0 - p);
}

// Matching quality Q_obj^(1-alpha) * Q_iou^alpha with 0^0 = 1.
inline double match_quality(double q_obj, double q_iou, const MatchQualityParams& params) {
    return std::pow(q_obj, 1.0 - params.alpha) * std::pow(q_iou, params.alpha);
}

// ---------------------------------------------------------------------------
// Differentiable building blocks
// ---------------------------------------------------------------------------

// Row-wise GIoU between predicted boxes [M,4] and fixed target boxes [M,4].
// Targets must have positive area.
inline Array giou_rows(const Array& pred, const Array& target) {
    detail::require(pred.rank() == 2 && pred.dim(1) == 4, "giou_rows",
                    "pred must be [M,4], got " + shape_str(pred.shape()));
    detail::require_same_shape("giou_rows", pred, target);
    Array px1 = select_col(pred, 0), py1 = select_col(pred, 1);
    Array px2 = select_col(pred, 2), py2 = select_col(pred, 3);
    Array gx1 = select_col(target, 0), gy1 = select_col(target, 1);
    Array gx2 = select_col(target, 2), gy2 = select_col(target, 3);

    Array iw = relu(sub(minimum(px2, gx2), maximum(px1, gx1)));
    Array ih = relu(sub(minimum(py2, gy2), maximum(py1, gy1)));
    Array inter = mul(iw, ih);
    Array area_p = mul(sub(px2, px1), sub(py2, py1));
    Array area_g = mul(sub(gx2, gx1), sub(gy2, gy1));
    Array uni = sub(add(area_p, area_g), inter);
    Array iou_v = div(inter, uni);

    Array ew = sub(maximum(px2, gx2), minimum(px1, gx1));
    Array eh = sub(maximum(py2, gy2), minimum(py1, gy1));
    Array enc = mul(ew, eh);
    return sub(iou_v, div(sub(enc, uni), enc));
}

// Per-class sigmoid focal loss over a [*] probability array against a 0/1
// target mask of the same shape. Probabilities are clamped before the logs.
inline Array focal_elements(const Array& probs, const Array& target_mask, double gamma,
                            double alpha_f) {
    detail::require_same_shape("focal_elements", probs, target_mask);
    Array p = clamp(probs, kProbEps, 1.0 - kProbEps);
    Array one_minus_p = add_scalar(neg(p), 1.0);
    Array pos = mul_scalar(mul(pow_scalar(one_minus_p, gamma), log_op(p)), -alpha_f);
    Array negt = mul_scalar(mul(pow_scalar(p, gamma), log_op(one_minus_p)), -(1.0 - alpha_f));
    Array inv_mask = add_scalar(neg(target_mask), 1.0);
    return add(mul(target_mask, pos), mul(inv_mask, negt));
}

// ---------------------------------------------------------------------------
// QGN assignment (Eq. 1 with the Q_match cost of Eq. 2)
// ---------------------------------------------------------------------------

// Only locations whose center lies inside a ground-truth box are candidates
// for it; everything else gets a prohibitive cost and is filtered afterwards,
// so ground truths with no candidate location are reported unmatched.
inline Assignment qgn_assign(const std::vector<double>& objectness,
                             const std::vector<Box>& decoded_boxes,
                             const std::vector<std::pair<double, double>>& centers,
                             const SceneAnnotation& gt, const MatchQualityParams& params) {
    const int n = static_cast<int>(objectness.size());
    if (decoded_boxes.size() != objectness.size() || centers.size() != objectness.size()) {
        throw ShapeError("qgn_assign: input vectors must have equal length");
    }
    const int m = gt.size();
    Assignment out;
    out.sigma.assign(static_cast<std::size_t>(n), -1);
    out.gt_to_pred.assign(static_cast<std::size_t>(m), -1);
    if (m == 0) return out;
    if (n < m) {
        throw ValueError("qgn_assign: " + std::to_string(n) + " locations < " + std::to_string(m) +
                         " ground truths");
    }

    constexpr double kBig = 1e9;
    std::vector<double> cost(static_cast<std::size_t>(n) * m, kBig);
    for (int j = 0; j < m; ++j) {
        const Box& g = gt.boxes[static_cast<std::size_t>(j)];
        for (int i = 0; i < n; ++i) {
            const auto& c = centers[static_cast<std::size_t>(i)];
            if (!g.contains_point(c.first, c.second)) continue;
            const double q_iou = iou(decoded_boxes[static_cast<std::size_t>(i)], g);
            cost[static_cast<std::size_t>(i) * m + j] =
                -match_quality(objectness[static_cast<std::size_t>(i)], q_iou, params);
        }
    }

    Assignment raw = hungarian(cost, n, m);
    out.total_cost = 0.0;
    for (int i = 0; i < n; ++i) {
        const int j = raw.sigma[static_cast<std::size_t>(i)];
        if (j < 0) continue;
        const double c = cost[static_cast<std::size_t>(i) * m + j];
        if (c >= kBig * 0.5) continue; // ground truth with no in-box candidate
        out.sigma[static_cast<std::size_t>(i)] = j;
        out.gt_to_pred[static_cast<std::size_t>(j)] = i;
        out.total_cost += c;
    }
    return out;
}

// QGN training loss (focal objectness over all locations + GIoU over matched
// locations), both normalized by the matched-location count (min 1).
inline Array qgn_loss(const Array& objectness_logits, const Array& decoded_boxes,
                      const Assignment& assignment, const SceneAnnotation& gt,
                      const LossWeights& w) {
    const int n = objectness_logits.numel();
    detail::require(objectness_logits.rank() == 1, "qgn_loss", "logits must be rank 1");
    detail::require(decoded_boxes.rank() == 2 && decoded_boxes.dim(0) == n &&
                        decoded_boxes.dim(1) == 4,
                    "qgn_loss", "boxes must be [N,4] aligned with logits");
    detail::require(static_cast<int>(assignment.sigma.size()) == n, "qgn_loss",
                    "assignment size mismatch");

    std::vector<int> matched;
    std::vector<double> mask(static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        if (assignment.sigma[static_cast<std::size_t>(i)] >= 0) {
            matched.push_back(i);
            mask[static_cast<std::size_t>(i)] = 1.0;
        }
    }
    const double norm = std::max<std::size_t>(1, matched.size());

    Array probs = sigmoid(objectness_logits);
    Array target = Array::from({n}, std::move(mask));
    Array obj_loss =
        mul_scalar(sum_all(focal_elements(probs, target, w.focal_gamma, w.focal_alpha)), 1.0 / norm);

    Array total = mul_scalar(obj_loss, w.lambda_obj);
    if (!matched.empty()) {
        Array pred_rows = gather_rows(decoded_boxes, matched);
        std::vector<Box> targets;
        targets.reserve(matched.size());
        for (int i : matched) {
            targets.push_back(gt.boxes[static_cast<std::size_t>(assignment.sigma[static_cast<std::size_t>(i)])]);
        }
        Array giou_v = giou_rows(pred_rows, array_from_boxes(targets));
        Array giou_loss = mul_scalar(sum_all(add_scalar(neg(giou_v), 1.0)), 1.0 / norm);
        total = add(total, mul_scalar(giou_loss, w.lambda_giou));
    }
    return total;
}

// ---------------------------------------------------------------------------
// R-CNN set prediction loss (per-stage Hungarian + focal/L1/GIoU terms)
// ---------------------------------------------------------------------------

struct StagePreds {
    Array class_probs; // [K, num_classes], per-class sigmoid probabilities
    Array boxes;       // [K, 4], image pixels
};

namespace detail {

// Classification cost of using prediction p for a positive: the focal gain
// over leaving it negative.
inline double focal_cost(double p, double gamma, double alpha_f) {
    return focal_loss(p, true, gamma, alpha_f) - focal_loss(p, false, gamma, alpha_f);
}

} // namespace detail

inline Assignment rcnn_stage_assign(const StagePreds& stage, const SceneAnnotation& gt,
                                    const LossWeights& w, double img_w, double img_h) {
    const int k = stage.class_probs.dim(0);
    const int m = gt.size();
    if (k < m) {
        throw ValueError("rcnn_set_loss: " + std::to_string(k) + " predictions < " +
                         std::to_string(m) + " ground truths");
    }
    if (m == 0) {
        Assignment out;
        out.sigma.assign(static_cast<std::size_t>(k), -1);
        return out;
    }
    const int nc = stage.class_probs.dim(1);
    auto probs = stage.class_probs.data();
    const std::vector<Box> boxes = boxes_from_array(stage.boxes);

    std::vector<double> cost(static_cast<std::size_t>(k) * m, 0.0);
    for (int i = 0; i < k; ++i) {
        const Box& pb = boxes[static_cast<std::size_t>(i)];
        for (int j = 0; j < m; ++j) {
            const Box& gb = gt.boxes[static_cast<std::size_t>(j)];
            const double p = probs[static_cast<std::size_t>(i) * nc + gt.labels[static_cast<std::size_t>(j)]];
            const double cls = detail::focal_cost(p, w.focal_gamma, w.focal_alpha);
            const double l1 = std::fabs(pb.x1 - gb.x1) / img_w + std::fabs(pb.y1 - gb.y1) / img_h +
                              std::fabs(pb.x2 - gb.x2) / img_w + std::fabs(pb.y2 - gb.y2) / img_h;
            const double gi = 1.0 - giou(pb, gb);
            cost[static_cast<std::size_t>(i) * m + j] =
                w.lambda_cls * cls + w.lambda_l1 * l1 + w.lambda_giou_rcnn * gi;
        }
    }
    return hungarian(cost, k, m);
}

// Loss for one decoder stage given its assignment.
inline Array rcnn_stage_loss(const StagePreds& stage, const Assignment& assignment,
                             const SceneAnnotation& gt, const LossWeights& w, double img_w,
                             double img_h) {
    const int k = stage.class_probs.dim(0);
    const int nc = stage.class_probs.dim(1);
    const int m = gt.size();
    const double norm = std::max(1, m);

    std::vector<double> target(static_cast<std::size_t>(k) * nc, 0.0);
    std::vector<int> matched;
    for (int i = 0; i < k; ++i) {
        const int j = assignment.sigma[static_cast<std::size_t>(i)];
        if (j < 0) continue;
        matched.push_back(i);
        target[static_cast<std::size_t>(i) * nc + gt.labels[static_cast<std::size_t>(j)]] = 1.0;
    }

    Array target_mask = Array::from({k, nc}, std::move(target));
    Array cls_loss = mul_scalar(
        sum_all(focal_elements(stage.class_probs, target_mask, w.focal_gamma, w.focal_alpha)),
        1.0 / norm);
    Array total = mul_scalar(cls_loss, w.lambda_cls);

    if (!matched.empty()) {
        Array pred_rows = gather_rows(stage.boxes, matched);
        std::vector<Box> targets;
        std::vector<double> scale;
        targets.reserve(matched.size());
        for (int i : matched) {
            targets.push_back(gt.boxes[static_cast<std::size_t>(assignment.sigma[static_cast<std::size_t>(i)])]);
            scale.push_back(1.0 / img_w);
            scale.push_back(1.0 / img_h);
            scale.push_back(1.0 / img_w);
            scale.push_back(1.0 / img_h);
        }
        Array gt_rows = array_from_boxes(targets);
        Array scale_arr = Array::from({static_cast<int>(matched.size()), 4}, std::move(scale));
        Array l1 = mul_scalar(
            sum_all(absolute(sub(mul(pred_rows, scale_arr), mul(gt_rows, scale_arr)))), 1.0 / norm);
        Array giou_v = giou_rows(pred_rows, gt_rows);
        Array giou_loss = mul_scalar(sum_all(add_scalar(neg(giou_v), 1.0)), 1.0 / norm);
        total = add(total, add(mul_scalar(l1, w.lambda_l1), mul_scalar(giou_loss, w.lambda_giou_rcnn)));
    }
    return total;
}

// Set prediction loss summed over stages; every stage is assigned and
// supervised independently. Assignments are recomputed per call and are not
// differentiated through.
inline Array rcnn_set_loss(const std::vector<StagePreds>& stages, const SceneAnnotation& gt,
                           const LossWeights& w, double img_w, double img_h,
                           std::vector<Assignment>* out_assignments = nullptr) {
    detail::require(!stages.empty(), "rcnn_set_loss", "needs at least one stage");
    Array total;
    for (const StagePreds& stage : stages) {
        Assignment a = rcnn_stage_assign(stage, gt, w, img_w, img_h);
        Array stage_loss = rcnn_stage_loss(stage, a, gt, w, img_w, img_h);
        total = total.defined() ? add(total, stage_loss) : stage_loss;
        if (out_assignments) out_assignments->push_back(std::move(a));
    }
    return total;
}

} // namespace fqr
