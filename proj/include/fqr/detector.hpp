// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fqr/array.hpp"
#include "fqr/assignment.hpp"
#include "fqr/backbone.hpp"
#include "fqr/head.hpp"
#include "fqr/optim.hpp"
#include "fqr/qgn.hpp"

namespace fqr {

enum class QueryMode { featurized, learnable };

inline const char* to_string(QueryMode m) {
    return m == QueryMode::featurized ? "featurized" : "learnable";
}

inline QueryMode query_mode_from_string(const std::string& s) {
    if (s == "featurized") return QueryMode::featurized;
    if (s == "learnable") return QueryMode::learnable;
    throw ValueError("unknown query mode '" + s + "' (expected featurized|learnable)");
}

struct ModelConfig {
    int num_queries = 20;
    int d_model = 64;
    int fpn_lo = 3;
    int fpn_hi = 7;
    int fpn_channels = 32;
    int n_stages = 2;
    int num_classes = 3;
    int roi_size = 7;
    int attn_heads = 4;
    QueryMode mode = QueryMode::featurized;
    bool use_roi_self_attention = true;
    std::uint64_t seed = 1;
    int report_top = 0;     // detections returned by infer; 0 means num_queries
    double qgn_weight = 1.0;
    LossWeights loss;
    MatchQualityParams match;
    OptimConfig optim;

    void validate() const {
        if (num_queries < 1) throw ValueError("ModelConfig: num_queries must be >= 1");
        if (n_stages < 1) throw ValueError("ModelConfig: n_stages must be >= 1");
        if (num_classes < 1) throw ValueError("ModelConfig: num_classes must be >= 1");
        if (fpn_lo < 3 || fpn_hi > 7 || fpn_lo > fpn_hi) {
            throw ValueError("ModelConfig: fpn levels must satisfy 3 <= lo <= hi <= 7");
        }
        if (d_model < attn_heads || d_model % attn_heads != 0) {
            throw ValueError("ModelConfig: d_model must be divisible by attn_heads");
        }
        if (d_model % 4 != 0) throw ValueError("ModelConfig: d_model must be divisible by 4");
        if (roi_size < 1) throw ValueError("ModelConfig: roi_size must be >= 1");
        if (!(match.alpha >= 0.0 && match.alpha <= 1.0)) {
            throw ValueError("ModelConfig: match alpha must be in [0,1]");
        }
        for (double w : {loss.lambda_obj, loss.lambda_giou, loss.lambda_cls, loss.lambda_l1,
                         loss.lambda_giou_rcnn, qgn_weight}) {
            if (w < 0.0) throw ValueError("ModelConfig: loss weights must be nonnegative");
        }
    }
};

struct Detection {
    Box box;
    int class_id = 0;
    double score = 0.0;
};

// Learnable-query baseline state: K trainable query embeddings plus trainable
// image-relative initial boxes stored as (cx, cy, log w, log h).
struct LearnableQueryParams {
    Array embed;  // [K, d]
    Array box_raw; // [K, 4]

    LearnableQueryParams() = default;
    LearnableQueryParams(ParamStore& store, Rng& rng, int k, int d) {
        embed = store.add("learnable.embed", init::uniform_fan_in(rng, {k, d}, d));
        std::vector<double> raw;
        raw.reserve(static_cast<std::size_t>(k) * 4);
        for (int i = 0; i < k; ++i) {
            raw.push_back(rng.uniform(0.2, 0.8));
            raw.push_back(rng.uniform(0.2, 0.8));
            raw.push_back(std::log(rng.uniform(0.3, 0.8)));
            raw.push_back(std::log(rng.uniform(0.3, 0.8)));
        }
        box_raw = store.add("learnable.box_raw", Array::from({k, 4}, std::move(raw)));
    }
};

struct LossStats {
    double total = 0.0;
    double qgn = 0.0;
    std::vector<double> stage;
    int unassigned_gts = 0;
};

class Detector {
public:
    explicit Detector(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(cfg_.seed);
        backbone_ = std::make_unique<BackboneParams>(
            params_, rng, BackboneConfig{cfg_.fpn_channels, cfg_.fpn_lo, cfg_.fpn_hi});
        if (cfg_.mode == QueryMode::featurized) {
            qgn_ = std::make_unique<QgnParams>(params_, rng,
                                               QgnConfig{cfg_.fpn_channels, cfg_.d_model, -2.0});
        } else {
            learnable_ = std::make_unique<LearnableQueryParams>(params_, rng, cfg_.num_queries,
                                                                cfg_.d_model);
        }
        StageConfig sc{cfg_.d_model,    cfg_.fpn_channels,          cfg_.roi_size, cfg_.attn_heads,
                       cfg_.num_classes, cfg_.use_roi_self_attention, -2.0};
        for (int s = 0; s < cfg_.n_stages; ++s) {
            stages_.emplace_back(params_, rng, "head.stage" + std::to_string(s), sc);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    long long parameter_count() const { return params_.total_count(); }
    const std::vector<StageParams>& stage_params() const { return stages_; }

    struct Forward {
        FeaturePyramid pyramid;
        DenseDecoded dense;   // featurized mode only
        QuerySet query_set;   // featurized mode only
        Array initial_queries; // [K, d]
        Array initial_boxes;   // [K, 4]
        std::vector<StageOutput> stages;
    };

    struct ForwardTiming {
        double backbone_ms = 0.0;
        double query_gen_ms = 0.0;
        std::vector<double> stage_ms;
        double total_ms = 0.0;
    };

    Forward forward(const Array& image, ForwardTiming* timing = nullptr) const {
        const auto start = std::chrono::steady_clock::now();
        auto ms_since = [](std::chrono::steady_clock::time_point t0) {
            return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
        };

        Forward f;
        f.pyramid = extract_pyramid(image, *backbone_);
        if (timing) timing->backbone_ms = ms_since(start);

        const auto qgen_start = std::chrono::steady_clock::now();
        if (cfg_.mode == QueryMode::featurized) {
            f.dense = flatten_dense(dense_head(f.pyramid, *qgn_), f.pyramid.image_w,
                                    f.pyramid.image_h);
            f.query_set = select_queries(f.dense, cfg_.num_queries);
            f.initial_queries = f.query_set.features;
            f.initial_boxes = f.query_set.boxes_arr;
        } else {
            f.initial_queries = learnable_->embed;
            f.initial_boxes = decode_learnable_boxes(f.pyramid.image_w, f.pyramid.image_h);
        }
        if (timing) timing->query_gen_ms = ms_since(qgen_start);

        f.stages = cascade_forward(f.pyramid, f.initial_queries, f.initial_boxes, stages_,
                                   timing ? &timing->stage_ms : nullptr);
        if (timing) timing->total_ms = ms_since(start);
        return f;
    }

    // Total training loss for one image: QGN loss (featurized mode) plus the
    // per-stage set prediction loss. Assignments are constants of the step.
    Array loss(const Forward& f, const SceneAnnotation& gt, LossStats* stats = nullptr,
               std::vector<Assignment>* rcnn_assignments = nullptr) const {
        const double img_w = f.pyramid.image_w, img_h = f.pyramid.image_h;
        gt.validate(img_w, img_h, cfg_.num_classes);
        check_forward_finite(f);

        Array total;
        double qgn_value = 0.0;
        int unassigned = 0;
        if (cfg_.mode == QueryMode::featurized) {
            Assignment qa = qgn_assign(f.dense, gt, cfg_.match);
            for (int j : qa.gt_to_pred) {
                if (j < 0) ++unassigned;
            }
            Array ql = mul_scalar(qgn_loss(f.dense, qa, gt, cfg_.loss), cfg_.qgn_weight);
            qgn_value = ql.value();
            total = ql;
        }

        std::vector<double> stage_values;
        for (const StageOutput& s : f.stages) {
            StagePreds preds{s.class_probs, s.boxes_unclipped};
            Assignment a = rcnn_stage_assign(preds, gt, cfg_.loss, img_w, img_h);
            Array sl = rcnn_stage_loss(preds, a, gt, cfg_.loss, img_w, img_h);
            stage_values.push_back(sl.value());
            total = total.defined() ? add(total, sl) : sl;
            if (rcnn_assignments) rcnn_assignments->push_back(std::move(a));
        }

        if (stats) {
            stats->qgn = qgn_value;
            stats->unassigned_gts = unassigned;
            stats->stage = std::move(stage_values);
            stats->total = total.value();
        }
        return total;
    }

    // Top-scoring (query, class) pairs from the last stage; no suppression of
    // any kind. Ties break by (query, class) index.
    std::vector<Detection> infer(const Array& image) const {
        Forward f = forward(image);
        return detections_from(f);
    }

    std::vector<Detection> detections_from(const Forward& f) const {
        const StageOutput& last = f.stages.back();
        const int k = last.class_probs.dim(0), nc = last.class_probs.dim(1);
        auto probs = last.class_probs.data();
        const std::vector<Box> boxes = boxes_from_array(last.boxes);

        std::vector<int> order(static_cast<std::size_t>(k) * nc);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (probs[a] != probs[b]) return probs[a] > probs[b];
            return a < b;
        });
        const int want = cfg_.report_top > 0 ? cfg_.report_top : cfg_.num_queries;
        const int n = std::min<int>(want, k * nc);
        std::vector<Detection> out;
        out.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const int q = order[static_cast<std::size_t>(i)] / nc;
            const int c = order[static_cast<std::size_t>(i)] % nc;
            out.push_back(Detection{boxes[static_cast<std::size_t>(q)], c,
                                    probs[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]});
        }
        return out;
    }

    // Input proposal boxes of a given stage (stage 0 consumes the initial
    // boxes; stage s consumes stage s-1 refined boxes).
    static const Array& stage_input_boxes(const Forward& f, int stage) {
        if (stage == 0) return f.initial_boxes;
        return f.stages[static_cast<std::size_t>(stage - 1)].boxes;
    }

private:
    // A diverged step surfaces as non-finite activations; catching them here
    // keeps the assignment machinery (which rejects non-finite costs) out of
    // the error path and names the offending tensor.
    void check_forward_finite(const Forward& f) const {
        auto check = [](const Array& a, const std::string& name) {
            if (!a.defined()) return;
            for (double v : a.data()) {
                if (!std::isfinite(v)) {
                    throw NumericError("forward produced non-finite values in " + name);
                }
            }
        };
        if (cfg_.mode == QueryMode::featurized) {
            check(f.dense.logits, "qgn objectness");
            check(f.dense.boxes_raw, "qgn decoded boxes");
        }
        for (std::size_t s = 0; s < f.stages.size(); ++s) {
            check(f.stages[s].class_probs, "stage " + std::to_string(s) + " class_probs");
            check(f.stages[s].boxes_unclipped, "stage " + std::to_string(s) + " boxes");
        }
    }

    Array decode_learnable_boxes(double img_w, double img_h) const {
        const Array& raw = learnable_->box_raw;
        Array cx = mul_scalar(clamp(select_col(raw, 0), 0.0, 1.0), img_w);
        Array cy = mul_scalar(clamp(select_col(raw, 1), 0.0, 1.0), img_h);
        Array w = mul_scalar(exp_op(clamp(select_col(raw, 2), -4.0, 0.5)), img_w);
        Array h = mul_scalar(exp_op(clamp(select_col(raw, 3), -4.0, 0.5)), img_h);
        Array x1 = clamp(sub(cx, mul_scalar(w, 0.5)), 0.0, img_w);
        Array x2 = clamp(add(cx, mul_scalar(w, 0.5)), 0.0, img_w);
        Array y1 = clamp(sub(cy, mul_scalar(h, 0.5)), 0.0, img_h);
        Array y2 = clamp(add(cy, mul_scalar(h, 0.5)), 0.0, img_h);
        return stack_cols({x1, y1, x2, y2});
    }

    ModelConfig cfg_;
    ParamStore params_;
    std::unique_ptr<BackboneParams> backbone_;
    std::unique_ptr<QgnParams> qgn_;
    std::unique_ptr<LearnableQueryParams> learnable_;
    std::vector<StageParams> stages_;
};

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

struct TrainStepMetrics {
    double total = 0.0;
    double qgn = 0.0;
    std::vector<double> stage;
    double grad_norm = 0.0;
    int unassigned_gts = 0;
};

// One forward + backward + AdamW update over a batch. Losses are averaged
// over the batch. A non-finite loss aborts the step with the parameters and
// optimizer state untouched.
inline TrainStepMetrics train_step(Detector& det, AdamW& opt,
                                   const std::vector<std::pair<const Array*, const SceneAnnotation*>>& batch) {
    if (batch.empty()) throw ValueError("train_step: empty batch");
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    TrainStepMetrics metrics;
    metrics.stage.assign(static_cast<std::size_t>(det.config().n_stages), 0.0);

    for (const auto& [image, gt] : batch) {
        try {
            Graph graph;
            Graph::Scope scope(graph);
            Detector::Forward f = det.forward(*image);
            LossStats stats;
            Array loss = det.loss(f, *gt, &stats);
            if (!std::isfinite(stats.total)) {
                std::ostringstream os;
                os << "non-finite loss (total=" << stats.total << ", qgn=" << stats.qgn;
                for (std::size_t s = 0; s < stats.stage.size(); ++s) {
                    os << ", stage" << s << "=" << stats.stage[s];
                }
                os << ")";
                throw NumericError(os.str());
            }
            graph.backward(mul_scalar(loss, inv_b));

            metrics.total += stats.total * inv_b;
            metrics.qgn += stats.qgn * inv_b;
            for (std::size_t s = 0; s < stats.stage.size(); ++s) {
                metrics.stage[s] += stats.stage[s] * inv_b;
            }
            metrics.unassigned_gts += stats.unassigned_gts;
        } catch (const NumericError& e) {
            opt.zero_grad();
            throw NumericError("train_step: " + std::string(e.what()) +
                               "; step aborted, state unchanged");
        }
    }

    metrics.grad_norm = clip_global_grad_norm(det.params(), opt.config().grad_clip);
    opt.step();
    opt.zero_grad();
    return metrics;
}

} // namespace fqr
