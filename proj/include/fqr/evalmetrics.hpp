// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "fqr/assignment.hpp"
#include "fqr/detector.hpp"
#include "fqr/geometry.hpp"

namespace fqr {

inline std::vector<double> coco_iou_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
    return t;
}

// All-point interpolated average precision for one set of (already
// class-filtered) detections. Detections are greedily matched in descending
// score order; each ground truth matches at most once at IoU >= threshold.
inline double average_precision(const std::vector<std::vector<Detection>>& dets_per_image,
                                const std::vector<std::vector<Box>>& gts_per_image,
                                double iou_threshold) {
    if (dets_per_image.size() != gts_per_image.size()) {
        throw ShapeError("average_precision: image count mismatch");
    }
    int total_gts = 0;
    for (const auto& g : gts_per_image) total_gts += static_cast<int>(g.size());
    if (total_gts == 0) return 0.0;

    struct Ref {
        double score;
        int image;
        int index;
    };
    std::vector<Ref> order;
    for (std::size_t im = 0; im < dets_per_image.size(); ++im) {
        for (std::size_t d = 0; d < dets_per_image[im].size(); ++d) {
            order.push_back(Ref{dets_per_image[im][d].score, static_cast<int>(im),
                                static_cast<int>(d)});
        }
    }
    std::sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.image != b.image) return a.image < b.image;
        return a.index < b.index;
    });

    std::vector<std::vector<char>> matched(gts_per_image.size());
    for (std::size_t im = 0; im < gts_per_image.size(); ++im) {
        matched[im].assign(gts_per_image[im].size(), 0);
    }

    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (const Ref& r : order) {
        const Box& db = dets_per_image[static_cast<std::size_t>(r.image)]
                                      [static_cast<std::size_t>(r.index)].box;
        const auto& gts = gts_per_image[static_cast<std::size_t>(r.image)];
        double best = -1.0;
        int best_j = -1;
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (matched[static_cast<std::size_t>(r.image)][j]) continue;
            const double v = iou(db, gts[j]);
            if (v > best) {
                best = v;
                best_j = static_cast<int>(j);
            }
        }
        if (best >= iou_threshold && best_j >= 0) {
            matched[static_cast<std::size_t>(r.image)][static_cast<std::size_t>(best_j)] = 1;
            ++tp;
        } else {
            ++fp;
        }
        precision.push_back(static_cast<double>(tp) / (tp + fp));
        recall.push_back(static_cast<double>(tp) / total_gts);
    }

    // Area under the precision envelope.
    double ap = 0.0, prev_recall = 0.0, max_right = 0.0;
    std::vector<double> envelope(precision.size());
    for (int i = static_cast<int>(precision.size()) - 1; i >= 0; --i) {
        max_right = std::max(max_right, precision[static_cast<std::size_t>(i)]);
        envelope[static_cast<std::size_t>(i)] = max_right;
    }
    for (std::size_t i = 0; i < precision.size(); ++i) {
        if (recall[i] > prev_recall) {
            ap += (recall[i] - prev_recall) * envelope[i];
            prev_recall = recall[i];
        }
    }
    return ap;
}

// Recall at each IoU threshold: the fraction of ground truths covered by at
// least one proposal of IoU >= t.
inline std::map<double, double> recall_curve(const std::vector<std::vector<Box>>& proposals,
                                             const std::vector<std::vector<Box>>& gts,
                                             const std::vector<double>& thresholds) {
    if (proposals.size() != gts.size()) throw ShapeError("recall_curve: image count mismatch");
    std::vector<double> best_ious;
    for (std::size_t im = 0; im < gts.size(); ++im) {
        for (const Box& g : gts[im]) {
            double best = 0.0;
            for (const Box& p : proposals[im]) best = std::max(best, iou(p, g));
            best_ious.push_back(best);
        }
    }
    std::map<double, double> out;
    for (double t : thresholds) {
        if (best_ious.empty()) {
            out[t] = 0.0;
            continue;
        }
        int hit = 0;
        for (double v : best_ious) {
            if (v >= t) ++hit;
        }
        out[t] = static_cast<double>(hit) / static_cast<double>(best_ious.size());
    }
    return out;
}

struct ScoredBox {
    Box box;
    double score = 0.0;
};

// Average recall over IoU 0.5:0.05:0.95 with proposals truncated to the
// top-K per image by score.
inline std::map<int, double> ar_at_k(const std::vector<std::vector<ScoredBox>>& proposals,
                                     const std::vector<std::vector<Box>>& gts,
                                     const std::vector<int>& k_values) {
    if (proposals.size() != gts.size()) throw ShapeError("ar_at_k: image count mismatch");
    std::map<int, double> out;
    const std::vector<double> thresholds = coco_iou_thresholds();
    for (int k : k_values) {
        std::vector<std::vector<Box>> truncated(proposals.size());
        for (std::size_t im = 0; im < proposals.size(); ++im) {
            std::vector<int> order(proposals[im].size());
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](int a, int b) {
                const double sa = proposals[im][static_cast<std::size_t>(a)].score;
                const double sb = proposals[im][static_cast<std::size_t>(b)].score;
                if (sa != sb) return sa > sb;
                return a < b;
            });
            const int keep = std::min<int>(k, static_cast<int>(order.size()));
            for (int i = 0; i < keep; ++i) {
                truncated[im].push_back(proposals[im][static_cast<std::size_t>(order[static_cast<std::size_t>(i)])].box);
            }
        }
        const std::map<double, double> rc = recall_curve(truncated, gts, thresholds);
        double mean = 0.0;
        for (const auto& [_, v] : rc) mean += v;
        out[k] = mean / static_cast<double>(thresholds.size());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Full detection evaluation report
// ---------------------------------------------------------------------------

struct EvalReport {
    std::map<double, double> ap_per_iou; // threshold -> AP averaged over classes
    double ap50 = 0.0;
    double ap75 = 0.0;
    double map5095 = 0.0;
    std::map<int, double> ar_at_k;
    std::vector<double> per_class_ap50; // indexed by class id
    int images = 0;
    int total_gts = 0;
    int total_detections = 0;
};

inline EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& dets_per_image,
                                      const std::vector<SceneAnnotation>& annotations,
                                      int num_classes) {
    if (dets_per_image.size() != annotations.size()) {
        throw ShapeError("evaluate_detections: image count mismatch");
    }
    EvalReport rep;
    rep.images = static_cast<int>(dets_per_image.size());

    // Class-filtered views.
    std::vector<std::vector<std::vector<Detection>>> dets_by_class(
        static_cast<std::size_t>(num_classes));
    std::vector<std::vector<std::vector<Box>>> gts_by_class(static_cast<std::size_t>(num_classes));
    std::vector<int> gt_count(static_cast<std::size_t>(num_classes), 0);
    for (int c = 0; c < num_classes; ++c) {
        dets_by_class[static_cast<std::size_t>(c)].resize(dets_per_image.size());
        gts_by_class[static_cast<std::size_t>(c)].resize(dets_per_image.size());
    }
    for (std::size_t im = 0; im < dets_per_image.size(); ++im) {
        rep.total_detections += static_cast<int>(dets_per_image[im].size());
        for (const Detection& d : dets_per_image[im]) {
            if (d.class_id >= 0 && d.class_id < num_classes) {
                dets_by_class[static_cast<std::size_t>(d.class_id)][im].push_back(d);
            }
        }
        const SceneAnnotation& ann = annotations[im];
        rep.total_gts += ann.size();
        for (std::size_t g = 0; g < ann.boxes.size(); ++g) {
            gts_by_class[static_cast<std::size_t>(ann.labels[g])][im].push_back(ann.boxes[g]);
            ++gt_count[static_cast<std::size_t>(ann.labels[g])];
        }
    }

    const std::vector<double> thresholds = coco_iou_thresholds();
    int classes_present = 0;
    for (int c = 0; c < num_classes; ++c) {
        if (gt_count[static_cast<std::size_t>(c)] > 0) ++classes_present;
    }
    for (double t : thresholds) {
        double mean = 0.0;
        for (int c = 0; c < num_classes; ++c) {
            if (gt_count[static_cast<std::size_t>(c)] == 0) continue;
            mean += average_precision(dets_by_class[static_cast<std::size_t>(c)],
                                      gts_by_class[static_cast<std::size_t>(c)], t);
        }
        rep.ap_per_iou[t] = classes_present > 0 ? mean / classes_present : 0.0;
    }
    rep.ap50 = rep.ap_per_iou[0.5];
    rep.ap75 = rep.ap_per_iou[0.75];
    for (const auto& [_, v] : rep.ap_per_iou) rep.map5095 += v;
    rep.map5095 /= static_cast<double>(rep.ap_per_iou.size());

    rep.per_class_ap50.assign(static_cast<std::size_t>(num_classes), 0.0);
    for (int c = 0; c < num_classes; ++c) {
        if (gt_count[static_cast<std::size_t>(c)] == 0) continue;
        rep.per_class_ap50[static_cast<std::size_t>(c)] = average_precision(
            dets_by_class[static_cast<std::size_t>(c)], gts_by_class[static_cast<std::size_t>(c)], 0.5);
    }

    // Class-agnostic AR@K over the raw detections.
    std::vector<std::vector<ScoredBox>> proposals(dets_per_image.size());
    std::vector<std::vector<Box>> all_gts(dets_per_image.size());
    for (std::size_t im = 0; im < dets_per_image.size(); ++im) {
        for (const Detection& d : dets_per_image[im]) {
            proposals[im].push_back(ScoredBox{d.box, d.score});
        }
        all_gts[im] = annotations[im].boxes;
    }
    rep.ar_at_k = ar_at_k(proposals, all_gts, {1, 10, 100});
    return rep;
}

// ---------------------------------------------------------------------------
// Proposal-to-GT delta distributions (per decoder stage)
// ---------------------------------------------------------------------------

struct DeltaHistogram {
    static constexpr int kBins = 40; // [-1,1] at width 0.05
    int stage = 0;
    std::vector<int> counts;         // kBins x kBins, row = dy bin, col = dx bin
    double mean_abs_dx = 0.0;
    double mean_abs_dy = 0.0;
    int matched = 0;
    int excluded = 0; // unmatched or degenerate proposals

    DeltaHistogram() : counts(kBins * kBins, 0) {}

    static int bin_of(double v) {
        const int b = static_cast<int>(std::floor((v + 1.0) / 0.05));
        return std::clamp(b, 0, kBins - 1);
    }

    void add(double dx, double dy) {
        counts[static_cast<std::size_t>(bin_of(dy)) * kBins + bin_of(dx)] += 1;
        mean_abs_dx += std::fabs(dx);
        mean_abs_dy += std::fabs(dy);
        ++matched;
    }

    void finalize() {
        if (matched > 0) {
            mean_abs_dx /= matched;
            mean_abs_dy /= matched;
        }
    }
};

// Histogram of box_delta between each stage's input proposals and their
// loss-assigned ground truths. pairs[s] holds (proposal, matched gt) for
// stage s; unmatched proposals are excluded and counted.
inline std::vector<DeltaHistogram> delta_distribution(
    const std::vector<std::vector<std::pair<Box, Box>>>& matched_pairs_per_stage,
    const std::vector<int>& excluded_per_stage) {
    std::vector<DeltaHistogram> out(matched_pairs_per_stage.size());
    for (std::size_t s = 0; s < matched_pairs_per_stage.size(); ++s) {
        out[s].stage = static_cast<int>(s);
        out[s].excluded = s < excluded_per_stage.size() ? excluded_per_stage[s] : 0;
        for (const auto& [proposal, gt] : matched_pairs_per_stage[s]) {
            if (!(proposal.width() > 0.0 && proposal.height() > 0.0)) {
                ++out[s].excluded;
                continue;
            }
            const auto [dx, dy] = box_delta(gt, proposal);
            out[s].add(dx, dy);
        }
        out[s].finalize();
    }
    return out;
}

} // namespace fqr
