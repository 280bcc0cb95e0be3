// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fqr/assignment.hpp"
#include "fqr/backbone.hpp"
#include "fqr/detector.hpp"
#include "fqr/grad_check.hpp"
#include "fqr/head.hpp"
#include "fqr/image_ops.hpp"
#include "fqr/ops.hpp"
#include "fqr/qgn.hpp"
#include "fqr/util.hpp"

namespace fqr {

inline Array random_array(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
    for (double& v : data) v = rng.uniform(lo, hi);
    return Array::from(std::move(shape), std::move(data));
}

// Gradient check of a loss w.r.t. a parameter Array by in-place perturbation
// (for readouts whose parameters are baked into module structs). Checks at
// most max_elems elements, spread deterministically across the parameter.
inline double grad_check_param(const std::function<Array()>& build_loss, Array param,
                               double step = 1e-6, int max_elems = 24) {
    std::vector<double> analytic;
    {
        param.zero_grad();
        Graph graph;
        Graph::Scope scope(graph);
        Array loss = build_loss();
        graph.backward(loss);
        analytic.assign(param.grad().begin(), param.grad().end());
        param.zero_grad();
    }
    const int n = param.numel();
    const int count = std::min(n, max_elems);
    double worst = 0.0;
    auto pd = param.mutable_data();
    for (int k = 0; k < count; ++k) {
        const int i = static_cast<int>((static_cast<long long>(k) * n) / count);
        const double saved = pd[i];
        pd[i] = saved + step;
        const double fp = build_loss().value();
        pd[i] = saved - step;
        const double fm = build_loss().value();
        pd[i] = saved;
        const double numeric = (fp - fm) / (2.0 * step);
        const double a = analytic[static_cast<std::size_t>(i)];
        worst = std::max(worst, std::fabs(a - numeric) / std::max(1.0, std::fabs(a)));
    }
    return worst;
}

struct GradCheckCase {
    std::string name;
    std::function<double(std::uint64_t)> run; // seed -> max relative error
};

namespace detail {

// Scalar readout that weights every element so sign structure is exercised.
// Weights are a pure function of the seed, so the readout is deterministic
// across the repeated evaluations a gradient check performs.
inline Array weighted_readout(const Array& y, std::uint64_t seed) {
    Rng rng(seed);
    Array w = random_array(rng, y.shape(), 0.25, 1.0);
    return sum_all(mul(y, w));
}

} // namespace detail

inline std::vector<GradCheckCase> gradcheck_primitive_cases() {
    using detail::weighted_readout;
    std::vector<GradCheckCase> cases;
    auto add_case = [&](const std::string& name, std::function<double(std::uint64_t)> fn) {
        cases.push_back(GradCheckCase{name, std::move(fn)});
    };

    add_case("add", [](std::uint64_t seed) {
        Rng rng(seed);
        Array b = random_array(rng, {3, 4});
        const std::uint64_t wseed = seed + 1;
        return grad_check([&](const Array& x) { return detail::weighted_readout(add(x, b), wseed); },
                          random_array(rng, {3, 4}));
    });
    add_case("sub", [](std::uint64_t seed) {
        Rng rng(seed);
        Array b = random_array(rng, {3, 4});
        const std::uint64_t wseed = seed + 1;
        return grad_check([&](const Array& x) { return detail::weighted_readout(sub(x, b), wseed); },
                          random_array(rng, {3, 4}));
    });
    add_case("mul", [](std::uint64_t seed) {
        Rng rng(seed);
        Array b = random_array(rng, {3, 4});
        const std::uint64_t wseed = seed + 1;
        return grad_check([&](const Array& x) { return detail::weighted_readout(mul(x, b), wseed); },
                          random_array(rng, {3, 4}));
    });
    add_case("div", [](std::uint64_t seed) {
        Rng rng(seed);
        Array b = random_array(rng, {3, 4}, 0.5, 2.0);
        const std::uint64_t wseed = seed + 1;
        return grad_check([&](const Array& x) { return detail::weighted_readout(div(x, b), wseed); },
                          random_array(rng, {3, 4}));
    });
    add_case("div_denominator", [](std::uint64_t seed) {
        Rng rng(seed);
        Array a = random_array(rng, {3, 4});
        const std::uint64_t wseed = seed + 1;
        return grad_check([&](const Array& x) { return detail::weighted_readout(div(a, x), wseed); },
                          random_array(rng, {3, 4}, 0.5, 2.0));
    });
    add_case("maximum", [](std::uint64_t seed) {
        Rng rng(seed);
        Array b = random_array(rng, {12});
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(maximum(x, b), wseed); },
            random_array(rng, {12}));
    });
    add_case("minimum", [](std::uint64_t seed) {
        Rng rng(seed);
        Array b = random_array(rng, {12});
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(minimum(x, b), wseed); },
            random_array(rng, {12}));
    });
    add_case("add_scalar", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(add_scalar(x, 0.7), wseed); },
            random_array(rng, {10}));
    });
    add_case("mul_scalar", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(mul_scalar(x, -1.3), wseed); },
            random_array(rng, {10}));
    });
    add_case("pow_scalar", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(pow_scalar(x, 2.5), wseed); },
            random_array(rng, {10}, 0.3, 2.0));
    });
    add_case("relu", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check([&](const Array& x) { return detail::weighted_readout(relu(x), wseed); },
                          random_array(rng, {16}));
    });
    add_case("abs", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check([&](const Array& x) { return detail::weighted_readout(absolute(x), wseed); },
                          random_array(rng, {16}));
    });
    add_case("sigmoid", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check([&](const Array& x) { return detail::weighted_readout(sigmoid(x), wseed); },
                          random_array(rng, {16}, -3.0, 3.0));
    });
    add_case("exp", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check([&](const Array& x) { return detail::weighted_readout(exp_op(x), wseed); },
                          random_array(rng, {12}, -2.0, 2.0));
    });
    add_case("log", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check([&](const Array& x) { return detail::weighted_readout(log_op(x), wseed); },
                          random_array(rng, {12}, 0.2, 3.0));
    });
    add_case("clamp", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(clamp(x, -0.5, 0.5), wseed); },
            random_array(rng, {16}));
    });
    add_case("softmax", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(softmax(x, 1), wseed); },
            random_array(rng, {3, 5}, -2.0, 2.0));
    });
    add_case("sum", [](std::uint64_t seed) {
        Rng rng(seed);
        return grad_check([&](const Array& x) { return sum_all(x); }, random_array(rng, {9}));
    });
    add_case("mean", [](std::uint64_t seed) {
        Rng rng(seed);
        return grad_check([&](const Array& x) { return mean_all(x); }, random_array(rng, {9}));
    });
    add_case("sum_last", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(sum_last(x), wseed); },
            random_array(rng, {3, 4}));
    });
    add_case("matmul_lhs", [](std::uint64_t seed) {
        Rng rng(seed);
        Array b = random_array(rng, {4, 3});
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(matmul(x, b), wseed); },
            random_array(rng, {2, 4}));
    });
    add_case("matmul_rhs", [](std::uint64_t seed) {
        Rng rng(seed);
        Array a = random_array(rng, {2, 4});
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(matmul(a, x), wseed); },
            random_array(rng, {4, 3}));
    });
    add_case("bmm_lhs", [](std::uint64_t seed) {
        Rng rng(seed);
        Array b = random_array(rng, {2, 3, 4});
        const std::uint64_t wseed = seed + 1;
        return grad_check([&](const Array& x) { return detail::weighted_readout(bmm(x, b), wseed); },
                          random_array(rng, {2, 2, 3}));
    });
    add_case("bmm_rhs", [](std::uint64_t seed) {
        Rng rng(seed);
        Array a = random_array(rng, {2, 2, 3});
        const std::uint64_t wseed = seed + 1;
        return grad_check([&](const Array& x) { return detail::weighted_readout(bmm(a, x), wseed); },
                          random_array(rng, {2, 3, 4}));
    });
    add_case("add_rowvec_input", [](std::uint64_t seed) {
        Rng rng(seed);
        Array v = random_array(rng, {5});
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(add_rowvec(x, v), wseed); },
            random_array(rng, {3, 5}));
    });
    add_case("add_rowvec_vector", [](std::uint64_t seed) {
        Rng rng(seed);
        Array a = random_array(rng, {3, 5});
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(add_rowvec(a, x), wseed); },
            random_array(rng, {5}));
    });
    add_case("reshape", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(reshape(x, {4, 3}), wseed); },
            random_array(rng, {3, 4}));
    });
    add_case("transpose", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(transpose(x, {2, 0, 1}), wseed); },
            random_array(rng, {2, 3, 4}));
    });
    add_case("concat0", [](std::uint64_t seed) {
        Rng rng(seed);
        Array b = random_array(rng, {2, 3});
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(concat0({x, b, x}), wseed); },
            random_array(rng, {2, 3}));
    });
    add_case("gather_rows", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) {
                return detail::weighted_readout(gather_rows(x, {3, 0, 3, 1}), wseed);
            },
            random_array(rng, {5, 3}));
    });
    add_case("select_col", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(select_col(x, 2), wseed); },
            random_array(rng, {5, 4}));
    });
    add_case("layer_norm_input", [](std::uint64_t seed) {
        Rng rng(seed);
        Array g = random_array(rng, {6}, 0.5, 1.5);
        Array b = random_array(rng, {6});
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(layer_norm(x, g, b), wseed); },
            random_array(rng, {4, 6}));
    });
    add_case("layer_norm_gain", [](std::uint64_t seed) {
        Rng rng(seed);
        Array x = random_array(rng, {4, 6});
        Array b = random_array(rng, {6});
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& g) { return detail::weighted_readout(layer_norm(x, g, b), wseed); },
            random_array(rng, {6}, 0.5, 1.5));
    });
    add_case("conv2d_1x1_input", [](std::uint64_t seed) {
        Rng rng(seed);
        Array w = random_array(rng, {3, 2, 1, 1});
        Array b = random_array(rng, {3});
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(conv2d(x, w, b, 1, 0), wseed); },
            random_array(rng, {2, 5, 4}));
    });
    add_case("conv2d_3x3_input", [](std::uint64_t seed) {
        Rng rng(seed);
        Array w = random_array(rng, {3, 2, 3, 3});
        Array b = random_array(rng, {3});
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(conv2d(x, w, b, 1, 1), wseed); },
            random_array(rng, {2, 5, 5}));
    });
    add_case("conv2d_3x3_weight", [](std::uint64_t seed) {
        Rng rng(seed);
        Array x = random_array(rng, {2, 5, 5});
        Array b = random_array(rng, {3});
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& w) { return detail::weighted_readout(conv2d(x, w, b, 1, 1), wseed); },
            random_array(rng, {3, 2, 3, 3}));
    });
    add_case("conv2d_stride2_input", [](std::uint64_t seed) {
        Rng rng(seed);
        Array w = random_array(rng, {3, 2, 3, 3});
        Array b = random_array(rng, {3});
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(conv2d(x, w, b, 2, 1), wseed); },
            random_array(rng, {2, 5, 5}));
    });
    add_case("conv2d_bias", [](std::uint64_t seed) {
        Rng rng(seed);
        Array x = random_array(rng, {2, 4, 4});
        Array w = random_array(rng, {3, 2, 3, 3});
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& b) { return detail::weighted_readout(conv2d(x, w, b, 1, 1), wseed); },
            random_array(rng, {3}));
    });
    add_case("maxpool2", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(maxpool2(x), wseed); },
            random_array(rng, {2, 5, 5}));
    });
    add_case("upsample2x_to", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) { return detail::weighted_readout(upsample2x_to(x, 5, 6), wseed); },
            random_array(rng, {2, 3, 3}));
    });
    add_case("bilinear_sample", [](std::uint64_t seed) {
        Rng rng(seed);
        Rng pr(seed + 7);
        std::vector<double> ys, xs;
        for (int i = 0; i < 9; ++i) {
            ys.push_back(pr.uniform(-0.5, 5.5));
            xs.push_back(pr.uniform(-0.5, 6.5));
        }
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) {
                return detail::weighted_readout(bilinear_sample(x, ys, xs), wseed);
            },
            random_array(rng, {2, 6, 7}));
    });
    return cases;
}

// Composed readouts: loss terms and head blocks (assignments frozen, which is
// exactly how a training step treats them).
inline std::vector<GradCheckCase> gradcheck_composed_cases() {
    std::vector<GradCheckCase> cases;
    auto add_case = [&](const std::string& name, std::function<double(std::uint64_t)> fn) {
        cases.push_back(GradCheckCase{name, std::move(fn)});
    };

    add_case("giou_rows", [](std::uint64_t seed) {
        Rng rng(seed);
        auto random_boxes = [&](int n) {
            std::vector<double> v;
            for (int i = 0; i < n; ++i) {
                const double x1 = rng.uniform(0.0, 20.0), y1 = rng.uniform(0.0, 20.0);
                v.push_back(x1);
                v.push_back(y1);
                v.push_back(x1 + rng.uniform(4.0, 20.0));
                v.push_back(y1 + rng.uniform(4.0, 20.0));
            }
            return Array::from({n, 4}, std::move(v));
        };
        Array gt = random_boxes(4);
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& pred) { return detail::weighted_readout(giou_rows(pred, gt), wseed); },
            random_boxes(4));
    });
    add_case("focal_elements", [](std::uint64_t seed) {
        Rng rng(seed);
        std::vector<double> mask(12);
        for (double& m : mask) m = rng.uniform() < 0.3 ? 1.0 : 0.0;
        Array target = Array::from({12}, std::move(mask));
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& logits) {
                return detail::weighted_readout(
                    focal_elements(sigmoid(logits), target, 2.0, 0.25), wseed);
            },
            random_array(rng, {12}, -3.0, 3.0));
    });
    add_case("qgn_loss_logits", [](std::uint64_t seed) {
        Rng rng(seed);
        const int n = 10;
        std::vector<Box> boxes;
        std::vector<std::pair<double, double>> centers;
        std::vector<double> box_data;
        for (int i = 0; i < n; ++i) {
            const double cx = rng.uniform(8.0, 56.0), cy = rng.uniform(8.0, 56.0);
            const Box b{cx - rng.uniform(3.0, 8.0), cy - rng.uniform(3.0, 8.0),
                        cx + rng.uniform(3.0, 8.0), cy + rng.uniform(3.0, 8.0)};
            boxes.push_back(b);
            centers.emplace_back(cx, cy);
            box_data.insert(box_data.end(), {b.x1, b.y1, b.x2, b.y2});
        }
        SceneAnnotation gt;
        gt.boxes = {Box{4.0, 4.0, 60.0, 60.0}, Box{10.0, 10.0, 30.0, 30.0}};
        gt.labels = {0, 1};
        Array logits = random_array(rng, {n}, -2.0, 2.0);
        std::vector<double> scores;
        for (double v : logits.data()) scores.push_back(1.0 / (1.0 + std::exp(-v)));
        const Assignment a = qgn_assign(scores, boxes, centers, gt, MatchQualityParams{});
        const Array boxes_arr = Array::from({n, 4}, box_data);
        const LossWeights w;
        return grad_check(
            [&](const Array& x) { return qgn_loss(x, boxes_arr, a, gt, w); }, logits);
    });
    add_case("qgn_loss_boxes", [](std::uint64_t seed) {
        Rng rng(seed);
        const int n = 10;
        std::vector<Box> boxes;
        std::vector<std::pair<double, double>> centers;
        std::vector<double> box_data;
        for (int i = 0; i < n; ++i) {
            const double cx = rng.uniform(8.0, 56.0), cy = rng.uniform(8.0, 56.0);
            const Box b{cx - rng.uniform(3.0, 8.0), cy - rng.uniform(3.0, 8.0),
                        cx + rng.uniform(3.0, 8.0), cy + rng.uniform(3.0, 8.0)};
            boxes.push_back(b);
            centers.emplace_back(cx, cy);
            box_data.insert(box_data.end(), {b.x1, b.y1, b.x2, b.y2});
        }
        SceneAnnotation gt;
        gt.boxes = {Box{4.0, 4.0, 60.0, 60.0}, Box{10.0, 10.0, 30.0, 30.0}};
        gt.labels = {0, 1};
        Array logits = random_array(rng, {n}, -2.0, 2.0);
        std::vector<double> scores;
        for (double v : logits.data()) scores.push_back(1.0 / (1.0 + std::exp(-v)));
        const Assignment a = qgn_assign(scores, boxes, centers, gt, MatchQualityParams{});
        const LossWeights w;
        return grad_check(
            [&](const Array& x) { return qgn_loss(logits, x, a, gt, w); },
            Array::from({n, 4}, box_data));
    });
    add_case("rcnn_loss_probs", [](std::uint64_t seed) {
        Rng rng(seed);
        const int k = 5, nc = 3;
        SceneAnnotation gt;
        gt.boxes = {Box{5.0, 5.0, 25.0, 25.0}, Box{30.0, 30.0, 55.0, 50.0}};
        gt.labels = {2, 0};
        std::vector<double> box_data;
        for (int i = 0; i < k; ++i) {
            const double x1 = rng.uniform(0.0, 40.0), y1 = rng.uniform(0.0, 40.0);
            box_data.insert(box_data.end(),
                            {x1, y1, x1 + rng.uniform(5.0, 20.0), y1 + rng.uniform(5.0, 20.0)});
        }
        Array boxes = Array::from({k, 4}, box_data);
        Array logits = random_array(rng, {k, nc}, -2.0, 2.0);
        StagePreds fixture{sigmoid(logits), boxes};
        const LossWeights w;
        const Assignment a = rcnn_stage_assign(fixture, gt, w, 64.0, 64.0);
        return grad_check(
            [&](const Array& x) {
                return rcnn_stage_loss(StagePreds{sigmoid(x), boxes}, a, gt, w, 64.0, 64.0);
            },
            logits);
    });
    add_case("rcnn_loss_boxes", [](std::uint64_t seed) {
        Rng rng(seed);
        const int k = 5, nc = 3;
        SceneAnnotation gt;
        gt.boxes = {Box{5.0, 5.0, 25.0, 25.0}, Box{30.0, 30.0, 55.0, 50.0}};
        gt.labels = {2, 0};
        std::vector<double> box_data;
        for (int i = 0; i < k; ++i) {
            const double x1 = rng.uniform(0.0, 40.0), y1 = rng.uniform(0.0, 40.0);
            box_data.insert(box_data.end(),
                            {x1, y1, x1 + rng.uniform(5.0, 20.0), y1 + rng.uniform(5.0, 20.0)});
        }
        Array boxes = Array::from({k, 4}, box_data);
        Array probs = sigmoid(random_array(rng, {k, nc}, -2.0, 2.0));
        const LossWeights w;
        const Assignment a = rcnn_stage_assign(StagePreds{probs, boxes}, gt, w, 64.0, 64.0);
        return grad_check(
            [&](const Array& x) {
                return rcnn_stage_loss(StagePreds{probs, x}, a, gt, w, 64.0, 64.0);
            },
            boxes);
    });
    add_case("self_attention", [](std::uint64_t seed) {
        Rng rng(seed);
        ParamStore store;
        AttentionParams p(store, rng, "t", 8, 2);
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& x) {
                return detail::weighted_readout(self_attention_block(x, p), wseed);
            },
            random_array(rng, {3, 8}));
    });
    add_case("dynamic_conv", [](std::uint64_t seed) {
        Rng rng(seed);
        ParamStore store;
        DynamicConvParams p(store, rng, "t", 8, 4, 3);
        Array queries = random_array(rng, {2, 8});
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& grid) {
                return detail::weighted_readout(dynamic_conv(RoiFeatures{grid}, queries, p), wseed);
            },
            random_array(rng, {2, 4, 3, 3}));
    });
    add_case("apply_box_deltas", [](std::uint64_t seed) {
        Rng rng(seed);
        std::vector<double> box_data;
        for (int i = 0; i < 4; ++i) {
            const double x1 = rng.uniform(5.0, 30.0), y1 = rng.uniform(5.0, 30.0);
            box_data.insert(box_data.end(),
                            {x1, y1, x1 + rng.uniform(6.0, 20.0), y1 + rng.uniform(6.0, 20.0)});
        }
        Array boxes = Array::from({4, 4}, box_data);
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& deltas) {
                auto [clipped, raw] = apply_box_deltas(boxes, deltas, 64.0, 64.0);
                return detail::weighted_readout(raw, wseed);
            },
            random_array(rng, {4, 4}, -0.3, 0.3));
    });
    add_case("roi_align_features", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::vector<Box> boxes = {Box{4.0, 6.0, 30.0, 28.0}, Box{10.0, 2.0, 60.0, 62.0}};
        const std::uint64_t wseed = seed + 1;
        return grad_check(
            [&](const Array& map) {
                FeaturePyramid pyr;
                pyr.level_lo = 3;
                pyr.level_hi = 3;
                pyr.image_w = 64.0;
                pyr.image_h = 64.0;
                pyr.levels.push_back(FeatureLevel{3, 8, map});
                return detail::weighted_readout(roi_align(pyr, boxes, 3).grid, wseed);
            },
            random_array(rng, {2, 8, 8}));
    });
    return cases;
}

struct GradCheckReport {
    std::string name;
    double worst = 0.0;
};

inline std::vector<GradCheckReport> run_gradcheck_suite(int seeds_per_case,
                                                        double* overall_worst = nullptr) {
    std::vector<GradCheckReport> reports;
    double worst_all = 0.0;
    for (const auto& group : {gradcheck_primitive_cases(), gradcheck_composed_cases()}) {
        for (const GradCheckCase& c : group) {
            GradCheckReport r{c.name, 0.0};
            for (int s = 0; s < seeds_per_case; ++s) {
                r.worst = std::max(r.worst, c.run(1000 + static_cast<std::uint64_t>(s) * 77));
            }
            worst_all = std::max(worst_all, r.worst);
            reports.push_back(std::move(r));
        }
    }
    if (overall_worst) *overall_worst = worst_all;
    return reports;
}

} // namespace fqr
