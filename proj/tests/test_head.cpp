// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "fqr/gradcheck_suite.hpp"
#include "fqr/head.hpp"
#include "fqr/util.hpp"

namespace fqr {
namespace {

FeaturePyramid constant_pyramid(double value, int c = 8) {
    FeaturePyramid pyr;
    pyr.level_lo = 3;
    pyr.level_hi = 7;
    pyr.image_w = 64;
    pyr.image_h = 64;
    const int hw[5] = {8, 4, 2, 1, 1};
    for (int i = 0; i < 5; ++i) {
        pyr.levels.push_back(
            FeatureLevel{3 + i, 1 << (3 + i), Array::filled({c, hw[i], hw[i]}, value)});
    }
    return pyr;
}

TEST(RoiAlign, ConstantMapGivesConstantBins) {
    FeaturePyramid pyr = constant_pyramid(3.25);
    const std::vector<Box> boxes = {Box{4, 4, 20, 28}, Box{0, 0, 64, 64}, Box{30, 30, 31, 31}};
    RoiFeatures roi = roi_align(pyr, boxes, 5);
    ASSERT_EQ(roi.grid.shape(), (Shape{3, 8, 5, 5}));
    for (double v : roi.grid.data()) EXPECT_NEAR(v, 3.25, 1e-12);
}

TEST(RoiAlign, AffineFieldBinsEqualMeanOfSamplePoints) {
    // One level at stride 8 whose value is its own x feature index.
    FeaturePyramid pyr;
    pyr.level_lo = 3;
    pyr.level_hi = 3;
    pyr.image_w = 64;
    pyr.image_h = 64;
    std::vector<double> field;
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) field.push_back(static_cast<double>(x));
    }
    pyr.levels.push_back(FeatureLevel{3, 8, Array::from({1, 8, 8}, std::move(field))});

    const Box b{6.0, 10.0, 38.0, 42.0};
    const int s = 4;
    RoiFeatures roi = roi_align(pyr, {b}, s);
    const double bw = b.width() / s;
    for (int by = 0; by < s; ++by) {
        for (int bx = 0; bx < s; ++bx) {
            double expect = 0.0;
            for (int p = 0; p < 2; ++p) {
                const double ix = b.x1 + (bx + (p + 0.5) / 2.0) * bw;
                expect += 2.0 * (ix / 8.0 - 0.5); // two sample rows share each x
            }
            expect /= 4.0;
            EXPECT_NEAR(roi.grid.at({0, 0, by, bx}), expect, 1e-12);
        }
    }
}

TEST(RoiAlign, OutOfImageBoxIsClampedAndFinite) {
    FeaturePyramid pyr = constant_pyramid(1.5);
    RoiFeatures roi = roi_align(pyr, {Box{-20, -20, 100, 100}}, 7);
    for (double v : roi.grid.data()) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_NEAR(v, 1.5, 1e-12);
    }
}

TEST(RoiAlign, DegenerateBoxSamplesAPoint) {
    FeaturePyramid pyr = constant_pyramid(2.0);
    RoiFeatures roi = roi_align(pyr, {Box{10, 10, 10, 10}}, 3);
    for (double v : roi.grid.data()) EXPECT_NEAR(v, 2.0, 1e-12);
}

TEST(RoiAlign, LevelHeuristicScalesWithArea) {
    const double img = 64.0;
    const int small = roi_level_for_box(Box{0, 0, 6, 6}, img, img, 3, 7);
    const int medium = roi_level_for_box(Box{0, 0, 20, 20}, img, img, 3, 7);
    const int large = roi_level_for_box(Box{0, 0, 64, 64}, img, img, 3, 7);
    EXPECT_LE(small, medium);
    EXPECT_LE(medium, large);
    EXPECT_EQ(roi_level_for_box(Box{0, 0, 0, 0}, img, img, 3, 7), 3);
}

TEST(Attention, RejectsIndivisibleHeads) {
    ParamStore store;
    Rng rng(1);
    EXPECT_THROW(AttentionParams(store, rng, "t", 10, 4), ValueError);
}

TEST(Attention, SingleQuerySelfPath) {
    ParamStore store;
    Rng rng(2);
    AttentionParams p(store, rng, "t", 8, 2);
    Rng xr(3);
    Array x = random_array(xr, {1, 8});
    Array out = self_attention_block(x, p);
    // With K=1 the attention weight is 1, so out = LN(x + Wo(Wv x + bv) + bo).
    Array v = add_rowvec(matmul(x, p.wv), p.bv);
    Array expect = layer_norm(add(x, add_rowvec(matmul(v, p.wo), p.bo)), p.ln_g, p.ln_b);
    for (int i = 0; i < 8; ++i) EXPECT_NEAR(out.at({0, i}), expect.at({0, i}), 1e-12);
}

TEST(Attention, TwoQueryFixtureMatchesDirectEvaluation) {
    ParamStore store;
    Rng rng(4);
    AttentionParams p(store, rng, "t", 4, 1);
    Rng xr(5);
    Array x = random_array(xr, {2, 4});
    Array out = self_attention_block(x, p);

    // Direct single-head evaluation.
    Array q = add_rowvec(matmul(x, p.wq), p.bq);
    Array k = add_rowvec(matmul(x, p.wk), p.bk);
    Array v = add_rowvec(matmul(x, p.wv), p.bv);
    const double scale = 1.0 / 2.0; // 1/sqrt(4)
    double scores[2][2];
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 2; ++j) {
            double dot = 0.0;
            for (int d = 0; d < 4; ++d) dot += q.at({i, d}) * k.at({j, d});
            scores[i][j] = dot * scale;
        }
    }
    std::vector<double> ctx_data(8, 0.0);
    for (int i = 0; i < 2; ++i) {
        const double mx = std::max(scores[i][0], scores[i][1]);
        double e0 = std::exp(scores[i][0] - mx), e1 = std::exp(scores[i][1] - mx);
        const double z = e0 + e1;
        for (int d = 0; d < 4; ++d) {
            ctx_data[static_cast<std::size_t>(i * 4 + d)] =
                (e0 / z) * v.at({0, d}) + (e1 / z) * v.at({1, d});
        }
    }
    Array ctx = Array::from({2, 4}, std::move(ctx_data));
    Array expect = layer_norm(add(x, add_rowvec(matmul(ctx, p.wo), p.bo)), p.ln_g, p.ln_b);
    for (int i = 0; i < 2; ++i) {
        for (int d = 0; d < 4; ++d) EXPECT_NEAR(out.at({i, d}), expect.at({i, d}), 1e-12);
    }
}

TEST(Attention, PermutationEquivarianceExactForSwap) {
    ParamStore store;
    Rng rng(6);
    AttentionParams p(store, rng, "t", 8, 2);
    Rng xr(7);
    Array x = random_array(xr, {2, 8});
    Array swapped = gather_rows(x, {1, 0});
    Array out = self_attention_block(x, p);
    Array out_swapped = self_attention_block(swapped, p);
    for (int i = 0; i < 2; ++i) {
        for (int d = 0; d < 8; ++d) {
            EXPECT_EQ(out.at({i, d}), out_swapped.at({1 - i, d})); // bitwise
        }
    }
}

TEST(DynamicConv, ZeroQueryZeroGeneratorBias) {
    ParamStore store;
    Rng rng(8);
    DynamicConvParams p(store, rng, "t", 8, 4, 3);
    std::fill(p.gen_b.mutable_data().begin(), p.gen_b.mutable_data().end(), 0.0);
    Rng gr(9);
    Array grid = random_array(gr, {2, 4, 3, 3});
    Array q = Array::zeros({2, 8});
    Array out = dynamic_conv(RoiFeatures{grid}, q, p);
    // Zero queries generate zero W1/W2, so out = LN(0 + out_b).
    Array expect = layer_norm(add_rowvec(Array::zeros({2, 8}), p.out_b), p.ln_g, p.ln_b);
    for (int i = 0; i < 2; ++i) {
        for (int d = 0; d < 8; ++d) EXPECT_NEAR(out.at({i, d}), expect.at({i, d}), 1e-12);
    }
}

TEST(DynamicConv, ShapeContract) {
    ParamStore store;
    Rng rng(10);
    DynamicConvParams p(store, rng, "t", 64, 32, 7);
    EXPECT_EQ(p.cmid, 16);
    Rng gr(11);
    Array grid = random_array(gr, {4, 32, 7, 7});
    Array q = random_array(gr, {4, 64});
    Array out = dynamic_conv(RoiFeatures{grid}, q, p);
    EXPECT_EQ(out.shape(), (Shape{4, 64}));
}

TEST(DynamicConv, OneByOneFixtureHandComputable) {
    // S=1, C=1, cmid=1, d=4: the generated scalars act as w1, w2.
    ParamStore store;
    Rng rng(12);
    DynamicConvParams p(store, rng, "t", 4, 1, 1);
    ASSERT_EQ(p.cmid, 1);
    Array q = random_array(rng, {1, 4});
    Array grid = Array::from({1, 1, 1, 1}, {2.0});
    Array out = dynamic_conv(RoiFeatures{grid}, q, p);

    Array gen = add_rowvec(matmul(q, p.gen_w), p.gen_b);
    const double w1 = gen.at({0, 0}), w2 = gen.at({0, 1});
    const double h1 = std::max(0.0, 2.0 * w1);
    const double h2 = std::max(0.0, h1 * w2);
    std::vector<double> flat = {h2};
    Array proj = add_rowvec(matmul(Array::from({1, 1}, flat), p.out_w), p.out_b);
    Array expect = layer_norm(add(q, proj), p.ln_g, p.ln_b);
    for (int d = 0; d < 4; ++d) EXPECT_NEAR(out.at({0, d}), expect.at({0, d}), 1e-12);
}

StageConfig small_stage_config(bool roi_attn = true) {
    StageConfig sc;
    sc.d_model = 8;
    sc.channels = 8;
    sc.roi_size = 3;
    sc.heads = 2;
    sc.num_classes = 3;
    sc.use_roi_self_attention = roi_attn;
    return sc;
}

TEST(RcnnStage, ZeroRegressionLeavesBoxesUnchanged) {
    ParamStore store;
    Rng rng(13);
    StageParams p(store, rng, "s", small_stage_config());
    std::fill(p.reg_w2.mutable_data().begin(), p.reg_w2.mutable_data().end(), 0.0);
    std::fill(p.reg_b2.mutable_data().begin(), p.reg_b2.mutable_data().end(), 0.0);
    FeaturePyramid pyr = constant_pyramid(0.5);
    Rng qr(14);
    Array queries = random_array(qr, {3, 8});
    Array boxes = Array::from({3, 4}, {4, 4, 20, 20, 10, 12, 40, 44, 0, 0, 64, 64});
    StageOutput out = rcnn_stage(pyr, queries, boxes, p);
    for (int i = 0; i < 12; ++i) EXPECT_NEAR(out.boxes.data()[i], boxes.data()[i], 1e-12);
}

TEST(RcnnStage, LargeNegativeClassLogitsGiveNearZeroProbs) {
    ParamStore store;
    Rng rng(15);
    StageParams p(store, rng, "s", small_stage_config());
    std::fill(p.cls_w.mutable_data().begin(), p.cls_w.mutable_data().end(), 0.0);
    std::fill(p.cls_b.mutable_data().begin(), p.cls_b.mutable_data().end(), -30.0);
    FeaturePyramid pyr = constant_pyramid(0.5);
    Rng qr(16);
    Array queries = random_array(qr, {2, 8});
    Array boxes = Array::from({2, 4}, {4, 4, 20, 20, 10, 12, 40, 44});
    StageOutput out = rcnn_stage(pyr, queries, boxes, p);
    for (double v : out.class_probs.data()) EXPECT_LT(v, 1e-10);
}

TEST(RcnnStage, DeterministicOutputs) {
    ParamStore store;
    Rng rng(17);
    StageParams p(store, rng, "s", small_stage_config());
    FeaturePyramid pyr = constant_pyramid(0.25);
    Rng qr(18);
    Array queries = random_array(qr, {3, 8});
    Array boxes = Array::from({3, 4}, {4, 4, 20, 20, 10, 12, 40, 44, 8, 8, 30, 30});
    StageOutput a = rcnn_stage(pyr, queries, boxes, p);
    StageOutput b = rcnn_stage(pyr, queries, boxes, p);
    for (int i = 0; i < a.class_probs.numel(); ++i) {
        EXPECT_EQ(a.class_probs.data()[i], b.class_probs.data()[i]);
    }
    for (int i = 0; i < a.boxes.numel(); ++i) EXPECT_EQ(a.boxes.data()[i], b.boxes.data()[i]);
}

TEST(RcnnStage, PermutationEquivarianceExactForSwap) {
    ParamStore store;
    Rng rng(19);
    StageParams p(store, rng, "s", small_stage_config());
    FeaturePyramid pyr = constant_pyramid(0.3);
    Rng qr(20);
    Array queries = random_array(qr, {2, 8});
    Array boxes = Array::from({2, 4}, {4, 4, 20, 20, 10, 12, 40, 44});
    StageOutput out = rcnn_stage(pyr, queries, boxes, p);
    StageOutput swapped =
        rcnn_stage(pyr, gather_rows(queries, {1, 0}), gather_rows(boxes, {1, 0}), p);
    for (int d = 0; d < 8; ++d) {
        EXPECT_EQ(out.queries.at({0, d}), swapped.queries.at({1, d}));
        EXPECT_EQ(out.queries.at({1, d}), swapped.queries.at({0, d}));
    }
    for (int c = 0; c < 3; ++c) {
        EXPECT_EQ(out.class_probs.at({0, c}), swapped.class_probs.at({1, c}));
    }
    for (int c = 0; c < 4; ++c) {
        EXPECT_EQ(out.boxes.at({0, c}), swapped.boxes.at({1, c}));
    }
}

TEST(RcnnStage, PermutationEquivarianceNearExactLargerK) {
    ParamStore store;
    Rng rng(21);
    StageParams p(store, rng, "s", small_stage_config());
    FeaturePyramid pyr = constant_pyramid(0.4);
    Rng qr(22);
    const int k = 5;
    Array queries = random_array(qr, {k, 8});
    std::vector<double> box_data;
    for (int i = 0; i < k; ++i) {
        const double x1 = qr.uniform(0.0, 30.0), y1 = qr.uniform(0.0, 30.0);
        box_data.insert(box_data.end(), {x1, y1, x1 + qr.uniform(6.0, 25.0), y1 + qr.uniform(6.0, 25.0)});
    }
    Array boxes = Array::from({k, 4}, box_data);
    const std::vector<int> perm = {3, 1, 4, 0, 2};
    StageOutput out = rcnn_stage(pyr, queries, boxes, p);
    StageOutput permuted = rcnn_stage(pyr, gather_rows(queries, perm), gather_rows(boxes, perm), p);
    for (int i = 0; i < k; ++i) {
        for (int d = 0; d < 8; ++d) {
            EXPECT_NEAR(out.queries.at({perm[static_cast<std::size_t>(i)], d}),
                        permuted.queries.at({i, d}), 1e-9);
        }
    }
}

TEST(Cascade, SingleStageEqualsRcnnStage) {
    ParamStore store;
    Rng rng(23);
    StageParams p(store, rng, "s", small_stage_config());
    FeaturePyramid pyr = constant_pyramid(0.2);
    Rng qr(24);
    Array queries = random_array(qr, {2, 8});
    Array boxes = Array::from({2, 4}, {4, 4, 20, 20, 10, 12, 40, 44});
    const std::vector<StageParams> stages = {p};
    std::vector<StageOutput> outs = cascade_forward(pyr, queries, boxes, stages);
    StageOutput direct = rcnn_stage(pyr, queries, boxes, p);
    ASSERT_EQ(outs.size(), 1u);
    for (int i = 0; i < direct.class_probs.numel(); ++i) {
        EXPECT_EQ(outs[0].class_probs.data()[i], direct.class_probs.data()[i]);
    }
}

TEST(Cascade, SecondStageConsumesFirstStageBoxes) {
    ParamStore store;
    Rng rng(25);
    StageParams s0(store, rng, "s0", small_stage_config());
    StageParams s1(store, rng, "s1", small_stage_config());
    // Zero stage-2 regression: its output boxes must equal stage-1 boxes.
    std::fill(s1.reg_w2.mutable_data().begin(), s1.reg_w2.mutable_data().end(), 0.0);
    std::fill(s1.reg_b2.mutable_data().begin(), s1.reg_b2.mutable_data().end(), 0.0);
    FeaturePyramid pyr = constant_pyramid(0.45);
    Rng qr(26);
    Array queries = random_array(qr, {3, 8});
    Array boxes = Array::from({3, 4}, {4, 4, 20, 20, 10, 12, 40, 44, 8, 8, 30, 30});
    std::vector<StageOutput> outs = cascade_forward(pyr, queries, boxes, {s0, s1});
    ASSERT_EQ(outs.size(), 2u);
    for (int i = 0; i < outs[0].boxes.numel(); ++i) {
        EXPECT_NEAR(outs[1].boxes.data()[i], outs[0].boxes.data()[i], 1e-12);
    }
}

TEST(ApplyBoxDeltas, IdentityAndScale) {
    Array boxes = Array::from({1, 4}, {10, 20, 30, 40});
    auto [clipped, raw] = apply_box_deltas(boxes, Array::zeros({1, 4}), 64, 64);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(raw.data()[i], boxes.data()[i], 1e-12);

    Array deltas = Array::from({1, 4}, {0.0, 0.0, std::log(2.0), std::log(0.5)});
    auto [c2, r2] = apply_box_deltas(boxes, deltas, 64, 64);
    EXPECT_NEAR(r2.at({0, 2}) - r2.at({0, 0}), 40.0, 1e-12); // width doubled
    EXPECT_NEAR(r2.at({0, 3}) - r2.at({0, 1}), 10.0, 1e-12); // height halved
    EXPECT_NEAR(0.5 * (r2.at({0, 0}) + r2.at({0, 2})), 20.0, 1e-12); // center kept
}

} // namespace
} // namespace fqr
