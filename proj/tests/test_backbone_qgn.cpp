// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "fqr/backbone.hpp"
#include "fqr/gradcheck_suite.hpp"
#include "fqr/qgn.hpp"
#include "fqr/util.hpp"

namespace fqr {
namespace {

BackboneParams make_backbone(ParamStore& store, std::uint64_t seed = 7) {
    Rng rng(seed);
    return BackboneParams(store, rng, BackboneConfig{32, 3, 7});
}

TEST(Backbone, PyramidShapesAt64) {
    ParamStore store;
    BackboneParams p = make_backbone(store);
    Rng rng(1);
    FeaturePyramid pyr = extract_pyramid(random_array(rng, {3, 64, 64}, 0.0, 1.0), p);
    ASSERT_EQ(pyr.levels.size(), 5u);
    const int expect_hw[5] = {8, 4, 2, 1, 1};
    for (int i = 0; i < 5; ++i) {
        const FeatureLevel& l = pyr.levels[static_cast<std::size_t>(i)];
        EXPECT_EQ(l.level, 3 + i);
        EXPECT_EQ(l.stride, 1 << (3 + i));
        EXPECT_EQ(l.map.shape(), (Shape{32, expect_hw[i], expect_hw[i]}));
    }
}

TEST(Backbone, StrideRuleOverRandomSizes) {
    ParamStore store;
    BackboneParams p = make_backbone(store);
    Rng rng(2);
    for (int trial = 0; trial < 6; ++trial) {
        const int h = rng.uniform_int(32, 160);
        const int w = rng.uniform_int(32, 160);
        FeaturePyramid pyr = extract_pyramid(random_array(rng, {3, h, w}, 0.0, 1.0), p);
        int prev_stride = 0;
        for (const FeatureLevel& l : pyr.levels) {
            const int stride = 1 << l.level;
            EXPECT_EQ(l.map.dim(1), std::max(1, (h + stride - 1) / stride))
                << "H=" << h << " level " << l.level;
            EXPECT_EQ(l.map.dim(2), std::max(1, (w + stride - 1) / stride))
                << "W=" << w << " level " << l.level;
            if (prev_stride > 0) EXPECT_EQ(l.stride, 2 * prev_stride);
            prev_stride = l.stride;
        }
    }
}

TEST(Backbone, ZeroImageGivesZeroPyramid) {
    ParamStore store;
    BackboneParams p = make_backbone(store);
    FeaturePyramid pyr = extract_pyramid(Array::zeros({3, 64, 64}), p);
    for (const FeatureLevel& l : pyr.levels) {
        for (double v : l.map.data()) EXPECT_EQ(v, 0.0);
    }
}

TEST(Backbone, DeterministicForward) {
    ParamStore store;
    BackboneParams p = make_backbone(store);
    Rng rng(3);
    Array img = random_array(rng, {3, 64, 64}, 0.0, 1.0);
    FeaturePyramid a = extract_pyramid(img, p);
    FeaturePyramid b = extract_pyramid(img, p);
    for (std::size_t i = 0; i < a.levels.size(); ++i) {
        auto da = a.levels[i].map.data();
        auto db = b.levels[i].map.data();
        for (std::size_t j = 0; j < da.size(); ++j) EXPECT_EQ(da[j], db[j]);
    }
}

TEST(Backbone, RejectsNonRgbImage) {
    ParamStore store;
    BackboneParams p = make_backbone(store);
    EXPECT_THROW(extract_pyramid(Array::zeros({1, 64, 64}), p), ShapeError);
}

TEST(Backbone, GradientFlowsToParameters) {
    ParamStore store;
    BackboneParams p = make_backbone(store);
    Rng rng(4);
    Array img = random_array(rng, {3, 32, 32}, 0.0, 1.0);
    const std::uint64_t wseed = 19;
    auto build = [&]() {
        FeaturePyramid pyr = extract_pyramid(img, p);
        Rng wr(wseed);
        Array w = random_array(wr, pyr.levels[0].map.shape(), 0.25, 1.0);
        return sum_all(mul(pyr.levels[0].map, w));
    };
    EXPECT_LE(grad_check_param(build, store.find("backbone.stage1.w"), 1e-6, 12), 1e-5);
    EXPECT_LE(grad_check_param(build, store.find("fpn.smooth3.w"), 1e-6, 12), 1e-5);
}

// ---------------------------------------------------------------------------
// QGN
// ---------------------------------------------------------------------------

struct QgnFixture {
    ParamStore store;
    std::unique_ptr<BackboneParams> backbone;
    std::unique_ptr<QgnParams> qgn;

    explicit QgnFixture(std::uint64_t seed = 11) {
        Rng rng(seed);
        backbone = std::make_unique<BackboneParams>(store, rng, BackboneConfig{32, 3, 7});
        qgn = std::make_unique<QgnParams>(store, rng, QgnConfig{32, 64, -2.0});
    }
};

FeaturePyramid zero_pyramid(int c = 32) {
    FeaturePyramid pyr;
    pyr.level_lo = 3;
    pyr.level_hi = 7;
    pyr.image_w = 64;
    pyr.image_h = 64;
    const int hw[5] = {8, 4, 2, 1, 1};
    for (int i = 0; i < 5; ++i) {
        pyr.levels.push_back(FeatureLevel{3 + i, 1 << (3 + i), Array::zeros({c, hw[i], hw[i]})});
    }
    return pyr;
}

TEST(Qgn, ZeroFeaturesGiveBiasProbabilityAndStrideDistances) {
    QgnFixture fx;
    // Zero every head weight; biases stay (objectness bias is -2).
    for (const char* name : {"qgn.tower.w", "qgn.obj.w", "qgn.ltrb.w", "qgn.query.w"}) {
        Array w = fx.store.find(name);
        std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
    }
    const std::vector<DenseLevelPrediction> preds = dense_head(zero_pyramid(), *fx.qgn);
    ASSERT_EQ(preds.size(), 5u);
    const double expect_p = 1.0 / (1.0 + std::exp(2.0));
    EXPECT_NEAR(expect_p, 0.1192, 1e-4);
    for (const DenseLevelPrediction& p : preds) {
        for (double logit : p.objectness_logits.data()) {
            EXPECT_NEAR(1.0 / (1.0 + std::exp(-logit)), expect_p, 1e-12);
        }
        // Raw regression 0 decodes to exp(0) * stride.
        for (double d : p.ltrb.data()) EXPECT_DOUBLE_EQ(d, static_cast<double>(p.stride));
    }
    // Query map shape contract: [D, H, W].
    EXPECT_EQ(preds[0].query_map.shape(), (Shape{64, 8, 8}));
}

TEST(Qgn, DecodeLocationExamples) {
    const double ltrb1[4] = {2, 3, 4, 5};
    const Box b1 = decode_location(8, 1, 1, ltrb1, 64, 64);
    EXPECT_DOUBLE_EQ(b1.x1, 10.0);
    EXPECT_DOUBLE_EQ(b1.y1, 9.0);
    EXPECT_DOUBLE_EQ(b1.x2, 16.0);
    EXPECT_DOUBLE_EQ(b1.y2, 17.0);

    const double zero[4] = {0, 0, 0, 0};
    const Box b2 = decode_location(8, 1, 1, zero, 64, 64);
    EXPECT_DOUBLE_EQ(b2.x1, 12.0);
    EXPECT_DOUBLE_EQ(b2.x2, 12.0);
    EXPECT_DOUBLE_EQ(b2.y1, 12.0);
    EXPECT_DOUBLE_EQ(b2.y2, 12.0);

    const double big[4] = {100, 100, 100, 100};
    const Box b3 = decode_location(8, 0, 0, big, 64, 64);
    EXPECT_DOUBLE_EQ(b3.x1, 0.0);
    EXPECT_DOUBLE_EQ(b3.y1, 0.0);
    EXPECT_DOUBLE_EQ(b3.x2, 64.0);
    EXPECT_DOUBLE_EQ(b3.y2, 64.0);
}

TEST(Qgn, EncodeDecodeIdentityAtInteriorLocation) {
    const Box gt{6.0, 9.0, 30.0, 26.0};
    const int stride = 8, row = 1, col = 2; // center (20, 12), inside gt
    const double cx = (col + 0.5) * stride, cy = (row + 0.5) * stride;
    const double ltrb[4] = {cx - gt.x1, cy - gt.y1, gt.x2 - cx, gt.y2 - cy};
    const Box back = decode_location(stride, row, col, ltrb, 64, 64);
    EXPECT_DOUBLE_EQ(back.x1, gt.x1);
    EXPECT_DOUBLE_EQ(back.y1, gt.y1);
    EXPECT_DOUBLE_EQ(back.x2, gt.x2);
    EXPECT_DOUBLE_EQ(back.y2, gt.y2);
}

DenseDecoded small_dense_fixture(const std::vector<double>& logits) {
    // One level, 2x2 at stride 8, deterministic ltrb and features.
    std::vector<DenseLevelPrediction> preds;
    DenseLevelPrediction p;
    p.level = 3;
    p.stride = 8;
    p.objectness_logits = Array::from({2, 2}, logits);
    p.ltrb = Array::filled({4, 2, 2}, 4.0);
    std::vector<double> qm;
    for (int d = 0; d < 3; ++d) {
        for (int i = 0; i < 4; ++i) qm.push_back(10.0 * d + i);
    }
    p.query_map = Array::from({3, 2, 2}, std::move(qm));
    preds.push_back(std::move(p));
    return flatten_dense(preds, 64, 64);
}

TEST(Qgn, SelectTopKInScoreOrder) {
    // scores (sigmoid of logits) ranked: idx0 highest, idx2 next.
    DenseDecoded dense = small_dense_fixture({2.0, -2.0, 0.5, -1.0});
    QuerySet qs = select_queries(dense, 2);
    ASSERT_EQ(qs.size(), 2);
    EXPECT_EQ(qs.provenance[0].row, 0);
    EXPECT_EQ(qs.provenance[0].col, 0);
    EXPECT_EQ(qs.provenance[1].row, 1);
    EXPECT_EQ(qs.provenance[1].col, 0);
    EXPECT_GT(qs.scores[0], qs.scores[1]);
    EXPECT_FALSE(qs.shortfall);
}

TEST(Qgn, SelectAllWhenKExceedsLocations) {
    DenseDecoded dense = small_dense_fixture({2.0, -2.0, 0.5, -1.0});
    QuerySet qs = select_queries(dense, 100);
    EXPECT_EQ(qs.size(), 4);
    EXPECT_TRUE(qs.shortfall);
}

TEST(Qgn, TieBreakIsLexicographic) {
    DenseDecoded dense = small_dense_fixture({0.7, 0.7, 0.7, 0.7});
    QuerySet qs = select_queries(dense, 3);
    ASSERT_EQ(qs.size(), 3);
    EXPECT_EQ(qs.provenance[0].row, 0);
    EXPECT_EQ(qs.provenance[0].col, 0);
    EXPECT_EQ(qs.provenance[1].row, 0);
    EXPECT_EQ(qs.provenance[1].col, 1);
    EXPECT_EQ(qs.provenance[2].row, 1);
    EXPECT_EQ(qs.provenance[2].col, 0);
}

TEST(Qgn, SelectionEqualsFullSortOracle) {
    QgnFixture fx;
    Rng rng(23);
    FeaturePyramid pyr = zero_pyramid();
    for (FeatureLevel& l : pyr.levels) l.map = random_array(rng, l.map.shape(), -1.0, 1.0);
    DenseDecoded dense = flatten_dense(dense_head(pyr, *fx.qgn), 64, 64);
    const int k = 10;
    QuerySet qs = select_queries(dense, k);

    std::vector<int> order(static_cast<std::size_t>(dense.size()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return dense.scores[static_cast<std::size_t>(a)] > dense.scores[static_cast<std::size_t>(b)];
    });
    for (int i = 0; i < k; ++i) {
        const int idx = order[static_cast<std::size_t>(i)];
        EXPECT_EQ(qs.provenance[static_cast<std::size_t>(i)].level,
                  dense.locs[static_cast<std::size_t>(idx)].level);
        EXPECT_EQ(qs.provenance[static_cast<std::size_t>(i)].row,
                  dense.locs[static_cast<std::size_t>(idx)].row);
        EXPECT_EQ(qs.provenance[static_cast<std::size_t>(i)].col,
                  dense.locs[static_cast<std::size_t>(idx)].col);
        EXPECT_DOUBLE_EQ(qs.scores[static_cast<std::size_t>(i)],
                         dense.scores[static_cast<std::size_t>(idx)]);
    }
}

TEST(Qgn, FeaturesMatchQueryMapAtProvenance) {
    QgnFixture fx;
    Rng rng(29);
    FeaturePyramid pyr = zero_pyramid();
    for (FeatureLevel& l : pyr.levels) l.map = random_array(rng, l.map.shape(), -1.0, 1.0);
    const std::vector<DenseLevelPrediction> preds = dense_head(pyr, *fx.qgn);
    DenseDecoded dense = flatten_dense(preds, 64, 64);
    QuerySet qs = select_queries(dense, 8);
    for (int i = 0; i < qs.size(); ++i) {
        const QueryProvenance& pv = qs.provenance[static_cast<std::size_t>(i)];
        const DenseLevelPrediction* lvl = nullptr;
        for (const auto& p : preds) {
            if (p.level == pv.level) lvl = &p;
        }
        ASSERT_NE(lvl, nullptr);
        for (int d = 0; d < 64; ++d) {
            EXPECT_EQ(qs.features.at({i, d}), lvl->query_map.at({d, pv.row, pv.col}));
        }
    }
}

TEST(Qgn, GradientFlowsThroughSelectionIntoHeadParameters) {
    QgnFixture fx;
    Rng rng(31);
    Array img = random_array(rng, {3, 32, 32}, 0.0, 1.0);
    const std::uint64_t wseed = 37;
    auto build = [&]() {
        FeaturePyramid pyr = extract_pyramid(img, *fx.backbone);
        DenseDecoded dense = flatten_dense(dense_head(pyr, *fx.qgn), 32, 32);
        QuerySet qs = select_queries(dense, 6);
        Rng wr(wseed);
        Array wf = random_array(wr, qs.features.shape(), 0.25, 1.0);
        Array wb = random_array(wr, qs.boxes_arr.shape(), 0.25, 1.0);
        return add(sum_all(mul(qs.features, wf)), sum_all(mul(qs.boxes_arr, wb)));
    };
    EXPECT_LE(grad_check_param(build, fx.store.find("qgn.query.w"), 1e-6, 10), 1e-5);
    EXPECT_LE(grad_check_param(build, fx.store.find("qgn.ltrb.w"), 1e-6, 10), 1e-5);
    EXPECT_LE(grad_check_param(build, fx.store.find("qgn.tower.w"), 1e-6, 10), 1e-5);
}

} // namespace
} // namespace fqr
