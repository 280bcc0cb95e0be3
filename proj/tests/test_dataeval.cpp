// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "fqr/bench.hpp"
#include "fqr/dataset.hpp"
#include "fqr/evalmetrics.hpp"
#include "fqr/overlay.hpp"
#include "fqr/util.hpp"

namespace fqr {
namespace {

namespace fs = std::filesystem;

SceneSpec default_spec() {
    SceneSpec s;
    s.height = 64;
    s.width = 64;
    s.n_objects_min = 1;
    s.n_objects_max = 4;
    s.num_classes = 3;
    return s;
}

TEST(SceneGen, DeterministicPerSeed) {
    const Scene a = generate_scene(42, default_spec());
    const Scene b = generate_scene(42, default_spec());
    ASSERT_EQ(a.annotation.size(), b.annotation.size());
    for (int i = 0; i < a.image.numel(); ++i) EXPECT_EQ(a.image.data()[i], b.image.data()[i]);
    for (int i = 0; i < a.annotation.size(); ++i) {
        EXPECT_EQ(a.annotation.boxes[static_cast<std::size_t>(i)].x1,
                  b.annotation.boxes[static_cast<std::size_t>(i)].x1);
        EXPECT_EQ(a.annotation.labels[static_cast<std::size_t>(i)],
                  b.annotation.labels[static_cast<std::size_t>(i)]);
    }
}

TEST(SceneGen, EmptySceneHasNoAnnotations) {
    SceneSpec spec = default_spec();
    spec.n_objects_min = 0;
    spec.n_objects_max = 0;
    const Scene s = generate_scene(7, spec);
    EXPECT_EQ(s.annotation.size(), 0);
    EXPECT_EQ(s.image.shape(), (Shape{3, 64, 64}));
}

TEST(SceneGen, AnnotationsAreValidAndMinSized) {
    for (std::uint64_t seed = 1; seed <= 30; ++seed) {
        const Scene s = generate_scene(seed, default_spec());
        s.annotation.validate(64, 64, 3);
        for (const Box& b : s.annotation.boxes) {
            EXPECT_GE(b.width(), 8.0);
            EXPECT_GE(b.height(), 8.0);
        }
        // Boxes are pairwise disjoint by construction.
        for (std::size_t i = 0; i < s.annotation.boxes.size(); ++i) {
            for (std::size_t j = i + 1; j < s.annotation.boxes.size(); ++j) {
                EXPECT_EQ(intersection_area(s.annotation.boxes[i], s.annotation.boxes[j]), 0.0);
            }
        }
    }
}

// Pixel-scan oracle: shape pixels (bright, distinct from the dim background)
// must lie inside annotation boxes, and each box must be tight around them.
TEST(SceneGen, BoxesTightlyBoundShapePixels) {
    for (std::uint64_t seed = 100; seed < 115; ++seed) {
        const Scene s = generate_scene(seed, default_spec());
        const int h = s.image.dim(1), w = s.image.dim(2);
        auto is_shape_pixel = [&](int x, int y) {
            double mx = 0.0;
            for (int c = 0; c < 3; ++c) {
                mx = std::max(mx, s.image.at({c, y, x}));
            }
            return mx >= 0.5;
        };
        for (const Box& b : s.annotation.boxes) {
            int min_x = w, max_x = -1, min_y = h, max_y = -1;
            for (int y = static_cast<int>(b.y1); y < static_cast<int>(b.y2); ++y) {
                for (int x = static_cast<int>(b.x1); x < static_cast<int>(b.x2); ++x) {
                    if (is_shape_pixel(x, y)) {
                        min_x = std::min(min_x, x);
                        max_x = std::max(max_x, x);
                        min_y = std::min(min_y, y);
                        max_y = std::max(max_y, y);
                    }
                }
            }
            ASSERT_GE(max_x, 0) << "box contains no shape pixels, seed " << seed;
            EXPECT_EQ(b.x1, static_cast<double>(min_x));
            EXPECT_EQ(b.y1, static_cast<double>(min_y));
            EXPECT_EQ(b.x2, static_cast<double>(max_x + 1));
            EXPECT_EQ(b.y2, static_cast<double>(max_y + 1));
        }
        // No shape pixels outside all boxes.
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (!is_shape_pixel(x, y)) continue;
                bool inside = false;
                for (const Box& b : s.annotation.boxes) {
                    if (x + 0.5 >= b.x1 && x + 0.5 <= b.x2 && y + 0.5 >= b.y1 && y + 0.5 <= b.y2) {
                        inside = true;
                    }
                }
                EXPECT_TRUE(inside) << "stray shape pixel at " << x << "," << y << " seed " << seed;
            }
        }
    }
}

TEST(DatasetIo, RoundTripIsExact) {
    const std::string dir = (fs::temp_directory_path() / "fqr_ds_rt").string();
    fs::remove_all(dir);
    std::vector<Scene> scenes;
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        scenes.push_back(generate_scene(seed, default_spec()));
    }
    save_dataset(dir, scenes);
    const std::vector<Scene> back = load_dataset(dir);
    ASSERT_EQ(back.size(), scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        EXPECT_EQ(back[i].id, scenes[i].id);
        ASSERT_EQ(back[i].image.numel(), scenes[i].image.numel());
        for (int j = 0; j < scenes[i].image.numel(); ++j) {
            EXPECT_EQ(back[i].image.data()[j], scenes[i].image.data()[j]);
        }
        ASSERT_EQ(back[i].annotation.size(), scenes[i].annotation.size());
        for (int j = 0; j < scenes[i].annotation.size(); ++j) {
            EXPECT_EQ(back[i].annotation.boxes[static_cast<std::size_t>(j)].x2,
                      scenes[i].annotation.boxes[static_cast<std::size_t>(j)].x2);
            EXPECT_EQ(back[i].annotation.labels[static_cast<std::size_t>(j)],
                      scenes[i].annotation.labels[static_cast<std::size_t>(j)]);
        }
    }
    // Re-export is byte-identical.
    const std::string dir2 = (fs::temp_directory_path() / "fqr_ds_rt2").string();
    fs::remove_all(dir2);
    save_dataset(dir2, back);
    auto bytes = [](const fs::path& p) {
        std::ifstream is(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
    };
    EXPECT_EQ(bytes(fs::path(dir) / "scenes.jsonl"), bytes(fs::path(dir2) / "scenes.jsonl"));
    EXPECT_EQ(bytes(fs::path(dir) / (scenes[0].id + ".ppm")),
              bytes(fs::path(dir2) / (scenes[0].id + ".ppm")));
    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST(DatasetIo, UnknownKeysRejected) {
    const std::string dir = (fs::temp_directory_path() / "fqr_ds_bad").string();
    fs::create_directories(dir);
    {
        std::ofstream os(fs::path(dir) / "scenes.jsonl");
        os << R"({"id":"x","width":4,"height":4,"image_ppm":"x.ppm","boxes":[],"labels":[],"extra":1})"
           << "\n";
    }
    EXPECT_THROW(load_dataset(dir), ValueError);
    fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

TEST(AveragePrecision, TrivialCases) {
    const Box g{0, 0, 10, 10};
    EXPECT_DOUBLE_EQ(
        average_precision({{Detection{g, 0, 0.9}}}, {{g}}, 0.5), 1.0);
    EXPECT_DOUBLE_EQ(average_precision({{}}, {{g}}, 0.5), 0.0);
}

TEST(AveragePrecision, TpFpTpHandExample) {
    // 2 GTs; ranked detections: TP, FP, TP -> AP = 0.5*1 + 0.5*(2/3).
    const Box g1{0, 0, 10, 10}, g2{20, 20, 30, 30};
    std::vector<Detection> dets = {
        Detection{g1, 0, 0.9},
        Detection{Box{40, 40, 50, 50}, 0, 0.8},
        Detection{g2, 0, 0.7},
    };
    const double ap = average_precision({dets}, {{g1, g2}}, 0.5);
    EXPECT_NEAR(ap, 0.5 + 0.5 * (2.0 / 3.0), 1e-12);
    EXPECT_NEAR(ap, 0.8333, 1e-4);
}

// Exhaustive rank-walk oracle: recompute the TP/FP counts from scratch at
// every rank and integrate the precision envelope directly.
double rank_walk_ap(std::vector<Detection> dets, const std::vector<Box>& gts, double thr) {
    std::sort(dets.begin(), dets.end(),
              [](const Detection& a, const Detection& b) { return a.score > b.score; });
    const int n = static_cast<int>(dets.size());
    std::vector<double> precision, recall;
    for (int rank = 1; rank <= n; ++rank) {
        std::vector<bool> used(gts.size(), false);
        int tp = 0;
        for (int i = 0; i < rank; ++i) {
            double best = -1.0;
            int bj = -1;
            for (std::size_t j = 0; j < gts.size(); ++j) {
                if (used[j]) continue;
                const double v = iou(dets[static_cast<std::size_t>(i)].box, gts[j]);
                if (v > best) {
                    best = v;
                    bj = static_cast<int>(j);
                }
            }
            if (best >= thr && bj >= 0) {
                used[static_cast<std::size_t>(bj)] = true;
                ++tp;
            }
        }
        precision.push_back(static_cast<double>(tp) / rank);
        recall.push_back(gts.empty() ? 0.0 : static_cast<double>(tp) / gts.size());
    }
    double ap = 0.0, prev = 0.0;
    for (int i = 0; i < n; ++i) {
        if (recall[static_cast<std::size_t>(i)] <= prev) continue;
        double pmax = 0.0;
        for (int j = i; j < n; ++j) pmax = std::max(pmax, precision[static_cast<std::size_t>(j)]);
        ap += (recall[static_cast<std::size_t>(i)] - prev) * pmax;
        prev = recall[static_cast<std::size_t>(i)];
    }
    return ap;
}

TEST(AveragePrecision, MatchesRankWalkOracleOnRandomFixtures) {
    Rng rng(55);
    for (int trial = 0; trial < 40; ++trial) {
        const int n_gts = rng.uniform_int(1, 3);
        const int n_dets = rng.uniform_int(0, 5);
        std::vector<Box> gts;
        for (int i = 0; i < n_gts; ++i) {
            const double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
            gts.push_back(Box{x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20)});
        }
        std::vector<Detection> dets;
        for (int i = 0; i < n_dets; ++i) {
            // Half the detections perturb a GT, half are random noise.
            Box b;
            if (i % 2 == 0) {
                const Box& g = gts[static_cast<std::size_t>(i % n_gts)];
                b = Box{g.x1 + rng.uniform(-3, 3), g.y1 + rng.uniform(-3, 3),
                        g.x2 + rng.uniform(-3, 3), g.y2 + rng.uniform(-3, 3)};
            } else {
                const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
                b = Box{x, y, x + rng.uniform(4, 15), y + rng.uniform(4, 15)};
            }
            dets.push_back(Detection{b, 0, rng.uniform()});
        }
        const double got = average_precision({dets}, {gts}, 0.5);
        const double want = rank_walk_ap(dets, gts, 0.5);
        EXPECT_NEAR(got, want, 1e-12) << "trial " << trial;
    }
}

TEST(AveragePrecision, InvariantToScoreRescaling) {
    Rng rng(66);
    std::vector<Box> gts = {Box{0, 0, 10, 10}, Box{20, 20, 32, 34}};
    std::vector<Detection> dets;
    for (int i = 0; i < 5; ++i) {
        const double x = rng.uniform(0, 30), y = rng.uniform(0, 30);
        dets.push_back(Detection{Box{x, y, x + 10, y + 11}, 0, rng.uniform(0.1, 0.9)});
    }
    const double base = average_precision({dets}, {gts}, 0.5);
    for (double scale : {0.1, 0.5, 1e-3}) {
        std::vector<Detection> scaled = dets;
        for (Detection& d : scaled) d.score *= scale;
        EXPECT_DOUBLE_EQ(average_precision({scaled}, {gts}, 0.5), base);
    }
}

// ---------------------------------------------------------------------------
// Recall / AR@K
// ---------------------------------------------------------------------------

TEST(Recall, ExactProposalsAndNone) {
    const std::vector<Box> gts = {Box{0, 0, 10, 10}, Box{20, 20, 30, 30}};
    auto curve = recall_curve({gts}, {gts}, coco_iou_thresholds());
    for (const auto& [_, v] : curve) EXPECT_DOUBLE_EQ(v, 1.0);
    auto empty = recall_curve({{}}, {gts}, {0.5});
    EXPECT_DOUBLE_EQ(empty[0.5], 0.0);
}

TEST(Recall, KnownIousFixture) {
    // Proposals with IoUs {0.9, 0.6, 0.3} against three GTs.
    const Box g{0, 0, 10, 10};
    const std::vector<Box> gts = {g, Box{20, 0, 30, 10}, Box{40, 0, 50, 10}};
    const std::vector<Box> props = {Box{0, 0, 10, 9}, Box{20, 0, 30, 6}, Box{40, 0, 50, 3}};
    EXPECT_NEAR(iou(props[0], gts[0]), 0.9, 1e-12);
    EXPECT_NEAR(iou(props[1], gts[1]), 0.6, 1e-12);
    EXPECT_NEAR(iou(props[2], gts[2]), 0.3, 1e-12);
    auto curve = recall_curve({props}, {gts}, {0.5, 0.65, 0.95});
    EXPECT_NEAR(curve[0.5], 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(curve[0.65], 1.0 / 3.0, 1e-12);
    EXPECT_NEAR(curve[0.95], 0.0, 1e-12);
}

TEST(Recall, ArAtKNondecreasingInK) {
    Rng rng(77);
    std::vector<std::vector<ScoredBox>> proposals(4);
    std::vector<std::vector<Box>> gts(4);
    for (int im = 0; im < 4; ++im) {
        for (int g = 0; g < 3; ++g) {
            const double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
            gts[static_cast<std::size_t>(im)].push_back(
                Box{x, y, x + rng.uniform(6, 18), y + rng.uniform(6, 18)});
        }
        for (int p = 0; p < 12; ++p) {
            const Box& g = gts[static_cast<std::size_t>(im)][static_cast<std::size_t>(p % 3)];
            proposals[static_cast<std::size_t>(im)].push_back(
                ScoredBox{Box{g.x1 + rng.uniform(-4, 4), g.y1 + rng.uniform(-4, 4),
                              g.x2 + rng.uniform(-4, 4), g.y2 + rng.uniform(-4, 4)},
                          rng.uniform()});
        }
    }
    auto ar = ar_at_k(proposals, gts, {1, 3, 5, 10, 12});
    double prev = -1.0;
    for (const auto& [k, v] : ar) {
        EXPECT_GE(v, prev) << "K=" << k;
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        prev = v;
    }
}

TEST(Recall, ArAtKEnumerationOracle) {
    // One image, two GTs; K=1 keeps only the higher-scoring proposal.
    const Box g1{0, 0, 10, 10}, g2{20, 20, 30, 30};
    std::vector<ScoredBox> props = {ScoredBox{g1, 0.4}, ScoredBox{g2, 0.9}};
    auto ar = ar_at_k({props}, {{g1, g2}}, {1, 2});
    // K=1: only g2 covered at every threshold -> recall 0.5 everywhere.
    EXPECT_NEAR(ar[1], 0.5, 1e-12);
    EXPECT_NEAR(ar[2], 1.0, 1e-12);
}

TEST(EvalReport, ValuesInUnitRange) {
    Rng rng(88);
    std::vector<std::vector<Detection>> dets(3);
    std::vector<SceneAnnotation> anns(3);
    for (int im = 0; im < 3; ++im) {
        for (int g = 0; g < 2; ++g) {
            const double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
            const Box b{x, y, x + rng.uniform(6, 18), y + rng.uniform(6, 18)};
            anns[static_cast<std::size_t>(im)].boxes.push_back(b);
            anns[static_cast<std::size_t>(im)].labels.push_back(g % 2);
            dets[static_cast<std::size_t>(im)].push_back(
                Detection{Box{b.x1 + 1, b.y1 + 1, b.x2 - 1, b.y2 - 1}, g % 2, rng.uniform()});
        }
    }
    EvalReport rep = evaluate_detections(dets, anns, 3);
    EXPECT_GE(rep.ap50, 0.0);
    EXPECT_LE(rep.ap50, 1.0);
    EXPECT_GE(rep.map5095, 0.0);
    EXPECT_LE(rep.map5095, 1.0);
    for (const auto& [_, v] : rep.ap_per_iou) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    for (const auto& [_, v] : rep.ar_at_k) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    EXPECT_EQ(rep.total_gts, 6);
}

// ---------------------------------------------------------------------------
// Delta distribution
// ---------------------------------------------------------------------------

TEST(DeltaDistribution, ExactProposalsConcentrateAtZeroBin) {
    const Box g{10, 10, 30, 30};
    std::vector<std::vector<std::pair<Box, Box>>> pairs = {{{g, g}, {g, g}}};
    auto hists = delta_distribution(pairs, {0});
    ASSERT_EQ(hists.size(), 1u);
    const int zero_bin = DeltaHistogram::bin_of(0.0);
    EXPECT_EQ(hists[0].counts[static_cast<std::size_t>(zero_bin) * DeltaHistogram::kBins + zero_bin], 2);
    EXPECT_EQ(hists[0].matched, 2);
    EXPECT_DOUBLE_EQ(hists[0].mean_abs_dx, 0.0);
}

TEST(DeltaDistribution, LaterStageCloserProposalsShrinkMeanDelta) {
    const Box g{10, 10, 30, 30};
    const Box far{2, 2, 22, 22};   // stage-0 proposal
    const Box near{8, 9, 28, 29};  // stage-1 proposal, strictly closer
    auto hists = delta_distribution({{{far, g}}, {{near, g}}}, {0, 0});
    EXPECT_LT(hists[1].mean_abs_dx, hists[0].mean_abs_dx);
    EXPECT_LT(hists[1].mean_abs_dy, hists[0].mean_abs_dy);
}

TEST(DeltaDistribution, MatchesBruteForceBinningOracle) {
    Rng rng(99);
    std::vector<std::pair<Box, Box>> pairs;
    for (int i = 0; i < 50; ++i) {
        const double x = rng.uniform(5, 40), y = rng.uniform(5, 40);
        const Box p{x, y, x + rng.uniform(5, 15), y + rng.uniform(5, 15)};
        const Box g{x + rng.uniform(-6, 6), y + rng.uniform(-6, 6), x + rng.uniform(8, 20),
                    y + rng.uniform(8, 20)};
        pairs.emplace_back(p, g);
    }
    auto hists = delta_distribution({pairs}, {0});
    std::vector<int> expect(DeltaHistogram::kBins * DeltaHistogram::kBins, 0);
    for (const auto& [p, g] : pairs) {
        const double dx = (g.cx() - p.cx()) / p.width();
        const double dy = (g.cy() - p.cy()) / p.height();
        auto bin = [](double v) {
            return std::clamp(static_cast<int>(std::floor((v + 1.0) / 0.05)), 0, 39);
        };
        expect[static_cast<std::size_t>(bin(dy)) * 40 + bin(dx)] += 1;
    }
    EXPECT_EQ(hists[0].counts, expect);
    EXPECT_EQ(hists[0].matched, 50);
}

TEST(DeltaDistribution, DegenerateProposalsExcluded) {
    const Box g{10, 10, 30, 30};
    auto hists = delta_distribution({{{Box{5, 5, 5, 25}, g}, {g, g}}}, {1});
    EXPECT_EQ(hists[0].matched, 1);
    EXPECT_EQ(hists[0].excluded, 2); // 1 reported unmatched + 1 degenerate
}

// ---------------------------------------------------------------------------
// Overlay rendering
// ---------------------------------------------------------------------------

TEST(Overlay, EmptyDetectionsReproduceScenePixels) {
    const Scene s = generate_scene(3, default_spec());
    const std::string p1 = (fs::temp_directory_path() / "fqr_ov1.ppm").string();
    const std::string p2 = (fs::temp_directory_path() / "fqr_ov2.ppm").string();
    render_overlay(s, {}, p1);
    write_ppm(p2, 64, 64, image_to_u8_interleaved(s.image));
    std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
    const std::string ba((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    const std::string bb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    EXPECT_EQ(ba, bb);
    fs::remove(p1);
    fs::remove(p2);
}

TEST(Overlay, FullImageBoxDrawsBorderAndParses) {
    const Scene s = generate_scene(4, default_spec());
    const std::string path = (fs::temp_directory_path() / "fqr_ov3.ppm").string();
    render_overlay(s, {Detection{Box{0, 0, 64, 64}, 1, 0.87}}, path);
    int w = 0, h = 0;
    const std::vector<unsigned char> rgb = read_ppm(path, w, h);
    EXPECT_EQ(w, 64);
    EXPECT_EQ(h, 64);
    // Corner pixels carry the class-1 palette color (green).
    EXPECT_EQ(rgb[1], 255);
    const std::size_t last = (static_cast<std::size_t>(63) * 64 + 63) * 3;
    EXPECT_EQ(rgb[last + 1], 255);
    fs::remove(path);
}

} // namespace
} // namespace fqr
