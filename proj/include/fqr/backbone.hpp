// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>
#include <vector>

#include "fqr/array.hpp"
#include "fqr/image_ops.hpp"
#include "fqr/ops.hpp"
#include "fqr/params.hpp"

namespace fqr {

// Feature map at stride 2^level of the input image.
struct FeatureLevel {
    int level = 0;
    int stride = 0;
    Array map; // [C, H_l, W_l]
};

struct FeaturePyramid {
    std::vector<FeatureLevel> levels; // contiguous, ascending level
    int level_lo = 0, level_hi = 0;
    double image_w = 0.0, image_h = 0.0;

    const FeatureLevel& at_level(int level) const {
        for (const FeatureLevel& l : levels) {
            if (l.level == level) return l;
        }
        throw ValueError("FeaturePyramid: level " + std::to_string(level) + " not present");
    }
};

struct BackboneConfig {
    int fpn_channels = 32;
    int level_lo = 3;
    int level_hi = 7;
};

// Tiny CNN trunk (4 stages of 3x3 conv -> relu -> 2x2 max pool) plus an FPN.
// The trunk tops out at stride 16, so the stride-32 map feeding P5 comes from
// one extra stride-2 conv; P6/P7 are stride-2 convs off P5.
struct BackboneParams {
    static constexpr std::array<int, 4> kStageWidths = {16, 32, 64, 64};

    Array stage_w[4], stage_b[4];
    Array c5_w, c5_b;
    Array lat_w[3], lat_b[3]; // laterals for C3, C4, C5
    Array smooth_w[3], smooth_b[3];
    Array p6_w, p6_b, p7_w, p7_b;
    BackboneConfig cfg;

    BackboneParams(ParamStore& store, Rng& rng, const BackboneConfig& config) : cfg(config) {
        if (cfg.level_lo < 3 || cfg.level_hi > 7 || cfg.level_lo > cfg.level_hi) {
            throw ValueError("BackboneConfig: level range must satisfy 3 <= lo <= hi <= 7");
        }
        int cin = 3;
        for (int s = 0; s < 4; ++s) {
            const int cout = kStageWidths[static_cast<std::size_t>(s)];
            stage_w[s] = store.add("backbone.stage" + std::to_string(s + 1) + ".w",
                                   init::conv_weight(rng, cout, cin, 3));
            stage_b[s] = store.add("backbone.stage" + std::to_string(s + 1) + ".b",
                                   init::constant({cout}, 0.0));
            cin = cout;
        }
        c5_w = store.add("backbone.c5.w", init::conv_weight(rng, 64, 64, 3));
        c5_b = store.add("backbone.c5.b", init::constant({64}, 0.0));
        const int c = cfg.fpn_channels;
        const std::array<int, 3> lat_in = {kStageWidths[2], kStageWidths[3], 64};
        for (int i = 0; i < 3; ++i) {
            const std::string lvl = std::to_string(i + 3);
            lat_w[i] = store.add("fpn.lateral" + lvl + ".w",
                                 init::conv_weight(rng, c, lat_in[static_cast<std::size_t>(i)], 1));
            lat_b[i] = store.add("fpn.lateral" + lvl + ".b", init::constant({c}, 0.0));
            smooth_w[i] = store.add("fpn.smooth" + lvl + ".w", init::conv_weight(rng, c, c, 3));
            smooth_b[i] = store.add("fpn.smooth" + lvl + ".b", init::constant({c}, 0.0));
        }
        p6_w = store.add("fpn.p6.w", init::conv_weight(rng, c, c, 3));
        p6_b = store.add("fpn.p6.b", init::constant({c}, 0.0));
        p7_w = store.add("fpn.p7.w", init::conv_weight(rng, c, c, 3));
        p7_b = store.add("fpn.p7.b", init::constant({c}, 0.0));
    }
};

inline FeaturePyramid extract_pyramid(const Array& image, const BackboneParams& p) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw ShapeError("extract_pyramid: image must be [3,H,W], got " + shape_str(image.shape()));
    }
    const int lo = p.cfg.level_lo, hi = p.cfg.level_hi;

    Array t = image;
    Array c3, c4;
    for (int s = 0; s < 4; ++s) {
        t = maxpool2(relu(conv2d(t, p.stage_w[s], p.stage_b[s], 1, 1)));
        if (s == 2) c3 = t;
        if (s == 3) c4 = t;
    }
    Array c5 = relu(conv2d(c4, p.c5_w, p.c5_b, 2, 1));

    Array p5 = conv2d(c5, p.lat_w[2], p.lat_b[2], 1, 0);
    Array p4 = add(conv2d(c4, p.lat_w[1], p.lat_b[1], 1, 0),
                   upsample2x_to(p5, c4.dim(1), c4.dim(2)));
    Array p3 = add(conv2d(c3, p.lat_w[0], p.lat_b[0], 1, 0),
                   upsample2x_to(p4, c3.dim(1), c3.dim(2)));
    p3 = conv2d(p3, p.smooth_w[0], p.smooth_b[0], 1, 1);
    p4 = conv2d(p4, p.smooth_w[1], p.smooth_b[1], 1, 1);
    p5 = conv2d(p5, p.smooth_w[2], p.smooth_b[2], 1, 1);

    FeaturePyramid pyr;
    pyr.level_lo = lo;
    pyr.level_hi = hi;
    pyr.image_h = image.dim(1);
    pyr.image_w = image.dim(2);

    Array maps[5] = {p3, p4, p5, Array(), Array()};
    if (hi >= 6) maps[3] = conv2d(p5, p.p6_w, p.p6_b, 2, 1);
    if (hi >= 7) maps[4] = conv2d(relu(maps[3]), p.p7_w, p.p7_b, 2, 1);
    for (int level = lo; level <= hi; ++level) {
        pyr.levels.push_back(FeatureLevel{level, 1 << level, maps[level - 3]});
    }
    return pyr;
}

} // namespace fqr
