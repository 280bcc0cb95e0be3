// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "fqr/dataset.hpp"
#include "fqr/detector.hpp"

namespace fqr {

namespace detail {

// 3x5 glyphs for '0'-'9' and '.', one bit per pixel, rows top to bottom.
inline const unsigned char* glyph_rows(char c) {
    static const unsigned char digits[11][5] = {
        {0b111, 0b101, 0b101, 0b101, 0b111}, // 0
        {0b010, 0b110, 0b010, 0b010, 0b111}, // 1
        {0b111, 0b001, 0b111, 0b100, 0b111}, // 2
        {0b111, 0b001, 0b111, 0b001, 0b111}, // 3
        {0b101, 0b101, 0b111, 0b001, 0b001}, // 4
        {0b111, 0b100, 0b111, 0b001, 0b111}, // 5
        {0b111, 0b100, 0b111, 0b101, 0b111}, // 6
        {0b111, 0b001, 0b010, 0b010, 0b010}, // 7
        {0b111, 0b101, 0b111, 0b101, 0b111}, // 8
        {0b111, 0b101, 0b111, 0b001, 0b111}, // 9
        {0b000, 0b000, 0b000, 0b000, 0b010}, // .
    };
    if (c >= '0' && c <= '9') return digits[c - '0'];
    if (c == '.') return digits[10];
    return nullptr;
}

inline void put_pixel(std::vector<unsigned char>& rgb, int w, int h, int x, int y,
                      const unsigned char color[3]) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    unsigned char* p = rgb.data() + (static_cast<std::size_t>(y) * w + x) * 3;
    p[0] = color[0];
    p[1] = color[1];
    p[2] = color[2];
}

inline void draw_rect_outline(std::vector<unsigned char>& rgb, int w, int h, const Box& b,
                              const unsigned char color[3]) {
    const int x1 = std::clamp(static_cast<int>(std::lround(b.x1)), 0, w - 1);
    const int y1 = std::clamp(static_cast<int>(std::lround(b.y1)), 0, h - 1);
    const int x2 = std::clamp(static_cast<int>(std::lround(b.x2)) - 1, 0, w - 1);
    const int y2 = std::clamp(static_cast<int>(std::lround(b.y2)) - 1, 0, h - 1);
    for (int x = x1; x <= x2; ++x) {
        put_pixel(rgb, w, h, x, y1, color);
        put_pixel(rgb, w, h, x, y2, color);
    }
    for (int y = y1; y <= y2; ++y) {
        put_pixel(rgb, w, h, x1, y, color);
        put_pixel(rgb, w, h, x2, y, color);
    }
}

inline void draw_text(std::vector<unsigned char>& rgb, int w, int h, int x, int y,
                      const std::string& text, const unsigned char color[3]) {
    int cx = x;
    for (char c : text) {
        const unsigned char* rows = glyph_rows(c);
        if (rows) {
            for (int r = 0; r < 5; ++r) {
                for (int b = 0; b < 3; ++b) {
                    if (rows[r] & (1 << (2 - b))) put_pixel(rgb, w, h, cx + b, y + r, color);
                }
            }
        }
        cx += 4;
    }
}

inline const unsigned char* class_color(int class_id) {
    static const unsigned char palette[6][3] = {
        {255, 64, 64}, {64, 255, 64}, {80, 128, 255},
        {255, 224, 32}, {255, 64, 255}, {64, 255, 255},
    };
    return palette[class_id >= 0 ? class_id % 6 : 0];
}

} // namespace detail

// Writes scene pixels with colored box outlines and score labels as a P6
// pixmap. With no detections the output equals the scene pixels.
inline void render_overlay(const Scene& scene, const std::vector<Detection>& detections,
                           const std::string& path) {
    const int h = scene.image.dim(1), w = scene.image.dim(2);
    std::vector<unsigned char> rgb = image_to_u8_interleaved(scene.image);
    for (const Detection& d : detections) {
        const unsigned char* color = detail::class_color(d.class_id);
        detail::draw_rect_outline(rgb, w, h, d.box, color);
        char label[8];
        std::snprintf(label, sizeof(label), "%.2f", std::clamp(d.score, 0.0, 1.0));
        const int tx = std::clamp(static_cast<int>(std::lround(d.box.x1)), 0, w - 1);
        const int ty = std::clamp(static_cast<int>(std::lround(d.box.y1)) - 6, 0, h - 6);
        detail::draw_text(rgb, w, h, tx, ty, label, color);
    }
    write_ppm(path, w, h, rgb);
}

} // namespace fqr
