// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fqr/array.hpp"

namespace fqr {

// Axis-aligned box in image pixels, corners (x1,y1) top-left, (x2,y2)
// bottom-right. Well-formed means x1 <= x2 and y1 <= y2 (zero area allowed).
struct Box {
    double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
    double cx() const { return 0.5 * (x1 + x2); }
    double cy() const { return 0.5 * (y1 + y2); }
    bool well_formed() const { return x1 <= x2 && y1 <= y2; }

    Box clipped(double img_w, double img_h) const {
        return Box{std::clamp(x1, 0.0, img_w), std::clamp(y1, 0.0, img_h),
                   std::clamp(x2, 0.0, img_w), std::clamp(y2, 0.0, img_h)};
    }

    bool contains_point(double px, double py) const {
        return px >= x1 && px <= x2 && py >= y1 && py <= y2;
    }
};

inline double intersection_area(const Box& a, const Box& b) {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    return iw * ih;
}

inline double iou(const Box& a, const Box& b) {
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

// Generalized IoU: IoU minus the fraction of the smallest enclosing box not
// covered by the union. In [-1, 1]; equals IoU for identical boxes; the loss
// form is 1 - giou.
inline double giou(const Box& a, const Box& b) {
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    const double ew = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
    const double eh = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
    const double enc = ew * eh;
    const double iou_v = uni > 0.0 ? inter / uni : 0.0;
    if (enc <= 0.0) return iou_v;
    return iou_v - (enc - uni) / enc;
}

// Center offset of a ground-truth box relative to a proposal, normalized by
// the proposal's width and height.
inline std::pair<double, double> box_delta(const Box& gt, const Box& proposal) {
    const double w = proposal.width();
    const double h = proposal.height();
    if (!(w > 0.0 && h > 0.0)) {
        throw ValueError("box_delta: degenerate proposal (nonpositive width or height)");
    }
    return {(gt.cx() - proposal.cx()) / w, (gt.cy() - proposal.cy()) / h};
}

inline std::vector<Box> boxes_from_array(const Array& a) {
    if (a.rank() != 2 || a.dim(1) != 4) {
        throw ShapeError("boxes_from_array: expected [N,4], got " + shape_str(a.shape()));
    }
    std::vector<Box> out(static_cast<std::size_t>(a.dim(0)));
    auto d = a.data();
    for (int i = 0; i < a.dim(0); ++i) {
        out[static_cast<std::size_t>(i)] =
            Box{d[4 * i + 0], d[4 * i + 1], d[4 * i + 2], d[4 * i + 3]};
    }
    return out;
}

inline Array array_from_boxes(const std::vector<Box>& boxes) {
    std::vector<double> data;
    data.reserve(boxes.size() * 4);
    for (const Box& b : boxes) {
        data.push_back(b.x1);
        data.push_back(b.y1);
        data.push_back(b.x2);
        data.push_back(b.y2);
    }
    return Array::from({static_cast<int>(boxes.size()), 4}, std::move(data));
}

} // namespace fqr
