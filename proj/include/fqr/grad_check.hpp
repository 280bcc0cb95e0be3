// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>

#include "fqr/array.hpp"

namespace fqr {

// Central-difference gradient check of a scalar-valued function against the
// reverse-mode gradient. Returns max over elements of
//   |analytic - numeric| / max(1, |analytic|).
inline double grad_check(const std::function<Array(const Array&)>& f, const Array& x,
                         double step = 1e-6) {
    if (!(step > 0.0 && step <= 1e-3)) {
        throw ValueError("grad_check: step must be in (0, 1e-3]");
    }

    Array leaf = x.clone_values(/*requires_grad=*/true);
    std::vector<double> analytic;
    {
        Graph graph;
        Graph::Scope scope(graph);
        Array y = f(leaf);
        if (y.numel() != 1) {
            throw ShapeError("grad_check: f must return a scalar, got " + shape_str(y.shape()));
        }
        graph.backward(y);
        analytic.assign(leaf.grad().begin(), leaf.grad().end());
    }

    double worst = 0.0;
    Array probe = x.clone_values(false);
    auto pd = probe.mutable_data();
    for (int i = 0; i < probe.numel(); ++i) {
        const double saved = pd[i];
        pd[i] = saved + step;
        const double fp = f(probe).value();
        pd[i] = saved - step;
        const double fm = f(probe).value();
        pd[i] = saved;
        const double numeric = (fp - fm) / (2.0 * step);
        const double a = analytic[static_cast<std::size_t>(i)];
        const double err = std::fabs(a - numeric) / std::max(1.0, std::fabs(a));
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace fqr
