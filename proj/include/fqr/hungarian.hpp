// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "fqr/array.hpp"

namespace fqr {

// One-to-one matching between N predictions and M ground truths (N >= M).
// sigma[i] is the matched ground-truth index for prediction i, or -1 for the
// no-object padding. Every ground truth appears exactly once.
struct Assignment {
    std::vector<int> sigma;      // size N
    std::vector<int> gt_to_pred; // size M
    double total_cost = 0.0;
};

// Exact minimum-cost bipartite assignment (Jonker-Volgenant shortest
// augmenting paths with potentials). cost is row-major [n_preds x n_gts].
inline Assignment hungarian(const std::vector<double>& cost, int n_preds, int n_gts) {
    if (n_preds < 0 || n_gts < 0 ||
        static_cast<long long>(n_preds) * n_gts != static_cast<long long>(cost.size())) {
        throw ShapeError("hungarian: cost size " + std::to_string(cost.size()) +
                         " != " + std::to_string(n_preds) + "x" + std::to_string(n_gts));
    }
    if (n_preds < n_gts) {
        throw ValueError("hungarian: needs n_preds >= n_gts, got " + std::to_string(n_preds) +
                         " < " + std::to_string(n_gts));
    }
    for (double c : cost) {
        if (!std::isfinite(c)) throw ValueError("hungarian: non-finite cost entry");
    }

    Assignment out;
    out.sigma.assign(static_cast<std::size_t>(n_preds), -1);
    out.gt_to_pred.assign(static_cast<std::size_t>(n_gts), -1);
    if (n_gts == 0) return out;

    // Rows are ground truths (the smaller side), columns are predictions.
    const int n = n_gts, m = n_preds;
    const double inf = std::numeric_limits<double>::infinity();
    auto at = [&](int gt, int pred) { return cost[static_cast<std::size_t>(pred) * n_gts + gt]; };

    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<double> v(static_cast<std::size_t>(m) + 1, 0.0);
    std::vector<int> p(static_cast<std::size_t>(m) + 1, 0); // 1-based row matched to column
    std::vector<int> way(static_cast<std::size_t>(m) + 1, 0);

    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(m) + 1, inf);
        std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = p[static_cast<std::size_t>(j0)];
            double delta = inf;
            int j1 = -1;
            for (int j = 1; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = at(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                                   v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }

    for (int j = 1; j <= m; ++j) {
        const int gt = p[static_cast<std::size_t>(j)];
        if (gt > 0) {
            out.sigma[static_cast<std::size_t>(j - 1)] = gt - 1;
            out.gt_to_pred[static_cast<std::size_t>(gt - 1)] = j - 1;
            out.total_cost += at(gt - 1, j - 1);
        }
    }
    return out;
}

inline Assignment hungarian(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    const int m = n > 0 ? static_cast<int>(cost[0].size()) : 0;
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(n) * m);
    for (const auto& row : cost) {
        if (static_cast<int>(row.size()) != m) throw ShapeError("hungarian: ragged cost matrix");
        flat.insert(flat.end(), row.begin(), row.end());
    }
    return hungarian(flat, n, m);
}

} // namespace fqr
