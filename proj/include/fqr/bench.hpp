// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "fqr/detector.hpp"

namespace fqr {

struct ComponentStat {
    double mean_ms = 0.0;
    double std_ms = 0.0;
};

// Per-module wall-clock decomposition of a single-image forward pass.
// Component means sum to the total within the declared noise bound (the glue
// between timed sections is a few vector moves).
struct LatencyBreakdown {
    ComponentStat backbone;
    ComponentStat query_gen;
    std::vector<ComponentStat> decoder_stages;
    ComponentStat decoder_total;
    ComponentStat total;
    double noise_bound_ms = 0.0;
    int warmup = 0;
    int runs = 0;
    ModelConfig config;
};

namespace detail {

inline ComponentStat stat_of(const std::vector<double>& xs) {
    ComponentStat s;
    if (xs.empty()) return s;
    for (double x : xs) s.mean_ms += x;
    s.mean_ms /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - s.mean_ms) * (x - s.mean_ms);
    s.std_ms = std::sqrt(var / static_cast<double>(xs.size()));
    return s;
}

} // namespace detail

// Latency must be measured single-threaded (the whole engine is), with no
// graph recording active, so component shares are comparable.
inline LatencyBreakdown bench_latency(const Detector& det, const Array& image, int warmup,
                                      int runs) {
    if (runs < 10) throw ValueError("bench_latency: needs runs >= 10");
    const int n_stages = det.config().n_stages;
    std::vector<double> backbone, qgen, total, decoder;
    std::vector<std::vector<double>> stages(static_cast<std::size_t>(n_stages));

    for (int i = 0; i < warmup + runs; ++i) {
        Detector::ForwardTiming t;
        det.forward(image, &t);
        if (i < warmup) continue;
        backbone.push_back(t.backbone_ms);
        qgen.push_back(t.query_gen_ms);
        total.push_back(t.total_ms);
        double dec = 0.0;
        for (int s = 0; s < n_stages; ++s) {
            stages[static_cast<std::size_t>(s)].push_back(t.stage_ms[static_cast<std::size_t>(s)]);
            dec += t.stage_ms[static_cast<std::size_t>(s)];
        }
        decoder.push_back(dec);
    }

    LatencyBreakdown out;
    out.backbone = detail::stat_of(backbone);
    out.query_gen = detail::stat_of(qgen);
    for (const auto& s : stages) out.decoder_stages.push_back(detail::stat_of(s));
    out.decoder_total = detail::stat_of(decoder);
    out.total = detail::stat_of(total);
    out.noise_bound_ms = 0.05 * out.total.mean_ms + 0.1;
    out.warmup = warmup;
    out.runs = runs;
    out.config = det.config();
    return out;
}

} // namespace fqr
