// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "fqr/dataset.hpp"
#include "fqr/detector.hpp"
#include "fqr/evalmetrics.hpp"

namespace fqr {

struct TrainLoopOptions {
    int steps = 3000;
    int batch_size = 4;
    std::uint64_t shuffle_seed = 1;
    int eval_every = 0; // 0 disables the callback
    // Called after each step with 1-based step index.
    std::function<void(int, const TrainStepMetrics&)> on_step;
    // Called every eval_every steps; returning true stops training early.
    std::function<bool(int)> on_eval;
};

// Deterministic training loop: a seeded shuffle per epoch, contiguous
// batches, one optimizer update per step. Returns the last completed step
// (1-based, offset by start_step).
inline int run_train_loop(Detector& det, AdamW& opt, const std::vector<Scene>& scenes,
                          const TrainLoopOptions& opts, int start_step = 0) {
    if (scenes.empty()) throw ValueError("train loop: no scenes");
    Rng shuffle_rng(opts.shuffle_seed);
    std::vector<int> order(scenes.size());
    for (std::size_t i = 0; i < scenes.size(); ++i) order[i] = static_cast<int>(i);
    std::size_t pos = 0;

    int step = start_step;
    for (int s = 0; s < opts.steps; ++s) {
        std::vector<std::pair<const Array*, const SceneAnnotation*>> batch;
        batch.reserve(static_cast<std::size_t>(opts.batch_size));
        for (int b = 0; b < opts.batch_size; ++b) {
            if (pos == 0) {
                for (std::size_t i = order.size() - 1; i > 0; --i) {
                    std::swap(order[i], order[static_cast<std::size_t>(
                                            shuffle_rng.uniform_int(0, static_cast<int>(i)))]);
                }
            }
            const Scene& scene = scenes[static_cast<std::size_t>(order[pos])];
            batch.emplace_back(&scene.image, &scene.annotation);
            pos = (pos + 1) % scenes.size();
        }
        const TrainStepMetrics m = train_step(det, opt, batch);
        ++step;
        if (opts.on_step) opts.on_step(step, m);
        if (opts.eval_every > 0 && opts.on_eval && step % opts.eval_every == 0) {
            if (opts.on_eval(step)) break;
        }
    }
    return step;
}

// Detections for every scene, plus the matching annotation list.
inline EvalReport evaluate_model(const Detector& det, const std::vector<Scene>& scenes) {
    std::vector<std::vector<Detection>> dets;
    std::vector<SceneAnnotation> anns;
    dets.reserve(scenes.size());
    anns.reserve(scenes.size());
    for (const Scene& s : scenes) {
        dets.push_back(det.infer(s.image));
        anns.push_back(s.annotation);
    }
    return evaluate_detections(dets, anns, det.config().num_classes);
}

} // namespace fqr
