// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fqr/config_io.hpp"
#include "fqr/dataset.hpp"

namespace fqr {

// Full run description: model config plus dataset/checkpoint paths and the
// training loop controls. Unknown keys are rejected with their path.
struct RunConfig {
    ModelConfig model;
    struct Paths {
        std::string dataset;
        std::string eval_dataset; // optional held-out set for periodic eval
        std::string checkpoint;   // resume source if it exists
        std::string output_dir = "runs/default";
    } paths;
    struct Run {
        int steps = 3000;
        int batch_size = 4;
        int eval_every = 500;
        std::uint64_t seed = 1;
    } run;
};

inline RunConfig run_config_from_json(const json& j) {
    detail::reject_unknown_keys(j, {"model", "paths", "run"}, "");
    RunConfig rc;
    if (j.contains("model")) rc.model = model_config_from_json(j.at("model"));
    if (j.contains("paths")) {
        const json& p = j.at("paths");
        detail::reject_unknown_keys(p, {"dataset", "eval_dataset", "checkpoint", "output_dir"},
                                    "paths.");
        detail::read_field(p, "dataset", rc.paths.dataset);
        detail::read_field(p, "eval_dataset", rc.paths.eval_dataset);
        detail::read_field(p, "checkpoint", rc.paths.checkpoint);
        detail::read_field(p, "output_dir", rc.paths.output_dir);
    }
    if (j.contains("run")) {
        const json& r = j.at("run");
        detail::reject_unknown_keys(r, {"steps", "batch_size", "eval_every", "seed"}, "run.");
        detail::read_field(r, "steps", rc.run.steps);
        detail::read_field(r, "batch_size", rc.run.batch_size);
        detail::read_field(r, "eval_every", rc.run.eval_every);
        detail::read_field(r, "seed", rc.run.seed);
    }
    if (rc.run.steps < 0) throw ValueError("config: run.steps must be >= 0");
    if (rc.run.batch_size < 1) throw ValueError("config: run.batch_size must be >= 1");
    return rc;
}

inline json load_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ValueError("cannot open config file " + path);
    json j;
    try {
        is >> j;
    } catch (const json::parse_error& e) {
        throw ValueError("malformed JSON in " + path + ": " + e.what());
    }
    return j;
}

// Apply a dotted-path override like "model.n_stages=4" onto a JSON document.
inline void apply_override(json& j, const std::string& spec) {
    const std::size_t eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ValueError("override '" + spec + "' is not of the form key.path=value");
    }
    const std::string path = spec.substr(0, eq);
    const std::string value = spec.substr(eq + 1);

    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        if (key.empty()) throw ValueError("override '" + spec + "' has an empty key segment");
        if (dot == std::string::npos) {
            json parsed;
            try {
                parsed = json::parse(value);
            } catch (const json::parse_error&) {
                parsed = value; // plain string
            }
            (*node)[key] = parsed;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

inline SceneSpec scene_spec_from_json(const json& j) {
    detail::reject_unknown_keys(
        j, {"height", "width", "n_objects_min", "n_objects_max", "num_classes"}, "");
    SceneSpec s;
    detail::read_field(j, "height", s.height);
    detail::read_field(j, "width", s.width);
    detail::read_field(j, "n_objects_min", s.n_objects_min);
    detail::read_field(j, "n_objects_max", s.n_objects_max);
    detail::read_field(j, "num_classes", s.num_classes);
    s.validate();
    return s;
}

} // namespace fqr
