// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "fqr/detector.hpp"

namespace fqr {

using json = nlohmann::json;

namespace detail {

inline void reject_unknown_keys(const json& j, const std::vector<std::string>& known,
                                const std::string& path) {
    if (!j.is_object()) throw ValueError("config: expected object at " + path);
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const std::string& k : known) {
            if (k == key) ok = true;
        }
        if (!ok) throw ValueError("config: unknown key '" + path + key + "'");
    }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace detail

inline json model_config_to_json(const ModelConfig& c) {
    return json{
        {"num_queries", c.num_queries},
        {"d_model", c.d_model},
        {"fpn_lo", c.fpn_lo},
        {"fpn_hi", c.fpn_hi},
        {"fpn_channels", c.fpn_channels},
        {"n_stages", c.n_stages},
        {"num_classes", c.num_classes},
        {"roi_size", c.roi_size},
        {"attn_heads", c.attn_heads},
        {"mode", to_string(c.mode)},
        {"use_roi_self_attention", c.use_roi_self_attention},
        {"seed", c.seed},
        {"report_top", c.report_top},
        {"qgn_weight", c.qgn_weight},
        {"loss",
         {{"lambda_obj", c.loss.lambda_obj},
          {"lambda_giou", c.loss.lambda_giou},
          {"lambda_cls", c.loss.lambda_cls},
          {"lambda_l1", c.loss.lambda_l1},
          {"lambda_giou_rcnn", c.loss.lambda_giou_rcnn},
          {"focal_gamma", c.loss.focal_gamma},
          {"focal_alpha", c.loss.focal_alpha},
          {"match_alpha", c.match.alpha}}},
        {"optimizer",
         {{"lr", c.optim.lr},
          {"beta1", c.optim.beta1},
          {"beta2", c.optim.beta2},
          {"weight_decay", c.optim.weight_decay},
          {"grad_clip", c.optim.grad_clip}}},
    };
}

inline ModelConfig model_config_from_json(const json& j, const std::string& path = "model.") {
    detail::reject_unknown_keys(
        j,
        {"num_queries", "d_model", "fpn_lo", "fpn_hi", "fpn_channels", "n_stages", "num_classes",
         "roi_size", "attn_heads", "mode", "use_roi_self_attention", "seed", "report_top",
         "qgn_weight", "loss", "optimizer"},
        path);
    ModelConfig c;
    detail::read_field(j, "num_queries", c.num_queries);
    detail::read_field(j, "d_model", c.d_model);
    detail::read_field(j, "fpn_lo", c.fpn_lo);
    detail::read_field(j, "fpn_hi", c.fpn_hi);
    detail::read_field(j, "fpn_channels", c.fpn_channels);
    detail::read_field(j, "n_stages", c.n_stages);
    detail::read_field(j, "num_classes", c.num_classes);
    detail::read_field(j, "roi_size", c.roi_size);
    detail::read_field(j, "attn_heads", c.attn_heads);
    if (j.contains("mode")) c.mode = query_mode_from_string(j.at("mode").get<std::string>());
    detail::read_field(j, "use_roi_self_attention", c.use_roi_self_attention);
    detail::read_field(j, "seed", c.seed);
    detail::read_field(j, "report_top", c.report_top);
    detail::read_field(j, "qgn_weight", c.qgn_weight);
    if (j.contains("loss")) {
        const json& l = j.at("loss");
        detail::reject_unknown_keys(l,
                                    {"lambda_obj", "lambda_giou", "lambda_cls", "lambda_l1",
                                     "lambda_giou_rcnn", "focal_gamma", "focal_alpha", "match_alpha"},
                                    path + "loss.");
        detail::read_field(l, "lambda_obj", c.loss.lambda_obj);
        detail::read_field(l, "lambda_giou", c.loss.lambda_giou);
        detail::read_field(l, "lambda_cls", c.loss.lambda_cls);
        detail::read_field(l, "lambda_l1", c.loss.lambda_l1);
        detail::read_field(l, "lambda_giou_rcnn", c.loss.lambda_giou_rcnn);
        detail::read_field(l, "focal_gamma", c.loss.focal_gamma);
        detail::read_field(l, "focal_alpha", c.loss.focal_alpha);
        detail::read_field(l, "match_alpha", c.match.alpha);
    }
    if (j.contains("optimizer")) {
        const json& o = j.at("optimizer");
        detail::reject_unknown_keys(o, {"lr", "beta1", "beta2", "weight_decay", "grad_clip"},
                                    path + "optimizer.");
        detail::read_field(o, "lr", c.optim.lr);
        detail::read_field(o, "beta1", c.optim.beta1);
        detail::read_field(o, "beta2", c.optim.beta2);
        detail::read_field(o, "weight_decay", c.optim.weight_decay);
        detail::read_field(o, "grad_clip", c.optim.grad_clip);
    }
    c.validate();
    return c;
}

} // namespace fqr
