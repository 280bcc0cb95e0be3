// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "fqr/array.hpp"
#include "fqr/params.hpp"

namespace fqr {

struct OptimConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-4;
    double grad_clip = 1.0; // global norm; <= 0 disables
    double eps = 1e-8;
};

// Rescale all gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
inline double clip_global_grad_norm(ParamStore& store, double max_norm) {
    double sq = 0.0;
    for (const auto& [_, a] : store.items()) {
        for (double g : a.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& [_, a] : store.items()) {
            for (double& g : a.mutable_grad()) g *= scale;
        }
    }
    return norm;
}

// AdamW with decoupled weight decay and bias-corrected moments.
class AdamW {
public:
    AdamW(ParamStore& store, const OptimConfig& cfg) : store_(&store), cfg_(cfg) {
        for (const auto& [_, a] : store.items()) {
            m_.emplace_back(static_cast<std::size_t>(a.numel()), 0.0);
            v_.emplace_back(static_cast<std::size_t>(a.numel()), 0.0);
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        std::size_t pi = 0;
        for (auto& [_, a] : store_->items()) {
            auto g = a.grad();
            auto p = a.mutable_data();
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (std::size_t i = 0; i < m.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
            }
            ++pi;
        }
    }

    void zero_grad() { store_->zero_grad(); }

    std::uint64_t step_count() const { return t_; }
    void set_step_count(std::uint64_t t) { t_ = t; }
    const OptimConfig& config() const { return cfg_; }

    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }

private:
    ParamStore* store_;
    OptimConfig cfg_;
    std::uint64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

} // namespace fqr
