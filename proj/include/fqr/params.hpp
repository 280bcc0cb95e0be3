// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fqr/array.hpp"
#include "fqr/util.hpp"

namespace fqr {

// Ordered registry of named trainable arrays. Registration order is the
// canonical order for initialization, optimizer state and checkpoints.
class ParamStore {
public:
    Array add(const std::string& name, Array a) {
        for (const auto& [n, _] : items_) {
            if (n == name) throw ValueError("ParamStore: duplicate parameter name " + name);
        }
        a.set_requires_grad(true);
        items_.emplace_back(name, a);
        return a;
    }

    const std::vector<std::pair<std::string, Array>>& items() const { return items_; }
    std::vector<std::pair<std::string, Array>>& items() { return items_; }

    Array find(const std::string& name) const {
        for (const auto& [n, a] : items_) {
            if (n == name) return a;
        }
        throw ValueError("ParamStore: unknown parameter " + name);
    }

    long long total_count() const {
        long long n = 0;
        for (const auto& [_, a] : items_) n += a.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [_, a] : items_) a.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Array>> items_;
};

namespace init {

// Fan-in-scaled uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
inline Array uniform_fan_in(Rng& rng, Shape shape, int fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    long long n = shape_numel(shape);
    std::vector<double> data(static_cast<std::size_t>(n));
    for (double& v : data) v = rng.uniform(-bound, bound);
    return Array::from(std::move(shape), std::move(data));
}

inline Array conv_weight(Rng& rng, int cout, int cin, int k) {
    return uniform_fan_in(rng, {cout, cin, k, k}, cin * k * k);
}

// Linear weight stored [in, out] for the x*W convention.
inline Array linear_weight(Rng& rng, int in, int out) {
    return uniform_fan_in(rng, {in, out}, in);
}

inline Array constant(Shape shape, double v) { return Array::filled(std::move(shape), v); }

} // namespace init

} // namespace fqr
