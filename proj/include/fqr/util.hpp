// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdio>
#include <string>

namespace fqr {

// Deterministic splitmix64-based RNG. Kept deliberately independent of the
// standard-library distributions so generated datasets and initializations
// are stable across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        return lo + static_cast<int>(next_u64() % static_cast<std::uint64_t>(hi - lo + 1));
    }

    // Derive an independent stream (e.g. one per scene).
    Rng fork(std::uint64_t salt) {
        Rng r(state_ ^ (salt * 0x9e3779b97f4a7c15ULL + 0x5851f42d4c957f2dULL));
        r.next_u64();
        return r;
    }

private:
    std::uint64_t state_;
};

// Shortest round-trip decimal formatting for doubles, for deterministic CSVs.
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    double parsed = 0.0;
    std::sscanf(buf, "%lf", &parsed);
    if (parsed == v) {
        // Try shorter representations that still round-trip.
        for (int prec = 1; prec <= 16; ++prec) {
            char s[40];
            std::snprintf(s, sizeof(s), "%.*g", prec, v);
            double p = 0.0;
            std::sscanf(s, "%lf", &p);
            if (p == v) return std::string(s);
        }
    }
    return std::string(buf);
}

} // namespace fqr
