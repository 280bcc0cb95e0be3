// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fqr/config_io.hpp"
#include "fqr/detector.hpp"
#include "fqr/optim.hpp"

namespace fqr {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

// Binary checkpoint layout, version 1:
//   magic "FQRC" | u32 version | u32 tensor count
//   per tensor: u32 name length | name bytes | u8 rank | u64 dims... | f64 payload...
// Optimizer state lives under the reserved "opt/" prefix and the serialized
// model config under "meta/config_json" (bytes stored as f64 values).
namespace ckpt {

constexpr char kMagic[4] = {'F', 'Q', 'R', 'C'};
constexpr std::uint32_t kVersion = 1;

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

inline void write_tensors(std::ostream& os, const std::vector<NamedTensor>& tensors) {
    os.write(kMagic, 4);
    auto put_u32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
    put_u32(kVersion);
    put_u32(static_cast<std::uint32_t>(tensors.size()));
    for (const NamedTensor& t : tensors) {
        put_u32(static_cast<std::uint32_t>(t.name.size()));
        os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        const std::uint8_t rank = static_cast<std::uint8_t>(t.shape.size());
        os.write(reinterpret_cast<const char*>(&rank), 1);
        for (int d : t.shape) {
            const std::uint64_t dim = static_cast<std::uint64_t>(d);
            os.write(reinterpret_cast<const char*>(&dim), 8);
        }
        os.write(reinterpret_cast<const char*>(t.data.data()),
                 static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
}

inline std::vector<NamedTensor> read_tensors(std::istream& is, const std::string& origin) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw ValueError("checkpoint " + origin + ": bad magic, expected FQRC, found '" +
                         std::string(magic, is ? 4 : 0) + "'");
    }
    auto get_u32 = [&]() {
        std::uint32_t v = 0;
        is.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    const std::uint32_t version = get_u32();
    if (!is || version != kVersion) {
        throw ValueError("checkpoint " + origin + ": version mismatch, expected " +
                         std::to_string(kVersion) + ", found " + std::to_string(version));
    }
    const std::uint32_t count = get_u32();
    std::vector<NamedTensor> tensors;
    tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = get_u32();
        if (!is) throw ValueError("checkpoint " + origin + ": truncated tensor header");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        std::uint8_t rank = 0;
        is.read(reinterpret_cast<char*>(&rank), 1);
        Shape shape;
        long long numel = 1;
        for (int d = 0; d < rank; ++d) {
            std::uint64_t dim = 0;
            is.read(reinterpret_cast<char*>(&dim), 8);
            shape.push_back(static_cast<int>(dim));
            numel *= static_cast<long long>(dim);
        }
        std::vector<double> data(static_cast<std::size_t>(numel));
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!is) throw ValueError("checkpoint " + origin + ": truncated payload for " + name);
        tensors.push_back(NamedTensor{std::move(name), std::move(shape), std::move(data)});
    }
    return tensors;
}

} // namespace ckpt

inline void save_checkpoint(const std::string& path, const Detector& det, const AdamW* opt,
                            std::uint64_t step) {
    std::vector<ckpt::NamedTensor> tensors;
    for (const auto& [name, a] : det.params().items()) {
        tensors.push_back(
            ckpt::NamedTensor{name, a.shape(), {a.data().begin(), a.data().end()}});
    }
    if (opt) {
        auto& m = const_cast<AdamW*>(opt)->first_moments();
        auto& v = const_cast<AdamW*>(opt)->second_moments();
        const auto& items = det.params().items();
        for (std::size_t i = 0; i < items.size(); ++i) {
            tensors.push_back(ckpt::NamedTensor{"opt/m/" + items[i].first,
                                                items[i].second.shape(), m[i]});
            tensors.push_back(ckpt::NamedTensor{"opt/v/" + items[i].first,
                                                items[i].second.shape(), v[i]});
        }
    }
    tensors.push_back(ckpt::NamedTensor{"opt/step", {1}, {static_cast<double>(step)}});

    const std::string cfg = model_config_to_json(det.config()).dump();
    std::vector<double> cfg_bytes(cfg.size());
    for (std::size_t i = 0; i < cfg.size(); ++i) {
        cfg_bytes[i] = static_cast<double>(static_cast<unsigned char>(cfg[i]));
    }
    tensors.push_back(ckpt::NamedTensor{"meta/config_json", {static_cast<int>(cfg.size())},
                                        std::move(cfg_bytes)});

    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValueError("checkpoint: cannot open " + path + " for writing");
    ckpt::write_tensors(os, tensors);
    if (!os) throw ValueError("checkpoint: write failed for " + path);
}

// Reads only the embedded model config (to construct a matching Detector).
inline ModelConfig checkpoint_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValueError("checkpoint: cannot open " + path);
    for (const ckpt::NamedTensor& t : ckpt::read_tensors(is, path)) {
        if (t.name == "meta/config_json") {
            std::string s(t.data.size(), '\0');
            for (std::size_t i = 0; i < t.data.size(); ++i) {
                s[i] = static_cast<char>(static_cast<unsigned char>(t.data[i]));
            }
            return model_config_from_json(json::parse(s), "checkpoint.");
        }
    }
    throw ValueError("checkpoint " + path + ": missing meta/config_json");
}

// Loads parameters (and optimizer state if present and requested) into an
// existing detector; every model parameter must match by name and shape.
inline std::uint64_t load_checkpoint(const std::string& path, Detector& det,
                                     AdamW* opt = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValueError("checkpoint: cannot open " + path);
    std::map<std::string, ckpt::NamedTensor> by_name;
    for (ckpt::NamedTensor& t : ckpt::read_tensors(is, path)) {
        by_name.emplace(t.name, std::move(t));
    }

    std::ostringstream diff;
    for (auto& [name, a] : det.params().items()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            diff << "  missing " << name << " " << shape_str(a.shape()) << "\n";
            continue;
        }
        if (it->second.shape != a.shape()) {
            diff << "  " << name << ": model " << shape_str(a.shape()) << " vs checkpoint "
                 << shape_str(it->second.shape) << "\n";
        }
    }
    if (!diff.str().empty()) {
        throw ValueError("checkpoint " + path + ": incompatible with model config:\n" + diff.str());
    }

    for (auto& [name, a] : det.params().items()) {
        const auto& t = by_name.at(name);
        std::copy(t.data.begin(), t.data.end(), a.mutable_data().begin());
    }
    std::uint64_t step = 0;
    if (auto it = by_name.find("opt/step"); it != by_name.end() && !it->second.data.empty()) {
        step = static_cast<std::uint64_t>(it->second.data[0]);
    }
    if (opt) {
        const auto& items = det.params().items();
        for (std::size_t i = 0; i < items.size(); ++i) {
            auto mit = by_name.find("opt/m/" + items[i].first);
            auto vit = by_name.find("opt/v/" + items[i].first);
            if (mit != by_name.end()) opt->first_moments()[i] = mit->second.data;
            if (vit != by_name.end()) opt->second_moments()[i] = vit->second.data;
        }
        opt->set_step_count(step);
    }
    return step;
}

} // namespace fqr
