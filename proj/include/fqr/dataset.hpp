// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fqr/array.hpp"
#include "fqr/assignment.hpp"
#include "fqr/geometry.hpp"
#include "fqr/util.hpp"

namespace fqr {

// ---------------------------------------------------------------------------
// Scene type and synthetic generation
// ---------------------------------------------------------------------------

struct SceneSpec {
    int height = 64;
    int width = 64;
    int n_objects_min = 1;
    int n_objects_max = 4;
    int num_classes = 3;

    void validate() const {
        if (height < 32 || width < 32) throw ValueError("SceneSpec: image must be at least 32x32");
        if (n_objects_min < 0 || n_objects_max < n_objects_min) {
            throw ValueError("SceneSpec: bad object count range");
        }
        if (num_classes < 1 || num_classes > 5) {
            throw ValueError("SceneSpec: num_classes must be in [1,5]");
        }
    }
};

struct Scene {
    Array image; // [3,H,W], values are u8/255 so dataset round trips exactly
    SceneAnnotation annotation;
    std::string id;
    int dropped_objects = 0; // placements abandoned after bounded retries
};

namespace detail {

inline unsigned char to_u8(double v) {
    return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// Pixel-center inside test per shape class. Classes: 0 rectangle, 1 ellipse,
// 2 triangle, 3 diamond, 4 cross.
inline bool shape_covers(int cls, double px, double py, double x0, double y0, double w, double h) {
    const double ex = x0 + 0.5 * w, ey = y0 + 0.5 * h;
    const double a = 0.5 * w, b = 0.5 * h;
    switch (cls) {
    case 0:
        return px >= x0 && px < x0 + w && py >= y0 && py < y0 + h;
    case 1: {
        const double dx = (px - ex) / a, dy = (py - ey) / b;
        return dx * dx + dy * dy <= 1.0;
    }
    case 2: {
        // Apex top-center, base corners bottom-left/right.
        const double ax = ex, ay = y0;
        const double bx = x0, by = y0 + h;
        const double cx = x0 + w, cy = y0 + h;
        auto side = [](double x1, double y1, double x2, double y2, double x, double y) {
            return (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1);
        };
        const double d1 = side(ax, ay, bx, by, px, py);
        const double d2 = side(bx, by, cx, cy, px, py);
        const double d3 = side(cx, cy, ax, ay, px, py);
        const bool has_neg = d1 < 0 || d2 < 0 || d3 < 0;
        const bool has_pos = d1 > 0 || d2 > 0 || d3 > 0;
        return !(has_neg && has_pos);
    }
    case 3:
        return std::fabs(px - ex) / a + std::fabs(py - ey) / b <= 1.0;
    case 4: {
        const bool in_rect = px >= x0 && px < x0 + w && py >= y0 && py < y0 + h;
        return in_rect && (std::fabs(px - ex) <= a / 3.0 || std::fabs(py - ey) <= b / 3.0);
    }
    default:
        throw ValueError("shape_covers: unknown class " + std::to_string(cls));
    }
}

} // namespace detail

// Renders n filled shapes (one class per shape kind) over a noisy background.
// Annotation boxes are the exact bounds of each shape's painted pixels;
// placements are rejection-sampled to be non-overlapping, and impossible
// placements after bounded retries reduce the object count.
inline Scene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
    spec.validate();
    Rng rng(seed);
    const int h = spec.height, w = spec.width;

    std::vector<unsigned char> u8(static_cast<std::size_t>(3) * h * w);
    double base[3];
    const double gray = rng.uniform(0.08, 0.2);
    for (double& b : base) b = std::clamp(gray + rng.uniform(-0.03, 0.03), 0.0, 0.25);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                u8[(static_cast<std::size_t>(c) * h + y) * w + x] =
                    detail::to_u8(base[c] + rng.uniform(-0.05, 0.05));
            }
        }
    }

    Scene scene;
    scene.id = "scene-" + std::to_string(seed);
    const int n_objects = rng.uniform_int(spec.n_objects_min, spec.n_objects_max);
    std::vector<Box> placed;

    for (int obj = 0; obj < n_objects; ++obj) {
        bool ok = false;
        for (int attempt = 0; attempt < 50 && !ok; ++attempt) {
            const int cls = rng.uniform_int(0, spec.num_classes - 1);
            const double max_side = std::min(28.0, 0.45 * std::min(w, h));
            const double sw = rng.uniform(10.0, max_side);
            const double sh = rng.uniform(10.0, max_side);
            const double x0 = rng.uniform(1.0, w - 1.0 - sw);
            const double y0 = rng.uniform(1.0, h - 1.0 - sh);

            const Box candidate{x0 - 2.0, y0 - 2.0, x0 + sw + 2.0, y0 + sh + 2.0};
            bool overlaps = false;
            for (const Box& p : placed) {
                if (intersection_area(candidate, p) > 0.0) overlaps = true;
            }
            if (overlaps) continue;

            double color[3];
            const int dominant = rng.uniform_int(0, 2);
            for (int c = 0; c < 3; ++c) {
                color[c] = c == dominant ? rng.uniform(0.65, 0.95) : rng.uniform(0.1, 0.45);
            }

            int min_x = w, max_x = -1, min_y = h, max_y = -1;
            std::vector<int> pixels;
            const int gy0 = std::max(0, static_cast<int>(std::floor(y0)) - 1);
            const int gy1 = std::min(h - 1, static_cast<int>(std::ceil(y0 + sh)) + 1);
            const int gx0 = std::max(0, static_cast<int>(std::floor(x0)) - 1);
            const int gx1 = std::min(w - 1, static_cast<int>(std::ceil(x0 + sw)) + 1);
            for (int y = gy0; y <= gy1; ++y) {
                for (int x = gx0; x <= gx1; ++x) {
                    if (!detail::shape_covers(cls, x + 0.5, y + 0.5, x0, y0, sw, sh)) continue;
                    pixels.push_back(y * w + x);
                    min_x = std::min(min_x, x);
                    max_x = std::max(max_x, x);
                    min_y = std::min(min_y, y);
                    max_y = std::max(max_y, y);
                }
            }
            if (max_x - min_x + 1 < 8 || max_y - min_y + 1 < 8) continue;

            for (int idx : pixels) {
                for (int c = 0; c < 3; ++c) {
                    u8[static_cast<std::size_t>(c) * h * w + idx] = detail::to_u8(color[c]);
                }
            }
            const Box bounds{static_cast<double>(min_x), static_cast<double>(min_y),
                             static_cast<double>(max_x + 1), static_cast<double>(max_y + 1)};
            placed.push_back(bounds);
            scene.annotation.boxes.push_back(bounds);
            scene.annotation.labels.push_back(cls);
            ok = true;
        }
        if (!ok) ++scene.dropped_objects;
    }

    std::vector<double> img(u8.size());
    for (std::size_t i = 0; i < u8.size(); ++i) img[i] = u8[i] / 255.0;
    scene.image = Array::from({3, h, w}, std::move(img));
    return scene;
}

// ---------------------------------------------------------------------------
// P6 portable pixmap IO
// ---------------------------------------------------------------------------

inline void write_ppm(const std::string& path, int width, int height,
                      const std::vector<unsigned char>& rgb_interleaved) {
    if (static_cast<std::size_t>(width) * height * 3 != rgb_interleaved.size()) {
        throw ShapeError("write_ppm: buffer size mismatch");
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValueError("write_ppm: cannot open " + path);
    os << "P6\n" << width << " " << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(rgb_interleaved.data()),
             static_cast<std::streamsize>(rgb_interleaved.size()));
    if (!os) throw ValueError("write_ppm: write failed for " + path);
}

inline std::vector<unsigned char> read_ppm(const std::string& path, int& width, int& height) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValueError("read_ppm: cannot open " + path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw ValueError("read_ppm: " + path + " is not a P6 pixmap");
    int maxval = 0;
    is >> width >> height >> maxval;
    if (!is || width <= 0 || height <= 0 || maxval != 255) {
        throw ValueError("read_ppm: unsupported header in " + path);
    }
    is.get(); // single whitespace after header
    std::vector<unsigned char> buf(static_cast<std::size_t>(width) * height * 3);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is) throw ValueError("read_ppm: truncated pixel data in " + path);
    return buf;
}

inline std::vector<unsigned char> image_to_u8_interleaved(const Array& image) {
    const int h = image.dim(1), w = image.dim(2);
    std::vector<unsigned char> buf(static_cast<std::size_t>(h) * w * 3);
    auto d = image.data();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
                    detail::to_u8(d[(static_cast<std::size_t>(c) * h + y) * w + x]);
            }
        }
    }
    return buf;
}

// ---------------------------------------------------------------------------
// JSON Lines dataset format: scenes.jsonl + one P6 file per scene
// ---------------------------------------------------------------------------

inline void save_dataset(const std::string& dir, const std::vector<Scene>& scenes) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream os(fs::path(dir) / "scenes.jsonl");
    if (!os) throw ValueError("save_dataset: cannot write to " + dir);
    for (const Scene& s : scenes) {
        const int h = s.image.dim(1), w = s.image.dim(2);
        const std::string ppm_name = s.id + ".ppm";
        write_ppm((fs::path(dir) / ppm_name).string(), w, h, image_to_u8_interleaved(s.image));
        nlohmann::json boxes = nlohmann::json::array();
        for (const Box& b : s.annotation.boxes) {
            boxes.push_back({b.x1, b.y1, b.x2, b.y2});
        }
        nlohmann::json line{{"id", s.id},       {"width", w},   {"height", h},
                            {"image_ppm", ppm_name}, {"boxes", boxes}, {"labels", s.annotation.labels}};
        os << line.dump() << "\n";
    }
}

inline std::vector<Scene> load_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path jsonl = fs::path(dir) / "scenes.jsonl";
    std::ifstream is(jsonl);
    if (!is) throw ValueError("load_dataset: cannot open " + jsonl.string());
    std::vector<Scene> scenes;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        for (const auto& [key, _] : j.items()) {
            static const char* known[] = {"id", "width", "height", "image_ppm", "boxes", "labels"};
            bool ok = false;
            for (const char* k : known) {
                if (key == k) ok = true;
            }
            if (!ok) {
                throw ValueError("load_dataset: unknown key '" + key + "' at line " +
                                 std::to_string(lineno));
            }
        }
        Scene s;
        s.id = j.at("id").get<std::string>();
        const int w = j.at("width").get<int>();
        const int h = j.at("height").get<int>();
        int pw = 0, ph = 0;
        const std::vector<unsigned char> u8 =
            read_ppm((fs::path(dir) / j.at("image_ppm").get<std::string>()).string(), pw, ph);
        if (pw != w || ph != h) {
            throw ValueError("load_dataset: pixmap size disagrees with JSON for " + s.id);
        }
        std::vector<double> img(static_cast<std::size_t>(3) * h * w);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                for (int c = 0; c < 3; ++c) {
                    img[(static_cast<std::size_t>(c) * h + y) * w + x] =
                        u8[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
                }
            }
        }
        s.image = Array::from({3, h, w}, std::move(img));
        for (const auto& bj : j.at("boxes")) {
            s.annotation.boxes.push_back(
                Box{bj.at(0).get<double>(), bj.at(1).get<double>(), bj.at(2).get<double>(),
                    bj.at(3).get<double>()});
        }
        s.annotation.labels = j.at("labels").get<std::vector<int>>();
        if (s.annotation.boxes.size() != s.annotation.labels.size()) {
            throw ValueError("load_dataset: box/label count mismatch for " + s.id);
        }
        scenes.push_back(std::move(s));
    }
    return scenes;
}

} // namespace fqr
