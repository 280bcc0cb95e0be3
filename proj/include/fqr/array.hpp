// Copyright (c) 2026 The fqrcnn Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fqr {

using Shape = std::vector<int>;

class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

class ValueError : public std::runtime_error {
public:
    explicit ValueError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline long long shape_numel(const Shape& s) {
    long long n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

// Strict numerics: when enabled, primitives reject non-finite inputs.
inline bool& strict_numerics_flag() {
    thread_local bool flag = false;
    return flag;
}
inline void set_strict_numerics(bool on) { strict_numerics_flag() = on; }
inline bool strict_numerics() { return strict_numerics_flag(); }

namespace detail {

struct Storage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // sized like data iff requires_grad
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

using StoragePtr = std::shared_ptr<Storage>;

} // namespace detail

// Dense n-dimensional array of 64-bit floats, row-major. Shared-handle value
// type: copies alias the same storage. Values are immutable once produced by
// an op; parameter updates go through mutable_data() between steps.
class Array {
public:
    Array() = default;

    static Array zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0, requires_grad);
    }

    static Array filled(Shape shape, double value, bool requires_grad = false) {
        auto s = std::make_shared<detail::Storage>();
        long long n = shape_numel(shape);
        s->shape = std::move(shape);
        s->data.assign(static_cast<std::size_t>(n), value);
        s->requires_grad = requires_grad;
        if (requires_grad) s->ensure_grad();
        return Array(std::move(s));
    }

    static Array from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        long long n = shape_numel(shape);
        if (static_cast<long long>(values.size()) != n) {
            throw ShapeError("Array::from: " + std::to_string(values.size()) +
                             " values for shape " + shape_str(shape));
        }
        auto s = std::make_shared<detail::Storage>();
        s->shape = std::move(shape);
        s->data = std::move(values);
        s->requires_grad = requires_grad;
        if (requires_grad) s->ensure_grad();
        return Array(std::move(s));
    }

    static Array scalar(double value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    bool defined() const { return s_ != nullptr; }
    const Shape& shape() const { return s_->shape; }
    int rank() const { return static_cast<int>(s_->shape.size()); }
    int dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
    int numel() const { return static_cast<int>(s_->data.size()); }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool on) {
        s_->requires_grad = on;
        if (on) s_->ensure_grad();
    }

    std::span<const double> data() const { return {s_->data.data(), s_->data.size()}; }
    std::span<double> mutable_data() { return {s_->data.data(), s_->data.size()}; }
    std::span<const double> grad() const { return {s_->grad.data(), s_->grad.size()}; }
    std::span<double> mutable_grad() { return {s_->grad.data(), s_->grad.size()}; }

    void zero_grad() {
        if (s_->requires_grad) s_->grad.assign(s_->data.size(), 0.0);
    }

    // Scalar read; rejects non-scalars.
    double value() const {
        if (numel() != 1) throw ShapeError("Array::value on non-scalar " + shape_str(shape()));
        return s_->data[0];
    }

    double at(std::initializer_list<int> idx) const {
        return s_->data[flat_index(idx)];
    }

    bool same_storage(const Array& other) const { return s_ == other.s_; }

    // Deep copy of the values only (no grad, no graph linkage).
    Array clone_values(bool requires_grad = false) const {
        return Array::from(s_->shape, s_->data, requires_grad);
    }

    const detail::StoragePtr& impl() const { return s_; }

private:
    explicit Array(detail::StoragePtr s) : s_(std::move(s)) {}

    std::size_t flat_index(std::initializer_list<int> idx) const {
        if (static_cast<int>(idx.size()) != rank()) {
            throw ShapeError("Array::at: rank mismatch for " + shape_str(shape()));
        }
        std::size_t flat = 0;
        int k = 0;
        for (int i : idx) {
            int extent = s_->shape[static_cast<std::size_t>(k)];
            if (i < 0 || i >= extent) throw ValueError("Array::at: index out of bounds");
            flat = flat * static_cast<std::size_t>(extent) + static_cast<std::size_t>(i);
            ++k;
        }
        return flat;
    }

    detail::StoragePtr s_;
};

// Reverse-mode tape. Nodes are recorded in construction order, which is a
// topological order for the straight-line graphs this engine supports.
// backward() may be called repeatedly; gradients accumulate additively.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    static Graph*& active_slot() {
        thread_local Graph* g = nullptr;
        return g;
    }
    static Graph* active() { return active_slot(); }

    class Scope {
    public:
        explicit Scope(Graph& g) : prev_(active_slot()) { active_slot() = &g; }
        ~Scope() { active_slot() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Graph* prev_;
    };

    void push(const char* op, std::vector<detail::StoragePtr> inputs,
              detail::StoragePtr output, std::function<void()> backward) {
        nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backward)});
    }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Accumulates dLoss/dLeaf into every requires_grad leaf reachable from
    // the loss. Intermediate (node output) gradients are scratch state per
    // call, so repeated calls accumulate leaf gradients additively.
    void backward(const Array& loss) {
        if (!loss.defined() || loss.numel() != 1) {
            throw ShapeError("backward: loss must be scalar, got " +
                             (loss.defined() ? shape_str(loss.shape()) : std::string("<empty>")));
        }
        auto s = loss.impl();
        if (!s->requires_grad) return; // loss independent of any leaf
        for (auto& n : nodes_) {
            std::fill(n.output->grad.begin(), n.output->grad.end(), 0.0);
        }
        s->ensure_grad();
        s->grad[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            it->backward();
        }
    }

private:
    struct Node {
        const char* op;
        std::vector<detail::StoragePtr> inputs;
        detail::StoragePtr output;
        std::function<void()> backward;
    };
    std::vector<Node> nodes_;
};

namespace detail {

inline void check_finite(const char* op, const Array& x) {
    if (!strict_numerics()) return;
    for (double v : x.data()) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(op) + ": non-finite input under strict numerics");
        }
    }
}

// Record an op on the active graph: output becomes differentiable when any
// input is. No graph or no differentiable input means pure forward.
inline void record(const char* op, std::initializer_list<Array> inputs, Array& output,
                   std::function<void()> backward) {
    Graph* g = Graph::active();
    if (!g) return;
    bool need = false;
    for (const Array& a : inputs) {
        if (a.defined() && a.requires_grad()) need = true;
    }
    if (!need) return;
    std::vector<StoragePtr> ins;
    ins.reserve(inputs.size());
    for (const Array& a : inputs) {
        if (a.defined()) {
            if (a.requires_grad()) a.impl()->ensure_grad();
            ins.push_back(a.impl());
        }
    }
    output.set_requires_grad(true);
    g->push(op, std::move(ins), output.impl(), std::move(backward));
}

inline bool wants_grad(const StoragePtr& s) {
    return s->requires_grad && s->grad.size() == s->data.size();
}

} // namespace detail

} // namespace fqr
