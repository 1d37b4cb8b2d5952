#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>

#include "condseg/common.hpp"

namespace condseg {

namespace detail {
inline std::atomic<uint64_t>& node_counter() {
    static std::atomic<uint64_t> c{0};
    return c;
}
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// RAII switch that disables graph recording (inference / finite differences).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev; }
};

template <class T>
class Tensor;

// One recorded op (or leaf). Monotonic ids give the execution order used for
// the reverse sweep; parents keep upstream nodes alive while any downstream
// tensor still references the graph.
template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // lazily sized to data.size()
    bool requires_grad = false;
    uint64_t id = 0;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    int64_t size() const { return static_cast<int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }

    void accumulate_grad(const std::vector<T>& g) {
        ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    }
};

template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (numel(shape) != static_cast<int64_t>(values.size()))
            throw ShapeError("Tensor::from: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->data = std::move(values);
        n->requires_grad = requires_grad;
        n->id = detail::node_counter()++;
        return Tensor(std::move(n));
    }

    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        std::vector<T> d(static_cast<size_t>(numel(shape)), v);
        return from(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(0), requires_grad); }
    static Tensor ones(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(1), requires_grad); }
    static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

    static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
        std::vector<T> d(static_cast<size_t>(numel(shape)));
        for (auto& v : d) v = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
        return from(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t dim() const { return static_cast<int64_t>(node_->shape.size()); }
    int64_t size() const { return node_->size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::vector<T>& data() { return node_->data; }
    const std::vector<T>& data() const { return node_->data; }

    // Leaf gradient, zero-filled until backward touches it.
    std::vector<T>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<T>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const {
        if (node_->size() != 1)
            throw ShapeError("Tensor::item: tensor has " + std::to_string(node_->size()) + " elements");
        return node_->data[0];
    }

    std::shared_ptr<Node<T>>& node() { return node_; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

// Builds an op node. When grad mode is off or no parent needs gradients the
// result is detached and the backward closure is dropped.
template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> data, std::vector<Tensor<T>> parents,
                  std::function<void(Node<T>&)> backward_fn) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->id = detail::node_counter()++;
    bool track = grad_enabled();
    if (track) {
        bool any = false;
        for (const auto& p : parents)
            if (p.requires_grad()) { any = true; break; }
        track = any;
    }
    if (track) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>(std::move(n));
}

// Reverse sweep from a scalar loss. Nodes fire in inverse execution order,
// each exactly once; interior graph state is released afterwards so a fresh
// graph is recorded per forward pass. Leaf grads persist and accumulate.
template <class T>
void backward(Tensor<T>& loss) {
    if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw std::invalid_argument("backward: loss does not require grad");

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<Node<T>*> stack{loss.node().get()};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        Node<T>* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](Node<T>* a, Node<T>* b) { return a->id > b->id; });

    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);

    for (Node<T>* n : order) {
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    // Interior grad buffers are scratch; drop them so only leaf grads persist.
    // The graph itself stays alive (and can be swept again, accumulating) until
    // the loss tensor is released.
    for (Node<T>* n : order) {
        if (n->backward_fn) {
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

template <class T>
bool all_finite(const std::vector<T>& v) {
    for (T x : v)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}

} // namespace condseg
