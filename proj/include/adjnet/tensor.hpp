#pragma once

// Dense tensors with a dynamically recorded reverse-mode tape.
//
// A Tensor is a handle to a shared node. Operations that see at least one
// input with requires_grad() (and run while gradients are enabled) record a
// backward closure on their output node; backward() walks the recorded graph
// in reverse topological order.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <type_traits>
#include <vector>

#include "errors.hpp"

namespace adjnet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables tape recording for the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <class T>
struct TapeNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first written
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TapeNode>> inputs;
    std::function<void(TapeNode&)> backward;  // reads this->grad, accumulates into inputs

    bool is_leaf() const { return !backward; }

    std::vector<T>& ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), T(0));
        }
        return grad;
    }
};

template <class T>
class Tensor {
public:
    using value_type = T;
    using Node = TapeNode<T>;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node>()) {
        validate_shape(shape);
        node_->data.assign(shape_numel(shape), fill);
        node_->shape = std::move(shape);
    }

    Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node>()) {
        validate_shape(shape);
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor: " + std::to_string(values.size()) + " values for shape " +
                                 shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(values);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

    bool defined() const { return static_cast<bool>(node_); }

    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::vector<T>& values() { return node_->data; }
    const std::vector<T>& values() const { return node_->data; }

    T& operator[](std::size_t i) { return node_->data[i]; }
    const T& operator[](std::size_t i) const { return node_->data[i]; }

    /// NCHW / [C_out,K,K,C_in] style 4-d element access.
    T& at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
        return node_->data[offset4(a, b, c, d)];
    }
    const T& at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        return node_->data[offset4(a, b, c, d)];
    }

    T item() const {
        if (numel() != 1) {
            throw ContractError("item() on tensor of shape " + shape_str(shape()));
        }
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        node_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> grad() { return node_->ensure_grad(); }
    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

    const char* op() const { return node_->op; }

    /// Same values, no history, not requiring grad.
    Tensor detach() const { return Tensor(shape(), node_->data); }
    Tensor clone() const {
        Tensor t(shape(), node_->data);
        t.set_requires_grad(requires_grad());
        return t;
    }

    const std::shared_ptr<Node>& node() const { return node_; }

    static Tensor from_node(std::shared_ptr<Node> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    static void validate_shape(const Shape& shape) {
        if (shape.empty()) {
            throw DimensionError("tensor: empty shape");
        }
        for (auto e : shape) {
            if (e == 0) {
                throw DimensionError("tensor: zero extent in shape " + shape_str(shape));
            }
        }
    }

    std::size_t offset4(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
        const auto& s = node_->shape;
        return ((a * s[1] + b) * s[2] + c) * s[3] + d;
    }

    std::shared_ptr<Node> node_;
};

/// True when an op on these inputs must record a backward closure.
template <class T>
bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) {
    if (!grad_enabled()) {
        return false;
    }
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor<T>* t) { return t->defined() && t->requires_grad(); });
}

/// Attaches history to `out`: marks it requires_grad, stores inputs and the closure.
template <class T>
void record(Tensor<T>& out, const char* op, std::type_identity_t<std::vector<Tensor<T>>> inputs,
            std::type_identity_t<std::function<void(TapeNode<T>&)>> backward) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.op = op;
    node.inputs.reserve(inputs.size());
    for (auto& in : inputs) {
        node.inputs.push_back(in.node());
    }
    node.backward = std::move(backward);
}

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across
/// calls; interior gradients are recomputed on every call.
template <class T>
void backward(const Tensor<T>& root) {
    if (!root.defined() || root.numel() != 1) {
        throw ContractError("backward: root must be a scalar, got shape " +
                            (root.defined() ? shape_str(root.shape()) : std::string("<undefined>")));
    }
    if (!root.requires_grad()) {
        throw ContractError("backward: root does not require grad");
    }
    using Node = TapeNode<T>;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) {
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }
    for (Node* n : order) {
        if (!n->is_leaf()) {
            n->grad.assign(n->data.size(), T(0));
        }
    }
    root.node()->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (!(*it)->is_leaf()) {
            (*it)->backward(**it);
        }
    }
}

}  // namespace adjnet
