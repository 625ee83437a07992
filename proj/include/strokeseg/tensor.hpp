#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// Every tensor is a handle to a Node. Operations on tensors that require
// gradients record a backward closure on the result node; nodes carry a
// global creation sequence number, so sorting reachable nodes by descending
// sequence replays the tape in reverse topological order.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "strokeseg/common.hpp"

namespace strokeseg::ad {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad; // empty until first accumulation
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    /// Gradient buffer, zero-filled on first use.
    std::span<T> grad_buffer();
};

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

    std::span<const T> data() const { return node_->value; }
    /// Direct write access; only for leaves (parameters, inputs).
    std::span<T> mutable_data() { return node_->value; }
    T item() const;

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on);
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad();

    /// Same values, no graph history.
    Tensor detach() const;

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<Node<T>> node_;
};

/// While alive on a thread, operations on that thread record no graph.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_mode_enabled();

/// Builds an operation result. If grad mode is on and any input requires a
/// gradient, `backward` is recorded and will be called with the result node
/// once its gradient is complete.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward);

/// Runs reverse accumulation from a scalar loss. Populates `grad` for every
/// reachable node that requires it and releases the recorded graph.
template <class T>
void backward(const Tensor<T>& loss);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template struct Node<float>;
extern template struct Node<double>;

} // namespace strokeseg::ad
