#include "strokeseg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

namespace strokeseg::ad {

namespace {
std::atomic<std::uint64_t> g_sequence{1};
thread_local bool t_grad_enabled = true;
} // namespace

std::int64_t shape_numel(const Shape& s)
{
    std::int64_t n = 1;
    for (auto d : s) {
        if (d < 0) throw Error("negative tensor dimension");
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s)
{
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(s[i]);
    }
    return out + ")";
}

template <class T>
std::span<T> Node<T>::grad_buffer()
{
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_mode_enabled() { return t_grad_enabled; }

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad)
{
    return full(std::move(shape), T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad)
{
    const auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), value), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> data, bool requires_grad)
{
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw Error("tensor data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    node->seq = g_sequence.fetch_add(1);
    return Tensor(std::move(node));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad)
{
    return from_data({1}, {value}, requires_grad);
}

template <class T>
T Tensor<T>::item() const
{
    if (numel() != 1) throw Error("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

template <class T>
void Tensor<T>::set_requires_grad(bool on)
{
    if (node_->backward_fn) throw Error("requires_grad can only be changed on leaf tensors");
    node_->requires_grad = on;
}

template <class T>
void Tensor<T>::zero_grad()
{
    if (node_) node_->grad.clear();
}

template <class T>
Tensor<T> Tensor<T>::detach() const
{
    return from_data(node_->shape, node_->value, false);
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward)
{
    Tensor<T> out = Tensor<T>::from_data(std::move(shape), std::move(value), false);
    if (!t_grad_enabled) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    Node<T>* n = out.node();
    n->requires_grad = true;
    for (const auto& in : inputs)
        if (in.requires_grad()) n->parents.push_back(in.node_ptr());
    n->backward_fn = std::move(backward);
    return out;
}

template <class T>
void backward(const Tensor<T>& loss)
{
    if (!loss.defined()) throw Error("backward on undefined tensor");
    if (loss.numel() != 1) throw Error("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw Error("backward: loss is detached from any tensor requiring grad");

    // Collect the reachable sub-graph.
    // Owning handles keep every node alive while parent links are cleared.
    std::vector<std::shared_ptr<Node<T>>> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::shared_ptr<Node<T>>> stack{loss.node_ptr()};
    while (!stack.empty()) {
        auto n = std::move(stack.back());
        stack.pop_back();
        if (!seen.insert(n.get()).second) continue;
        for (const auto& p : n->parents) stack.push_back(p);
        order.push_back(std::move(n));
    }
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });

    loss.node()->grad_buffer()[0] += T(1);
    for (const auto& n : order) {
        if (!n->backward_fn) continue; // leaf
        if (!n->grad.empty()) n->backward_fn(*n);
        // Consume the tape: intermediate results no longer need their history.
        n->backward_fn = nullptr;
        n->parents.clear();
        if (n.get() != loss.node()) {
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

template struct Node<float>;
template struct Node<double>;
template class Tensor<float>;
template class Tensor<double>;

template Tensor<float> make_result(Shape, std::vector<float>, std::initializer_list<Tensor<float>>,
                                   std::function<void(Node<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, std::initializer_list<Tensor<double>>,
                                    std::function<void(Node<double>&)>);
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);

} // namespace strokeseg::ad
