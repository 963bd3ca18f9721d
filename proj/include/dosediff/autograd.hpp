#pragma once

#include <functional>
#include <memory>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace dosediff::ag {

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Tensor<T>& grad_buffer()
    {
        if (grad.empty())
            grad = Tensor<T>::zeros_like(value);
        return grad;
    }
    Node& parent(std::size_t i) { return *parents[i]; }
};

inline bool& grad_mode()
{
    thread_local bool enabled = true;
    return enabled;
}

/// Disables graph recording in its scope (sampling, evaluation).
class NoGradGuard {
public:
    NoGradGuard()
        : previous_(grad_mode())
    {
        grad_mode() = false;
    }
    ~NoGradGuard() { grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Handle to a node of the computation graph. Copies share the node.
template <class T>
class Var {
public:
    Var() = default;

    explicit Var(Tensor<T> value, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>())
    {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    explicit Var(std::shared_ptr<Node<T>> node)
        : node_(std::move(node))
    {
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& grad_buffer() { return node_->grad_buffer(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    int dim(int i) const { return node_->value.dim(i); }
    const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

    void zero_grad()
    {
        if (!node_->grad.empty())
            node_->grad.fill(T{0});
    }

    /// Reverse pass from a single-element output. Intermediate gradients and
    /// saved state are released as the sweep passes them; leaf gradients
    /// accumulate.
    void backward()
    {
        require(node_->value.size() == 1, "backward: output must be a scalar");
        if (!node_->requires_grad)
            return;
        std::vector<std::shared_ptr<Node<T>>> order;
        std::unordered_set<Node<T>*> seen;
        std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack{{node_, 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                std::shared_ptr<Node<T>> p = n->parents[next++];
                if (p->requires_grad && seen.insert(p.get()).second)
                    stack.emplace_back(std::move(p), 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        node_->grad_buffer()[0] += T{1};
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<T>* n = it->get();
            if (!n->backward)
                continue;
            if (!n->grad.empty())
                n->backward(*n);
            n->backward = nullptr;
            n->parents.clear();
            n->grad = Tensor<T>();
        }
    }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Creates the result node of an op; records the backward closure only when
/// some input needs a gradient and recording is enabled.
template <class T>
Var<T> make_result(Tensor<T> value, const std::vector<std::type_identity_t<Var<T>>>& inputs,
                   std::type_identity_t<std::function<void(Node<T>&)>> backward)
{
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    if (grad_mode()) {
        bool any = false;
        for (const auto& in : inputs)
            any = any || in.requires_grad();
        if (any) {
            node->requires_grad = true;
            for (const auto& in : inputs)
                node->parents.push_back(in.node());
            node->backward = std::move(backward);
        }
    }
    return Var<T>(std::move(node));
}

template <class T>
Var<T> constant(Tensor<T> v)
{
    return Var<T>(std::move(v), false);
}

} // namespace dosediff::ag
