#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "maebench/errors.hpp"

namespace maebench {

using shape_t = std::vector<std::size_t>;

inline std::size_t shape_numel(const shape_t& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const shape_t& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? " x " : "") << s[i];
    os << "]";
    return os.str();
}

template <class S>
struct tensor_node {
    shape_t shape;
    std::vector<S> value;
    std::vector<S> grad;  // empty until first needed
    bool requires_grad = false;
    bool leaf = true;
    std::vector<std::shared_ptr<tensor_node<S>>> parents;
    std::function<void()> backprop;

    std::size_t numel() const { return value.size(); }

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    }
};

// Dense row-major tensor with reverse-mode autodiff. A tensor is a cheap
// handle onto a shared node; ops build a DAG of nodes and backward() walks
// it in reverse topological order. Values are immutable once created except
// through the optimizer, which edits leaf parameters in place.
template <class S>
class tensor {
public:
    using scalar_type = S;
    using node_ptr = std::shared_ptr<tensor_node<S>>;

    tensor() = default;

    static tensor from(shape_t shape, std::vector<S> values) {
        if (shape_numel(shape) != values.size())
            throw dim_error("tensor: shape " + shape_str(shape) + " does not hold " +
                            std::to_string(values.size()) + " values");
        tensor t;
        t.node_ = std::make_shared<tensor_node<S>>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(values);
        return t;
    }

    static tensor full(const shape_t& shape, S v) {
        return from(shape, std::vector<S>(shape_numel(shape), v));
    }

    static tensor zeros(const shape_t& shape) { return full(shape, S(0)); }
    static tensor ones(const shape_t& shape) { return full(shape, S(1)); }
    static tensor scalar(S v) { return from(shape_t{}, std::vector<S>{v}); }

    bool defined() const { return node_ != nullptr; }

    const shape_t& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const {
        if (i >= node_->shape.size())
            throw dim_error("dim: axis " + std::to_string(i) + " out of range for " + shape_str(node_->shape));
        return node_->shape[i];
    }
    std::size_t numel() const { return node_->value.size(); }

    const std::vector<S>& data() const { return node_->value; }
    std::vector<S>& data() { return node_->value; }

    S item() const {
        if (numel() != 1) throw contract_error("item: tensor has " + std::to_string(numel()) + " elements");
        return node_->value[0];
    }

    S operator()(std::size_t i) const { return node_->value[i]; }
    S operator()(std::size_t i, std::size_t j) const {
        return node_->value[i * dim(1) + j];
    }
    S operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return node_->value[(i * dim(1) + j) * dim(2) + k];
    }
    S operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return node_->value[((i * dim(1) + j) * dim(2) + k) * dim(3) + l];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }

    tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

    const std::vector<S>& grad() const {
        if (!has_grad()) throw contract_error("grad: not populated; call backward() first");
        return node_->grad;
    }

    void zero_grad() {
        if (node_) node_->grad.assign(node_->value.size(), S(0));
    }

    node_ptr node() const { return node_; }

    // Reverse-mode pass from a scalar loss. Leaf gradients accumulate across
    // calls; intermediate gradients are reset per call so repeated backward()
    // adds one more copy of d(loss)/d(leaf) each time.
    void backward() const {
        if (!node_) throw contract_error("backward: undefined tensor");
        if (numel() != 1) throw contract_error("backward: loss must be scalar, got " + shape_str(shape()));
        if (!node_->requires_grad) return;

        std::vector<tensor_node<S>*> order = topo_order();
        for (tensor_node<S>* n : order) {
            if (!n->leaf) n->grad.assign(n->value.size(), S(0));
        }
        node_->ensure_grad();
        node_->grad[0] += S(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            tensor_node<S>* n = *it;
            if (n->requires_grad && n->backprop) n->backprop();
        }
    }

private:
    std::vector<tensor_node<S>*> topo_order() const {
        std::vector<tensor_node<S>*> order;
        std::unordered_set<tensor_node<S>*> done;
        // explicit stack; graphs for deep models overflow recursive DFS
        std::vector<std::pair<tensor_node<S>*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next == 0 && done.count(n)) {
                stack.pop_back();
                continue;
            }
            if (next < n->parents.size()) {
                tensor_node<S>* p = n->parents[next].get();
                ++next;
                if (!done.count(p)) stack.emplace_back(p, 0);
            } else {
                if (!done.count(n)) {
                    done.insert(n);
                    order.push_back(n);
                }
                stack.pop_back();
            }
        }
        return order;
    }

    node_ptr node_;
};

using tensor32 = tensor<float>;
using tensor64 = tensor<double>;

namespace detail {

// Wires up autograd bookkeeping for a freshly computed op result.
// make_backprop receives the raw output node and returns the closure.
template <class S, class F>
void attach(tensor<S>& out, std::initializer_list<tensor<S>> inputs, F&& make_backprop) {
    bool needs = false;
    for (const tensor<S>& t : inputs) needs = needs || t.requires_grad();
    if (!needs) return;
    auto node = out.node();
    node->requires_grad = true;
    node->leaf = false;
    for (const tensor<S>& t : inputs) node->parents.push_back(t.node());
    node->backprop = make_backprop(node.get());
}

}  // namespace detail

}  // namespace maebench
