#ifndef DCAPS_TENSOR_HPP_
#define DCAPS_TENSOR_HPP_

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dcaps/errors.hpp"

namespace dcaps {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// One node of the dynamically recorded computation graph. `backprop` pushes
// this node's gradient into its parents; it is only populated on the path to
// a gradient-requiring leaf.
template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily during backward
  bool requires_grad = false;  // leaf flag (parameters)
  bool needs_grad = false;     // true if any reachable leaf requires grad
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// Value-semantics handle to an immutable tensor. Copies share the node.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    n_ = std::make_shared<TensorNode<T>>();
    n_->shape = std::move(shape);
    n_->value = std::move(data);
    n_->requires_grad = requires_grad;
    n_->needs_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> d(numel(shape), T(0));
    return Tensor(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, T v) {
    std::vector<T> d(numel(shape), v);
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor scalar(T v) { return Tensor({}, {v}); }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t ndim() const { return n_->shape.size(); }
  std::size_t size() const { return n_->value.size(); }
  const std::vector<T>& data() const { return n_->value; }
  T at(std::size_t i) const { return n_->value[i]; }

  T item() const {
    if (size() != 1) {
      throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
    }
    return n_->value[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  bool needs_grad() const { return n_->needs_grad; }

  // Gradient buffer; empty before the first backward pass touches this node.
  const std::vector<T>& grad() const { return n_->grad; }

  // Direct mutation hooks. Only the optimizer and parameter initialization
  // may use these, and never on tensors already recorded in a live graph.
  std::vector<T>& mutable_value() { return n_->value; }
  std::vector<T>& mutable_grad() {
    n_->ensure_grad();
    return n_->grad;
  }

  std::shared_ptr<TensorNode<T>> node() const { return n_; }

 private:
  std::shared_ptr<TensorNode<T>> n_;
};

namespace detail {

// Builds the node for an op result. Parents and the backprop closure are only
// retained when some parent leads to a gradient-requiring leaf.
template <class T>
Tensor<T> make_op_result(Shape shape, std::vector<T> value,
                         std::vector<std::shared_ptr<TensorNode<T>>> parents,
                         std::function<void(TensorNode<T>&)> backprop) {
  Tensor<T> out(std::move(shape), std::move(value));
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->needs_grad;
  if (needs) {
    auto node = out.node();
    node->needs_grad = true;
    node->parents = std::move(parents);
    TensorNode<T>* self = node.get();
    node->backprop = [self, backprop]() { backprop(*self); };
  }
  return out;
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Accumulates d loss / d leaf into the
// grad buffer of every reachable requires_grad node.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw NumericError("backward() requires a scalar loss, got shape " +
                       shape_str(loss.shape()));
  }
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw NumericError("backward() called on non-finite loss");
  }
  auto root = loss.node();
  if (!root->needs_grad) return;  // loss disconnected from all parameters

  // Iterative post-order DFS: children appear after all their parents.
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> visited;
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode<T>* p = node->parents[idx++].get();
      if (p->needs_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += T(1);

  // `order` ends at the root; walking it backwards visits every node after
  // all of its consumers, so its gradient is complete when backprop runs.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* node = *it;
    if (node->backprop) {
      node->ensure_grad();
      for (const auto& p : node->parents) {
        if (p->needs_grad) p->ensure_grad();
      }
      node->backprop();
      node->backprop = nullptr;
    }
    if (!node->requires_grad) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

// A named leaf tensor whose gradient persists across forward passes.
template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;

  Parameter() = default;
  Parameter(std::string name_, Tensor<T> value_)
      : name(std::move(name_)), value(std::move(value_)) {
    value.node()->requires_grad = true;
    value.node()->needs_grad = true;
    value.node()->ensure_grad();
  }

  const Shape& shape() const { return value.shape(); }
  std::size_t size() const { return value.size(); }
  const std::vector<T>& grad() const { return value.node()->grad; }
};

template <class T>
void zero_grads(std::vector<Parameter<T>>& params) {
  for (auto& p : params) {
    auto& g = p.value.mutable_grad();
    std::fill(g.begin(), g.end(), T(0));
  }
}

template <class T>
std::size_t count_parameters(const std::vector<Parameter<T>>& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.size();
  return total;
}

}  // namespace dcaps

#endif  // DCAPS_TENSOR_HPP_
