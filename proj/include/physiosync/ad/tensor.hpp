#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "physiosync/errors.hpp"

namespace physiosync::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline thread_local bool grad_mode = true;
}

/// Disables graph recording for its lifetime (evaluation, finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
  ~NoGradGuard() { detail::grad_mode = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode; }

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T{0});
    return grad;
  }
};

/// Shared handle to a node of the computation graph. Copies alias the same storage.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : node_(std::make_shared<Node<T>>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> values(numel(shape), T{0});
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor full(Shape shape, T fill) {
    std::vector<T> values(numel(shape), fill);
    return Tensor(std::move(shape), std::move(values), false);
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + ad::to_string(shape) + " given " +
                       std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  const std::vector<T>& values() const { return node_->value; }
  std::vector<T>& mutable_values() { return node_->value; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + ad::to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() == node_->value.size() && size() > 0; }
  const std::vector<T>& grad() const { return node_->grad; }
  std::vector<T>& mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), T{0}); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  /// Same values, cut from the graph.
  Tensor detach() const { return Tensor(node_->shape, node_->value, false); }

  /// Reverse-mode sweep from a scalar root. Gradients accumulate into every
  /// reachable node that requires them.
  void backward() {
    if (size() != 1) throw ShapeError("backward() requires a scalar root, got " + ad::to_string(shape()));
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS; recursion depth would otherwise follow graph depth.
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<T>* parent = node->parents[next++].get();
        if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    node_->ensure_grad()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* node = *it;
      if (node->backward && node->grad.size() == node->value.size()) node->backward(*node);
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

/// Builds the output node of an op. The backward closure is attached only when
/// some input participates in differentiation.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(value), false);
  if (!ad::grad_enabled()) return out;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.parents.reserve(inputs.size());
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

/// Grad buffer of the k-th parent, or nullptr when that parent is constant.
template <class T>
std::vector<T>* parent_grad(Node<T>& node, std::size_t k) {
  auto& parent = *node.parents[k];
  return parent.requires_grad ? &parent.ensure_grad() : nullptr;
}

}  // namespace detail

}  // namespace physiosync::ad
