#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bifit/tensor.hpp"

namespace bifit {

namespace detail {
inline thread_local bool grad_enabled = true;
}

/// Disables graph recording for the lifetime of the guard (inference paths).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() noexcept { return detail::grad_enabled; }

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Receives this node; reads `grad` and accumulates into parents.
  std::function<void(Node&)> backward;

  Tensor<T>& ensure_grad() {
    if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a node of the reverse-mode tape. Cheap to copy.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  Tensor<T>& grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
  const Shape& shape() const { return node_->value.shape(); }
  int rows() const { return node_->value.rows(); }
  int cols() const { return node_->value.cols(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

  void zero_grad() {
    if (node_) node_->grad = Tensor<T>();
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Adds `g` into the gradient of `n` if it participates in differentiation.
template <class T>
void accumulate(const std::shared_ptr<Node<T>>& n, const Tensor<T>& g) {
  if (!n || !n->requires_grad) return;
  auto& dst = n->ensure_grad();
  T* d = dst.data();
  const T* s = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

/// Creates the output node of a differentiable op. The backward closure is
/// kept only when some parent requires a gradient and recording is enabled.
template <class T, class Backward>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, Backward&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool req = false;
  if (grad_enabled())
    for (const auto& p : parents) req = req || p.requires_grad();
  if (req) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::forward<Backward>(backward);
  }
  return Var<T>(std::move(node));
}

/// Runs reverse-mode accumulation from a scalar root. Gradients of leaves
/// (parameters) accumulate across calls until cleared.
template <class T>
void backward(const Var<T>& root) {
  if (!root.requires_grad()) return;
  if (root.size() != 1) throw ContractError("backward: root must be a scalar");

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
  }
  // Interior gradients are not needed once propagated.
  for (Node<T>* n : order)
    if (n->backward) n->grad = Tensor<T>();
}

}  // namespace bifit
