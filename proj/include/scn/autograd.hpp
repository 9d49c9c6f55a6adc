#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "scn/tensor.hpp"

namespace scn {

// One value in the reverse-mode graph. Leaves (no parents) hold parameter
// gradients, which accumulate across backward() calls until zero_grad().
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }

  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var parameter(Tensor<T> value) { return Var(std::move(value), true); }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  bool has_grad() const { return node_->grad.shape() == node_->value.shape() && !node_->grad.empty(); }
  // Zero-filled when no gradient has reached this node yet.
  Tensor<T> grad() const { return has_grad() ? node_->grad : Tensor<T>(node_->value.shape()); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

using VarF = Var<float>;
using VarD = Var<double>;

// Graph recording switch (thread-local). Inference paths run under NoGradGuard.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds the result node of an operation. The node records its parents and
// backward closure only if recording is enabled and some parent needs grad.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward_fn) {
  Var<T> out(std::move(value));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (!needs) return out;
  Node<T>* node = out.node();
  node->requires_grad = true;
  node->parents.reserve(parents.size());
  for (auto& p : parents) node->parents.push_back(p.shared());
  node->backward_fn = std::move(backward_fn);
  return out;
}

// Parent gradient buffer if that parent participates, else nullptr.
template <typename T>
Tensor<T>* parent_grad(Node<T>& node, std::size_t index) {
  Node<T>& p = *node.parents[index];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

// Reverse-mode sweep from a scalar root. Intermediate gradients are rebuilt
// on every call; leaf gradients accumulate.
template <typename T>
void backward(const Var<T>& root);

}  // namespace scn
