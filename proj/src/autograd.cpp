#include "scn/autograd.hpp"

#include <unordered_set>
#include <utility>

namespace scn {
namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
void backward(const Var<T>& root) {
  require(root.defined() && root.size() == 1, ErrorKind::usage,
          "backward() needs a scalar root, got shape " + (root.defined() ? shape_string(root.shape()) : "<undefined>"));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS: parents before children in `order`.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* node : order)
    if (!node->is_leaf()) node->grad = Tensor<T>();
  root.node()->grad_buffer()[0] += T{1};

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->is_leaf() || !node->backward_fn) continue;
    if (node->grad.shape() == node->value.shape()) node->backward_fn(*node);
    node->grad = Tensor<T>();
  }
}

template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::parse: return "parse";
    case ErrorKind::format: return "format";
    case ErrorKind::config: return "config";
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::usage: return "usage";
    case ErrorKind::structural: return "structural";
    case ErrorKind::ordering: return "ordering";
    case ErrorKind::io: return "io";
    case ErrorKind::internal: return "internal";
  }
  return "unknown";
}

}  // namespace scn
