#include "pointnorm/tensor.hpp"

#include <unordered_set>

namespace pointnorm {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  std::size_t total = 1;
  for (std::size_t extent : shape) total *= extent;
  return total;
}

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
std::vector<TensorNode<T>*> topological_order(const Tensor<T>& loss) {
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  // Iterative post-order DFS; recursion depth would track network depth.
  std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
  if (!loss.requires_grad()) return order;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      TensorNode<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename T>
void backward(const Tensor<T>& loss, BackwardOptions options) {
  if (loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() on a tensor that does not require grad");
  }
  auto order = topological_order(loss);
  // Own every node for the duration of the sweep; releasing a node's inputs
  // must not free nodes that are still queued.
  std::vector<std::shared_ptr<TensorNode<T>>> keep_alive;
  if (options.release_graph) {
    keep_alive.reserve(order.size());
    for (auto* node : order) {
      for (auto& in : node->inputs) keep_alive.push_back(in);
    }
  }
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<T>* node = *it;
    if (!node->backward) continue;
    if (!node->grad.empty()) node->backward(*node);
    if (options.release_graph) {
      node->grad.clear();
      node->grad.shrink_to_fit();
      node->backward = nullptr;
      node->inputs.clear();
    }
  }
}

template std::vector<TensorNode<float>*> topological_order<float>(const Tensor<float>&);
template std::vector<TensorNode<double>*> topological_order<double>(const Tensor<double>&);
template void backward<float>(const Tensor<float>&, BackwardOptions);
template void backward<double>(const Tensor<double>&, BackwardOptions);

}  // namespace pointnorm
