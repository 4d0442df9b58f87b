#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pointnorm/errors.hpp"

namespace pointnorm {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

// Row-major strides; broadcast axes (extent 1) keep their nominal stride.
std::vector<std::size_t> strides_of(const Shape& shape);

// Autodiff recording is on by default; NoGradGuard disables it for the
// current thread only, so concurrent graphs on other threads are unaffected.
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

template <typename T>
class Tensor;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(TensorNode&)> backward;

  std::span<T> ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

// Dense row-major tensor handle. Copies share the underlying node, so a
// parameter tensor can be referenced from many graphs while the optimizer
// mutates its values between batches.
template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    auto node = std::make_shared<Node>();
    node->value.assign(pointnorm::numel(shape), fill);
    node->shape = std::move(shape);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (values.size() != pointnorm::numel(shape)) {
      throw DimensionError("Tensor::from: " + std::to_string(values.size()) +
                           " values do not fill shape " + to_string(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  // Only for leaves (parameters, buffers); activations are immutable once created.
  std::span<T> mutable_values() { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool is_leaf() const { return !node_->backward; }
  std::string_view op() const { return node_->op; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  T at(std::initializer_list<std::size_t> index) const;

  // Fresh leaf holding a copy of the values; no graph history.
  Tensor detach() const { return from(shape(), node_->value, false); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) {
    throw IndexError("at(): " + std::to_string(index.size()) + " indices for rank " +
                     std::to_string(rank()));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= shape()[axis]) throw IndexError("at(): index out of range on axis " + std::to_string(axis));
    flat = flat * shape()[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

// Creates an op result. When recording is enabled and any input requires a
// gradient the node keeps its inputs and backward rule; otherwise it is a
// plain constant and the closure is dropped.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                      std::string_view op, std::function<void(TensorNode<T>&)> backward) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> inputs,
                      std::string_view op, std::function<void(TensorNode<T>&)> backward) {
  return make_result(std::move(shape), std::move(value), std::vector<Tensor<T>>(inputs), op,
                     std::move(backward));
}

struct BackwardOptions {
  // Drop intermediate grads and the recorded closures once consumed. Leaf
  // grads are always kept. Training uses this to bound peak memory.
  bool release_graph = false;
};

// Reverse-mode sweep from a scalar loss. Leaf grads accumulate across calls.
template <typename T>
void backward(const Tensor<T>& loss, BackwardOptions options = {});

// Operations recorded between `loss` and the leaves, in topological order.
template <typename T>
std::vector<TensorNode<T>*> topological_order(const Tensor<T>& loss);

extern template void backward<float>(const Tensor<float>&, BackwardOptions);
extern template void backward<double>(const Tensor<double>&, BackwardOptions);
extern template std::vector<TensorNode<float>*> topological_order<float>(const Tensor<float>&);
extern template std::vector<TensorNode<double>*> topological_order<double>(const Tensor<double>&);

}  // namespace pointnorm
