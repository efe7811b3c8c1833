#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "promptseg/nn/tensor.hpp"

namespace promptseg::nn {

// A named tensor owned by a model. Only trainable parameters ever receive a
// gradient; backward accumulates into `grad` and callers zero it.
template <typename T>
struct Parameter {
  std::string name;
  TensorT<T> value;
  bool trainable = false;
  // Gradient slot, written by backward even through a const model.
  mutable std::optional<TensorT<T>> grad;

  void zero_grad() const { grad.reset(); }
};

template <typename T>
class Var;

// Receives the upstream gradient and one accumulator per parent. An
// accumulator is null when that parent does not need a gradient.
template <typename T>
using BackwardFn = std::function<void(const TensorT<T>& grad_out, std::vector<TensorT<T>*>& parent_grads)>;

template <typename T>
struct Node {
  TensorT<T> value;
  TensorT<T> grad;
  std::string op;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn<T> backward;
  const Parameter<T>* param = nullptr;
  bool requires_grad = false;
};

// Handle to a recorded value. Copies share the same node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const TensorT<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::string& op() const { return node_->op; }
  const std::shared_ptr<Node<T>>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Leaf with no gradient.
template <typename T>
Var<T> constant(TensorT<T> value);

// Leaf bound to a parameter; it requires a gradient iff the parameter is
// trainable and no NoGradGuard is active on this thread. The parameter must
// outlive any backward call on the graph.
template <typename T>
Var<T> param(const Parameter<T>& p);

// While alive, graphs built on this thread record nothing for backward.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool active();
};

// Records an operation. `value` is checked for non-finite entries (raising
// NumericError naming `op`). When no parent requires a gradient the node is
// stored without parents or backward closure.
template <typename T>
Var<T> make_op(std::string op, TensorT<T> value, std::vector<Var<T>> parents, BackwardFn<T> backward);

// Reverse sweep from a scalar. Adds d(loss)/d(value) into `grad` of every
// reachable trainable parameter; frozen parameters are never touched.
// Throws ShapeError for a non-scalar loss and NumericError naming the op whose
// backward produced a non-finite gradient.
template <typename T>
void backward(const Var<T>& loss);

}  // namespace promptseg::nn
