#include "promptseg/nn/autograd.hpp"

#include <unordered_set>

namespace promptseg::nn {

template <typename T>
Var<T> constant(TensorT<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = "constant";
  return Var<T>(std::move(node));
}

namespace {
thread_local int no_grad_depth = 0;
}  // namespace

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }
bool NoGradGuard::active() { return no_grad_depth > 0; }

template <typename T>
Var<T> param(const Parameter<T>& p) {
  auto node = std::make_shared<Node<T>>();
  node->value = p.value;
  node->op = "param:" + p.name;
  if (p.trainable && !NoGradGuard::active()) {
    node->param = &p;
    node->requires_grad = true;
  }
  return Var<T>(std::move(node));
}

template <typename T>
Var<T> make_op(std::string op, TensorT<T> value, std::vector<Var<T>> parents, BackwardFn<T> backward) {
  if (!value.all_finite()) {
    throw NumericError(op, "non-finite value produced by " + op);
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = std::move(op);
  for (const auto& p : parents) {
    if (p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

template <typename T>
void backward(const Var<T>& loss) {
  if (!loss) throw ShapeError("backward: empty loss");
  if (loss.value().numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS over nodes that need gradients.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
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

  for (auto* n : order) n->grad = TensorT<T>();
  loss.node()->grad = TensorT<T>(loss.shape(), T(1));

  std::vector<TensorT<T>*> parent_grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->grad.empty() || !n->backward) continue;
    parent_grads.assign(n->parents.size(), nullptr);
    for (std::size_t i = 0; i < n->parents.size(); ++i) {
      Node<T>* p = n->parents[i].get();
      if (!p->requires_grad) continue;
      if (p->grad.empty()) p->grad = TensorT<T>(p->value.shape());
      parent_grads[i] = &p->grad;
    }
    n->backward(n->grad, parent_grads);
    for (auto* g : parent_grads) {
      if (g && !g->all_finite()) {
        throw NumericError(n->op, "non-finite gradient produced by backward of " + n->op);
      }
    }
    if (n->param == nullptr) n->grad = TensorT<T>();
  }

  for (auto* n : order) {
    const Parameter<T>* p = n->param;
    if (p == nullptr || !p->trainable || n->grad.empty()) continue;
    if (!p->grad) {
      p->grad = std::move(n->grad);
    } else {
      auto& acc = p->grad->vec();
      const auto& g = n->grad.vec();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
    }
    n->grad = TensorT<T>();
  }
}

#define PROMPTSEG_INSTANTIATE(T)                                                                          \
  template Var<T> constant<T>(TensorT<T>);                                                                \
  template Var<T> param<T>(const Parameter<T>&);                                                                \
  template Var<T> make_op<T>(std::string, TensorT<T>, std::vector<Var<T>>, BackwardFn<T>);               \
  template void backward<T>(const Var<T>&);

PROMPTSEG_INSTANTIATE(float)
PROMPTSEG_INSTANTIATE(double)

}  // namespace promptseg::nn
