// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include "quad2lin/autodiff.hpp"

namespace q2l {

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, grad_enabled_, {}, nullptr});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  const bool rg = grad_enabled_ && !p.frozen;
  nodes_.push_back(Node{p.value, {}, rg, {}, rg ? &p : nullptr});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn) {
  bool rg = false;
  if (grad_enabled_) {
    for (const auto& in : inputs) rg = rg || requires_grad(in.id());
  }
  nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(fn) : BackwardFn{}, nullptr});
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Tensor<T>& Tape<T>::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.numel() != n.value.numel()) n.grad = Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.value().numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (backward_done_) throw ContractError("backward() called twice on the same tape");
  backward_done_ = true;
  if (!requires_grad(loss.id())) return;
  grad(loss.id())[0] = T(1);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.sink) {
      if (n.sink->grad.numel() != n.sink->value.numel()) n.sink->zero_grad();
      n.sink->grad += n.grad;
    }
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace q2l
