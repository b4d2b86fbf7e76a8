// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>

#include "quad2lin/tensor.hpp"

namespace q2l {

/// A named trainable tensor with its accumulated gradient. Frozen parameters
/// enter a tape as constants, so their gradient is never written.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

template <typename T>
class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
  /// Gradient after Tape::backward; zeros when the node took no part.
  const Tensor<T>& grad() const;

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run reverse-mode tape. Nodes are recorded in execution order, so the
/// recording order is a topological order and backward simply walks it in reverse.
/// Fan-out is handled by additive accumulation into each node's gradient buffer.
///
/// A tape built with `grad_enabled = false` records values only (inference mode).
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  /// Free variable whose gradient stays on the tape (read it via Var::grad()).
  Var<T> leaf(Tensor<T> value);
  /// Parameter input. Gradients are added into `p.grad` at the end of backward().
  /// The parameter must outlive the tape.
  Var<T> param(Parameter<T>& p);

  /// Records an op output. The node requires grad iff any input does; `fn` is
  /// dropped otherwise.
  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn);
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(fn));
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Mutable gradient buffer, allocated as zeros on first use.
  Tensor<T>& grad(std::size_t id);
  const Tensor<T>& grad_or_empty(std::size_t id) const { return nodes_[id].grad; }

  /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must hold exactly one element.
  void backward(Var<T> loss);

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* sink = nullptr;
  };

  // deque: references to existing nodes stay valid while new ones are appended.
  std::deque<Node> nodes_;
  bool grad_enabled_;
  bool backward_done_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

template <typename T>
const Tensor<T>& Var<T>::grad() const {
  return tape_->grad(id_);
}

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace q2l
