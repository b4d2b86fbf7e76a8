// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "quad2lin/autodiff.hpp"

namespace q2l {

/// Central-difference gradient of a scalar function:
///   g_i = (f(x + h e_i) - f(x - h e_i)) / 2h.
/// `f` must be pure. Independent of the tape; this is the gradient oracle.
template <typename T, typename F>
Tensor<T> finite_diff_grad(F&& f, const Tensor<T>& x, double h = 1e-5) {
  Tensor<T> g(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + static_cast<T>(h);
    const double fp = static_cast<double>(f(probe));
    probe[i] = orig - static_cast<T>(h);
    const double fm = static_cast<double>(f(probe));
    probe[i] = orig;
    g[i] = static_cast<T>((fp - fm) / (2.0 * h));
  }
  return g;
}

/// Norm-wise relative error ||a - b|| / max(||a||, ||b||, floor).
template <typename T>
double relative_error(const Tensor<T>& a, const Tensor<T>& b, double floor = 1e-12) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double x = a[i], y = b[i];
    diff += (x - y) * (x - y);
    na += x * x;
    nb += y * y;
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

/// Compares the tape gradient of `build(tape, x)` w.r.t. x against finite differences.
/// `build` records a scalar loss given a leaf variable. Returns the relative error.
template <typename T>
double gradient_check(const std::function<Var<T>(Tape<T>&, Var<T>)>& build, const Tensor<T>& x,
                      double h = 1e-5) {
  Tape<T> tape;
  Var<T> leaf = tape.leaf(x);
  Var<T> loss = build(tape, leaf);
  tape.backward(loss);
  const Tensor<T> analytic = leaf.grad();
  // Probe tapes have grad disabled, so `build` runs in value-only mode.
  const Tensor<T> numeric = finite_diff_grad<T>(
      [&](const Tensor<T>& probe) {
        Tape<T> t(false);
        return build(t, t.leaf(probe)).value().item();
      },
      x, h);
  return relative_error(analytic, numeric);
}

/// Same check for a Parameter consumed through Tape::param inside `build`.
/// The parameter value is restored afterwards; its grad is overwritten.
template <typename T>
double parameter_gradient_check(Parameter<T>& p, const std::function<Var<T>(Tape<T>&)>& build,
                                double h = 1e-5) {
  p.zero_grad();
  {
    Tape<T> tape;
    tape.backward(build(tape));
  }
  const Tensor<T> analytic = p.grad;
  const Tensor<T> saved = p.value;
  const Tensor<T> numeric = finite_diff_grad<T>(
      [&](const Tensor<T>& probe) {
        p.value = probe;
        Tape<T> t(false);
        return build(t).value().item();
      },
      saved, h);
  p.value = saved;
  return relative_error(analytic, numeric);
}

}  // namespace q2l
