// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "quad2lin/tensor.hpp"

namespace q2l::kernels {

/// Geometry of a grouped decayed scan. Query head h reads state h / heads_per_group.
struct ScanGeometry {
  std::size_t steps = 0;
  std::size_t heads = 0;
  std::size_t groups = 0;
  std::size_t head_dim = 0;
  std::size_t heads_per_group() const { return heads / groups; }
};

ScanGeometry scan_geometry(const Shape& q, const Shape& k, const Shape& v, const Shape& gamma,
                           std::size_t heads, std::size_t groups);

/// Step-by-step recurrence. When `states` is non-null it receives S_1..S_T for every
/// group, laid out [t][g][dh_v][dh_k].
template <typename T>
Tensor<T> scan_recurrent(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         const Tensor<T>& gamma, const ScanGeometry& g, T score_scale,
                         std::vector<T>* states = nullptr);

/// Blocked evaluation: within each block of `chunk` positions the output is the masked,
/// decay-weighted quadratic form; the state entering the block is carried across.
template <typename T>
Tensor<T> scan_chunked(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                       const Tensor<T>& gamma, const ScanGeometry& g, T score_scale,
                       std::size_t chunk);

/// Gradients of the recurrence given the stored states from scan_recurrent.
/// Any output pointer may be null.
template <typename T>
void scan_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                   const Tensor<T>& gamma, const ScanGeometry& g, T score_scale,
                   const std::vector<T>& states, const Tensor<T>& dy, Tensor<T>* dq,
                   Tensor<T>* dk, Tensor<T>* dv, Tensor<T>* dgamma);

}  // namespace q2l::kernels
