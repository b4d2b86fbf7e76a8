// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

// Differentiable operations on tape variables. Every op computes its value
// eagerly and, when any input requires grad, records a backward rule.
//
// Shapes are rank-2 [rows x cols] unless noted; a "row vector" argument may be
// given as [n] or [1 x n].

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "quad2lin/autodiff.hpp"

namespace q2l::ops {

// Linear algebra and elementwise arithmetic.
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
/// a[i, :] + row for every row i.
template <typename T> Var<T> add_row(Var<T> a, Var<T> row);
/// a[i, :] * row for every row i.
template <typename T> Var<T> mul_row(Var<T> a, Var<T> row);
template <typename T> Var<T> scale(Var<T> a, double s);
template <typename T> Var<T> add_scalar(Var<T> a, double s);
template <typename T> Var<T> neg(Var<T> a);

// Pointwise nonlinearities.
template <typename T> Var<T> exp(Var<T> a);
template <typename T> Var<T> log(Var<T> a);
template <typename T> Var<T> square(Var<T> a);
template <typename T> Var<T> softplus(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> silu(Var<T> a);
/// Exact (erf) GELU.
template <typename T> Var<T> gelu(Var<T> a);

// Layout. All of these copy.
template <typename T> Var<T> transpose(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
template <typename T> Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end);
template <typename T> Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
/// out[i, :] = table[ids[i], :]  (embedding lookup; backward scatter-adds).
template <typename T> Var<T> gather_rows(Var<T> table, std::span<const std::int32_t> ids);
/// Builds an [n_rows x cols] matrix by placing a's rows at a_rows and b's rows at b_rows.
/// Together the two index lists must cover 0..n_rows-1 exactly once.
template <typename T>
Var<T> interleave_rows(Var<T> a, std::span<const std::size_t> a_rows, Var<T> b,
                       std::span<const std::size_t> b_rows, std::size_t n_rows);

// Reductions.
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
/// [m x n] -> [m x 1]
template <typename T> Var<T> sum_rows(Var<T> a);
template <typename T> Var<T> mean_rows(Var<T> a);

// Normalization and sequence ops.
/// Per-row RMS normalization with a learned per-column scale.
template <typename T> Var<T> rms_norm(Var<T> x, Var<T> weight, double eps = 1e-6);
/// Per-row RMS normalization without scale applied independently to each
/// contiguous group of `group_size` columns.
template <typename T> Var<T> group_rms_norm(Var<T> x, std::size_t group_size, double eps = 1e-6);
/// out[t,c] = bias[c] + sum_j kernel[j,c] * x[t-(w-1)+j, c], x outside [0,T) is zero.
template <typename T> Var<T> causal_depthwise_conv(Var<T> x, Var<T> kernel, Var<T> bias);
/// Row-wise softmax with max subtraction. Throws NumericError on NaN input.
template <typename T> Var<T> softmax_rows(Var<T> a);
template <typename T> Var<T> log_softmax_rows(Var<T> a);

/// Causal grouped-query softmax attention core (no projections).
/// q: [T x heads*dh], k, v: [T x groups*dh]; query head h reads kv group h / (heads/groups).
/// Scores are multiplied by `score_scale` before the softmax.
template <typename T>
Var<T> causal_gqa_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads, std::size_t groups,
                            double score_scale);

struct ScanOptions {
  /// 0 selects the step-by-step recurrence; otherwise the sequence is processed in
  /// blocks of this many positions (intra-block quadratic form + carried state).
  std::size_t chunk = 0;
};

/// Decayed linear-attention scan, the state recurrence of a Mamba-2 mixer:
///   S_t = gamma_t * S_{t-1} + v_t k_t^T,  y_t = score_scale * S_t q_t,  S_0 = 0,
/// with one state per kv group shared by that group's query heads.
/// q: [T x heads*dh], k, v: [T x groups*dh], gamma: [T x groups].
template <typename T>
Var<T> decayed_scan(Var<T> q, Var<T> k, Var<T> v, Var<T> gamma, std::size_t heads,
                    std::size_t groups, double score_scale, ScanOptions opts = {});

// Losses. All return a [1] tensor.
/// mean((a - b)^2) over all elements.
template <typename T> Var<T> mse(Var<T> a, Var<T> b);
/// Mean negative log-likelihood of targets[i] under softmax(logits[i, :]);
/// rows with target < 0 are ignored. Zero when no row is active.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int32_t> targets);
/// Mean over rows with mask[i] of KL(softmax(teacher_i / tau) || softmax(student_i / tau)).
/// An empty mask selects every row.
template <typename T>
Var<T> kl_div_logits(Var<T> teacher, Var<T> student, double temperature,
                     std::span<const std::uint8_t> mask = {});

}  // namespace q2l::ops
