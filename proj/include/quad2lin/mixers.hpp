// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

// Sequence mixers: causal grouped-query softmax attention and the Mamba-2 decayed
// linear-attention mixer. Each has a full-sequence form that records on a tape and a
// single-step decode form that carries a cache (attention) or a fixed-size state
// (Mamba-2).

#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "quad2lin/autodiff.hpp"
#include "quad2lin/ops.hpp"

namespace q2l {

class Rng;

struct HeadGeometry {
  std::size_t model_dim = 0;  // d
  std::size_t heads = 0;      // H, query heads
  std::size_t groups = 0;     // G, key/value groups
  std::size_t head_dim = 0;   // d_h

  std::size_t q_width() const { return heads * head_dim; }
  std::size_t kv_width() const { return groups * head_dim; }
  /// Throws DimensionError unless heads is a positive multiple of groups.
  void validate() const;
};

template <typename T>
struct AttentionWeights {
  HeadGeometry geo;
  Parameter<T> w_q;  // d x H*dh
  Parameter<T> w_k;  // d x G*dh
  Parameter<T> w_v;  // d x G*dh
  Parameter<T> w_o;  // H*dh x d
  /// Multiply scores by 1/sqrt(d_h). Off reproduces the unscaled textbook form.
  bool scale_scores = true;

  static AttentionWeights init(const HeadGeometry& geo, Rng& rng, double std);
  double score_scale() const;
  void for_each_param(const std::function<void(Parameter<T>&)>& fn);
  void for_each_param(const std::function<void(const Parameter<T>&)>& fn) const;
  /// Throws DimensionError if parameter shapes disagree with `geo`.
  void validate() const;
};

struct Mamba2Options {
  /// SiLU after the causal conv over projected q, k, v.
  bool conv_activation = true;
  /// Multiply the SSM output by sigmoid(x W_G + gate_bias).
  bool output_gate = true;
  /// Per-head RMS normalization of the SSM output before gating.
  bool head_norm = false;
  /// Replace the data-dependent decay by a constant (testing aid).
  std::optional<double> fixed_gamma;
  /// Multiplier on S_t q_t; 1 is the literal recurrence.
  double qk_scale = 1.0;
};

template <typename T>
struct Mamba2Weights {
  HeadGeometry geo;
  std::size_t conv_width = 4;
  Parameter<T> w_q, w_k, w_v, w_o;  // same shapes as AttentionWeights
  Parameter<T> a;                   // [G] decay log-rate
  Parameter<T> w_gamma;             // d x G
  Parameter<T> conv_kernel;         // w x (H+2G)*dh
  Parameter<T> conv_bias;           // (H+2G)*dh
  Parameter<T> w_gate;              // d x H*dh
  Parameter<T> gate_bias;           // H*dh
  Mamba2Options options;

  /// Correctly named and shaped parameters, all zero.
  static Mamba2Weights allocate(const HeadGeometry& geo, std::size_t conv_width);

  std::size_t conv_channels() const { return geo.q_width() + 2 * geo.kv_width(); }
  /// Parameters that do not exist in an attention layer.
  std::size_t extra_param_count() const;
  void for_each_param(const std::function<void(Parameter<T>&)>& fn);
  void for_each_param(const std::function<void(const Parameter<T>&)>& fn) const;
  void validate() const;
};

/// Parameter names used by both weight structs ("W_Q", "a", "conv_kernel", ...).
namespace param_names {
inline constexpr const char* kWQ = "W_Q";
inline constexpr const char* kWK = "W_K";
inline constexpr const char* kWV = "W_V";
inline constexpr const char* kWO = "W_O";
inline constexpr const char* kA = "a";
inline constexpr const char* kWGamma = "W_gamma";
inline constexpr const char* kConvKernel = "conv_kernel";
inline constexpr const char* kConvBias = "conv_bias";
inline constexpr const char* kWGate = "W_G";
inline constexpr const char* kGateBias = "gate_bias";
}  // namespace param_names

/// Growing key/value rows for one attention layer.
template <typename T>
struct KVCache {
  std::size_t width = 0;  // G * d_h
  std::vector<T> keys;
  std::vector<T> values;
  std::size_t length = 0;

  explicit KVCache(std::size_t w = 0) : width(w) {}
  /// Live scalars: 2 * length * width.
  std::size_t scalar_count() const { return keys.size() + values.size(); }
  std::size_t bytes() const { return scalar_count() * sizeof(T); }
};

/// Fixed-size decode state for one Mamba-2 layer.
template <typename T>
struct SSMState {
  std::size_t groups = 0, head_dim = 0, conv_width = 0, channels = 0;
  std::vector<T> s;          // [G][dh_v][dh_k]
  std::vector<T> conv_tail;  // last (w-1) pre-conv q,k,v rows, oldest first
  std::size_t step = 0;

  SSMState() = default;
  explicit SSMState(const Mamba2Weights<T>& w);
  std::size_t scalar_count() const { return s.size() + conv_tail.size(); }
  std::size_t bytes() const { return scalar_count() * sizeof(T); }
};

// Attention

template <typename T>
Var<T> attention_forward(Var<T> x, AttentionWeights<T>& w);
template <typename T>
Tensor<T> attention_forward(const Tensor<T>& x, const AttentionWeights<T>& w);
/// One autoregressive step; appends k_t, v_t to the cache.
template <typename T>
Tensor<T> attention_decode_step(std::span<const T> x_t, const AttentionWeights<T>& w, KVCache<T>& cache);

// Mamba-2

/// Full-sequence Mamba-2 mixer. `scan.chunk == 0` runs the recurrence, otherwise the
/// chunked form.
template <typename T>
Var<T> mamba2_forward(Var<T> x, Mamba2Weights<T>& w, ops::ScanOptions scan = {});
template <typename T>
Tensor<T> mamba2_forward_recurrent(const Tensor<T>& x, const Mamba2Weights<T>& w);
template <typename T>
Tensor<T> mamba2_forward_chunked(const Tensor<T>& x, const Mamba2Weights<T>& w, std::size_t chunk);
/// Per-step decay gamma [T x G] for an input sequence.
template <typename T>
Tensor<T> mamba2_gammas(const Tensor<T>& x, const Mamba2Weights<T>& w);
template <typename T>
Tensor<T> mamba2_decode_step(std::span<const T> x_t, const Mamba2Weights<T>& w, SSMState<T>& state);

/// Closed-form decayed attention for one head, evaluated by a direct double loop:
///   y_t = sum_{i<=t} (prod_{j=i+1..t} gamma_j) (q_t . k_i) v_i.
/// Shares no code with the scan kernels.
template <typename T>
Tensor<T> brute_force_decayed_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                        const Tensor<T>& gammas);

}  // namespace q2l
