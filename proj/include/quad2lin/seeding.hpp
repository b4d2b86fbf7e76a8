// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

// Building Mamba-2 weights from a trained attention layer.

#pragma once

#include <cstdint>
#include <string>

#include "quad2lin/mixers.hpp"

namespace q2l {

struct SeedConfig {
  double a0 = -8.0;
  double gate_bias0 = 6.0;
  std::size_t conv_width = 4;
  /// Drop the 1/sqrt(d_h) factor so the carved layer follows the unscaled recurrence.
  bool literal_eq2 = false;
};

/// How the Mamba-2 parameters of a converted layer are initialized.
enum class InitStrategy {
  kInheritMimic,  // carve(): inherit W_Q/K/V/O, inert extras
  kInheritOnly,   // inherit W_Q/K/V/O, extras drawn from the standard Mamba-2 init
  kFromScratch,   // everything drawn fresh
};

std::string to_string(InitStrategy s);
/// Accepts "inherit-mimic", "inherit-only", "from-scratch". Throws ConfigError otherwise.
InitStrategy parse_init_strategy(const std::string& s);

/// gamma at W_gamma = 0: exp(-ln 2 * e^{a0}).
double seeded_gamma(double a0);

/// Inherits the projections bit-exactly and makes the new parts inert: W_gamma = 0,
/// last-tap identity conv, W_G = 0 with gate_bias = gate_bias0.
template <typename T>
Mamba2Weights<T> carve(const AttentionWeights<T>& attn, const SeedConfig& cfg);

/// Mamba-2 weights for any strategy. `rng` is used only by the random strategies.
template <typename T>
Mamba2Weights<T> init_mamba(const AttentionWeights<T>& attn, const SeedConfig& cfg, InitStrategy strategy,
                            Rng& rng);

/// Unnormalized causal linear attention sum_{i<=t} scale (q_t . k_i) v_i through the
/// layer's projections, then W_O. No conv, activation, decay or gate.
template <typename T>
Tensor<T> linear_attention_reference(const Tensor<T>& x, const AttentionWeights<T>& attn, double qk_scale);

struct SeedReport {
  double gamma_deviation = 0;        // max |gamma_t - 1|
  double conv_identity_residual = 0; // max |conv(P) - P| on the projected inputs, pre-activation
  double gate_deviation = 0;         // max |sigmoid(x W_G + b) - 1|
  double output_deviation = 0;       // max |seeded output - linear attention reference|
  double output_mse = 0;             // mean squared version of output_deviation
  double attention_mse = 0;          // mean squared gap to the teacher's softmax attention
  double tol = 0;
  bool passed = false;

  std::string summary() const;
};

/// Diagnostic for a freshly carved (or partially trained) layer against its source.
template <typename T>
SeedReport verify_seed(const Mamba2Weights<T>& m, const AttentionWeights<T>& attn, const Tensor<T>& x, double tol);

}  // namespace q2l
