// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

// Toy decoder-only multimodal model: token and patch embeddings feed one stack of
// pre-norm residual blocks whose mixers are attention or Mamba-2 per a HybridPlan.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "quad2lin/mixers.hpp"
#include "quad2lin/seeding.hpp"

namespace q2l {

/// Token id marking a position filled by the next image patch row.
inline constexpr std::int32_t kPatchSlot = -1;

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t groups = 2;
  std::size_t head_dim = 16;
  std::size_t mlp_dim = 128;
  std::size_t vocab = 64;
  std::size_t image_side = 4;
  std::size_t patch = 2;
  std::size_t channels = 3;
  std::size_t max_pos = 64;
  bool scale_scores = true;
  double init_std = 0.02;

  HeadGeometry geometry() const { return {model_dim, heads, groups, head_dim}; }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t patches_per_image() const { return (image_side / patch) * (image_side / patch); }
  /// Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class LayerKind { kAttention, kMamba2 };

enum class HybridStrategy { kTailStacked, kHeadStacked, kTailInterleaved, kHeadInterleaved };

std::string to_string(LayerKind k);
LayerKind parse_layer_kind(const std::string& s);
std::string to_string(HybridStrategy s);
/// Accepts "tail-stacked", "head-stacked", "tail-interleaved", "head-interleaved".
HybridStrategy parse_hybrid_strategy(const std::string& s);

struct HybridPlan {
  std::vector<LayerKind> kinds;
  std::string strategy;

  std::size_t attention_count() const;
  std::vector<std::size_t> attention_layers() const;
  std::string pattern() const;  // e.g. "AMMMAMMM"
  bool operator==(const HybridPlan&) const = default;
};

HybridPlan all_attention_plan(std::size_t layers);
HybridPlan all_mamba_plan(std::size_t layers);
/// Places n_attention attention layers among `layers`. Interleaved strategies split the
/// stack into n_attention blocks of layers / n_attention and put attention first
/// (head) or last (tail) in each block; n_attention == 0 yields all Mamba-2.
HybridPlan hybrid_plan(std::size_t layers, std::size_t n_attention, HybridStrategy strategy);

template <typename T>
struct Block {
  LayerKind kind = LayerKind::kAttention;
  Parameter<T> norm1;   // [d] RMS scale before the mixer
  AttentionWeights<T> attn;
  Mamba2Weights<T> mamba;
  Parameter<T> norm2;   // [d] RMS scale before the MLP
  Parameter<T> mlp_in;  // d x d_mlp
  Parameter<T> mlp_in_bias;
  Parameter<T> mlp_out;  // d_mlp x d
  Parameter<T> mlp_out_bias;
};

/// One sequence: token ids with kPatchSlot where patch rows go, and the patch rows
/// ([n_patches x patch_dim], consumed in order).
template <typename T>
struct ModelInput {
  std::vector<std::int32_t> tokens;
  Tensor<T> patches;
};

template <typename T>
class DecoderModel {
 public:
  ModelConfig cfg;
  HybridPlan plan;
  Parameter<T> token_embedding;  // vocab x d
  Parameter<T> patch_embedding;  // patch_dim x d
  Parameter<T> pos_embedding;    // max_pos x d
  std::vector<Block<T>> blocks;
  Parameter<T> final_norm;  // [d]
  Parameter<T> lm_head;     // d x vocab

  /// Visits every parameter with its qualified name ("layers.2.mamba.a", "lm_head", ...).
  void for_each_param(const std::function<void(const std::string&, Parameter<T>&)>& fn);
  void for_each_param(const std::function<void(const std::string&, const Parameter<T>&)>& fn) const;
  std::size_t param_count() const;
  std::size_t trainable_count() const;
  void set_all_frozen(bool frozen);
  /// Throws DimensionError when shapes disagree with cfg/plan.
  void validate() const;
  /// Same kinds, config and bit-identical parameters (and frozen flags when asked).
  bool bit_equal(const DecoderModel& other, bool compare_frozen = true) const;
};

/// All-attention model with N(0, init_std^2) weights and unit norm scales.
template <typename T>
DecoderModel<T> build_teacher(const ModelConfig& cfg, std::uint64_t seed);

/// Replaces plan-marked layers by Mamba-2 mixers initialized from the teacher's attention
/// weights. Everything else is copied bit-identically. Inherited parameters are frozen;
/// the new Mamba-2 extras are left trainable.
template <typename T>
DecoderModel<T> convert(const DecoderModel<T>& teacher, const HybridPlan& plan, const SeedConfig& cfg,
                        InitStrategy strategy = InitStrategy::kInheritMimic, std::uint64_t seed = 0);

template <typename T>
struct MixerCapture {
  Tensor<T> input;   // post-norm mixer input X^i
  Tensor<T> output;  // mixer output after W_O, before the residual add
};

struct ForwardOptions {
  /// Mamba-2 scan chunk size, 0 for the recurrence.
  std::size_t scan_chunk = 0;
  /// Positions >= max_pos receive no position embedding instead of raising.
  bool allow_beyond_max_pos = false;
};

/// Records the full forward pass on `tp` and returns logits [T x vocab].
/// When `captures` is given it receives one entry per layer.
template <typename T>
Var<T> forward(Tape<T>& tp, DecoderModel<T>& model, const ModelInput<T>& input, const ForwardOptions& opts = {},
               std::vector<MixerCapture<T>>* captures = nullptr);

/// Inference-only logits.
template <typename T>
Tensor<T> logits(const DecoderModel<T>& model, const ModelInput<T>& input, const ForwardOptions& opts = {});

/// Per-layer (X^i, Attn(X^i)) pairs of an all-attention teacher.
template <typename T>
std::vector<MixerCapture<T>> capture_layer_io(const DecoderModel<T>& teacher, const ModelInput<T>& input);

/// Runs a single layer's mixer on a captured input with gradients into `model`.
template <typename T>
Var<T> mixer_forward(Tape<T>& tp, DecoderModel<T>& model, std::size_t layer, const Tensor<T>& x,
                     const ForwardOptions& opts = {});

/// Incremental decoding with a KV cache per attention layer and a fixed state per
/// Mamba-2 layer.
template <typename T>
class DecodeSession {
 public:
  explicit DecodeSession(const DecoderModel<T>& model, ForwardOptions opts = {});

  /// Feeds one token and returns its logits row.
  Tensor<T> step_token(std::int32_t token);
  /// Feeds one image patch row.
  Tensor<T> step_patch(std::span<const T> patch);
  /// Feeds a whole input; returns the logits of the last position.
  Tensor<T> prefill(const ModelInput<T>& input);

  std::size_t position() const { return pos_; }
  /// Live bytes held by KV caches (attention layers).
  std::size_t kv_bytes() const;
  /// Live bytes held by SSM states (Mamba-2 layers).
  std::size_t state_bytes() const;

 private:
  Tensor<T> step_embedded(std::vector<T> h);

  const DecoderModel<T>* model_;
  ForwardOptions opts_;
  std::vector<KVCache<T>> caches_;
  std::vector<SSMState<T>> states_;
  std::size_t pos_ = 0;
};

/// Greedy continuation: prefill `input`, then append argmax tokens until `max_new`
/// tokens or `stop` is produced. Returns the generated tokens.
template <typename T>
std::vector<std::int32_t> generate_greedy(const DecoderModel<T>& model, const ModelInput<T>& input,
                                          std::size_t max_new, std::int32_t stop = -2);

}  // namespace q2l
