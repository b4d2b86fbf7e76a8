// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

// Progressive distillation of a converted student: stage 1 and 2 match each Mamba-2
// mixer to the teacher's attention output on captured inputs, stage 3 matches the
// full-model logits. Also the teacher pre-training loop and accuracy evaluation.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "quad2lin/data.hpp"
#include "quad2lin/model.hpp"

namespace q2l {

struct StageConfig {
  /// 0 is teacher pre-training (cross-entropy, every parameter trainable).
  int stage = 1;
  double lr = 1e-3;
  std::size_t steps = 200;
  std::size_t batch = 8;
  double weight_decay = 0.05;
  double clip_norm = 5.0;
  double warmup_frac = 0.1;
  double decay_frac = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double kl_temperature = 1.0;
  /// Stage 3: restrict the KL to rows that predict answer tokens.
  bool kl_answer_only = false;
  /// Add W_O to the trainable set of stages 2 and 3.
  bool include_w_o = false;
  /// Stage 3: also train the attention layers a hybrid plan keeps.
  bool train_preserved_attention = false;
  std::size_t scan_chunk = 0;

  /// Per-stage learning rate and batch (1e-3 / 5e-4 / 5e-5; batch 128, 128, 64 scaled to toy size).
  static StageConfig defaults(int stage);
  /// Throws ConfigError naming the field.
  void validate() const;
};

/// Names (as in Mamba2Weights) of the mixer parameters a stage trains.
std::set<std::string> trainable_set(int stage, bool include_w_o = false);

/// Freezes every parameter, then unfreezes the stage's set in each Mamba-2 layer
/// (and the kept attention layers when cfg.train_preserved_attention at stage 3).
/// Stage 0 unfreezes everything.
template <typename T>
void apply_stage_freezing(DecoderModel<T>& model, const StageConfig& cfg);

/// Sum over Mamba-2 layers i of mean((mixer_i(X^i) - Attn(X^i))^2). `captures` must have
/// one entry per layer.
template <typename T>
Var<T> layerwise_mse(Tape<T>& tp, DecoderModel<T>& student, const std::vector<MixerCapture<T>>& captures,
                     const ForwardOptions& opts = {});

/// KL(softmax(teacher / tau) || softmax(student / tau)) averaged over masked rows.
template <typename T>
Var<T> kl_logits(Tape<T>& tp, const Tensor<T>& teacher_logits, Var<T> student_logits, double temperature = 1.0,
                 std::span<const std::uint8_t> mask = {});

template <typename T>
struct OptimizerState {
  std::vector<Tensor<T>> m, v;
  std::size_t step = 0;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// One decoupled-weight-decay Adam update of every parameter in `params` from its grad.
/// Moment buffers are created on the first call; the parameter list must not change.
template <typename T>
void adamw_step(std::span<Parameter<T>* const> params, OptimizerState<T>& st, double lr, const AdamWConfig& cfg);

/// Linear warmup 0 -> base, constant, linear decay base -> 0.
double wsd_lr(std::size_t step, std::size_t total, double base, double warmup_frac, double decay_frac);

/// Scales the grads by max / norm when the global L2 norm exceeds max. Returns the
/// pre-clip norm.
template <typename T>
double clip_grad_norm(std::span<Parameter<T>* const> params, double max_norm);

struct MetricsRow {
  std::size_t step = 0;
  int stage = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

/// Header "step,stage,loss,lr,grad_norm"; values printed with 17 significant digits.
void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows, bool header = true);

using BatchSource = std::function<std::optional<Batch>()>;

struct StageRunOptions {
  /// When set: metrics.csv and checkpoint/ are written here, diagnostic/ on a NaN abort.
  std::filesystem::path out_dir;
  /// Provenance chain stored with the checkpoint.
  std::vector<std::string> provenance;
};

/// Runs cfg.steps optimizer steps on batches from `next` (stops early if it runs dry).
/// Only parameters left trainable by apply_stage_freezing change. A non-finite loss
/// writes a diagnostic checkpoint (when out_dir is set) and throws NumericError.
/// `teacher` is unused at stage 0.
template <typename T>
std::vector<MetricsRow> run_stage(const StageConfig& cfg, const DecoderModel<T>& teacher, DecoderModel<T>& student,
                                  const BatchSource& next, const StageRunOptions& run = {});

/// Teacher pre-training: run_stage at stage 0 with next-token cross-entropy on answers.
template <typename T>
std::vector<MetricsRow> train_teacher(const StageConfig& cfg, DecoderModel<T>& model, const BatchSource& next,
                                      const StageRunOptions& run = {});

struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double value() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Masked-token accuracy: at every row predicting an answer token, argmax of the
/// logits over answer_candidates(task) must equal the answer.
template <typename T>
Accuracy evaluate_accuracy(const DecoderModel<T>& model, const std::vector<Sample>& samples,
                           const ForwardOptions& opts = {});

/// Mean KL(teacher || student) over all rows (or answer rows) of every sample.
template <typename T>
double evaluate_kl(const DecoderModel<T>& teacher, const DecoderModel<T>& student, const std::vector<Sample>& samples,
                   double temperature = 1.0, bool answer_only = false);

}  // namespace q2l
