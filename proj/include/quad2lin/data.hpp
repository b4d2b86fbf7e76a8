// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

// Synthetic multimodal tasks: grid captioning (image patches -> "color row col" list)
// and key/value associative recall.

#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "quad2lin/model.hpp"

namespace q2l {

/// Fixed token list. Ids are stable across runs.
namespace vocab {
inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kBos = 1;
inline constexpr std::int32_t kEos = 2;
inline constexpr std::int32_t kImgStart = 3;
inline constexpr std::int32_t kImgEnd = 4;
inline constexpr std::int32_t kSep = 5;
inline constexpr std::int32_t kEmpty = 6;
inline constexpr std::int32_t kColor0 = 7;
inline constexpr std::int32_t kNumColors = 6;
inline constexpr std::int32_t kDigit0 = kColor0 + kNumColors;
inline constexpr std::int32_t kNumDigits = 10;
inline constexpr std::int32_t kKey0 = kDigit0 + kNumDigits;
inline constexpr std::int32_t kNumKeys = 8;
inline constexpr std::int32_t kValue0 = kKey0 + kNumKeys;
inline constexpr std::int32_t kNumValues = 8;
inline constexpr std::int32_t kSize = kValue0 + kNumValues;

std::string token_name(std::int32_t id);
/// RGB triple of color index c in [0, kNumColors).
std::array<double, 3> color_rgb(std::int32_t c);
}  // namespace vocab

enum class TaskKind { kCaption, kRecall };

std::string to_string(TaskKind k);
TaskKind parse_task_kind(const std::string& s);

struct TaskConfig {
  std::size_t image_side = 4;
  std::size_t patch = 2;
  std::size_t channels = 3;
  std::size_t max_cells = 4;  // caption: colored cells drawn from 0..max_cells
  std::size_t n_pairs = 4;    // recall: key/value pairs per sequence
  std::size_t max_pos = 64;

  /// Throws ConfigError naming the field.
  void validate() const;
};

/// One sequence. Patch positions hold kPatchSlot; `image` is [side x side x channels]
/// and empty for text-only samples. loss_mask[t] marks tokens that are answers.
struct Sample {
  TaskKind task = TaskKind::kRecall;
  Tensor<double> image;
  std::vector<std::int32_t> tokens;
  std::vector<std::uint8_t> loss_mask;

  /// Next-token targets: targets[t] = tokens[t+1] where that token is an answer, else -1.
  std::vector<std::int32_t> targets() const;
  /// Row t of the logits predicts an answer token.
  std::vector<std::uint8_t> prediction_mask() const;
  std::size_t answer_count() const;
};

Sample gen_caption_task(std::uint64_t seed, const TaskConfig& cfg);
Sample gen_recall_task(std::uint64_t seed, const TaskConfig& cfg);
Sample gen_task(TaskKind kind, std::uint64_t seed, const TaskConfig& cfg);

/// [n_patches x patch*patch*channels], raster order of patches, each flattened row-major.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch);
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, std::size_t side, std::size_t patch, std::size_t channels);

template <typename T>
ModelInput<T> to_model_input(const Sample& s, std::size_t patch);

/// Token ids an answer at this task may take; argmax for accuracy is taken over these.
std::vector<std::int32_t> answer_candidates(TaskKind kind);

struct TaskMix {
  double caption = 0.0;
  double recall = 1.0;
};

struct Batch {
  std::vector<Sample> samples;
  /// Right-padded with kPad to the longest sample.
  std::vector<std::vector<std::int32_t>> padded_tokens;
  std::vector<std::vector<std::uint8_t>> padded_masks;
};

/// Deterministic stream of `steps` batches. Sample j of batch i depends only on
/// (seed, i, j).
class BatchStream {
 public:
  BatchStream(TaskMix mix, TaskConfig cfg, std::uint64_t seed, std::size_t batch, std::size_t steps);
  /// Returns nullopt after `steps` batches.
  std::optional<Batch> next();
  std::size_t produced() const { return produced_; }

 private:
  TaskMix mix_;
  TaskConfig cfg_;
  std::uint64_t seed_;
  std::size_t batch_, steps_, produced_ = 0;
};

/// Fixed evaluation set: n samples of one task drawn from a seed stream.
std::vector<Sample> make_eval_set(TaskKind kind, std::uint64_t seed, std::size_t n, const TaskConfig& cfg);

/// One JSON object per line: task, tokens, mask, image (flattened).
void dump_jsonl(std::ostream& os, const std::vector<Sample>& samples);

}  // namespace q2l
