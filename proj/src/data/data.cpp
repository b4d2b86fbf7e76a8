// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include "quad2lin/data.hpp"

#include <algorithm>
#include <numeric>
#include <ostream>

#include "json.hpp"
#include "quad2lin/errors.hpp"
#include "quad2lin/rng.hpp"

namespace q2l {

namespace vocab {

std::string token_name(std::int32_t id) {
  static const char* kControl[] = {"<pad>", "<bos>", "<eos>", "<img>", "</img>", "<sep>", "empty"};
  static const char* kColors[] = {"red", "green", "blue", "yellow", "cyan", "magenta"};
  if (id == kPatchSlot) return "<patch>";
  if (id >= 0 && id < kColor0) return kControl[id];
  if (id >= kColor0 && id < kDigit0) return kColors[id - kColor0];
  if (id >= kDigit0 && id < kKey0) return std::to_string(id - kDigit0);
  if (id >= kKey0 && id < kValue0) return "k" + std::to_string(id - kKey0);
  if (id >= kValue0 && id < kSize) return "v" + std::to_string(id - kValue0);
  throw ContractError("token_name: id " + std::to_string(id) + " outside the vocabulary");
}

std::array<double, 3> color_rgb(std::int32_t c) {
  static constexpr std::array<std::array<double, 3>, kNumColors> kRgb = {{
      {1.0, 0.0, 0.0},
      {0.0, 1.0, 0.0},
      {0.0, 0.0, 1.0},
      {1.0, 1.0, 0.0},
      {0.0, 1.0, 1.0},
      {1.0, 0.0, 1.0},
  }};
  if (c < 0 || c >= kNumColors) throw ContractError("color_rgb: index out of range");
  return kRgb[static_cast<std::size_t>(c)];
}

}  // namespace vocab

std::string to_string(TaskKind k) { return k == TaskKind::kCaption ? "caption" : "recall"; }

TaskKind parse_task_kind(const std::string& s) {
  if (s == "caption") return TaskKind::kCaption;
  if (s == "recall") return TaskKind::kRecall;
  throw ConfigError("unknown task '" + s + "' (expected caption or recall)", "task");
}

void TaskConfig::validate() const {
  if (image_side == 0 || image_side > static_cast<std::size_t>(vocab::kNumDigits))
    throw ConfigError("must be in [1, 10] so coordinates fit the digit tokens", "image_side");
  if (patch == 0 || image_side % patch != 0) throw ConfigError("must divide image_side", "patch");
  if (channels != 3) throw ConfigError("colors are RGB, channels must be 3", "channels");
  if (max_cells > image_side * image_side) throw ConfigError("exceeds the number of grid cells", "max_cells");
  if (n_pairs == 0 || n_pairs > static_cast<std::size_t>(vocab::kNumKeys))
    throw ConfigError("must be in [1, 8]", "n_pairs");
  if (max_pos == 0) throw ConfigError("must be positive", "max_pos");
}

std::vector<std::int32_t> Sample::targets() const {
  std::vector<std::int32_t> out(tokens.size(), -1);
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t)
    if (loss_mask[t + 1]) out[t] = tokens[t + 1];
  return out;
}

std::vector<std::uint8_t> Sample::prediction_mask() const {
  std::vector<std::uint8_t> out(tokens.size(), 0);
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) out[t] = loss_mask[t + 1];
  return out;
}

std::size_t Sample::answer_count() const {
  return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), std::uint8_t{1}));
}

namespace {

constexpr int kMaxRedraws = 16;

void push(Sample& s, std::int32_t tok, bool answer) {
  s.tokens.push_back(tok);
  s.loss_mask.push_back(answer ? 1 : 0);
}

Sample draw_caption(Rng& rng, const TaskConfig& cfg) {
  const std::size_t side = cfg.image_side, cells = side * side;
  Sample s;
  s.task = TaskKind::kCaption;
  s.image = Tensor<double>(Shape{side, side, cfg.channels});

  const std::size_t n = rng.below(cfg.max_cells + 1);
  // Partial Fisher-Yates gives n distinct cells.
  std::vector<std::size_t> order(cells);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < n; ++i) std::swap(order[i], order[i + rng.below(cells - i)]);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n));
  std::sort(chosen.begin(), chosen.end());

  std::vector<std::int32_t> colors(n);
  for (std::size_t i = 0; i < n; ++i) {
    colors[i] = static_cast<std::int32_t>(rng.below(vocab::kNumColors));
    const auto rgb = vocab::color_rgb(colors[i]);
    for (std::size_t c = 0; c < cfg.channels; ++c) s.image[chosen[i] * cfg.channels + c] = rgb[c];
  }

  push(s, vocab::kBos, false);
  push(s, vocab::kImgStart, false);
  const std::size_t patches = (side / cfg.patch) * (side / cfg.patch);
  for (std::size_t p = 0; p < patches; ++p) push(s, kPatchSlot, false);
  push(s, vocab::kImgEnd, false);
  if (n == 0) push(s, vocab::kEmpty, true);
  for (std::size_t i = 0; i < n; ++i) {
    push(s, vocab::kColor0 + colors[i], true);
    push(s, vocab::kDigit0 + static_cast<std::int32_t>(chosen[i] / side), true);
    push(s, vocab::kDigit0 + static_cast<std::int32_t>(chosen[i] % side), true);
  }
  push(s, vocab::kEos, false);
  return s;
}

Sample draw_recall(Rng& rng, const TaskConfig& cfg) {
  Sample s;
  s.task = TaskKind::kRecall;
  std::vector<std::int32_t> keys(vocab::kNumKeys);
  std::iota(keys.begin(), keys.end(), 0);
  for (std::size_t i = 0; i < cfg.n_pairs; ++i) std::swap(keys[i], keys[i + rng.below(keys.size() - i)]);
  std::vector<std::int32_t> values(cfg.n_pairs);
  push(s, vocab::kBos, false);
  for (std::size_t i = 0; i < cfg.n_pairs; ++i) {
    values[i] = static_cast<std::int32_t>(rng.below(vocab::kNumValues));
    push(s, vocab::kKey0 + keys[i], false);
    push(s, vocab::kValue0 + values[i], false);
  }
  const std::size_t q = rng.below(cfg.n_pairs);
  push(s, vocab::kSep, false);
  push(s, vocab::kKey0 + keys[q], false);
  push(s, vocab::kValue0 + values[q], true);
  push(s, vocab::kEos, false);
  return s;
}

template <typename Draw>
Sample draw_bounded(std::uint64_t seed, const TaskConfig& cfg, Draw draw) {
  cfg.validate();
  Rng rng(seed);
  for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
    Sample s = draw(rng, cfg);
    if (s.tokens.size() <= cfg.max_pos) return s;
  }
  throw ConfigError("generated sequences do not fit after " + std::to_string(kMaxRedraws) + " draws", "max_pos");
}

}  // namespace

Sample gen_caption_task(std::uint64_t seed, const TaskConfig& cfg) { return draw_bounded(seed, cfg, draw_caption); }

Sample gen_recall_task(std::uint64_t seed, const TaskConfig& cfg) { return draw_bounded(seed, cfg, draw_recall); }

Sample gen_task(TaskKind kind, std::uint64_t seed, const TaskConfig& cfg) {
  return kind == TaskKind::kCaption ? gen_caption_task(seed, cfg) : gen_recall_task(seed, cfg);
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
  if (image.rank() != 3 || image.dim(0) != image.dim(1))
    throw DimensionError("patchify: expected a square [side x side x channels] image");
  const std::size_t side = image.dim(0), ch = image.dim(2);
  if (patch == 0 || side % patch != 0) throw ConfigError("must divide image_side", "patch");
  const std::size_t per_row = side / patch, width = patch * patch * ch;
  Tensor<T> out(Shape{per_row * per_row, width});
  for (std::size_t pr = 0; pr < per_row; ++pr)
    for (std::size_t pc = 0; pc < per_row; ++pc) {
      T* dst = out.data() + (pr * per_row + pc) * width;
      for (std::size_t r = 0; r < patch; ++r) {
        const T* src = image.data() + ((pr * patch + r) * side + pc * patch) * ch;
        std::copy(src, src + patch * ch, dst + r * patch * ch);
      }
    }
  return out;
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, std::size_t side, std::size_t patch, std::size_t channels) {
  if (patch == 0 || side % patch != 0) throw ConfigError("must divide image_side", "patch");
  const std::size_t per_row = side / patch, width = patch * patch * channels;
  if (patches.rank() != 2 || patches.rows() != per_row * per_row || patches.cols() != width)
    throw DimensionError("unpatchify: patch matrix does not match the image geometry");
  Tensor<T> out(Shape{side, side, channels});
  for (std::size_t pr = 0; pr < per_row; ++pr)
    for (std::size_t pc = 0; pc < per_row; ++pc) {
      const T* src = patches.data() + (pr * per_row + pc) * width;
      for (std::size_t r = 0; r < patch; ++r)
        std::copy(src + r * patch * channels, src + (r + 1) * patch * channels,
                  out.data() + ((pr * patch + r) * side + pc * patch) * channels);
    }
  return out;
}

template <typename T>
ModelInput<T> to_model_input(const Sample& s, std::size_t patch) {
  ModelInput<T> in;
  in.tokens = s.tokens;
  if (!s.image.empty()) in.patches = patchify(s.image.cast<T>(), patch);
  return in;
}

std::vector<std::int32_t> answer_candidates(TaskKind kind) {
  std::vector<std::int32_t> out;
  if (kind == TaskKind::kRecall) {
    for (std::int32_t v = 0; v < vocab::kNumValues; ++v) out.push_back(vocab::kValue0 + v);
  } else {
    out.push_back(vocab::kEmpty);
    out.push_back(vocab::kEos);
    for (std::int32_t id = vocab::kColor0; id < vocab::kKey0; ++id) out.push_back(id);
  }
  return out;
}

BatchStream::BatchStream(TaskMix mix, TaskConfig cfg, std::uint64_t seed, std::size_t batch, std::size_t steps)
    : mix_(mix), cfg_(cfg), seed_(seed), batch_(batch), steps_(steps) {
  cfg_.validate();
  if (mix_.caption < 0 || mix_.recall < 0 || mix_.caption + mix_.recall <= 0)
    throw ConfigError("task weights must be non-negative with a positive sum", "mix");
  if (batch_ == 0) throw ConfigError("must be positive", "batch");
}

std::optional<Batch> BatchStream::next() {
  if (produced_ >= steps_) return std::nullopt;
  Batch b;
  const double p_caption = mix_.caption / (mix_.caption + mix_.recall);
  std::size_t longest = 0;
  for (std::size_t j = 0; j < batch_; ++j) {
    Rng rng = Rng::derive(seed_, produced_ * batch_ + j);
    const TaskKind kind = rng.uniform() < p_caption ? TaskKind::kCaption : TaskKind::kRecall;
    b.samples.push_back(gen_task(kind, rng.next_u64(), cfg_));
    longest = std::max(longest, b.samples.back().tokens.size());
  }
  for (const auto& s : b.samples) {
    auto toks = s.tokens;
    auto mask = s.loss_mask;
    toks.resize(longest, vocab::kPad);
    mask.resize(longest, 0);
    b.padded_tokens.push_back(std::move(toks));
    b.padded_masks.push_back(std::move(mask));
  }
  ++produced_;
  return b;
}

std::vector<Sample> make_eval_set(TaskKind kind, std::uint64_t seed, std::size_t n, const TaskConfig& cfg) {
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen_task(kind, Rng::derive(seed, i).next_u64(), cfg));
  return out;
}

void dump_jsonl(std::ostream& os, const std::vector<Sample>& samples) {
  for (const auto& s : samples) {
    nlohmann::json j;
    j["task"] = to_string(s.task);
    j["tokens"] = s.tokens;
    std::vector<bool> mask(s.loss_mask.begin(), s.loss_mask.end());
    j["mask"] = mask;
    if (!s.image.empty()) {
      j["image_shape"] = s.image.shape();
      j["image"] = s.image.storage();
    }
    os << j.dump() << '\n';
  }
}

#define Q2L_INSTANTIATE(T)                                                                                 \
  template Tensor<T> patchify(const Tensor<T>&, std::size_t);                                              \
  template Tensor<T> unpatchify(const Tensor<T>&, std::size_t, std::size_t, std::size_t);                  \
  template ModelInput<T> to_model_input(const Sample&, std::size_t);

Q2L_INSTANTIATE(float)
Q2L_INSTANTIATE(double)

#undef Q2L_INSTANTIATE

}  // namespace q2l
