// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include "quad2lin/model.hpp"

#include <algorithm>
#include <cmath>

#include "quad2lin/kernels.hpp"
#include "quad2lin/rng.hpp"

namespace q2l {

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError("must be positive", field);
  };
  positive(layers, "layers");
  positive(model_dim, "model_dim");
  positive(heads, "heads");
  positive(groups, "groups");
  positive(head_dim, "head_dim");
  positive(mlp_dim, "mlp_dim");
  positive(vocab, "vocab");
  positive(image_side, "image_side");
  positive(patch, "patch");
  positive(channels, "channels");
  positive(max_pos, "max_pos");
  if (model_dim != heads * head_dim) {
    throw ConfigError("must equal heads * head_dim (" + std::to_string(heads * head_dim) + ")", "model_dim");
  }
  if (heads % groups != 0) throw ConfigError("must divide heads", "groups");
  if (image_side % patch != 0) throw ConfigError("must divide image_side", "patch");
  if (!(init_std > 0.0) || !std::isfinite(init_std)) throw ConfigError("must be positive", "init_std");
}

std::string to_string(LayerKind k) { return k == LayerKind::kAttention ? "attention" : "mamba2"; }

LayerKind parse_layer_kind(const std::string& s) {
  if (s == "attention") return LayerKind::kAttention;
  if (s == "mamba2") return LayerKind::kMamba2;
  throw ConfigError("unknown layer kind '" + s + "'");
}

std::string to_string(HybridStrategy s) {
  switch (s) {
    case HybridStrategy::kTailStacked: return "tail-stacked";
    case HybridStrategy::kHeadStacked: return "head-stacked";
    case HybridStrategy::kTailInterleaved: return "tail-interleaved";
    case HybridStrategy::kHeadInterleaved: return "head-interleaved";
  }
  return "?";
}

HybridStrategy parse_hybrid_strategy(const std::string& s) {
  for (auto v : {HybridStrategy::kTailStacked, HybridStrategy::kHeadStacked, HybridStrategy::kTailInterleaved,
                 HybridStrategy::kHeadInterleaved}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown hybrid strategy '" + s + "'");
}

std::size_t HybridPlan::attention_count() const {
  return static_cast<std::size_t>(std::count(kinds.begin(), kinds.end(), LayerKind::kAttention));
}

std::vector<std::size_t> HybridPlan::attention_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < kinds.size(); ++i)
    if (kinds[i] == LayerKind::kAttention) out.push_back(i);
  return out;
}

std::string HybridPlan::pattern() const {
  std::string s;
  for (auto k : kinds) s += k == LayerKind::kAttention ? 'A' : 'M';
  return s;
}

HybridPlan all_attention_plan(std::size_t layers) {
  return {std::vector<LayerKind>(layers, LayerKind::kAttention), "all-attention"};
}

HybridPlan all_mamba_plan(std::size_t layers) { return {std::vector<LayerKind>(layers, LayerKind::kMamba2), "all-mamba2"}; }

HybridPlan hybrid_plan(std::size_t layers, std::size_t n_attention, HybridStrategy strategy) {
  if (n_attention > layers) {
    throw ConfigError("exceeds layer count " + std::to_string(layers), "n_attention");
  }
  HybridPlan plan{std::vector<LayerKind>(layers, LayerKind::kMamba2), to_string(strategy)};
  if (n_attention == 0) return plan;
  switch (strategy) {
    case HybridStrategy::kTailStacked:
      for (std::size_t i = layers - n_attention; i < layers; ++i) plan.kinds[i] = LayerKind::kAttention;
      break;
    case HybridStrategy::kHeadStacked:
      for (std::size_t i = 0; i < n_attention; ++i) plan.kinds[i] = LayerKind::kAttention;
      break;
    case HybridStrategy::kTailInterleaved:
    case HybridStrategy::kHeadInterleaved: {
      if (layers % n_attention != 0) {
        throw ConfigError("layer count " + std::to_string(layers) + " is not a multiple of " +
                              std::to_string(n_attention),
                          "n_attention");
      }
      const std::size_t interval = layers / n_attention;
      const std::size_t slot = strategy == HybridStrategy::kHeadInterleaved ? 0 : interval - 1;
      for (std::size_t i = 0; i < layers; ++i)
        if (i % interval == slot) plan.kinds[i] = LayerKind::kAttention;
      break;
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// DecoderModel

namespace {

template <typename P, typename B, typename F>
void visit_block(B& b, const std::string& prefix, F&& fn) {
  fn(prefix + "norm1", b.norm1);
  if (b.kind == LayerKind::kAttention) {
    b.attn.for_each_param([&](P& p) { fn(prefix + "attn." + p.name, p); });
  } else {
    b.mamba.for_each_param([&](P& p) { fn(prefix + "mamba." + p.name, p); });
  }
  fn(prefix + "norm2", b.norm2);
  fn(prefix + "mlp.W_in", b.mlp_in);
  fn(prefix + "mlp.b_in", b.mlp_in_bias);
  fn(prefix + "mlp.W_out", b.mlp_out);
  fn(prefix + "mlp.b_out", b.mlp_out_bias);
}

template <typename P, typename M, typename F>
void visit_model(M& m, F&& fn) {
  fn("token_embedding", m.token_embedding);
  fn("patch_embedding", m.patch_embedding);
  fn("pos_embedding", m.pos_embedding);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    visit_block<P>(m.blocks[i], "layers." + std::to_string(i) + ".", fn);
  }
  fn("final_norm", m.final_norm);
  fn("lm_head", m.lm_head);
}

bool same_options(const Mamba2Options& a, const Mamba2Options& b) {
  return a.conv_activation == b.conv_activation && a.output_gate == b.output_gate && a.head_norm == b.head_norm &&
         a.fixed_gamma == b.fixed_gamma && a.qk_scale == b.qk_scale;
}

template <typename T>
void expect(const Parameter<T>& p, const Shape& s, const std::string& name) {
  if (p.value.shape() != s) {
    throw DimensionError("parameter " + name + " has shape " + shape_str(p.value.shape()) + ", expected " +
                         shape_str(s));
  }
}

}  // namespace

template <typename T>
void DecoderModel<T>::for_each_param(const std::function<void(const std::string&, Parameter<T>&)>& fn) {
  visit_model<Parameter<T>>(*this, fn);
}

template <typename T>
void DecoderModel<T>::for_each_param(
    const std::function<void(const std::string&, const Parameter<T>&)>& fn) const {
  visit_model<const Parameter<T>>(*this, fn);
}

template <typename T>
std::size_t DecoderModel<T>::param_count() const {
  std::size_t n = 0;
  for_each_param([&](const std::string&, const Parameter<T>& p) { n += p.value.numel(); });
  return n;
}

template <typename T>
std::size_t DecoderModel<T>::trainable_count() const {
  std::size_t n = 0;
  for_each_param([&](const std::string&, const Parameter<T>& p) {
    if (!p.frozen) n += p.value.numel();
  });
  return n;
}

template <typename T>
void DecoderModel<T>::set_all_frozen(bool frozen) {
  for_each_param([&](const std::string&, Parameter<T>& p) { p.frozen = frozen; });
}

template <typename T>
void DecoderModel<T>::validate() const {
  cfg.validate();
  if (plan.kinds.size() != cfg.layers || blocks.size() != cfg.layers) {
    throw DimensionError("model has " + std::to_string(blocks.size()) + " blocks and a plan of " +
                         std::to_string(plan.kinds.size()) + " for " + std::to_string(cfg.layers) + " layers");
  }
  const std::size_t d = cfg.model_dim;
  expect(token_embedding, {cfg.vocab, d}, "token_embedding");
  expect(patch_embedding, {cfg.patch_dim(), d}, "patch_embedding");
  expect(pos_embedding, {cfg.max_pos, d}, "pos_embedding");
  expect(final_norm, {d}, "final_norm");
  expect(lm_head, {d, cfg.vocab}, "lm_head");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    if (b.kind != plan.kinds[i]) throw DimensionError(pre + "kind disagrees with the plan");
    if (b.kind == LayerKind::kAttention) {
      b.attn.validate();
    } else {
      b.mamba.validate();
    }
    expect(b.norm1, {d}, pre + "norm1");
    expect(b.norm2, {d}, pre + "norm2");
    expect(b.mlp_in, {d, cfg.mlp_dim}, pre + "mlp.W_in");
    expect(b.mlp_in_bias, {cfg.mlp_dim}, pre + "mlp.b_in");
    expect(b.mlp_out, {cfg.mlp_dim, d}, pre + "mlp.W_out");
    expect(b.mlp_out_bias, {d}, pre + "mlp.b_out");
  }
}

template <typename T>
bool DecoderModel<T>::bit_equal(const DecoderModel& other, bool compare_frozen) const {
  if (!(cfg == other.cfg) || plan.kinds != other.plan.kinds || blocks.size() != other.blocks.size()) return false;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto &a = blocks[i], &b = other.blocks[i];
    if (a.kind == LayerKind::kAttention && a.attn.scale_scores != b.attn.scale_scores) return false;
    if (a.kind == LayerKind::kMamba2 &&
        (a.mamba.conv_width != b.mamba.conv_width || !same_options(a.mamba.options, b.mamba.options)))
      return false;
  }
  std::vector<std::pair<std::string, const Parameter<T>*>> mine, theirs;
  for_each_param([&](const std::string& n, const Parameter<T>& p) { mine.emplace_back(n, &p); });
  other.for_each_param([&](const std::string& n, const Parameter<T>& p) { theirs.emplace_back(n, &p); });
  if (mine.size() != theirs.size()) return false;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].first != theirs[i].first || (compare_frozen && mine[i].second->frozen != theirs[i].second->frozen) ||
        !mine[i].second->value.bit_equal(theirs[i].second->value))
      return false;
  }
  return true;
}

template <typename T>
DecoderModel<T> build_teacher(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const double sd = cfg.init_std;
  const std::size_t d = cfg.model_dim;
  DecoderModel<T> m;
  m.cfg = cfg;
  m.plan = all_attention_plan(cfg.layers);
  m.token_embedding = Parameter<T>("token_embedding", Tensor<T>::randn({cfg.vocab, d}, rng, sd));
  m.patch_embedding = Parameter<T>("patch_embedding", Tensor<T>::randn({cfg.patch_dim(), d}, rng, sd));
  m.pos_embedding = Parameter<T>("pos_embedding", Tensor<T>::randn({cfg.max_pos, d}, rng, sd));
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    Block<T> b;
    b.norm1 = Parameter<T>("norm1", Tensor<T>::ones({d}));
    b.attn = AttentionWeights<T>::init(cfg.geometry(), rng, sd);
    b.attn.scale_scores = cfg.scale_scores;
    b.norm2 = Parameter<T>("norm2", Tensor<T>::ones({d}));
    b.mlp_in = Parameter<T>("mlp.W_in", Tensor<T>::randn({d, cfg.mlp_dim}, rng, sd));
    b.mlp_in_bias = Parameter<T>("mlp.b_in", Tensor<T>({cfg.mlp_dim}));
    b.mlp_out = Parameter<T>("mlp.W_out", Tensor<T>::randn({cfg.mlp_dim, d}, rng, sd));
    b.mlp_out_bias = Parameter<T>("mlp.b_out", Tensor<T>({d}));
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = Parameter<T>("final_norm", Tensor<T>::ones({d}));
  m.lm_head = Parameter<T>("lm_head", Tensor<T>::randn({d, cfg.vocab}, rng, sd));
  return m;
}

template <typename T>
DecoderModel<T> convert(const DecoderModel<T>& teacher, const HybridPlan& plan, const SeedConfig& cfg,
                        InitStrategy strategy, std::uint64_t seed) {
  teacher.validate();
  if (teacher.plan.attention_count() != teacher.cfg.layers) throw ContractError("convert: teacher must be all-attention");
  if (plan.kinds.size() != teacher.cfg.layers) {
    throw ConfigError("plan has " + std::to_string(plan.kinds.size()) + " layers, model has " +
                          std::to_string(teacher.cfg.layers),
                      "plan");
  }
  DecoderModel<T> m = teacher;
  m.plan = plan;
  m.set_all_frozen(true);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    if (plan.kinds[i] != LayerKind::kMamba2) continue;
    Rng rng = Rng::derive(seed, i);
    b.kind = LayerKind::kMamba2;
    b.mamba = init_mamba(b.attn, cfg, strategy, rng);
    b.attn = AttentionWeights<T>{};
    b.mamba.for_each_param([](Parameter<T>& p) { p.frozen = true; });
    for (auto* p : {&b.mamba.a, &b.mamba.w_gamma, &b.mamba.conv_kernel, &b.mamba.conv_bias, &b.mamba.w_gate,
                    &b.mamba.gate_bias})
      p->frozen = false;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

template <typename T>
Var<T> embed(Tape<T>& tp, DecoderModel<T>& model, const ModelInput<T>& input, const ForwardOptions& opts) {
  const auto& cfg = model.cfg;
  const std::size_t steps = input.tokens.size();
  if (steps == 0) throw ContractError("forward: empty input");
  if (steps > cfg.max_pos && !opts.allow_beyond_max_pos) {
    throw ContractError("forward: sequence length " + std::to_string(steps) + " exceeds max_pos " +
                        std::to_string(cfg.max_pos));
  }
  std::vector<std::int32_t> text_ids;
  std::vector<std::size_t> text_rows, patch_rows;
  for (std::size_t t = 0; t < steps; ++t) {
    const std::int32_t id = input.tokens[t];
    if (id == kPatchSlot) {
      patch_rows.push_back(t);
    } else {
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab) {
        throw DimensionError("forward: token id " + std::to_string(id) + " outside vocab of " +
                             std::to_string(cfg.vocab));
      }
      text_ids.push_back(id);
      text_rows.push_back(t);
    }
  }
  const std::size_t n_patches = input.patches.empty() ? 0 : input.patches.rows();
  if (n_patches != patch_rows.size()) {
    throw DimensionError("forward: " + std::to_string(patch_rows.size()) + " patch slots but " +
                         std::to_string(n_patches) + " patch rows");
  }
  if (n_patches > 0 && input.patches.cols() != cfg.patch_dim()) {
    throw DimensionError("forward: patch rows have width " + std::to_string(input.patches.cols()) + ", expected " +
                         std::to_string(cfg.patch_dim()));
  }
  Var<T> h;
  if (patch_rows.empty()) {
    h = ops::gather_rows<T>(tp.param(model.token_embedding), text_ids);
  } else {
    Var<T> hp = ops::matmul(tp.constant(input.patches), tp.param(model.patch_embedding));
    if (text_rows.empty()) {
      h = hp;
    } else {
      Var<T> ht = ops::gather_rows<T>(tp.param(model.token_embedding), text_ids);
      h = ops::interleave_rows<T>(ht, text_rows, hp, patch_rows, steps);
    }
  }
  const std::size_t with_pos = std::min(steps, cfg.max_pos);
  Var<T> pos = ops::slice_rows(tp.param(model.pos_embedding), 0, with_pos);
  if (with_pos < steps) {
    const Var<T> parts[] = {pos, tp.constant(Tensor<T>(Shape{steps - with_pos, cfg.model_dim}))};
    pos = ops::concat_rows<T>(parts);
  }
  return ops::add(h, pos);
}

template <typename T>
Var<T> mixer(Tape<T>& tp, Block<T>& b, Var<T> x, const ForwardOptions& opts) {
  if (b.kind == LayerKind::kAttention) return attention_forward(x, b.attn);
  return mamba2_forward(x, b.mamba, ops::ScanOptions{opts.scan_chunk});
}

template <typename T>
Var<T> mlp(Tape<T>& tp, Block<T>& b, Var<T> z) {
  Var<T> u = ops::gelu(ops::add_row(ops::matmul(z, tp.param(b.mlp_in)), tp.param(b.mlp_in_bias)));
  return ops::add_row(ops::matmul(u, tp.param(b.mlp_out)), tp.param(b.mlp_out_bias));
}

}  // namespace

template <typename T>
Var<T> forward(Tape<T>& tp, DecoderModel<T>& model, const ModelInput<T>& input, const ForwardOptions& opts,
               std::vector<MixerCapture<T>>* captures) {
  Var<T> h = embed(tp, model, input, opts);
  if (captures) captures->clear();
  for (auto& b : model.blocks) {
    Var<T> x = ops::rms_norm(h, tp.param(b.norm1));
    Var<T> y = mixer(tp, b, x, opts);
    if (captures) captures->push_back({x.value(), y.value()});
    h = ops::add(h, y);
    h = ops::add(h, mlp(tp, b, ops::rms_norm(h, tp.param(b.norm2))));
  }
  return ops::matmul(ops::rms_norm(h, tp.param(model.final_norm)), tp.param(model.lm_head));
}

template <typename T>
Tensor<T> logits(const DecoderModel<T>& model, const ModelInput<T>& input, const ForwardOptions& opts) {
  // A grad-disabled tape never writes into parameters, so reading through a const
  // model is safe.
  Tape<T> tp(false);
  return forward(tp, const_cast<DecoderModel<T>&>(model), input, opts).value();
}

template <typename T>
std::vector<MixerCapture<T>> capture_layer_io(const DecoderModel<T>& teacher, const ModelInput<T>& input) {
  if (teacher.plan.attention_count() != teacher.cfg.layers) {
    throw ContractError("capture_layer_io: teacher must be all-attention");
  }
  std::vector<MixerCapture<T>> caps;
  Tape<T> tp(false);
  forward(tp, const_cast<DecoderModel<T>&>(teacher), input, {}, &caps);
  return caps;
}

template <typename T>
Var<T> mixer_forward(Tape<T>& tp, DecoderModel<T>& model, std::size_t layer, const Tensor<T>& x,
                     const ForwardOptions& opts) {
  if (layer >= model.blocks.size()) throw ContractError("mixer_forward: layer index out of range");
  return mixer(tp, model.blocks[layer], tp.constant(x), opts);
}

// ---------------------------------------------------------------------------
// Decoding

namespace {

template <typename T>
void rms_norm_row(const T* x, const T* w, T* out, std::size_t n) {
  const T ms = kernels::dot(x, x, n) / static_cast<T>(n);
  const T r = T(1) / std::sqrt(ms + static_cast<T>(1e-6));
  for (std::size_t j = 0; j < n; ++j) out[j] = x[j] * r * w[j];
}

template <typename T>
T gelu_scalar(T x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
}

}  // namespace

template <typename T>
DecodeSession<T>::DecodeSession(const DecoderModel<T>& model, ForwardOptions opts)
    : model_(&model), opts_(opts), caches_(model.blocks.size()), states_(model.blocks.size()) {
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const auto& b = model.blocks[i];
    if (b.kind == LayerKind::kAttention) {
      caches_[i] = KVCache<T>(b.attn.geo.kv_width());
    } else {
      states_[i] = SSMState<T>(b.mamba);
    }
  }
}

template <typename T>
Tensor<T> DecodeSession<T>::step_token(std::int32_t token) {
  const auto& m = *model_;
  if (token < 0 || static_cast<std::size_t>(token) >= m.cfg.vocab) {
    throw DimensionError("decode: token id " + std::to_string(token) + " outside vocab");
  }
  const auto row = m.token_embedding.value.row(static_cast<std::size_t>(token));
  return step_embedded(std::vector<T>(row.begin(), row.end()));
}

template <typename T>
Tensor<T> DecodeSession<T>::step_patch(std::span<const T> patch) {
  const auto& m = *model_;
  if (patch.size() != m.cfg.patch_dim()) throw DimensionError("decode: patch width mismatch");
  std::vector<T> h(m.cfg.model_dim);
  kernels::gemv_row(patch.data(), m.patch_embedding.value.data(), h.data(), patch.size(), m.cfg.model_dim);
  return step_embedded(std::move(h));
}

template <typename T>
Tensor<T> DecodeSession<T>::step_embedded(std::vector<T> h) {
  const auto& m = *model_;
  const std::size_t d = m.cfg.model_dim, dm = m.cfg.mlp_dim;
  if (pos_ < m.cfg.max_pos) {
    const auto p = m.pos_embedding.value.row(pos_);
    for (std::size_t j = 0; j < d; ++j) h[j] += p[j];
  } else if (!opts_.allow_beyond_max_pos) {
    throw ContractError("decode: position " + std::to_string(pos_) + " exceeds max_pos " +
                        std::to_string(m.cfg.max_pos));
  }
  std::vector<T> x(d), u(dm), z(d);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const auto& b = m.blocks[i];
    rms_norm_row(h.data(), b.norm1.value.data(), x.data(), d);
    const Tensor<T> y = b.kind == LayerKind::kAttention ? attention_decode_step<T>(x, b.attn, caches_[i])
                                                        : mamba2_decode_step<T>(x, b.mamba, states_[i]);
    for (std::size_t j = 0; j < d; ++j) h[j] += y[j];
    rms_norm_row(h.data(), b.norm2.value.data(), x.data(), d);
    std::copy(b.mlp_in_bias.value.data(), b.mlp_in_bias.value.data() + dm, u.begin());
    kernels::gemv_row(x.data(), b.mlp_in.value.data(), u.data(), d, dm, true);
    for (auto& v : u) v = gelu_scalar(v);
    std::copy(b.mlp_out_bias.value.data(), b.mlp_out_bias.value.data() + d, z.begin());
    kernels::gemv_row(u.data(), b.mlp_out.value.data(), z.data(), dm, d, true);
    for (std::size_t j = 0; j < d; ++j) h[j] += z[j];
  }
  rms_norm_row(h.data(), m.final_norm.value.data(), x.data(), d);
  Tensor<T> out(Shape{m.cfg.vocab});
  kernels::gemv_row(x.data(), m.lm_head.value.data(), out.data(), d, m.cfg.vocab);
  ++pos_;
  return out;
}

template <typename T>
Tensor<T> DecodeSession<T>::prefill(const ModelInput<T>& input) {
  if (input.tokens.empty()) throw ContractError("prefill: empty input");
  Tensor<T> last;
  std::size_t next_patch = 0;
  for (auto id : input.tokens) {
    if (id == kPatchSlot) {
      if (input.patches.empty() || next_patch >= input.patches.rows())
        throw DimensionError("prefill: more patch slots than patch rows");
      last = step_patch(input.patches.row(next_patch++));
    } else {
      last = step_token(id);
    }
  }
  return last;
}

template <typename T>
std::size_t DecodeSession<T>::kv_bytes() const {
  std::size_t n = 0;
  for (const auto& c : caches_) n += c.bytes();
  return n;
}

template <typename T>
std::size_t DecodeSession<T>::state_bytes() const {
  std::size_t n = 0;
  for (const auto& s : states_) n += s.bytes();
  return n;
}

template <typename T>
std::vector<std::int32_t> generate_greedy(const DecoderModel<T>& model, const ModelInput<T>& input,
                                          std::size_t max_new, std::int32_t stop) {
  DecodeSession<T> session(model);
  Tensor<T> row = session.prefill(input);
  std::vector<std::int32_t> out;
  while (out.size() < max_new) {
    const auto* best = std::max_element(row.data(), row.data() + row.numel());
    const auto tok = static_cast<std::int32_t>(best - row.data());
    out.push_back(tok);
    if (tok == stop || out.size() == max_new || session.position() >= model.cfg.max_pos) break;
    row = session.step_token(tok);
  }
  return out;
}

#define Q2L_INSTANTIATE_MODEL(T)                                                                               \
  template class DecoderModel<T>;                                                                              \
  template class DecodeSession<T>;                                                                             \
  template DecoderModel<T> build_teacher(const ModelConfig&, std::uint64_t);                                   \
  template DecoderModel<T> convert(const DecoderModel<T>&, const HybridPlan&, const SeedConfig&, InitStrategy, \
                                   std::uint64_t);                                                             \
  template Var<T> forward(Tape<T>&, DecoderModel<T>&, const ModelInput<T>&, const ForwardOptions&,             \
                          std::vector<MixerCapture<T>>*);                                                      \
  template Tensor<T> logits(const DecoderModel<T>&, const ModelInput<T>&, const ForwardOptions&);              \
  template std::vector<MixerCapture<T>> capture_layer_io(const DecoderModel<T>&, const ModelInput<T>&);        \
  template Var<T> mixer_forward(Tape<T>&, DecoderModel<T>&, std::size_t, const Tensor<T>&,                     \
                                const ForwardOptions&);                                                        \
  template std::vector<std::int32_t> generate_greedy(const DecoderModel<T>&, const ModelInput<T>&, std::size_t, \
                                                     std::int32_t);

Q2L_INSTANTIATE_MODEL(float)
Q2L_INSTANTIATE_MODEL(double)

}  // namespace q2l
