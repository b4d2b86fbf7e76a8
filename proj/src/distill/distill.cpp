// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include "quad2lin/distill.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>

#include "quad2lin/checkpoint.hpp"
#include "quad2lin/errors.hpp"
#include "quad2lin/ops.hpp"

namespace q2l {

StageConfig StageConfig::defaults(int stage) {
  StageConfig c;
  c.stage = stage;
  switch (stage) {
    case 0: c.lr = 3e-3; c.batch = 16; break;
    case 1: c.lr = 1e-3; c.batch = 16; break;
    case 2: c.lr = 5e-4; c.batch = 16; break;
    case 3: c.lr = 5e-5; c.batch = 8; break;
    default: throw ConfigError("stage must be 0, 1, 2 or 3", "stage");
  }
  return c;
}

void StageConfig::validate() const {
  if (stage < 0 || stage > 3) throw ConfigError("must be 0, 1, 2 or 3", "stage");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("must be a finite non-negative number", "lr");
  if (batch == 0) throw ConfigError("must be positive", "batch");
  if (!(weight_decay >= 0.0)) throw ConfigError("must be non-negative", "weight_decay");
  if (!(clip_norm > 0.0)) throw ConfigError("must be positive", "clip_norm");
  if (!(warmup_frac >= 0.0) || warmup_frac > 1.0) throw ConfigError("must be in [0, 1]", "warmup_frac");
  if (!(decay_frac >= 0.0) || decay_frac > 1.0) throw ConfigError("must be in [0, 1]", "decay_frac");
  if (warmup_frac + decay_frac > 1.0) throw ConfigError("warmup_frac + decay_frac must not exceed 1", "decay_frac");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("must be in [0, 1)", "beta1");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("must be in [0, 1)", "beta2");
  if (!(eps > 0.0)) throw ConfigError("must be positive", "eps");
  if (!(kl_temperature > 0.0)) throw ConfigError("must be positive", "kl_temperature");
}

std::set<std::string> trainable_set(int stage, bool include_w_o) {
  namespace pn = param_names;
  if (stage < 1 || stage > 3) throw ConfigError("trainable sets exist for stages 1 to 3", "stage");
  std::set<std::string> s{pn::kA, pn::kWGamma, pn::kConvKernel, pn::kConvBias, pn::kWGate, pn::kGateBias};
  if (stage >= 2) {
    s.insert({pn::kWQ, pn::kWK, pn::kWV});
    if (include_w_o) s.insert(pn::kWO);
  }
  return s;
}

template <typename T>
void apply_stage_freezing(DecoderModel<T>& model, const StageConfig& cfg) {
  if (cfg.stage == 0) {
    model.set_all_frozen(false);
    return;
  }
  model.set_all_frozen(true);
  const auto names = trainable_set(cfg.stage, cfg.include_w_o);
  for (auto& b : model.blocks) {
    if (b.kind == LayerKind::kMamba2) {
      b.mamba.for_each_param([&](Parameter<T>& p) { p.frozen = !names.count(p.name); });
    } else if (cfg.stage == 3 && cfg.train_preserved_attention) {
      b.attn.for_each_param([](Parameter<T>& p) { p.frozen = false; });
    }
  }
}

template <typename T>
Var<T> layerwise_mse(Tape<T>& tp, DecoderModel<T>& student, const std::vector<MixerCapture<T>>& captures,
                     const ForwardOptions& opts) {
  if (captures.size() != student.blocks.size())
    throw ContractError("layerwise_mse: " + std::to_string(captures.size()) + " captures for " +
                        std::to_string(student.blocks.size()) + " layers");
  std::optional<Var<T>> total;
  for (std::size_t i = 0; i < student.blocks.size(); ++i) {
    if (student.blocks[i].kind != LayerKind::kMamba2) continue;
    auto y = mixer_forward(tp, student, i, captures[i].input, opts);
    auto l = ops::mse(y, tp.constant(captures[i].output));
    total = total ? ops::add(*total, l) : l;
  }
  return total ? *total : tp.constant(Tensor<T>::scalar(T(0)));
}

template <typename T>
Var<T> kl_logits(Tape<T>& tp, const Tensor<T>& teacher_logits, Var<T> student_logits, double temperature,
                 std::span<const std::uint8_t> mask) {
  return ops::kl_div_logits(tp.constant(teacher_logits), student_logits, temperature, mask);
}

template <typename T>
void adamw_step(std::span<Parameter<T>* const> params, OptimizerState<T>& st, double lr, const AdamWConfig& cfg) {
  if (st.m.empty()) {
    for (auto* p : params) {
      st.m.emplace_back(p->value.shape());
      st.v.emplace_back(p->value.shape());
    }
  }
  if (st.m.size() != params.size()) throw ContractError("adamw_step: parameter list changed between steps");
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T shrink = static_cast<T>(1.0 - lr * cfg.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (p.value.shape() != st.m[i].shape()) throw DimensionError("adamw_step: moment shape mismatch for " + p.name);
    if (p.grad.shape() != p.value.shape()) p.zero_grad();
    T* w = p.value.data();
    const T* g = p.grad.data();
    T* m = st.m[i].data();
    T* v = st.v[i].data();
    for (std::size_t j = 0; j < p.value.numel(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const double mhat = static_cast<double>(m[j]) / c1;
      const double vhat = static_cast<double>(v[j]) / c2;
      w[j] = shrink * w[j] - static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

double wsd_lr(std::size_t step, std::size_t total, double base, double warmup_frac, double decay_frac) {
  if (step >= total) throw ContractError("wsd_lr: step " + std::to_string(step) + " outside [0, " +
                                         std::to_string(total) + ")");
  const double s = static_cast<double>(step), n = static_cast<double>(total);
  const double warm = warmup_frac * n, decay = decay_frac * n;
  if (s < warm) return base * s / warm;
  if (s >= n - decay) return base * (n - s) / decay;
  return base;
}

template <typename T>
double clip_grad_norm(std::span<Parameter<T>* const> params, double max_norm) {
  double sq = 0.0;
  for (auto* p : params)
    for (T g : p->grad.storage()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto* p : params) p->grad *= s;
  }
  return norm;
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows, bool header) {
  if (header) os << "step,stage,loss,lr,grad_norm\n";
  const auto old = os.precision(17);
  for (const auto& r : rows) os << r.step << ',' << r.stage << ',' << r.loss << ',' << r.lr << ',' << r.grad_norm << '\n';
  os.precision(old);
}

namespace {

template <typename T>
void check_pair(const DecoderModel<T>& teacher, const DecoderModel<T>& student) {
  if (teacher.plan.attention_count() != teacher.cfg.layers)
    throw ContractError("run_stage: the teacher must be all-attention");
  if (!(teacher.cfg == student.cfg)) throw ContractError("run_stage: teacher and student configs differ");
}

template <typename T>
Var<T> sample_loss(Tape<T>& tp, const StageConfig& cfg, const DecoderModel<T>& teacher, DecoderModel<T>& student,
                   const Sample& s, const ForwardOptions& fopts) {
  const auto input = to_model_input<T>(s, student.cfg.patch);
  if (cfg.stage == 0) {
    const auto targets = s.targets();
    return ops::cross_entropy(forward(tp, student, input, fopts), std::span<const std::int32_t>(targets));
  }
  if (cfg.stage <= 2) return layerwise_mse(tp, student, capture_layer_io(teacher, input), fopts);
  const auto tl = logits(teacher, input);
  const auto sl = forward(tp, student, input, fopts);
  if (cfg.kl_answer_only) {
    const auto mask = s.prediction_mask();
    return kl_logits(tp, tl, sl, cfg.kl_temperature, std::span<const std::uint8_t>(mask));
  }
  return kl_logits(tp, tl, sl, cfg.kl_temperature);
}

std::string stage_label(int stage) { return stage == 0 ? "teacher" : "stage" + std::to_string(stage); }

}  // namespace

template <typename T>
std::vector<MetricsRow> run_stage(const StageConfig& cfg, const DecoderModel<T>& teacher, DecoderModel<T>& student,
                                  const BatchSource& next, const StageRunOptions& run) {
  cfg.validate();
  if (cfg.stage > 0) check_pair(teacher, student);
  apply_stage_freezing(student, cfg);

  std::vector<Parameter<T>*> params;
  student.for_each_param([&](const std::string&, Parameter<T>& p) {
    if (!p.frozen) params.push_back(&p);
  });
  OptimizerState<T> st;
  const AdamWConfig acfg{cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
  const ForwardOptions fopts{.scan_chunk = cfg.scan_chunk};
  auto provenance = run.provenance;
  provenance.push_back(stage_label(cfg.stage));

  std::vector<MetricsRow> rows;
  auto write_outputs = [&](const std::filesystem::path& ckpt, const std::vector<std::string>& prov) {
    if (run.out_dir.empty()) return;
    std::filesystem::create_directories(run.out_dir);
    std::ofstream csv(run.out_dir / "metrics.csv");
    write_metrics_csv(csv, rows);
    save_checkpoint(student, ckpt, prov);
  };

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto batch = next();
    if (!batch) break;
    if (batch->samples.empty()) throw ContractError("run_stage: empty batch");
    for (auto* p : params) p->zero_grad();
    const double inv_b = 1.0 / static_cast<double>(batch->samples.size());
    double loss = 0.0;
    for (const auto& s : batch->samples) {
      Tape<T> tp;
      auto l = sample_loss(tp, cfg, teacher, student, s, fopts);
      loss += static_cast<double>(l.value()[0]) * inv_b;
      if (l.requires_grad()) tp.backward(ops::scale(l, inv_b));
    }
    if (!std::isfinite(loss)) {
      auto prov = provenance;
      prov.push_back("nan-at-step-" + std::to_string(step));
      write_outputs(run.out_dir / "diagnostic", prov);
      throw NumericError(stage_label(cfg.stage) + ": non-finite loss at step " + std::to_string(step));
    }
    const double norm = clip_grad_norm(std::span<Parameter<T>* const>(params), cfg.clip_norm);
    const double lr = wsd_lr(step, cfg.steps, cfg.lr, cfg.warmup_frac, cfg.decay_frac);
    if (!params.empty()) adamw_step(std::span<Parameter<T>* const>(params), st, lr, acfg);
    rows.push_back({step, cfg.stage, loss, lr, norm});
  }
  write_outputs(run.out_dir / "checkpoint", provenance);
  return rows;
}

template <typename T>
std::vector<MetricsRow> train_teacher(const StageConfig& cfg, DecoderModel<T>& model, const BatchSource& next,
                                      const StageRunOptions& run) {
  auto c = cfg;
  c.stage = 0;
  return run_stage(c, model, model, next, run);
}

template <typename T>
Accuracy evaluate_accuracy(const DecoderModel<T>& model, const std::vector<Sample>& samples,
                           const ForwardOptions& opts) {
  Accuracy acc;
  for (const auto& s : samples) {
    const auto lg = logits(model, to_model_input<T>(s, model.cfg.patch), opts);
    const auto targets = s.targets();
    const auto cand = answer_candidates(s.task);
    for (std::size_t t = 0; t < targets.size(); ++t) {
      if (targets[t] < 0) continue;
      std::int32_t best = cand[0];
      for (auto c : cand)
        if (lg.at(t, static_cast<std::size_t>(c)) > lg.at(t, static_cast<std::size_t>(best))) best = c;
      acc.correct += best == targets[t];
      ++acc.total;
    }
  }
  return acc;
}

template <typename T>
double evaluate_kl(const DecoderModel<T>& teacher, const DecoderModel<T>& student, const std::vector<Sample>& samples,
                   double temperature, bool answer_only) {
  if (samples.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : samples) {
    const auto input = to_model_input<T>(s, teacher.cfg.patch);
    Tape<T> tp(false);
    auto sl = tp.constant(logits(student, input));
    const auto mask = answer_only ? s.prediction_mask() : std::vector<std::uint8_t>{};
    total += static_cast<double>(
        kl_logits(tp, logits(teacher, input), sl, temperature, std::span<const std::uint8_t>(mask)).value()[0]);
  }
  return total / static_cast<double>(samples.size());
}

#define Q2L_INSTANTIATE_DISTILL(T)                                                                               \
  template void apply_stage_freezing(DecoderModel<T>&, const StageConfig&);                                      \
  template Var<T> layerwise_mse(Tape<T>&, DecoderModel<T>&, const std::vector<MixerCapture<T>>&,                \
                                const ForwardOptions&);                                                          \
  template Var<T> kl_logits(Tape<T>&, const Tensor<T>&, Var<T>, double, std::span<const std::uint8_t>);          \
  template void adamw_step(std::span<Parameter<T>* const>, OptimizerState<T>&, double, const AdamWConfig&);      \
  template double clip_grad_norm(std::span<Parameter<T>* const>, double);                                        \
  template std::vector<MetricsRow> run_stage(const StageConfig&, const DecoderModel<T>&, DecoderModel<T>&,       \
                                             const BatchSource&, const StageRunOptions&);                        \
  template std::vector<MetricsRow> train_teacher(const StageConfig&, DecoderModel<T>&, const BatchSource&,       \
                                                 const StageRunOptions&);                                        \
  template Accuracy evaluate_accuracy(const DecoderModel<T>&, const std::vector<Sample>&, const ForwardOptions&); \
  template double evaluate_kl(const DecoderModel<T>&, const DecoderModel<T>&, const std::vector<Sample>&, double, \
                              bool);

Q2L_INSTANTIATE_DISTILL(float)
Q2L_INSTANTIATE_DISTILL(double)

}  // namespace q2l
