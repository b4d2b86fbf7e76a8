// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include "quad2lin/seeding.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "quad2lin/rng.hpp"

namespace q2l {

std::string to_string(InitStrategy s) {
  switch (s) {
    case InitStrategy::kInheritMimic: return "inherit-mimic";
    case InitStrategy::kInheritOnly: return "inherit-only";
    case InitStrategy::kFromScratch: return "from-scratch";
  }
  return "?";
}

InitStrategy parse_init_strategy(const std::string& s) {
  if (s == "inherit-mimic") return InitStrategy::kInheritMimic;
  if (s == "inherit-only") return InitStrategy::kInheritOnly;
  if (s == "from-scratch") return InitStrategy::kFromScratch;
  throw ConfigError("unknown init strategy '" + s + "' (expected inherit-mimic, inherit-only, from-scratch)");
}

double seeded_gamma(double a0) { return std::exp(-std::log(2.0) * std::exp(a0)); }

template <typename T>
Mamba2Weights<T> carve(const AttentionWeights<T>& attn, const SeedConfig& cfg) {
  attn.validate();
  auto m = Mamba2Weights<T>::allocate(attn.geo, cfg.conv_width);
  m.w_q.value = attn.w_q.value;
  m.w_k.value = attn.w_k.value;
  m.w_v.value = attn.w_v.value;
  m.w_o.value = attn.w_o.value;
  m.a.value.fill(static_cast<T>(cfg.a0));
  const std::size_t c = m.conv_channels();
  for (std::size_t ch = 0; ch < c; ++ch) m.conv_kernel.value.at(cfg.conv_width - 1, ch) = T(1);
  m.gate_bias.value.fill(static_cast<T>(cfg.gate_bias0));
  m.options.qk_scale = cfg.literal_eq2 ? 1.0 : attn.score_scale();
  return m;
}

template <typename T>
Mamba2Weights<T> init_mamba(const AttentionWeights<T>& attn, const SeedConfig& cfg, InitStrategy strategy,
                            Rng& rng) {
  auto m = carve(attn, cfg);
  if (strategy == InitStrategy::kInheritMimic) return m;
  // Standard Mamba-2 style init for the extra parameters.
  for (auto& v : m.a.value.span()) v = static_cast<T>(std::log(rng.uniform(1.0, 16.0)));
  m.w_gamma.value = Tensor<T>::randn(m.w_gamma.value.shape(), rng, 0.02);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.conv_width));
  m.conv_kernel.value = Tensor<T>::uniform(m.conv_kernel.value.shape(), rng, -bound, bound);
  m.conv_bias.value = Tensor<T>::uniform(m.conv_bias.value.shape(), rng, -bound, bound);
  m.w_gate.value = Tensor<T>::randn(m.w_gate.value.shape(), rng, 0.02);
  m.gate_bias.value.fill(T(0));
  if (strategy == InitStrategy::kFromScratch) {
    for (auto* p : {&m.w_q, &m.w_k, &m.w_v, &m.w_o}) p->value = Tensor<T>::randn(p->value.shape(), rng, 0.02);
  }
  return m;
}

template <typename T>
Tensor<T> linear_attention_reference(const Tensor<T>& x, const AttentionWeights<T>& attn, double qk_scale) {
  const auto& g = attn.geo;
  const std::size_t steps = x.rows(), dh = g.head_dim, hpg = g.heads / g.groups;
  Tape<T> tp(false);
  AttentionWeights<T> w = attn;
  auto xv = tp.constant(x);
  const Tensor<T> q = ops::matmul(xv, tp.param(w.w_q)).value();
  const Tensor<T> k = ops::matmul(xv, tp.param(w.w_k)).value();
  const Tensor<T> v = ops::matmul(xv, tp.param(w.w_v)).value();
  Tensor<T> y(Shape{steps, g.q_width()});
  const Tensor<T> ones = Tensor<T>::ones({steps});
  for (std::size_t h = 0; h < g.heads; ++h) {
    const std::size_t grp = h / hpg;
    Tensor<T> qh = q.slice_cols(h * dh, (h + 1) * dh);
    qh *= static_cast<T>(qk_scale);
    const Tensor<T> yh = brute_force_decayed_attention(qh, k.slice_cols(grp * dh, (grp + 1) * dh),
                                                       v.slice_cols(grp * dh, (grp + 1) * dh), ones);
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t a = 0; a < dh; ++a) y.at(t, h * dh + a) = yh.at(t, a);
  }
  return ops::matmul(tp.constant(y), tp.param(w.w_o)).value();
}

std::string SeedReport::summary() const {
  std::ostringstream os;
  os << "gamma_dev=" << gamma_deviation << " conv_residual=" << conv_identity_residual
     << " gate_dev=" << gate_deviation << " output_dev=" << output_deviation << " output_mse=" << output_mse
     << " attention_mse=" << attention_mse << " tol=" << tol << (passed ? " PASS" : " FAIL");
  return os.str();
}

template <typename T>
SeedReport verify_seed(const Mamba2Weights<T>& m, const AttentionWeights<T>& attn, const Tensor<T>& x, double tol) {
  m.validate();
  SeedReport r;
  r.tol = tol;
  const Tensor<T> gammas = mamba2_gammas(x, m);
  for (auto gm : gammas.span()) r.gamma_deviation = std::max(r.gamma_deviation, std::abs(1.0 - gm));

  Mamba2Weights<T> w = m;
  Tape<T> tp(false);
  auto xv = tp.constant(x);
  const Var<T> proj[] = {ops::matmul(xv, tp.param(w.w_q)), ops::matmul(xv, tp.param(w.w_k)),
                         ops::matmul(xv, tp.param(w.w_v))};
  auto p = ops::concat_cols<T>(proj);
  auto conv = ops::causal_depthwise_conv(p, tp.param(w.conv_kernel), tp.param(w.conv_bias));
  r.conv_identity_residual = max_abs_diff(conv.value(), p.value());

  auto gate = ops::sigmoid(ops::add_row(ops::matmul(xv, tp.param(w.w_gate)), tp.param(w.gate_bias))).value();
  for (auto gv : gate.span()) r.gate_deviation = std::max(r.gate_deviation, std::abs(1.0 - gv));

  const Tensor<T> seeded = mamba2_forward_recurrent(x, m);
  const Tensor<T> lin = linear_attention_reference(x, attn, m.options.qk_scale);
  const Tensor<T> soft = attention_forward(x, attn);
  double se_lin = 0, se_soft = 0;
  for (std::size_t i = 0; i < seeded.numel(); ++i) {
    const double dl = static_cast<double>(seeded[i]) - lin[i];
    const double ds = static_cast<double>(seeded[i]) - soft[i];
    r.output_deviation = std::max(r.output_deviation, std::abs(dl));
    se_lin += dl * dl;
    se_soft += ds * ds;
  }
  r.output_mse = se_lin / static_cast<double>(seeded.numel());
  r.attention_mse = se_soft / static_cast<double>(seeded.numel());
  r.passed = r.gamma_deviation <= tol && r.conv_identity_residual <= tol && r.gate_deviation <= tol &&
             r.output_deviation <= tol;
  return r;
}

#define Q2L_INSTANTIATE_SEEDING(T)                                                                         \
  template Mamba2Weights<T> carve(const AttentionWeights<T>&, const SeedConfig&);                         \
  template Mamba2Weights<T> init_mamba(const AttentionWeights<T>&, const SeedConfig&, InitStrategy, Rng&); \
  template Tensor<T> linear_attention_reference(const Tensor<T>&, const AttentionWeights<T>&, double);    \
  template SeedReport verify_seed(const Mamba2Weights<T>&, const AttentionWeights<T>&, const Tensor<T>&, double);

Q2L_INSTANTIATE_SEEDING(float)
Q2L_INSTANTIATE_SEEDING(double)

}  // namespace q2l
