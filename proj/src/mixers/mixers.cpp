// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include "quad2lin/mixers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "quad2lin/kernels.hpp"
#include "quad2lin/rng.hpp"

namespace q2l {

namespace pn = param_names;

void HeadGeometry::validate() const {
  if (model_dim == 0 || heads == 0 || groups == 0 || head_dim == 0 || heads % groups != 0) {
    throw DimensionError("head geometry: need positive d, H, G, d_h with H mod G == 0 (d=" +
                         std::to_string(model_dim) + " H=" + std::to_string(heads) +
                         " G=" + std::to_string(groups) + " d_h=" + std::to_string(head_dim) + ")");
  }
}

namespace {

template <typename T>
void expect_shape(const Parameter<T>& p, const Shape& s) {
  if (p.value.shape() != s) {
    throw DimensionError("parameter " + p.name + " has shape " + shape_str(p.value.shape()) + ", expected " +
                         shape_str(s));
  }
}

template <typename T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

template <typename T>
T softplus(T x) {
  return x > T(20) ? x : std::log1p(std::exp(x));
}

}  // namespace

// ---------------------------------------------------------------------------
// Attention

template <typename T>
AttentionWeights<T> AttentionWeights<T>::init(const HeadGeometry& geo, Rng& rng, double std) {
  geo.validate();
  AttentionWeights w;
  w.geo = geo;
  const std::size_t d = geo.model_dim;
  w.w_q = Parameter<T>(pn::kWQ, Tensor<T>::randn(Shape{d, geo.q_width()}, rng, std));
  w.w_k = Parameter<T>(pn::kWK, Tensor<T>::randn(Shape{d, geo.kv_width()}, rng, std));
  w.w_v = Parameter<T>(pn::kWV, Tensor<T>::randn(Shape{d, geo.kv_width()}, rng, std));
  w.w_o = Parameter<T>(pn::kWO, Tensor<T>::randn(Shape{geo.q_width(), d}, rng, std));
  return w;
}

template <typename T>
double AttentionWeights<T>::score_scale() const {
  return scale_scores ? 1.0 / std::sqrt(static_cast<double>(geo.head_dim)) : 1.0;
}

template <typename T>
void AttentionWeights<T>::for_each_param(const std::function<void(Parameter<T>&)>& fn) {
  for (auto* p : {&w_q, &w_k, &w_v, &w_o}) fn(*p);
}

template <typename T>
void AttentionWeights<T>::for_each_param(const std::function<void(const Parameter<T>&)>& fn) const {
  for (const auto* p : {&w_q, &w_k, &w_v, &w_o}) fn(*p);
}

template <typename T>
void AttentionWeights<T>::validate() const {
  geo.validate();
  const std::size_t d = geo.model_dim;
  expect_shape(w_q, {d, geo.q_width()});
  expect_shape(w_k, {d, geo.kv_width()});
  expect_shape(w_v, {d, geo.kv_width()});
  expect_shape(w_o, {geo.q_width(), d});
}

template <typename T>
Var<T> attention_forward(Var<T> x, AttentionWeights<T>& w) {
  if (x.value().rank() != 2 || x.cols() != w.geo.model_dim) {
    throw DimensionError("attention_forward: input " + shape_str(x.shape()) + " vs model dim " +
                         std::to_string(w.geo.model_dim));
  }
  if (x.rows() == 0) throw ContractError("attention_forward: empty sequence");
  Tape<T>& tp = x.tape();
  Var<T> q = ops::matmul(x, tp.param(w.w_q));
  Var<T> k = ops::matmul(x, tp.param(w.w_k));
  Var<T> v = ops::matmul(x, tp.param(w.w_v));
  Var<T> y = ops::causal_gqa_attention(q, k, v, w.geo.heads, w.geo.groups, w.score_scale());
  return ops::matmul(y, tp.param(w.w_o));
}

template <typename T>
Tensor<T> attention_forward(const Tensor<T>& x, const AttentionWeights<T>& w) {
  AttentionWeights<T> local = w;
  Tape<T> tp(false);
  return attention_forward(tp.constant(x), local).value();
}

template <typename T>
Tensor<T> attention_decode_step(std::span<const T> x_t, const AttentionWeights<T>& w, KVCache<T>& cache) {
  const HeadGeometry& g = w.geo;
  const std::size_t d = g.model_dim, dh = g.head_dim, kc = g.kv_width(), qc = g.q_width();
  if (x_t.size() != d) throw DimensionError("attention_decode_step: input width " + std::to_string(x_t.size()));
  if (cache.width != kc || cache.keys.size() != cache.length * kc || cache.values.size() != cache.length * kc) {
    throw ContractError("attention_decode_step: cache layout does not match layer (width " +
                        std::to_string(cache.width) + " vs " + std::to_string(kc) + ")");
  }
  std::vector<T> q(qc);
  kernels::gemv_row(x_t.data(), w.w_q.value.data(), q.data(), d, qc);
  const std::size_t base = cache.keys.size();
  cache.keys.resize(base + kc);
  cache.values.resize(base + kc);
  kernels::gemv_row(x_t.data(), w.w_k.value.data(), cache.keys.data() + base, d, kc);
  kernels::gemv_row(x_t.data(), w.w_v.value.data(), cache.values.data() + base, d, kc);
  ++cache.length;

  const std::size_t n = cache.length, hpg = g.heads / g.groups;
  const T sc = static_cast<T>(w.score_scale());
  std::vector<T> heads_out(qc, T(0)), p(n);
  for (std::size_t h = 0; h < g.heads; ++h) {
    const std::size_t grp = h / hpg;
    const T* qh = q.data() + h * dh;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = sc * kernels::dot(qh, cache.keys.data() + i * kc + grp * dh, dh);
      mx = std::max(mx, p[i]);
    }
    T s = T(0);
    for (std::size_t i = 0; i < n; ++i) s += (p[i] = std::exp(p[i] - mx));
    T* yh = heads_out.data() + h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      const T wgt = p[i] / s;
      const T* vi = cache.values.data() + i * kc + grp * dh;
      for (std::size_t a = 0; a < dh; ++a) yh[a] += wgt * vi[a];
    }
  }
  Tensor<T> out(Shape{d});
  kernels::gemv_row(heads_out.data(), w.w_o.value.data(), out.data(), qc, d);
  return out;
}

// ---------------------------------------------------------------------------
// Mamba-2

template <typename T>
Mamba2Weights<T> Mamba2Weights<T>::allocate(const HeadGeometry& geo, std::size_t conv_width) {
  geo.validate();
  if (conv_width == 0) throw DimensionError("Mamba-2 conv width must be >= 1");
  Mamba2Weights w;
  w.geo = geo;
  w.conv_width = conv_width;
  const std::size_t d = geo.model_dim, c = w.conv_channels();
  w.w_q = Parameter<T>(pn::kWQ, Tensor<T>(Shape{d, geo.q_width()}));
  w.w_k = Parameter<T>(pn::kWK, Tensor<T>(Shape{d, geo.kv_width()}));
  w.w_v = Parameter<T>(pn::kWV, Tensor<T>(Shape{d, geo.kv_width()}));
  w.w_o = Parameter<T>(pn::kWO, Tensor<T>(Shape{geo.q_width(), d}));
  w.a = Parameter<T>(pn::kA, Tensor<T>(Shape{geo.groups}));
  w.w_gamma = Parameter<T>(pn::kWGamma, Tensor<T>(Shape{d, geo.groups}));
  w.conv_kernel = Parameter<T>(pn::kConvKernel, Tensor<T>(Shape{conv_width, c}));
  w.conv_bias = Parameter<T>(pn::kConvBias, Tensor<T>(Shape{c}));
  w.w_gate = Parameter<T>(pn::kWGate, Tensor<T>(Shape{d, geo.q_width()}));
  w.gate_bias = Parameter<T>(pn::kGateBias, Tensor<T>(Shape{geo.q_width()}));
  return w;
}

template <typename T>
std::size_t Mamba2Weights<T>::extra_param_count() const {
  return a.value.numel() + w_gamma.value.numel() + conv_kernel.value.numel() + conv_bias.value.numel() +
         w_gate.value.numel() + gate_bias.value.numel();
}

template <typename T>
void Mamba2Weights<T>::for_each_param(const std::function<void(Parameter<T>&)>& fn) {
  for (auto* p : {&w_q, &w_k, &w_v, &w_o, &a, &w_gamma, &conv_kernel, &conv_bias, &w_gate, &gate_bias}) fn(*p);
}

template <typename T>
void Mamba2Weights<T>::for_each_param(const std::function<void(const Parameter<T>&)>& fn) const {
  for (const auto* p : {&w_q, &w_k, &w_v, &w_o, &a, &w_gamma, &conv_kernel, &conv_bias, &w_gate, &gate_bias})
    fn(*p);
}

template <typename T>
void Mamba2Weights<T>::validate() const {
  geo.validate();
  const std::size_t d = geo.model_dim, c = conv_channels();
  if (conv_width == 0) throw DimensionError("Mamba-2 conv width must be >= 1");
  expect_shape(w_q, {d, geo.q_width()});
  expect_shape(w_k, {d, geo.kv_width()});
  expect_shape(w_v, {d, geo.kv_width()});
  expect_shape(w_o, {geo.q_width(), d});
  expect_shape(a, {geo.groups});
  expect_shape(w_gamma, {d, geo.groups});
  expect_shape(conv_kernel, {conv_width, c});
  expect_shape(conv_bias, {c});
  expect_shape(w_gate, {d, geo.q_width()});
  expect_shape(gate_bias, {geo.q_width()});
}

template <typename T>
SSMState<T>::SSMState(const Mamba2Weights<T>& w)
    : groups(w.geo.groups),
      head_dim(w.geo.head_dim),
      conv_width(w.conv_width),
      channels(w.conv_channels()),
      s(w.geo.groups * w.geo.head_dim * w.geo.head_dim, T(0)),
      conv_tail((w.conv_width - 1) * w.conv_channels(), T(0)) {}

template <typename T>
Var<T> mamba2_forward(Var<T> x, Mamba2Weights<T>& w, ops::ScanOptions scan) {
  const HeadGeometry& g = w.geo;
  if (x.value().rank() != 2 || x.cols() != g.model_dim) {
    throw DimensionError("mamba2_forward: input " + shape_str(x.shape()) + " vs model dim " +
                         std::to_string(g.model_dim));
  }
  if (x.rows() == 0) throw ContractError("mamba2_forward: empty sequence");
  Tape<T>& tp = x.tape();
  const std::size_t qw = g.q_width(), kw = g.kv_width();
  const Var<T> proj[] = {ops::matmul(x, tp.param(w.w_q)), ops::matmul(x, tp.param(w.w_k)),
                         ops::matmul(x, tp.param(w.w_v))};
  Var<T> qkv = ops::causal_depthwise_conv(ops::concat_cols<T>(proj), tp.param(w.conv_kernel), tp.param(w.conv_bias));
  if (w.options.conv_activation) qkv = ops::silu(qkv);
  Var<T> q = ops::slice_cols(qkv, 0, qw);
  Var<T> k = ops::slice_cols(qkv, qw, qw + kw);
  Var<T> v = ops::slice_cols(qkv, qw + kw, qw + 2 * kw);

  Var<T> gamma;
  if (w.options.fixed_gamma) {
    gamma = tp.constant(Tensor<T>(Shape{x.rows(), g.groups}, static_cast<T>(*w.options.fixed_gamma)));
  } else {
    // gamma_t = exp(-softplus(x_t W_gamma) * exp(a))
    Var<T> rate = ops::mul_row(ops::softplus(ops::matmul(x, tp.param(w.w_gamma))), ops::exp(tp.param(w.a)));
    gamma = ops::exp(ops::neg(rate));
  }
  Var<T> y = ops::decayed_scan(q, k, v, gamma, g.heads, g.groups, w.options.qk_scale, scan);
  if (w.options.head_norm) y = ops::group_rms_norm(y, g.head_dim);
  if (w.options.output_gate) {
    y = ops::mul(y, ops::sigmoid(ops::add_row(ops::matmul(x, tp.param(w.w_gate)), tp.param(w.gate_bias))));
  }
  return ops::matmul(y, tp.param(w.w_o));
}

template <typename T>
Tensor<T> mamba2_forward_recurrent(const Tensor<T>& x, const Mamba2Weights<T>& w) {
  Mamba2Weights<T> local = w;
  Tape<T> tp(false);
  return mamba2_forward(tp.constant(x), local).value();
}

template <typename T>
Tensor<T> mamba2_forward_chunked(const Tensor<T>& x, const Mamba2Weights<T>& w, std::size_t chunk) {
  if (chunk == 0) throw ContractError("mamba2_forward_chunked: chunk must be >= 1");
  Mamba2Weights<T> local = w;
  Tape<T> tp(false);
  return mamba2_forward(tp.constant(x), local, ops::ScanOptions{chunk}).value();
}

template <typename T>
Tensor<T> mamba2_gammas(const Tensor<T>& x, const Mamba2Weights<T>& w) {
  const std::size_t steps = x.rows(), d = w.geo.model_dim, groups = w.geo.groups;
  Tensor<T> out(Shape{steps, groups});
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t grp = 0; grp < groups; ++grp) {
      if (w.options.fixed_gamma) {
        out.at(t, grp) = static_cast<T>(*w.options.fixed_gamma);
        continue;
      }
      T z = T(0);
      for (std::size_t i = 0; i < d; ++i) z += x.at(t, i) * w.w_gamma.value.at(i, grp);
      out.at(t, grp) = std::exp(-softplus(z) * std::exp(w.a.value[grp]));
    }
  }
  return out;
}

template <typename T>
Tensor<T> mamba2_decode_step(std::span<const T> x_t, const Mamba2Weights<T>& w, SSMState<T>& state) {
  const HeadGeometry& g = w.geo;
  const std::size_t d = g.model_dim, dh = g.head_dim, qw = g.q_width(), kw = g.kv_width();
  const std::size_t c = w.conv_channels(), cw = w.conv_width;
  if (x_t.size() != d) throw DimensionError("mamba2_decode_step: input width " + std::to_string(x_t.size()));
  if (state.conv_tail.size() != (cw - 1) * c || state.s.size() != g.groups * dh * dh) {
    throw ContractError("mamba2_decode_step: state layout does not match layer (conv_tail holds " +
                        std::to_string(state.conv_tail.size()) + " scalars, expected " +
                        std::to_string((cw - 1) * c) + ")");
  }
  // Project to [q | k | v] in the same channel order as the full-sequence path.
  std::vector<T> cur(c);
  kernels::gemv_row(x_t.data(), w.w_q.value.data(), cur.data(), d, qw);
  kernels::gemv_row(x_t.data(), w.w_k.value.data(), cur.data() + qw, d, kw);
  kernels::gemv_row(x_t.data(), w.w_v.value.data(), cur.data() + qw + kw, d, kw);

  std::vector<T> mixed(w.conv_bias.value.data(), w.conv_bias.value.data() + c);
  const T* ker = w.conv_kernel.value.data();
  for (std::size_t j = 0; j + 1 < cw; ++j) {
    const T* row = state.conv_tail.data() + j * c;
    for (std::size_t ch = 0; ch < c; ++ch) mixed[ch] += ker[j * c + ch] * row[ch];
  }
  for (std::size_t ch = 0; ch < c; ++ch) mixed[ch] += ker[(cw - 1) * c + ch] * cur[ch];
  if (cw > 1) {
    std::move(state.conv_tail.begin() + c, state.conv_tail.end(), state.conv_tail.begin());
    std::copy(cur.begin(), cur.end(), state.conv_tail.end() - c);
  }
  if (w.options.conv_activation)
    for (auto& m : mixed) m = m * sigmoid(m);

  const T* q = mixed.data();
  const T* k = mixed.data() + qw;
  const T* v = mixed.data() + qw + kw;
  const std::size_t hpg = g.heads / g.groups, ss = dh * dh;
  const T sc = static_cast<T>(w.options.qk_scale);
  std::vector<T> y(qw);
  for (std::size_t grp = 0; grp < g.groups; ++grp) {
    T gm;
    if (w.options.fixed_gamma) {
      gm = static_cast<T>(*w.options.fixed_gamma);
    } else {
      T z = T(0);
      for (std::size_t i = 0; i < d; ++i) z += x_t[i] * w.w_gamma.value[i * g.groups + grp];
      gm = std::exp(-softplus(z) * std::exp(w.a.value[grp]));
    }
    T* sg = state.s.data() + grp * ss;
    const T* kg = k + grp * dh;
    const T* vg = v + grp * dh;
    for (std::size_t a = 0; a < dh; ++a)
      for (std::size_t b = 0; b < dh; ++b) sg[a * dh + b] = gm * sg[a * dh + b] + vg[a] * kg[b];
    for (std::size_t h = grp * hpg; h < (grp + 1) * hpg; ++h)
      for (std::size_t a = 0; a < dh; ++a) y[h * dh + a] = sc * kernels::dot(sg + a * dh, q + h * dh, dh);
  }
  if (w.options.head_norm) {
    for (std::size_t h = 0; h < g.heads; ++h) {
      T* yh = y.data() + h * dh;
      const T r = T(1) / std::sqrt(kernels::dot(yh, yh, dh) / static_cast<T>(dh) + static_cast<T>(1e-6));
      for (std::size_t a = 0; a < dh; ++a) yh[a] *= r;
    }
  }
  if (w.options.output_gate) {
    std::vector<T> gate(w.gate_bias.value.data(), w.gate_bias.value.data() + qw);
    kernels::gemv_row(x_t.data(), w.w_gate.value.data(), gate.data(), d, qw, true);
    for (std::size_t i = 0; i < qw; ++i) y[i] *= sigmoid(gate[i]);
  }
  ++state.step;
  Tensor<T> out(Shape{d});
  kernels::gemv_row(y.data(), w.w_o.value.data(), out.data(), qw, d);
  return out;
}

template <typename T>
Tensor<T> brute_force_decayed_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                        const Tensor<T>& gammas) {
  const std::size_t steps = q.rows(), dh = q.cols();
  if (k.rows() != steps || v.rows() != steps || k.cols() != dh || v.cols() != dh || gammas.numel() != steps) {
    throw DimensionError("brute_force_decayed_attention: inconsistent shapes");
  }
  Tensor<T> y(Shape{steps, dh});
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i <= t; ++i) {
      T decay = T(1);
      for (std::size_t j = i + 1; j <= t; ++j) decay *= gammas[j];
      T score = T(0);
      for (std::size_t b = 0; b < dh; ++b) score += q.at(t, b) * k.at(i, b);
      for (std::size_t a = 0; a < dh; ++a) y.at(t, a) += decay * score * v.at(i, a);
    }
  }
  return y;
}

#define Q2L_INSTANTIATE_MIXERS(T)                                                                          \
  template struct AttentionWeights<T>;                                                                    \
  template struct Mamba2Weights<T>;                                                                       \
  template struct SSMState<T>;                                                                            \
  template Var<T> attention_forward(Var<T>, AttentionWeights<T>&);                                        \
  template Tensor<T> attention_forward(const Tensor<T>&, const AttentionWeights<T>&);                     \
  template Tensor<T> attention_decode_step(std::span<const T>, const AttentionWeights<T>&, KVCache<T>&);  \
  template Var<T> mamba2_forward(Var<T>, Mamba2Weights<T>&, ops::ScanOptions);                            \
  template Tensor<T> mamba2_forward_recurrent(const Tensor<T>&, const Mamba2Weights<T>&);                 \
  template Tensor<T> mamba2_forward_chunked(const Tensor<T>&, const Mamba2Weights<T>&, std::size_t);      \
  template Tensor<T> mamba2_gammas(const Tensor<T>&, const Mamba2Weights<T>&);                            \
  template Tensor<T> mamba2_decode_step(std::span<const T>, const Mamba2Weights<T>&, SSMState<T>&);       \
  template Tensor<T> brute_force_decayed_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                                   const Tensor<T>&);

Q2L_INSTANTIATE_MIXERS(float)
Q2L_INSTANTIATE_MIXERS(double)

}  // namespace q2l
