// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include "doctest.h"
#include "quad2lin/finite_diff.hpp"
#include "quad2lin/mixers.hpp"
#include "oracles.hpp"
#include "quad2lin/rng.hpp"

using namespace q2l;
using namespace q2l::testing;

namespace {

const HeadGeometry kScalarGeo{1, 1, 1, 1};

Mamba2Weights<double> scalar_mamba() {
  auto w = Mamba2Weights<double>::allocate(kScalarGeo, 4);
  for (auto* p : {&w.w_q, &w.w_k, &w.w_v, &w.w_o}) p->value = Tensor<double>::matrix({{1.0}});
  w.conv_kernel.value.at(3, 0) = 1.0;
  w.conv_kernel.value.at(3, 1) = 1.0;
  w.conv_kernel.value.at(3, 2) = 1.0;
  w.a.value[0] = -8.0;
  w.options.conv_activation = false;
  w.options.output_gate = false;
  return w;
}

}  // namespace

TEST_CASE("attention single step is the value path") {
  Rng rng(3);
  HeadGeometry geo{8, 4, 2, 3};
  auto w = AttentionWeights<double>::init(geo, rng, 0.5);
  auto x = Tensor<double>::randn({1, 8}, rng, 1.0);
  auto y = attention_forward(x, w);
  const auto v = naive_matmul(x, w.w_v.value);
  Tensor<double> heads(Shape{1, geo.q_width()});
  for (std::size_t h = 0; h < geo.heads; ++h)
    for (std::size_t a = 0; a < geo.head_dim; ++a) heads.at(0, h * 3 + a) = v.at(0, (h / 2) * 3 + a);
  CHECK(max_abs_diff(y, naive_matmul(heads, w.w_o.value)) < 1e-12);
}

TEST_CASE("attention scalar example") {
  AttentionWeights<double> w;
  w.geo = kScalarGeo;
  for (auto* p : {&w.w_q, &w.w_k, &w.w_v, &w.w_o}) p->value = Tensor<double>::matrix({{1.0}});
  w.scale_scores = false;
  auto y = attention_forward(Tensor<double>::matrix({{1.0}, {2.0}}), w);
  CHECK(y.at(1, 0) == doctest::Approx(1.880797).epsilon(1e-6));
  const double s2 = std::exp(4.0) / (std::exp(2.0) + std::exp(4.0));
  CHECK(std::abs(y.at(1, 0) - (2 * s2 + (1 - s2))) < 1e-14);
}

TEST_CASE("attention decode matches forward and cache grows linearly") {
  Rng rng(21);
  HeadGeometry geo{12, 6, 3, 4};
  auto w = AttentionWeights<float>::init(geo, rng, 0.3);
  auto x = Tensor<float>::randn({20, 12}, rng, 1.0);
  auto full = attention_forward(x, w);
  KVCache<float> cache(geo.kv_width());
  for (std::size_t t = 0; t < 20; ++t) {
    auto row = attention_decode_step<float>(x.row(t), w, cache);
    CHECK(cache.length == t + 1);
    CHECK(cache.scalar_count() == 2 * (t + 1) * geo.kv_width());
    for (std::size_t j = 0; j < 12; ++j) CHECK(std::abs(row[j] - full.at(t, j)) < 1e-5);
  }
  KVCache<float> wrong(geo.kv_width() + 1);
  CHECK_THROWS_AS(attention_decode_step<float>(x.row(0), w, wrong), ContractError);
}

TEST_CASE("attention prefix rows equal forward on the prefix") {
  Rng rng(5);
  HeadGeometry geo{6, 2, 1, 3};
  auto w = AttentionWeights<double>::init(geo, rng, 0.5);
  auto x = Tensor<double>::randn({7, 6}, rng, 1.0);
  auto full = attention_forward(x, w);
  auto prefix = attention_forward(x.slice_rows(0, 3), w);
  CHECK(max_abs_diff(prefix, full.slice_rows(0, 3)) < 1e-12);
}

TEST_CASE("attention output lies in the convex hull of the value rows") {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    HeadGeometry geo{2, 1, 1, 2};
    auto w = AttentionWeights<double>::init(geo, rng, 1.0);
    w.w_o.value = Tensor<double>::matrix({{1, 0}, {0, 1}});
    auto x = Tensor<double>::randn({3, 2}, rng, 1.0);
    auto y = attention_forward(x, w);
    auto v = naive_matmul(x, w.w_v.value);
    // Barycentric coordinates of y_3 in the triangle (v_1, v_2, v_3).
    const double e1x = v.at(0, 0) - v.at(2, 0), e1y = v.at(0, 1) - v.at(2, 1);
    const double e2x = v.at(1, 0) - v.at(2, 0), e2y = v.at(1, 1) - v.at(2, 1);
    const double rx = y.at(2, 0) - v.at(2, 0), ry = y.at(2, 1) - v.at(2, 1);
    const double det = e1x * e2y - e2x * e1y;
    if (std::abs(det) < 1e-6) continue;
    const double l1 = (rx * e2y - e2x * ry) / det, l2 = (e1x * ry - rx * e1y) / det, l3 = 1 - l1 - l2;
    CHECK(l1 >= -1e-9);
    CHECK(l2 >= -1e-9);
    CHECK(l3 >= -1e-9);
    CHECK(l1 <= 1 + 1e-9);
  }
}

TEST_CASE("mamba scalar example") {
  auto w = scalar_mamba();
  auto x = Tensor<double>::matrix({{1.0}, {2.0}});
  auto g = mamba2_gammas(x, w);
  CHECK(g.at(0, 0) == doctest::Approx(0.99976750).epsilon(1e-8));
  CHECK(std::abs(g.at(0, 0) - std::exp(-std::log(2.0) * std::exp(-8.0))) < 1e-15);
  CHECK(g.at(1, 0) == g.at(0, 0));
  auto y = mamba2_forward_recurrent(x, w);
  CHECK(y.at(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(y.at(1, 0) == doctest::Approx(9.99953).epsilon(1e-6));
  CHECK(std::abs(y.at(1, 0) - (g.at(0, 0) + 4.0) * 2.0) < 1e-12);

  auto gm = Tensor<double>::vector({g.at(0, 0), g.at(1, 0)});
  auto bf = brute_force_decayed_attention(x, x, x, gm);
  CHECK(std::abs(bf.at(1, 0) - y.at(1, 0)) < 1e-12);
}

TEST_CASE("brute force degenerate decays") {
  Rng rng(8);
  auto q = Tensor<double>::randn({6, 3}, rng, 1.0);
  auto k = Tensor<double>::randn({6, 3}, rng, 1.0);
  auto v = Tensor<double>::randn({6, 3}, rng, 1.0);
  auto ones = brute_force_decayed_attention(q, k, v, Tensor<double>::ones({6}));
  auto zeros = brute_force_decayed_attention(q, k, v, Tensor<double>(Shape{6}));
  for (std::size_t t = 0; t < 6; ++t) {
    for (std::size_t a = 0; a < 3; ++a) {
      double lin = 0;
      for (std::size_t i = 0; i <= t; ++i) {
        double s = 0;
        for (std::size_t b = 0; b < 3; ++b) s += q.at(t, b) * k.at(i, b);
        lin += s * v.at(i, a);
      }
      double self = 0;
      for (std::size_t b = 0; b < 3; ++b) self += q.at(t, b) * k.at(t, b);
      CHECK(std::abs(ones.at(t, a) - lin) < 1e-12);
      CHECK(std::abs(zeros.at(t, a) - self * v.at(t, a)) < 1e-12);
    }
  }
}

TEST_CASE("mamba zero input gives zero output") {
  auto w = random_mamba<double>({8, 4, 2, 3}, 1);
  w.conv_bias.value.fill(0.0);
  auto y = mamba2_forward_recurrent(Tensor<double>(Shape{9, 8}), w);
  CHECK(y.max_abs() == 0.0);
}

TEST_CASE("mamba recurrent, chunked and decode agree with the oracle") {
  struct Geo {
    HeadGeometry geo;
    std::size_t steps;
  };
  const std::vector<Geo> geos = {{{8, 2, 1, 4}, 17}, {{16, 4, 2, 4}, 64}, {{24, 6, 3, 4}, 40}, {{64, 4, 4, 16}, 128}};
  for (std::size_t gi = 0; gi < geos.size(); ++gi) {
    const auto& [geo, steps] = geos[gi];
    INFO("geometry " << gi);
    auto wd = random_mamba<double>(geo, 100 + gi);
    Rng rng(200 + gi);
    auto xd = Tensor<double>::randn({steps, geo.model_dim}, rng, 1.0);
    const auto oracle = mamba_oracle(xd, wd);
    CHECK(max_abs_diff(mamba2_forward_recurrent(xd, wd), oracle) < 1e-10);
    CHECK(max_abs_diff(run_decode(xd, wd), oracle) < 1e-10);
    for (std::size_t chunk : {std::size_t{1}, std::size_t{8}, std::size_t{16}, steps})
      CHECK(max_abs_diff(mamba2_forward_chunked(xd, wd, chunk), oracle) < 1e-10);

    Mamba2Weights<float> wf = Mamba2Weights<float>::allocate(geo, 4);
    wf.for_each_param([&](Parameter<float>& p) {
      wd.for_each_param([&](Parameter<double>& q) {
        if (q.name == p.name) p.value = q.value.cast<float>();
      });
    });
    auto xf = xd.cast<float>();
    const auto oracle_f = mamba_oracle(xf, wf);
    const auto rec = mamba2_forward_recurrent(xf, wf);
    CHECK(max_abs_diff(rec, oracle_f) < 1e-5);
    CHECK(max_abs_diff(run_decode(xf, wf), rec) < 1e-5);
    CHECK(max_abs_diff(mamba2_forward_chunked(xf, wf, 1), rec) < 1e-6);
    for (std::size_t chunk : {std::size_t{8}, std::size_t{16}, steps})
      CHECK(max_abs_diff(mamba2_forward_chunked(xf, wf, chunk), rec) < 1e-4);
  }
}

TEST_CASE("mamba options are honoured by every path") {
  HeadGeometry geo{12, 4, 2, 3};
  auto w = random_mamba<double>(geo, 31);
  w.options.head_norm = true;
  w.options.qk_scale = 0.5;
  Rng rng(9);
  auto x = Tensor<double>::randn({15, 12}, rng, 1.0);
  const auto rec = mamba2_forward_recurrent(x, w);
  CHECK(max_abs_diff(run_decode(x, w), rec) < 1e-10);
  CHECK(max_abs_diff(mamba2_forward_chunked(x, w, 4), rec) < 1e-10);
  w.options.head_norm = false;
  w.options.fixed_gamma = 0.9;
  w.options.output_gate = false;
  CHECK(max_abs_diff(mamba2_forward_recurrent(x, w), mamba_oracle(x, w)) < 1e-10);
  CHECK(max_abs_diff(run_decode(x, w), mamba_oracle(x, w)) < 1e-10);
}

TEST_CASE("decode state size is independent of sequence length") {
  auto w = random_mamba<float>({16, 4, 2, 4}, 4);
  SSMState<float> st(w);
  const std::size_t before = st.bytes();
  CHECK(st.conv_tail.size() == 3 * w.conv_channels());
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    auto x = Tensor<float>::randn({16}, rng, 1.0);
    auto y = mamba2_decode_step<float>(x.span(), w, st);
    CHECK(y.all_finite());
  }
  CHECK(st.step == 1000);
  CHECK(st.bytes() == before);
  SSMState<float> broken(w);
  broken.conv_tail.pop_back();
  auto x = Tensor<float>::randn({16}, rng, 1.0);
  CHECK_THROWS_AS(mamba2_decode_step<float>(x.span(), w, broken), ContractError);
}

TEST_CASE("decay stays in (0, 1]") {
  auto w = random_mamba<double>({8, 2, 2, 2}, 12);
  Rng rng(4);
  auto x = Tensor<double>::randn({200, 8}, rng, 3.0);
  const auto gammas = mamba2_gammas(x, w);
  for (auto g : gammas.span()) {
    CHECK(g > 0.0);
    CHECK(g <= 1.0);
  }
}

TEST_CASE("both mixers are causal") {
  Rng rng(13);
  HeadGeometry geo{8, 4, 2, 2};
  auto aw = AttentionWeights<double>::init(geo, rng, 0.5);
  auto mw = random_mamba<double>(geo, 14);
  auto x = Tensor<double>::randn({16, 8}, rng, 1.0);
  for (std::size_t cut : {0, 5, 15}) {
    auto xz = x;
    for (std::size_t t = cut + 1; t < 16; ++t)
      for (std::size_t j = 0; j < 8; ++j) xz.at(t, j) = 0.0;
    CHECK(mamba2_forward_recurrent(x, mw).slice_rows(0, cut + 1).bit_equal(
        mamba2_forward_recurrent(xz, mw).slice_rows(0, cut + 1)));
    CHECK(max_abs_diff(attention_forward(x, aw).slice_rows(0, cut + 1),
                       attention_forward(xz, aw).slice_rows(0, cut + 1)) < 1e-14);
  }
}

TEST_CASE("mixer gradients pass the finite-difference oracle") {
  HeadGeometry geo{6, 4, 2, 2};
  Rng rng(55);
  auto x0 = Tensor<double>::uniform({7, 6}, rng, -2.0, 2.0);
  auto probe = Tensor<double>::uniform({7, 6}, rng, -1.0, 1.0);
  auto loss_of = [&](Tape<double>& t, Var<double> y) { return ops::sum(ops::mul(y, t.constant(probe))); };

  auto aw = AttentionWeights<double>::init(geo, rng, 0.5);
  CHECK(gradient_check<double>([&](Tape<double>& t, Var<double> x) { return loss_of(t, attention_forward(x, aw)); },
                               x0) < 1e-4);
  aw.for_each_param([&](Parameter<double>& p) {
    INFO("attention " << p.name);
    CHECK(parameter_gradient_check<double>(
              p, [&](Tape<double>& t) { return loss_of(t, attention_forward(t.constant(x0), aw)); }) < 1e-4);
  });

  for (std::size_t chunk : {std::size_t{0}, std::size_t{3}}) {
    auto mw = random_mamba<double>(geo, 56);
    mw.options.head_norm = chunk != 0;
    const ops::ScanOptions scan{chunk};
    CHECK(gradient_check<double>(
              [&](Tape<double>& t, Var<double> x) { return loss_of(t, mamba2_forward(x, mw, scan)); }, x0) < 1e-4);
    mw.for_each_param([&](Parameter<double>& p) {
      INFO("mamba " << p.name << " chunk " << chunk);
      CHECK(parameter_gradient_check<double>(
                p, [&](Tape<double>& t) { return loss_of(t, mamba2_forward(t.constant(x0), mw, scan)); }) < 1e-4);
    });
  }
}

TEST_CASE("shape errors") {
  auto w = random_mamba<double>({8, 4, 2, 2}, 1);
  CHECK_THROWS_AS(mamba2_forward_recurrent(Tensor<double>(Shape{3, 7}), w), DimensionError);
  CHECK_THROWS_AS(HeadGeometry({8, 3, 2, 2}).validate(), DimensionError);
  w.w_gate.value = Tensor<double>(Shape{8, 3});
  CHECK_THROWS_AS(w.validate(), DimensionError);
}
