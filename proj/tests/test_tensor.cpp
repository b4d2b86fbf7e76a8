// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "quad2lin/finite_diff.hpp"
#include "quad2lin/ops.hpp"
#include "quad2lin/rng.hpp"

using namespace q2l;
using D = double;
using VarD = Var<D>;
using TapeD = Tape<D>;

namespace {

Tensor<D> rand_pm2(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor<D>::uniform(std::move(s), rng, -2.0, 2.0);
}

/// Weighted-sum scalarization so every output element carries a distinct gradient.
VarD weighted_sum(TapeD& tp, VarD y, std::uint64_t seed) {
  Rng rng(seed);
  return ops::sum(ops::mul(y, tp.constant(Tensor<D>::uniform(y.shape(), rng, -1.0, 1.0))));
}

}  // namespace

TEST_CASE("matmul matches hand arithmetic") {
  TapeD tp;
  auto eye = tp.constant(Tensor<D>::matrix({{1, 0}, {0, 1}}));
  auto col = tp.constant(Tensor<D>::matrix({{3}, {7}}));
  CHECK(ops::matmul(eye, col).value().bit_equal(Tensor<D>::matrix({{3}, {7}})));
  auto a = tp.constant(Tensor<D>::matrix({{1, 2}, {3, 4}}));
  auto ones = tp.constant(Tensor<D>::matrix({{1}, {1}}));
  CHECK(ops::matmul(a, ones).value().bit_equal(Tensor<D>::matrix({{3}, {7}})));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  TapeD tp;
  auto a = tp.constant(Tensor<D>(Shape{2, 3}));
  auto b = tp.constant(Tensor<D>(Shape{2, 3}));
  try {
    ops::matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3] x [2x3]") != std::string::npos);
  }
}

TEST_CASE("gradient of sum(A*B) w.r.t. A is ones * B^T") {
  const auto a0 = rand_pm2({3, 4}, 1);
  const auto b0 = rand_pm2({4, 2}, 2);
  TapeD tp;
  auto a = tp.leaf(a0);
  auto b = tp.constant(b0);
  tp.backward(ops::sum(ops::matmul(a, b)));
  Tensor<D> expected(Shape{3, 4});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) expected.at(i, k) = b0.at(k, 0) + b0.at(k, 1);
  CHECK(max_abs_diff(a.grad(), expected) < 1e-14);
  const auto fd = finite_diff_grad<D>(
      [&](const Tensor<D>& probe) {
        TapeD t(false);
        return ops::sum(ops::matmul(t.constant(probe), t.constant(b0))).value().item();
      },
      a0);
  CHECK(relative_error(a.grad(), fd) < 1e-8);
}

TEST_CASE("softmax_rows closed forms") {
  TapeD tp;
  auto p = ops::softmax_rows(tp.constant(Tensor<D>::matrix({{0, 0}}))).value();
  CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-15));
  p = ops::softmax_rows(tp.constant(Tensor<D>::matrix({{1, 1, 1}}))).value();
  for (int i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  p = ops::softmax_rows(tp.constant(Tensor<D>::matrix({{0, std::log(3.0)}}))).value();
  CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-14));
}

TEST_CASE("softmax_rows rows sum to one and ignore row shifts") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto x = rand_pm2({5, 7}, seed);
    for (auto& v : x.span()) v *= 20.0;
    TapeD tp;
    auto p = ops::softmax_rows(tp.constant(x)).value();
    auto shifted = x;
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 7; ++j) shifted.at(i, j) += 3.0 * static_cast<double>(i) - 11.0;
    auto ps = ops::softmax_rows(tp.constant(shifted)).value();
    for (std::size_t i = 0; i < 5; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 7; ++j) s += p.at(i, j);
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
    CHECK(max_abs_diff(p, ps) < 1e-6);
  }
}

TEST_CASE("softmax_rows rejects NaN") {
  TapeD tp;
  auto x = tp.constant(Tensor<D>::matrix({{0.0, std::nan("")}}));
  CHECK_THROWS_AS(ops::softmax_rows(x), NumericError);
}

TEST_CASE("causal_depthwise_conv examples") {
  const std::size_t steps = 4, c = 3;
  auto x0 = rand_pm2({steps, c}, 7);
  TapeD tp;
  auto x = tp.constant(x0);
  auto zero_bias = tp.constant(Tensor<D>(Shape{c}));

  Tensor<D> last_tap(Shape{4, c});
  for (std::size_t ch = 0; ch < c; ++ch) last_tap.at(3, ch) = 1.0;
  CHECK(ops::causal_depthwise_conv(x, tp.constant(last_tap), zero_bias).value().bit_equal(x0));

  Tensor<D> first_tap(Shape{4, c});
  for (std::size_t ch = 0; ch < c; ++ch) first_tap.at(0, ch) = 1.0;
  auto shifted = ops::causal_depthwise_conv(x, tp.constant(first_tap), zero_bias).value();
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t ch = 0; ch < c; ++ch) CHECK(shifted.at(t, ch) == (t < 3 ? 0.0 : x0.at(t - 3, ch)));

  auto bias = Tensor<D>::vector({0.5, -1.0, 2.0});
  auto out = ops::causal_depthwise_conv(tp.constant(Tensor<D>(Shape{steps, c})), tp.constant(rand_pm2({4, c}, 3)),
                                        tp.constant(bias))
                 .value();
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t ch = 0; ch < c; ++ch) CHECK(out.at(t, ch) == bias[ch]);

  CHECK_THROWS_AS(ops::causal_depthwise_conv(x, tp.constant(Tensor<D>(Shape{4, c + 1})), zero_bias),
                  DimensionError);
}

TEST_CASE("causal_depthwise_conv never reads the future") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t steps = 6 + rng.below(10), c = 1 + rng.below(5), w = 1 + rng.below(5);
    auto x0 = Tensor<D>::uniform(Shape{steps, c}, rng, -2, 2);
    auto ker = Tensor<D>::uniform(Shape{w, c}, rng, -2, 2);
    auto bias = Tensor<D>::uniform(Shape{c}, rng, -2, 2);
    const std::size_t cut = rng.below(steps);
    auto x1 = x0;
    for (std::size_t t = cut + 1; t < steps; ++t)
      for (std::size_t ch = 0; ch < c; ++ch) x1.at(t, ch) = 0.0;
    TapeD tp;
    auto y0 = ops::causal_depthwise_conv(tp.constant(x0), tp.constant(ker), tp.constant(bias)).value();
    auto y1 = ops::causal_depthwise_conv(tp.constant(x1), tp.constant(ker), tp.constant(bias)).value();
    CHECK(y0.slice_rows(0, cut + 1).bit_equal(y1.slice_rows(0, cut + 1)));
  }
}

TEST_CASE("backward basics") {
  {
    TapeD tp;
    auto x = tp.leaf(rand_pm2({2, 3}, 5));
    tp.backward(ops::sum(x));
    CHECK(x.grad().bit_equal(Tensor<D>::ones({2, 3})));
  }
  {
    TapeD tp;
    auto x = tp.leaf(Tensor<D>::vector({1, 2, 3}));
    tp.backward(ops::sum(ops::mul(x, x)));
    CHECK(x.grad().bit_equal(Tensor<D>::vector({2, 4, 6})));
  }
  {
    TapeD tp;
    auto x = tp.leaf(Tensor<D>::vector({1, 2, 3}));
    CHECK_THROWS_AS(tp.backward(ops::mul(x, x)), ContractError);
  }
}

TEST_CASE("finite_diff_grad basics") {
  auto g = finite_diff_grad<D>([](const Tensor<D>& x) {
    double s = 0;
    for (auto v : x.span()) s += v;
    return s;
  }, rand_pm2({3, 2}, 9));
  for (auto v : g.span()) CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
  auto g2 = finite_diff_grad<D>([](const Tensor<D>& x) { return x[0] * x[0]; }, Tensor<D>::vector({3.0}));
  CHECK(std::abs(g2[0] - 6.0) < 1e-8);
}

TEST_CASE("parameter gradients accumulate across fan-out and frozen parameters stay untouched") {
  Parameter<D> p("p", Tensor<D>::vector({1.0, -2.0}));
  Parameter<D> frozen("f", Tensor<D>::vector({3.0, 4.0}));
  frozen.frozen = true;
  TapeD tp;
  auto a = tp.param(p);
  auto b = tp.param(p);
  auto f = tp.param(frozen);
  tp.backward(ops::sum(ops::add(ops::mul(a, f), ops::mul(b, b))));
  CHECK(p.grad.bit_equal(Tensor<D>::vector({3.0 + 2.0, 4.0 - 4.0})));
  CHECK(frozen.grad.empty());
}

TEST_CASE("every differentiable op passes the finite-difference oracle") {
  using Build = std::function<VarD(TapeD&, VarD)>;
  struct Case {
    const char* name;
    Shape shape;
    Build build;
  };
  auto other = [](Shape s) { return rand_pm2(std::move(s), 4242); };
  const std::vector<std::int32_t> ids = {2, 0, 2, 1};
  const std::vector<std::int32_t> targets = {1, -1, 4, 0};
  const std::vector<std::size_t> a_rows = {0, 3}, b_rows = {1, 2, 4};
  const std::vector<std::uint8_t> mask = {1, 0, 1};
  std::vector<Case> cases = {
      {"matmul.lhs", {3, 4}, [&](TapeD& t, VarD x) { return ops::matmul(x, t.constant(other({4, 2}))); }},
      {"matmul.rhs", {4, 2}, [&](TapeD& t, VarD x) { return ops::matmul(t.constant(other({3, 4})), x); }},
      {"add", {3, 3}, [&](TapeD& t, VarD x) { return ops::add(x, t.constant(other({3, 3}))); }},
      {"sub", {3, 3}, [&](TapeD& t, VarD x) { return ops::sub(t.constant(other({3, 3})), x); }},
      {"mul", {3, 3}, [&](TapeD& t, VarD x) { return ops::mul(x, x); }},
      {"add_row.row", {4}, [&](TapeD& t, VarD x) { return ops::add_row(t.constant(other({3, 4})), x); }},
      {"mul_row.a", {3, 4}, [&](TapeD& t, VarD x) { return ops::mul_row(x, t.constant(other({4}))); }},
      {"mul_row.row", {4}, [&](TapeD& t, VarD x) { return ops::mul_row(t.constant(other({3, 4})), x); }},
      {"scale", {2, 3}, [&](TapeD&, VarD x) { return ops::scale(x, -1.7); }},
      {"add_scalar", {2, 3}, [&](TapeD&, VarD x) { return ops::mul(ops::add_scalar(x, 0.3), x); }},
      {"exp", {2, 3}, [&](TapeD&, VarD x) { return ops::exp(x); }},
      {"log", {2, 3}, [&](TapeD&, VarD x) { return ops::log(ops::add_scalar(ops::square(x), 0.5)); }},
      {"softplus", {2, 3}, [&](TapeD&, VarD x) { return ops::softplus(x); }},
      {"sigmoid", {2, 3}, [&](TapeD&, VarD x) { return ops::sigmoid(x); }},
      {"silu", {2, 3}, [&](TapeD&, VarD x) { return ops::silu(x); }},
      {"gelu", {2, 3}, [&](TapeD&, VarD x) { return ops::gelu(x); }},
      {"transpose", {2, 3}, [&](TapeD&, VarD x) { return ops::transpose(x); }},
      {"reshape", {2, 3}, [&](TapeD&, VarD x) { return ops::reshape(x, Shape{3, 2}); }},
      {"slice_rows", {4, 3}, [&](TapeD&, VarD x) { return ops::slice_rows(x, 1, 3); }},
      {"slice_cols", {3, 5}, [&](TapeD&, VarD x) { return ops::slice_cols(x, 1, 4); }},
      {"concat_cols", {3, 2},
       [&](TapeD& t, VarD x) {
         const VarD parts[] = {x, t.constant(other({3, 1})), ops::square(x)};
         return ops::concat_cols<D>(parts);
       }},
      {"concat_rows", {2, 3},
       [&](TapeD& t, VarD x) {
         const VarD parts[] = {t.constant(other({1, 3})), x};
         return ops::concat_rows<D>(parts);
       }},
      {"gather_rows", {3, 4}, [&](TapeD&, VarD x) { return ops::gather_rows<D>(x, ids); }},
      {"interleave_rows", {2, 3},
       [&](TapeD& t, VarD x) { return ops::interleave_rows<D>(x, a_rows, t.constant(other({3, 3})), b_rows, 5); }},
      {"sum_rows", {3, 4}, [&](TapeD&, VarD x) { return ops::sum_rows(x); }},
      {"mean_rows", {3, 4}, [&](TapeD&, VarD x) { return ops::mean_rows(x); }},
      {"mean", {3, 4}, [&](TapeD&, VarD x) { return ops::mean(ops::square(x)); }},
      {"rms_norm.x", {3, 5}, [&](TapeD& t, VarD x) { return ops::rms_norm(x, t.constant(other({5}))); }},
      {"rms_norm.w", {5}, [&](TapeD& t, VarD x) { return ops::rms_norm(t.constant(other({3, 5})), x); }},
      {"group_rms_norm", {3, 6}, [&](TapeD&, VarD x) { return ops::group_rms_norm(x, 3); }},
      {"conv.x", {6, 3},
       [&](TapeD& t, VarD x) {
         return ops::causal_depthwise_conv(x, t.constant(other({4, 3})), t.constant(other({3})));
       }},
      {"conv.kernel", {4, 3},
       [&](TapeD& t, VarD x) {
         return ops::causal_depthwise_conv(t.constant(other({6, 3})), x, t.constant(other({3})));
       }},
      {"conv.bias", {3},
       [&](TapeD& t, VarD x) {
         return ops::causal_depthwise_conv(t.constant(other({6, 3})), t.constant(other({2, 3})), x);
       }},
      {"softmax_rows", {3, 4}, [&](TapeD&, VarD x) { return ops::softmax_rows(x); }},
      {"log_softmax_rows", {3, 4}, [&](TapeD&, VarD x) { return ops::log_softmax_rows(x); }},
      {"mse", {3, 4}, [&](TapeD& t, VarD x) { return ops::mse(x, t.constant(other({3, 4}))); }},
      {"cross_entropy", {4, 5}, [&](TapeD&, VarD x) { return ops::cross_entropy<D>(x, targets); }},
      {"kl.student", {3, 5},
       [&](TapeD& t, VarD x) { return ops::kl_div_logits<D>(t.constant(other({3, 5})), x, 1.0, mask); }},
      {"kl.teacher", {3, 5},
       [&](TapeD& t, VarD x) { return ops::kl_div_logits<D>(x, t.constant(other({3, 5})), 2.0, {}); }},
  };
  for (const auto& c : cases) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const Build scalarized = [&](TapeD& t, VarD x) {
        VarD y = c.build(t, x);
        return y.value().numel() == 1 ? y : weighted_sum(t, y, 99 + seed);
      };
      const double err = gradient_check<D>(scalarized, rand_pm2(c.shape, 100 + seed));
      INFO(c.name << " seed " << seed);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("reshape and transpose round-trip bit-identically") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto x = rand_pm2({3 + seed % 4, 2 + seed % 3}, seed);
    CHECK(x.transposed().transposed().bit_equal(x));
    CHECK(x.reshaped({x.numel()}).reshaped(x.shape()).bit_equal(x));
  }
}

TEST_CASE("raw serialization round trip and corruption") {
  auto x = rand_pm2({3, 5}, 17).cast<float>();
  std::stringstream ss;
  write_raw(ss, x);
  auto y = read_raw<float>(ss);
  CHECK(y.bit_equal(x));
  auto bytes = to_bytes(x);
  CHECK(bytes.size() == 8 + 2 * 8 + 15 * 4);
  CHECK(from_bytes<float>(bytes).bit_equal(x));
  bytes.pop_back();
  CHECK_THROWS_AS(from_bytes<float>(bytes), CorruptionError);
}

TEST_CASE("rng is deterministic and seeds differ") {
  Rng a(5), b(5), c(6);
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next_u64();
    CHECK(va == b.next_u64());
    CHECK(va != c.next_u64());
  }
  Rng n(1);
  double mean = 0, sq = 0;
  for (int i = 0; i < 20000; ++i) {
    const double v = n.normal();
    mean += v;
    sq += v * v;
  }
  mean /= 20000;
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(sq / 20000 - 1.0) < 0.05);
}
