// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "quad2lin/data.hpp"
#include "quad2lin/rng.hpp"

using namespace q2l;

namespace {

bool same(const Sample& a, const Sample& b) {
  return a.task == b.task && a.tokens == b.tokens && a.loss_mask == b.loss_mask && a.image.shape() == b.image.shape() &&
         a.image.bit_equal(b.image);
}

}  // namespace

TEST_CASE("vocab") {
  CHECK(vocab::kSize == 39);
  std::set<std::string> names;
  for (std::int32_t id = 0; id < vocab::kSize; ++id) names.insert(vocab::token_name(id));
  CHECK(names.size() == static_cast<std::size_t>(vocab::kSize));
  CHECK(vocab::token_name(vocab::kValue0 + 3) == "v3");
  CHECK_THROWS_AS(vocab::token_name(vocab::kSize), ContractError);
  CHECK(parse_task_kind("caption") == TaskKind::kCaption);
  CHECK_THROWS_AS(parse_task_kind("vqa"), ConfigError);
}

TEST_CASE("task config validation") {
  TaskConfig c;
  c.validate();
  c.patch = 3;
  try {
    c.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "patch");
  }
  c = TaskConfig{};
  c.n_pairs = 9;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TaskConfig{};
  c.n_pairs = 8;
  c.max_pos = 20;
  CHECK_THROWS_AS(gen_recall_task(1, c), ConfigError);
}

TEST_CASE("caption task") {
  TaskConfig cfg;
  cfg.max_cells = 0;
  auto s = gen_caption_task(5, cfg);
  CHECK(s.answer_count() == 1);
  CHECK(s.tokens == std::vector<std::int32_t>{vocab::kBos, vocab::kImgStart, kPatchSlot, kPatchSlot, kPatchSlot,
                                              kPatchSlot, vocab::kImgEnd, vocab::kEmpty, vocab::kEos});
  CHECK(s.image.max_abs() == 0.0);

  cfg = TaskConfig{};
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto a = gen_caption_task(seed, cfg);
    CHECK(same(a, gen_caption_task(seed, cfg)));
    CHECK(a.tokens.size() <= cfg.max_pos);
    CHECK(a.tokens.size() == a.loss_mask.size());
    // Decode the caption back into an image and compare with the drawn one.
    Tensor<double> img(Shape{4, 4, 3});
    std::size_t t = 7, cells = 0;
    if (a.tokens[t] == vocab::kEmpty) {
      ++t;
    } else {
      while (a.tokens[t] != vocab::kEos) {
        const auto rgb = vocab::color_rgb(a.tokens[t] - vocab::kColor0);
        const std::size_t r = static_cast<std::size_t>(a.tokens[t + 1] - vocab::kDigit0);
        const std::size_t c = static_cast<std::size_t>(a.tokens[t + 2] - vocab::kDigit0);
        for (std::size_t k = 0; k < 3; ++k) img[(r * 4 + c) * 3 + k] = rgb[k];
        CHECK(a.loss_mask[t]);
        t += 3;
        ++cells;
      }
    }
    CHECK(cells <= cfg.max_cells);
    CHECK(t == a.tokens.size() - 1);
    CHECK(img.bit_equal(a.image));
    CHECK(a.answer_count() == std::max<std::size_t>(1, 3 * cells));
  }
}

TEST_CASE("recall task") {
  TaskConfig cfg;
  cfg.n_pairs = 1;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto s = gen_recall_task(seed, cfg);
    REQUIRE(s.tokens.size() == 7);
    CHECK(s.tokens[4] == s.tokens[1]);
    CHECK(s.tokens[5] == s.tokens[2]);
    CHECK(s.answer_count() == 1);
    CHECK(s.loss_mask[5]);
    CHECK(s.image.empty());
  }
  cfg.n_pairs = 6;
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    auto s = gen_recall_task(seed, cfg);
    REQUIRE(s.tokens.size() == 2 * 6 + 5);
    const auto query = s.tokens[2 * 6 + 2];
    std::set<std::int32_t> keys;
    std::int32_t expect = -1;
    for (std::size_t i = 0; i < 6; ++i) {
      keys.insert(s.tokens[1 + 2 * i]);
      if (s.tokens[1 + 2 * i] == query) expect = s.tokens[2 + 2 * i];
    }
    CHECK(keys.size() == 6);
    CHECK(expect == s.tokens[2 * 6 + 3]);
    auto tg = s.targets();
    auto pm = s.prediction_mask();
    CHECK(tg[2 * 6 + 2] == expect);
    CHECK(std::count(pm.begin(), pm.end(), 1) == 1);
  }
}

TEST_CASE("untrained model is at chance on recall") {
  ModelConfig mc;
  mc.layers = 2;
  mc.model_dim = 16;
  mc.heads = 2;
  mc.groups = 1;
  mc.head_dim = 8;
  mc.mlp_dim = 32;
  mc.vocab = vocab::kSize;
  mc.max_pos = 32;
  auto model = build_teacher<double>(mc, 77);
  TaskConfig cfg;
  auto eval = make_eval_set(TaskKind::kRecall, 3, 1000, cfg);
  const auto cand = answer_candidates(TaskKind::kRecall);
  std::size_t hits = 0;
  for (const auto& s : eval) {
    auto lg = logits(model, to_model_input<double>(s, cfg.patch));
    auto tg = s.targets();
    for (std::size_t t = 0; t < tg.size(); ++t) {
      if (tg[t] < 0) continue;
      auto best = *std::max_element(cand.begin(), cand.end(), [&](auto a, auto b) {
        return lg.at(t, static_cast<std::size_t>(a)) < lg.at(t, static_cast<std::size_t>(b));
      });
      hits += best == tg[t];
    }
  }
  const double p = 1.0 / 8, mean = 1000 * p, sigma = std::sqrt(1000 * p * (1 - p));
  CHECK(std::abs(static_cast<double>(hits) - mean) <= 3 * sigma);
}

TEST_CASE("patchify") {
  Rng rng(4);
  auto img = Tensor<double>::uniform({4, 4, 3}, rng, 0.0, 1.0);
  auto one = patchify(img, 4);
  CHECK(one.shape() == Shape{1, 48});
  CHECK(std::equal(one.storage().begin(), one.storage().end(), img.storage().begin()));

  auto p = patchify(img, 2);
  CHECK(p.shape() == Shape{4, 12});
  // Patch 1 is the top-right 2x2 block.
  CHECK(p.at(1, 0) == img[(0 * 4 + 2) * 3 + 0]);
  CHECK(p.at(1, 6) == img[(1 * 4 + 2) * 3 + 0]);
  CHECK(p.at(2, 0) == img[(2 * 4 + 0) * 3 + 0]);
  CHECK(unpatchify(p, 4, 2, 3).bit_equal(img));
  CHECK(unpatchify(patchify(img, 1), 4, 1, 3).bit_equal(img));

  Tensor<double> flat(Shape{4, 4, 3}, 0.25);
  auto fp = patchify(flat, 2);
  for (std::size_t r = 1; r < 4; ++r) CHECK(std::equal(fp.row(r).begin(), fp.row(r).end(), fp.row(0).begin()));
  CHECK_THROWS_AS(patchify(img, 3), ConfigError);

  auto s = gen_caption_task(9, TaskConfig{});
  auto in = to_model_input<float>(s, 2);
  CHECK(in.patches.shape() == Shape{4, 12});
  CHECK(std::count(in.tokens.begin(), in.tokens.end(), kPatchSlot) == 4);
}

TEST_CASE("batch stream") {
  TaskConfig cfg;
  std::size_t n = 0;
  BatchStream one(TaskMix{}, cfg, 1, 1, 7);
  while (one.next()) ++n;
  CHECK(n == 7);
  CHECK(one.produced() == 7);

  BatchStream a(TaskMix{0.5, 0.5}, cfg, 42, 8, 5), b(TaskMix{0.5, 0.5}, cfg, 42, 8, 5);
  std::set<TaskKind> kinds;
  while (auto ba = a.next()) {
    auto bb = b.next();
    REQUIRE(bb);
    CHECK(ba->padded_tokens == bb->padded_tokens);
    CHECK(ba->padded_masks == bb->padded_masks);
    for (std::size_t j = 0; j < ba->samples.size(); ++j) {
      const auto& s = ba->samples[j];
      kinds.insert(s.task);
      CHECK(same(s, bb->samples[j]));
      for (std::size_t t = s.tokens.size(); t < ba->padded_tokens[j].size(); ++t) {
        CHECK(ba->padded_tokens[j][t] == vocab::kPad);
        CHECK(ba->padded_masks[j][t] == 0);
      }
    }
  }
  CHECK_FALSE(b.next());
  CHECK(kinds.size() == 2);
  CHECK_THROWS_AS(BatchStream(TaskMix{0, 0}, cfg, 1, 1, 1), ConfigError);
}

TEST_CASE("jsonl dump") {
  std::vector<Sample> v{gen_caption_task(1, TaskConfig{}), gen_recall_task(2, TaskConfig{})};
  std::ostringstream os;
  dump_jsonl(os, v);
  std::istringstream is(os.str());
  std::string line;
  std::size_t i = 0;
  while (std::getline(is, line)) {
    auto j = nlohmann::json::parse(line);
    CHECK(j["tokens"].get<std::vector<std::int32_t>>() == v[i].tokens);
    CHECK(j["mask"].size() == v[i].loss_mask.size());
    CHECK(j.contains("image") == !v[i].image.empty());
    ++i;
  }
  CHECK(i == 2);
}
