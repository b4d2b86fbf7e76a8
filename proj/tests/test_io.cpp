// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "quad2lin/checkpoint.hpp"
#include "quad2lin/serialize.hpp"

using namespace q2l;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.layers = 4;
  c.model_dim = 8;
  c.heads = 2;
  c.groups = 1;
  c.head_dim = 4;
  c.mlp_dim = 16;
  c.vocab = 12;
  c.max_pos = 16;
  return c;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("quad2lin_test_io_" + name);
  fs::remove_all(p);
  return p;
}

std::string config_error_field(const std::string& text) {
  try {
    model_config_from_json(Json::parse(text));
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<no error>";
}

}  // namespace

TEST_CASE("sha1 known answers") {
  CHECK(sha1_hex(std::string("abc")) == "a9993e364706816aba3e25717850c26c9cd0d89d");
  CHECK(sha1_hex(std::string()) == "da39a3ee5e6b4b0d3255bfef95601890afd80709");
}

TEST_CASE("config json") {
  auto c = tiny();
  CHECK(model_config_from_json(to_json(c)) == c);
  CHECK(config_error_field(R"({"model_dim": "big"})") == "model.model_dim");
  CHECK(config_error_field(R"({"layers": -1})") == "model.layers");
  CHECK(config_error_field(R"({"laters": 3})") == "model.laters");
  CHECK(config_error_field(R"({"model_dim": 63})") == "model.model_dim");

  auto plan = hybrid_plan(8, 2, HybridStrategy::kTailInterleaved);
  CHECK(plan_from_json(to_json(plan)) == plan);
  try {
    plan_from_json(Json::parse(R"({"kinds": ["attention", "rnn"]})"));
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "plan.kinds[1]");
  }
  Mamba2Options o;
  o.fixed_gamma = 0.5;
  o.qk_scale = 0.25;
  auto back = mamba_options_from_json(to_json(o), "o");
  CHECK(back.fixed_gamma == o.fixed_gamma);
  CHECK(back.qk_scale == o.qk_scale);
  TaskConfig t;
  t.n_pairs = 7;
  CHECK(task_config_from_json(to_json(t)).n_pairs == 7);
}

TEST_CASE_TEMPLATE("checkpoint round trip", T, float, double) {
  auto teacher = build_teacher<T>(tiny(), 3);
  auto student = convert(teacher, hybrid_plan(4, 1, HybridStrategy::kHeadInterleaved), SeedConfig{},
                         InitStrategy::kInheritOnly, 9);
  student.blocks[2].mamba.options.head_norm = true;
  student.blocks[3].mamba.w_q.frozen = false;
  auto dir = scratch(std::string("rt_") + (sizeof(T) == 4 ? "f" : "d"));
  const auto hash = save_checkpoint(student, dir, {"teacher", "convert"});
  CheckpointInfo info;
  auto loaded = load_checkpoint<T>(dir, &info);
  CHECK(loaded.bit_equal(student));
  CHECK(loaded.blocks[2].mamba.options.head_norm);
  CHECK(info.kinds == student.plan.kinds);
  CHECK(info.provenance == std::vector<std::string>{"teacher", "convert"});
  CHECK(info.content_hash == hash);
  CHECK(read_checkpoint_info(dir).content_hash == hash);

  // Same model, second directory: identical bytes.
  auto dir2 = scratch(std::string("rt2_") + (sizeof(T) == 4 ? "f" : "d"));
  CHECK(save_checkpoint(loaded, dir2, {"teacher", "convert"}) == hash);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("checkpoint corruption and version skew") {
  auto model = build_teacher<double>(tiny(), 1);
  auto dir = scratch("bad");
  save_checkpoint(model, dir);
  CHECK_THROWS_AS(load_checkpoint<float>(dir), ContractError);

  const auto blob = dir / "tensors" / "3.bin";
  const auto size = fs::file_size(blob);
  fs::resize_file(blob, size - 8);
  CHECK_THROWS_AS(load_checkpoint<double>(dir), CorruptionError);

  save_checkpoint(model, dir);
  {
    std::fstream f(blob, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(size - 1));
    f.put('\x7f');
  }
  CHECK_THROWS_AS(load_checkpoint<double>(dir), CorruptionError);

  save_checkpoint(model, dir);
  fs::remove(dir / "tensors" / "0.bin");
  CHECK_THROWS_AS(load_checkpoint<double>(dir), CorruptionError);

  save_checkpoint(model, dir);
  std::ifstream in(dir / "manifest.json");
  Json j = Json::parse(in);
  in.close();
  j["version"] = kCheckpointVersion + 1;
  std::ofstream(dir / "manifest.json") << j.dump();
  CHECK_THROWS_AS(load_checkpoint<double>(dir), UnsupportedVersionError);

  std::ofstream(dir / "manifest.json") << "{not json";
  CHECK_THROWS_AS(load_checkpoint<double>(dir), CorruptionError);
  fs::remove_all(dir);
  CHECK_THROWS_AS(load_checkpoint<double>(dir), CorruptionError);
}
