// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <fstream>
#include <iterator>

#include "quad2lin/checkpoint.hpp"
#include "quad2lin/harness.hpp"

namespace q2l {

BenchSpec::BenchSpec() {
  model.layers = 4;
  model.model_dim = 32;
  model.heads = 2;
  model.groups = 1;
  model.head_dim = 16;
  model.mlp_dim = 64;
  model.vocab = vocab::kSize;
}

ModelConfig BenchSpec::sized_model() const {
  ModelConfig m = model;
  const std::size_t longest = lengths.empty() ? 0 : lengths.back();
  m.max_pos = std::max(m.max_pos, longest + (options.warmup + options.reps) * options.decode_tokens);
  return m;
}

HybridPlan PlanSpec::resolve(std::size_t layers) const {
  if (n_attention > layers) throw ConfigError("exceeds the number of layers", "plan.n_attention");
  HybridStrategy s;
  try {
    s = parse_hybrid_strategy(strategy);
  } catch (const ConfigError& e) {
    throw ConfigError(e.message(), "plan.strategy");
  }
  try {
    return hybrid_plan(layers, n_attention, s);
  } catch (const ConfigError& e) {
    throw ConfigError(e.message(), "plan.n_attention");
  }
}

const StageConfig& ExperimentConfig::stage(int s) const {
  switch (s) {
    case 0: return teacher;
    case 1: return stage1;
    case 2: return stage2;
    case 3: return stage3;
    default: throw ConfigError("stage must be 0, 1, 2 or 3", "stage");
  }
}

namespace {

const char* stage_key(int s) {
  static const char* kKeys[] = {"teacher", "stage1", "stage2", "stage3"};
  return kKeys[s];
}

template <typename F>
void prefixed(const std::string& prefix, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    throw ConfigError(e.message(), e.field().empty() ? prefix : prefix + "." + e.field());
  }
}

template <typename V>
std::vector<V> read_array(const Json& j, const std::string& field) {
  if (!j.is_array()) throw ConfigError("expected an array", field);
  std::vector<V> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& v = j[i];
    const std::string f = field + "[" + std::to_string(i) + "]";
    if constexpr (std::is_unsigned_v<V>) {
      if (!v.is_number_unsigned()) throw ConfigError("expected a non-negative integer", f);
    } else {
      if (!v.is_number_integer()) throw ConfigError("expected an integer", f);
    }
    out.push_back(v.get<V>());
  }
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  prefixed("model", [&] { model.validate(); });
  prefixed("task", [&] { task.validate(); });
  if (model.vocab < static_cast<std::size_t>(vocab::kSize))
    throw ConfigError("must be at least " + std::to_string(vocab::kSize) + " for the task vocabulary", "model.vocab");
  if (model.image_side != task.image_side) throw ConfigError("must equal model.image_side", "task.image_side");
  if (model.patch != task.patch) throw ConfigError("must equal model.patch", "task.patch");
  if (model.channels != task.channels) throw ConfigError("must equal model.channels", "task.channels");
  if (task.max_pos > model.max_pos) throw ConfigError("must not exceed model.max_pos", "task.max_pos");
  if (mix.caption < 0 || mix.recall < 0 || mix.caption + mix.recall <= 0)
    throw ConfigError("weights must be non-negative with a positive sum", "mix");
  for (int s = 0; s <= 3; ++s) prefixed(stage_key(s), [&] { stage(s).validate(); });
  plan.resolve(model.layers);
  if (eval.samples == 0) throw ConfigError("must be positive", "eval.samples");
  for (std::size_t i = 1; i < bench.lengths.size(); ++i)
    if (bench.lengths[i] <= bench.lengths[i - 1]) throw ConfigError("must be strictly increasing", "bench.lengths");
  if (bench.options.reps == 0) throw ConfigError("must be positive", "bench.reps");
  if (bench.options.decode_tokens == 0) throw ConfigError("must be positive", "bench.decode_tokens");
  prefixed("bench.model", [&] { bench.model.validate(); });
  if (ablate.seeds.empty()) throw ConfigError("must not be empty", "ablate.seeds");
  for (auto n : ablate.n_attention)
    if (n > model.layers) throw ConfigError("entries must not exceed model.layers", "ablate.n_attention");
  if (ablate.strategy_n_attention == 0 || ablate.strategy_n_attention > model.layers ||
      model.layers % ablate.strategy_n_attention != 0)
    throw ConfigError("must divide model.layers", "ablate.strategy_n_attention");
  if (ablate.stages.empty()) throw ConfigError("must not be empty", "ablate.stages");
  for (int s : ablate.stages)
    if (s < 1 || s > 3) throw ConfigError("entries must be 1, 2 or 3", "ablate.stages");
  for (const auto& subset : ablate.stage_subsets)
    if (subset != "1" && subset != "2" && subset != "3" && subset != "1+2" && subset != "1+3" && subset != "2+3" &&
        subset != "1+2+3")
      throw ConfigError("unknown stage subset '" + subset + "'", "ablate.stage_subsets");
  if (dtype != "float32" && dtype != "float64") throw ConfigError("must be float32 or float64", "dtype");
}

Json stage_to_json(const StageConfig& s) {
  return Json{{"lr", s.lr},
              {"steps", s.steps},
              {"batch", s.batch},
              {"weight_decay", s.weight_decay},
              {"clip_norm", s.clip_norm},
              {"warmup_frac", s.warmup_frac},
              {"decay_frac", s.decay_frac},
              {"beta1", s.beta1},
              {"beta2", s.beta2},
              {"eps", s.eps},
              {"kl_temperature", s.kl_temperature},
              {"kl_answer_only", s.kl_answer_only},
              {"include_w_o", s.include_w_o},
              {"train_preserved_attention", s.train_preserved_attention},
              {"scan_chunk", s.scan_chunk}};
}

StageConfig stage_config_from_json(const Json& j, const std::string& path, int stage) {
  StageConfig s = StageConfig::defaults(stage);
  JsonReader r(j, path);
  r.get("lr", s.lr);
  r.get("steps", s.steps);
  r.get("batch", s.batch);
  r.get("weight_decay", s.weight_decay);
  r.get("clip_norm", s.clip_norm);
  r.get("warmup_frac", s.warmup_frac);
  r.get("decay_frac", s.decay_frac);
  r.get("beta1", s.beta1);
  r.get("beta2", s.beta2);
  r.get("eps", s.eps);
  r.get("kl_temperature", s.kl_temperature);
  r.get("kl_answer_only", s.kl_answer_only);
  r.get("include_w_o", s.include_w_o);
  r.get("train_preserved_attention", s.train_preserved_attention);
  r.get("scan_chunk", s.scan_chunk);
  r.finish();
  prefixed(path, [&] { s.validate(); });
  return s;
}

Json to_json(const ExperimentConfig& c) {
  Json bench{{"lengths", c.bench.lengths},
             {"reps", c.bench.options.reps},
             {"warmup", c.bench.options.warmup},
             {"decode_tokens", c.bench.options.decode_tokens},
             {"memory_limit_bytes", c.bench.options.memory_limit_bytes},
             {"allow_beyond_max_pos", c.bench.options.allow_beyond_max_pos},
             {"seed", c.bench.options.seed},
             {"model", to_json(c.bench.model)}};
  Json ablate{{"seeds", c.ablate.seeds},
              {"n_attention", c.ablate.n_attention},
              {"strategy_n_attention", c.ablate.strategy_n_attention},
              {"stages", c.ablate.stages},
              {"stage_subsets", c.ablate.stage_subsets}};
  return Json{{"seed", c.seed},
              {"model", to_json(c.model)},
              {"task", to_json(c.task)},
              {"mix", Json{{"caption", c.mix.caption}, {"recall", c.mix.recall}}},
              {"train_set_size", c.train_set_size},
              {"teacher", stage_to_json(c.teacher)},
              {"stage1", stage_to_json(c.stage1)},
              {"stage2", stage_to_json(c.stage2)},
              {"stage3", stage_to_json(c.stage3)},
              {"seed_config", to_json(c.seeding)},
              {"init", to_string(c.init)},
              {"plan", Json{{"strategy", c.plan.strategy}, {"n_attention", c.plan.n_attention}}},
              {"eval", Json{{"samples", c.eval.samples}, {"seed", c.eval.seed}}},
              {"bench", bench},
              {"ablate", ablate},
              {"dtype", c.dtype}};
}

ExperimentConfig experiment_config_from_json(const Json& j) {
  ExperimentConfig c;
  JsonReader r(j, "");
  r.get("seed", c.seed);
  if (const Json* m = r.child("model")) c.model = model_config_from_json(*m, "model");
  if (const Json* t = r.child("task")) c.task = task_config_from_json(*t, "task");
  if (const Json* m = r.child("mix")) {
    JsonReader mr(*m, "mix");
    mr.get("caption", c.mix.caption);
    mr.get("recall", c.mix.recall);
    mr.finish();
  }
  r.get("train_set_size", c.train_set_size);
  for (int s = 0; s <= 3; ++s) {
    if (const Json* sj = r.child(stage_key(s))) {
      const auto parsed = stage_config_from_json(*sj, stage_key(s), s);
      (s == 0 ? c.teacher : s == 1 ? c.stage1 : s == 2 ? c.stage2 : c.stage3) = parsed;
    }
  }
  if (const Json* s = r.child("seed_config")) c.seeding = seed_config_from_json(*s, "seed_config");
  std::string init = to_string(c.init);
  r.get("init", init);
  prefixed("init", [&] { c.init = parse_init_strategy(init); });
  if (const Json* p = r.child("plan")) {
    JsonReader pr(*p, "plan");
    pr.get("strategy", c.plan.strategy);
    pr.get("n_attention", c.plan.n_attention);
    pr.finish();
  }
  if (const Json* e = r.child("eval")) {
    JsonReader er(*e, "eval");
    er.get("samples", c.eval.samples);
    er.get("seed", c.eval.seed);
    er.finish();
  }
  if (const Json* b = r.child("bench")) {
    JsonReader br(*b, "bench");
    if (const Json* l = br.child("lengths")) c.bench.lengths = read_array<std::size_t>(*l, "bench.lengths");
    br.get("reps", c.bench.options.reps);
    br.get("warmup", c.bench.options.warmup);
    br.get("decode_tokens", c.bench.options.decode_tokens);
    br.get("memory_limit_bytes", c.bench.options.memory_limit_bytes);
    br.get("allow_beyond_max_pos", c.bench.options.allow_beyond_max_pos);
    br.get("seed", c.bench.options.seed);
    if (const Json* m = br.child("model")) c.bench.model = model_config_from_json(*m, "bench.model");
    br.finish();
  }
  if (const Json* a = r.child("ablate")) {
    JsonReader ar(*a, "ablate");
    if (const Json* s = ar.child("seeds")) c.ablate.seeds = read_array<std::uint64_t>(*s, "ablate.seeds");
    if (const Json* n = ar.child("n_attention")) c.ablate.n_attention = read_array<std::size_t>(*n, "ablate.n_attention");
    ar.get("strategy_n_attention", c.ablate.strategy_n_attention);
    if (const Json* s = ar.child("stages")) c.ablate.stages = read_array<int>(*s, "ablate.stages");
    if (const Json* s = ar.child("stage_subsets")) {
      if (!s->is_array()) throw ConfigError("expected an array", "ablate.stage_subsets");
      for (std::size_t i = 0; i < s->size(); ++i) {
        if (!(*s)[i].is_string())
          throw ConfigError("expected a string", "ablate.stage_subsets[" + std::to_string(i) + "]");
        c.ablate.stage_subsets.push_back((*s)[i].get<std::string>());
      }
    }
    ar.finish();
  }
  r.get("dtype", c.dtype);
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file", path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what(), path.string());
  }
  return experiment_config_from_json(j);
}

bool apply_env_overrides(ExperimentConfig& c) {
  const char* v = std::getenv("QUAD2LIN_SEED");
  if (!v || !*v) return false;
  const std::string s(v);
  if (s.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError("must be an unsigned 64-bit integer", "QUAD2LIN_SEED");
  try {
    c.seed = std::stoull(s);
  } catch (const std::exception&) {
    throw ConfigError("must be an unsigned 64-bit integer", "QUAD2LIN_SEED");
  }
  return true;
}

Json RunManifest::to_json() const {
  return Json{{"command", command},
              {"config_hash", config_hash},
              {"seed", seed},
              {"provenance", provenance},
              {"checkpoint_hash", checkpoint_hash},
              {"metrics_hash", metrics_hash}};
}

RunManifest RunManifest::from_json(const Json& j) {
  RunManifest m;
  JsonReader r(j, "run");
  r.get("command", m.command);
  r.get("config_hash", m.config_hash);
  r.get("seed", m.seed);
  if (const Json* p = r.child("provenance")) {
    if (!p->is_array()) throw ConfigError("expected an array", "run.provenance");
    m.provenance = p->get<std::vector<std::string>>();
  }
  r.get("checkpoint_hash", m.checkpoint_hash);
  r.get("metrics_hash", m.metrics_hash);
  r.finish();
  return m;
}

void RunManifest::write(const std::filesystem::path& file) const {
  std::ofstream out(file);
  out << to_json().dump(1) << '\n';
  if (!out) throw std::runtime_error("cannot write " + file.string());
}

RunManifest RunManifest::read(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open run manifest", file.string());
  try {
    return from_json(Json::parse(in));
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what(), file.string());
  }
}

std::string config_hash(const ExperimentConfig& c) { return sha1_hex(to_json(c).dump()); }

std::string file_sha1(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return sha1_hex(bytes);
}

}  // namespace q2l
