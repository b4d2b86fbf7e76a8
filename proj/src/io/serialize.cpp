// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include "quad2lin/serialize.hpp"

namespace q2l {

JsonReader::JsonReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
  if (!j_.is_object()) throw ConfigError("expected a JSON object", path_.empty() ? "<root>" : path_);
}

const Json* JsonReader::find(const std::string& key) {
  seen_.insert(key);
  auto it = j_.find(key);
  return it == j_.end() || it->is_null() ? nullptr : &*it;
}

const Json* JsonReader::child(const std::string& key) { return find(key); }

void JsonReader::finish() const {
  for (auto it = j_.begin(); it != j_.end(); ++it)
    if (!seen_.count(it.key())) throw ConfigError("unknown field", field(it.key()));
}

void JsonReader::convert(const Json& v, const std::string& f, std::size_t& out) {
  if (!v.is_number_integer()) throw ConfigError("expected a non-negative integer", f);
  if (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)
    throw ConfigError("expected a non-negative integer", f);
  out = v.get<std::size_t>();
}

void JsonReader::convert(const Json& v, const std::string& f, double& out) {
  if (!v.is_number()) throw ConfigError("expected a number", f);
  out = v.get<double>();
}

void JsonReader::convert(const Json& v, const std::string& f, bool& out) {
  if (!v.is_boolean()) throw ConfigError("expected true or false", f);
  out = v.get<bool>();
}

void JsonReader::convert(const Json& v, const std::string& f, std::string& out) {
  if (!v.is_string()) throw ConfigError("expected a string", f);
  out = v.get<std::string>();
}

void JsonReader::convert(const Json& v, const std::string& f, std::optional<double>& out) {
  double d;
  convert(v, f, d);
  out = d;
}

namespace {

template <typename F>
auto with_path(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    if (!e.field().empty()) throw;
    throw ConfigError(e.message(), path);
  }
}

}  // namespace

Json to_json(const ModelConfig& c) {
  return Json{{"layers", c.layers},     {"model_dim", c.model_dim},       {"heads", c.heads},
              {"groups", c.groups},     {"head_dim", c.head_dim},         {"mlp_dim", c.mlp_dim},
              {"vocab", c.vocab},       {"image_side", c.image_side},     {"patch", c.patch},
              {"channels", c.channels}, {"max_pos", c.max_pos},           {"scale_scores", c.scale_scores},
              {"init_std", c.init_std}};
}

ModelConfig model_config_from_json(const Json& j, const std::string& path) {
  ModelConfig c;
  JsonReader r(j, path);
  r.get("layers", c.layers);
  r.get("model_dim", c.model_dim);
  r.get("heads", c.heads);
  r.get("groups", c.groups);
  r.get("head_dim", c.head_dim);
  r.get("mlp_dim", c.mlp_dim);
  r.get("vocab", c.vocab);
  r.get("image_side", c.image_side);
  r.get("patch", c.patch);
  r.get("channels", c.channels);
  r.get("max_pos", c.max_pos);
  r.get("scale_scores", c.scale_scores);
  r.get("init_std", c.init_std);
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(e.message(), e.field().empty() ? path : r.field(e.field()));
  }
  return c;
}

Json to_json(const Mamba2Options& o) {
  Json j{{"conv_activation", o.conv_activation},
         {"output_gate", o.output_gate},
         {"head_norm", o.head_norm},
         {"qk_scale", o.qk_scale}};
  j["fixed_gamma"] = o.fixed_gamma ? Json(*o.fixed_gamma) : Json(nullptr);
  return j;
}

Mamba2Options mamba_options_from_json(const Json& j, const std::string& path) {
  Mamba2Options o;
  JsonReader r(j, path);
  r.get("conv_activation", o.conv_activation);
  r.get("output_gate", o.output_gate);
  r.get("head_norm", o.head_norm);
  r.get("qk_scale", o.qk_scale);
  r.get("fixed_gamma", o.fixed_gamma);
  r.finish();
  return o;
}

Json to_json(const SeedConfig& c) {
  return Json{{"a0", c.a0}, {"gate_bias0", c.gate_bias0}, {"conv_width", c.conv_width}, {"literal_eq2", c.literal_eq2}};
}

SeedConfig seed_config_from_json(const Json& j, const std::string& path) {
  SeedConfig c;
  JsonReader r(j, path);
  r.get("a0", c.a0);
  r.get("gate_bias0", c.gate_bias0);
  r.get("conv_width", c.conv_width);
  r.get("literal_eq2", c.literal_eq2);
  r.finish();
  if (c.conv_width == 0) throw ConfigError("must be positive", r.field("conv_width"));
  return c;
}

Json to_json(const TaskConfig& c) {
  return Json{{"image_side", c.image_side}, {"patch", c.patch},     {"channels", c.channels},
              {"max_cells", c.max_cells},   {"n_pairs", c.n_pairs}, {"max_pos", c.max_pos}};
}

TaskConfig task_config_from_json(const Json& j, const std::string& path) {
  TaskConfig c;
  JsonReader r(j, path);
  r.get("image_side", c.image_side);
  r.get("patch", c.patch);
  r.get("channels", c.channels);
  r.get("max_cells", c.max_cells);
  r.get("n_pairs", c.n_pairs);
  r.get("max_pos", c.max_pos);
  r.finish();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(e.message(), e.field().empty() ? path : r.field(e.field()));
  }
  return c;
}

Json to_json(const HybridPlan& p) {
  Json kinds = Json::array();
  for (auto k : p.kinds) kinds.push_back(to_string(k));
  return Json{{"kinds", kinds}, {"strategy", p.strategy}};
}

HybridPlan plan_from_json(const Json& j, const std::string& path) {
  HybridPlan p;
  JsonReader r(j, path);
  r.get("strategy", p.strategy);
  const Json* kinds = r.child("kinds");
  if (!kinds || !kinds->is_array()) throw ConfigError("expected an array of layer kinds", r.field("kinds"));
  for (std::size_t i = 0; i < kinds->size(); ++i) {
    const std::string f = r.field("kinds") + "[" + std::to_string(i) + "]";
    if (!(*kinds)[i].is_string()) throw ConfigError("expected a string", f);
    p.kinds.push_back(with_path(f, [&] { return parse_layer_kind((*kinds)[i].get<std::string>()); }));
  }
  r.finish();
  return p;
}

}  // namespace q2l
