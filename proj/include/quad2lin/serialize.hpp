// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

// JSON forms of the configuration structs. Readers are strict: wrong types, negative
// sizes and unknown keys raise ConfigError carrying the dotted field path.

#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>

#include "json.hpp"
#include "quad2lin/data.hpp"
#include "quad2lin/errors.hpp"
#include "quad2lin/model.hpp"

namespace q2l {

using Json = nlohmann::json;

class JsonReader {
 public:
  /// `path` is the dotted location of `j` itself ("" for the document root).
  JsonReader(const Json& j, std::string path);

  /// Reads j[key] into `out` when present; absent keys leave `out` unchanged.
  template <typename V>
  void get(const std::string& key, V& out) {
    const Json* v = find(key);
    if (v) convert(*v, field(key), out);
  }
  /// Same as get() but absence is an error.
  template <typename V>
  void require(const std::string& key, V& out) {
    const Json* v = find(key);
    if (!v) throw ConfigError("missing required field", field(key));
    convert(*v, field(key), out);
  }
  const Json* child(const std::string& key);
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  /// Throws on keys never asked for.
  void finish() const;

 private:
  const Json* find(const std::string& key);

  static void convert(const Json& v, const std::string& f, std::size_t& out);
  static void convert(const Json& v, const std::string& f, double& out);
  static void convert(const Json& v, const std::string& f, bool& out);
  static void convert(const Json& v, const std::string& f, std::string& out);
  static void convert(const Json& v, const std::string& f, std::optional<double>& out);

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

Json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const Json& j, const std::string& path = "model");

Json to_json(const Mamba2Options& o);
Mamba2Options mamba_options_from_json(const Json& j, const std::string& path);

Json to_json(const SeedConfig& c);
SeedConfig seed_config_from_json(const Json& j, const std::string& path = "seed_config");

Json to_json(const TaskConfig& c);
TaskConfig task_config_from_json(const Json& j, const std::string& path = "task");

/// {"kinds": ["attention", "mamba2", ...], "strategy": "..."}
Json to_json(const HybridPlan& p);
HybridPlan plan_from_json(const Json& j, const std::string& path = "plan");

}  // namespace q2l
