// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include "quad2lin/checkpoint.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "quad2lin/errors.hpp"
#include "quad2lin/serialize.hpp"

namespace q2l {

namespace fs = std::filesystem;

std::string sha1_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr) != 1)
    throw std::runtime_error("SHA-1 digest failed");
  static const char* kHex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[md[i] >> 4];
    out += kHex[md[i] & 0xF];
  }
  return out;
}

std::string sha1_hex(const std::string& text) {
  return sha1_hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

namespace {

constexpr const char* kFormat = "quad2lin-checkpoint";
constexpr const char* kManifest = "manifest.json";

template <typename T>
const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

std::string blob_name(std::size_t i) {
  std::ostringstream os;
  os << "tensors/" << i << ".bin";
  return os.str();
}

std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CorruptionError("checkpoint file missing: " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

Json read_manifest(const fs::path& dir, std::string* raw_out) {
  const auto bytes = read_file(dir / kManifest);
  std::string raw(bytes.begin(), bytes.end());
  Json j;
  try {
    j = Json::parse(raw);
  } catch (const Json::exception& e) {
    throw CorruptionError("manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!j.is_object() || j.value("format", "") != kFormat) throw CorruptionError("not a quad2lin checkpoint manifest");
  if (!j.contains("version") || !j["version"].is_number_integer()) throw CorruptionError("manifest has no version");
  const int version = j["version"].get<int>();
  if (version != kCheckpointVersion)
    throw UnsupportedVersionError("checkpoint version " + std::to_string(version) + " is not supported (this build reads " +
                                  std::to_string(kCheckpointVersion) + ")");
  if (raw_out) *raw_out = std::move(raw);
  return j;
}

CheckpointInfo info_from(const Json& j, const std::string& raw) {
  CheckpointInfo info;
  try {
    info.version = j.at("version").get<int>();
    info.dtype = j.at("dtype").get<std::string>();
    info.provenance = j.at("provenance").get<std::vector<std::string>>();
    for (const auto& k : j.at("plan").at("kinds")) info.kinds.push_back(parse_layer_kind(k.get<std::string>()));
  } catch (const std::exception& e) {
    throw CorruptionError("manifest is incomplete: " + std::string(e.what()));
  }
  info.content_hash = sha1_hex(raw);
  return info;
}

}  // namespace

template <typename T>
std::string save_checkpoint(const DecoderModel<T>& model, const fs::path& dir,
                            const std::vector<std::string>& provenance) {
  model.validate();
  fs::create_directories(dir / "tensors");
  fs::remove(dir / kManifest);

  Json layers = Json::array();
  for (const auto& b : model.blocks) {
    Json l{{"kind", to_string(b.kind)}};
    if (b.kind == LayerKind::kAttention) {
      l["scale_scores"] = b.attn.scale_scores;
    } else {
      l["conv_width"] = b.mamba.conv_width;
      l["options"] = to_json(b.mamba.options);
    }
    layers.push_back(std::move(l));
  }

  Json tensors = Json::array();
  std::size_t i = 0;
  model.for_each_param([&](const std::string& name, const Parameter<T>& p) {
    const auto bytes = to_bytes(p.value);
    const std::string file = blob_name(i++);
    write_file(dir / file, bytes);
    tensors.push_back(Json{{"name", name},
                           {"file", file},
                           {"shape", p.value.shape()},
                           {"bytes", bytes.size()},
                           {"sha1", sha1_hex(bytes)},
                           {"frozen", p.frozen}});
  });

  Json j{{"format", kFormat},
         {"version", kCheckpointVersion},
         {"dtype", dtype_name<T>()},
         {"config", to_json(model.cfg)},
         {"plan", to_json(model.plan)},
         {"layers", layers},
         {"provenance", provenance},
         {"tensors", tensors}};
  const std::string raw = j.dump(1) + "\n";
  const fs::path tmp = dir / "manifest.json.tmp";
  write_file(tmp, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(raw.data()), raw.size()));
  fs::rename(tmp, dir / kManifest);
  return sha1_hex(raw);
}

CheckpointInfo read_checkpoint_info(const fs::path& dir) {
  std::string raw;
  const Json j = read_manifest(dir, &raw);
  return info_from(j, raw);
}

template <typename T>
DecoderModel<T> load_checkpoint(const fs::path& dir, CheckpointInfo* info) {
  std::string raw;
  const Json j = read_manifest(dir, &raw);
  CheckpointInfo meta = info_from(j, raw);
  if (meta.dtype != dtype_name<T>())
    throw ContractError("checkpoint holds " + meta.dtype + " tensors, requested " + dtype_name<T>());

  DecoderModel<T> m;
  std::map<std::string, Json> entries;
  try {
    const ModelConfig cfg = model_config_from_json(j.at("config"), "config");
    m = build_teacher<T>(cfg, 0);
    m.plan = plan_from_json(j.at("plan"), "plan");
    const Json& layers = j.at("layers");
    if (!layers.is_array() || layers.size() != cfg.layers || m.plan.kinds.size() != cfg.layers)
      throw CorruptionError("manifest layer list does not match the config");
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      auto& b = m.blocks[i];
      b.kind = parse_layer_kind(layers[i].at("kind").get<std::string>());
      if (b.kind != m.plan.kinds[i]) throw CorruptionError("manifest layer kinds disagree with the plan");
      if (b.kind == LayerKind::kAttention) {
        b.attn.scale_scores = layers[i].at("scale_scores").get<bool>();
      } else {
        b.mamba = Mamba2Weights<T>::allocate(cfg.geometry(), layers[i].at("conv_width").get<std::size_t>());
        b.mamba.options = mamba_options_from_json(layers[i].at("options"), "layers");
        b.attn = AttentionWeights<T>{};
      }
    }
    for (const auto& t : j.at("tensors")) entries[t.at("name").get<std::string>()] = t;
  } catch (const CorruptionError&) {
    throw;
  } catch (const std::exception& e) {
    throw CorruptionError("manifest is malformed: " + std::string(e.what()));
  }

  std::size_t used = 0;
  m.for_each_param([&](const std::string& name, Parameter<T>& p) {
    auto it = entries.find(name);
    if (it == entries.end()) throw CorruptionError("manifest has no tensor " + name);
    const Json& e = it->second;
    const auto bytes = read_file(dir / e.at("file").get<std::string>());
    if (bytes.size() != e.at("bytes").get<std::size_t>())
      throw CorruptionError("blob for " + name + " has " + std::to_string(bytes.size()) + " bytes, manifest says " +
                            std::to_string(e.at("bytes").get<std::size_t>()));
    if (sha1_hex(bytes) != e.at("sha1").get<std::string>()) throw CorruptionError("SHA-1 mismatch for " + name);
    auto value = from_bytes<T>(bytes);
    if (value.shape() != p.value.shape()) throw CorruptionError("tensor " + name + " has the wrong shape");
    p.value = std::move(value);
    p.frozen = e.at("frozen").get<bool>();
    ++used;
  });
  if (used != entries.size()) throw CorruptionError("manifest lists tensors the model does not have");
  m.validate();
  if (info) *info = std::move(meta);
  return m;
}

template std::string save_checkpoint(const DecoderModel<float>&, const fs::path&, const std::vector<std::string>&);
template std::string save_checkpoint(const DecoderModel<double>&, const fs::path&, const std::vector<std::string>&);
template DecoderModel<float> load_checkpoint(const fs::path&, CheckpointInfo*);
template DecoderModel<double> load_checkpoint(const fs::path&, CheckpointInfo*);

}  // namespace q2l
