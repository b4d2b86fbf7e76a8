// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

// Checkpoint directory: manifest.json (config, plan, per-layer mixer options, frozen
// flags, provenance, blob SHA-1s) plus one raw tensor blob per parameter.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "quad2lin/model.hpp"

namespace q2l {

inline constexpr int kCheckpointVersion = 1;

std::string sha1_hex(std::span<const std::uint8_t> bytes);
std::string sha1_hex(const std::string& text);

struct CheckpointInfo {
  int version = 0;
  std::string dtype;
  std::vector<std::string> provenance;  // oldest first, e.g. {"teacher", "convert", "stage1"}
  std::vector<LayerKind> kinds;
  /// SHA-1 of the manifest bytes. Blob hashes are in the manifest, so this covers the content.
  std::string content_hash;
};

/// Writes `dir` (created if missing). The manifest is written last. Returns the content hash.
template <typename T>
std::string save_checkpoint(const DecoderModel<T>& model, const std::filesystem::path& dir,
                            const std::vector<std::string>& provenance = {});

/// Throws CorruptionError on missing/truncated/mismatching blobs or an unreadable manifest,
/// UnsupportedVersionError on version skew, ContractError on a dtype mismatch.
template <typename T>
DecoderModel<T> load_checkpoint(const std::filesystem::path& dir, CheckpointInfo* info = nullptr);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);

}  // namespace q2l
