// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <limits>
#include <new>
#include <ostream>
#include <sstream>

#include "quad2lin/harness.hpp"
#include "quad2lin/rng.hpp"

namespace q2l {

MemoryEstimate memory_model(const ModelConfig& cfg, const HybridPlan& plan, std::size_t context_length,
                            std::size_t bytes_per_scalar, std::size_t conv_width) {
  const std::size_t g = cfg.groups, dh = cfg.head_dim, h = cfg.heads;
  const std::size_t kv_layer = 2 * context_length * g * dh * bytes_per_scalar;
  const std::size_t state_layer = (g * dh * dh + (conv_width - 1) * (h + 2 * g) * dh) * bytes_per_scalar;
  MemoryEstimate m;
  for (auto k : plan.kinds) {
    if (k == LayerKind::kAttention) {
      m.kv_bytes += kv_layer;
    } else {
      m.state_bytes += state_layer;
    }
  }
  return m;
}

template <typename T>
std::size_t parameter_bytes(const DecoderModel<T>& model) {
  return model.param_count() * sizeof(T);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

template <typename T>
std::size_t conv_width_of(const DecoderModel<T>& m) {
  for (const auto& b : m.blocks)
    if (b.kind == LayerKind::kMamba2) return b.mamba.conv_width;
  return 4;
}

}  // namespace

template <typename T>
std::vector<BenchRow> bench_decode(const DecoderModel<T>& model, const std::vector<std::size_t>& lengths,
                                   const BenchOptions& opts) {
  for (std::size_t i = 1; i < lengths.size(); ++i)
    if (lengths[i] <= lengths[i - 1]) throw ConfigError("context lengths must be strictly increasing", "lengths");
  if (opts.reps == 0 || opts.decode_tokens == 0) throw ConfigError("reps and decode_tokens must be positive", "bench");
  const bool has_attention = model.plan.attention_count() > 0;
  const std::size_t w = conv_width_of(model);
  std::vector<BenchRow> rows;
  for (const std::size_t len : lengths) {
    BenchRow row;
    row.context_length = len;
    const std::size_t needed = len + (opts.warmup + opts.reps) * opts.decode_tokens;
    const auto predicted = memory_model(model.cfg, model.plan, needed, sizeof(T), w);
    if (opts.memory_limit_bytes && predicted.kv_bytes + predicted.state_bytes > opts.memory_limit_bytes) {
      row.status = "oom";
      row.prefill_s = row.decode_s_per_token = std::numeric_limits<double>::quiet_NaN();
      rows.push_back(row);
      continue;
    }
    if (needed > model.cfg.max_pos && (has_attention || !opts.allow_beyond_max_pos)) {
      row.status = "error: context exceeds max_pos";
      row.prefill_s = row.decode_s_per_token = std::numeric_limits<double>::quiet_NaN();
      rows.push_back(row);
      continue;
    }
    try {
      Rng rng = Rng::derive(opts.seed, len);
      const auto vocab = static_cast<std::uint64_t>(model.cfg.vocab);
      DecodeSession<T> session(model, ForwardOptions{.allow_beyond_max_pos = opts.allow_beyond_max_pos});
      const auto t0 = Clock::now();
      for (std::size_t t = 0; t < len; ++t) session.step_token(static_cast<std::int32_t>(rng.below(vocab)));
      row.prefill_s = seconds_since(t0);
      row.kv_bytes = session.kv_bytes();
      row.state_bytes = session.state_bytes();
      std::vector<double> samples;
      for (std::size_t r = 0; r < opts.warmup + opts.reps; ++r) {
        const auto t1 = Clock::now();
        for (std::size_t k = 0; k < opts.decode_tokens; ++k)
          session.step_token(static_cast<std::int32_t>(rng.below(vocab)));
        const double per_token = seconds_since(t1) / static_cast<double>(opts.decode_tokens);
        if (r >= opts.warmup) samples.push_back(per_token);
      }
      row.decode_s_per_token = median(samples);
    } catch (const std::bad_alloc&) {
      row.status = "oom";
      row.prefill_s = row.decode_s_per_token = std::numeric_limits<double>::quiet_NaN();
    }
    rows.push_back(row);
  }
  return rows;
}

void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "context_length,prefill_s,decode_s_per_token,kv_bytes,state_bytes,status\n";
  const auto old = os.precision(9);
  for (const auto& r : rows) {
    os << r.context_length << ',';
    if (std::isfinite(r.prefill_s)) os << r.prefill_s;
    os << ',';
    if (std::isfinite(r.decode_s_per_token)) os << r.decode_s_per_token;
    os << ',' << r.kv_bytes << ',' << r.state_bytes << ',' << r.status << '\n';
  }
  os.precision(old);
}

std::size_t CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return i;
  throw ConfigError("CSV has no column '" + name + "'", "csv");
}

CsvTable read_csv(std::istream& is) {
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
  };
  CsvTable t;
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("empty CSV", "csv");
  t.header = split(line);
  std::size_t n = 1;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != t.header.size())
      throw ConfigError("line " + std::to_string(n) + " has " + std::to_string(cells.size()) + " fields, header has " +
                            std::to_string(t.header.size()),
                        "csv");
    t.rows.push_back(std::move(cells));
  }
  return t;
}

std::vector<BenchRow> read_bench_csv(std::istream& is) {
  const auto t = read_csv(is);
  const std::size_t c_len = t.column("context_length"), c_pre = t.column("prefill_s"),
                    c_dec = t.column("decode_s_per_token"), c_kv = t.column("kv_bytes"),
                    c_state = t.column("state_bytes"), c_status = t.column("status");
  auto num = [](const std::string& s) {
    return s.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
  };
  std::vector<BenchRow> rows;
  for (const auto& r : t.rows) {
    BenchRow b;
    b.context_length = std::stoull(r[c_len]);
    b.prefill_s = num(r[c_pre]);
    b.decode_s_per_token = num(r[c_dec]);
    b.kv_bytes = std::stoull(r[c_kv]);
    b.state_bytes = std::stoull(r[c_state]);
    b.status = r[c_status];
    rows.push_back(b);
  }
  return rows;
}

template std::size_t parameter_bytes(const DecoderModel<float>&);
template std::size_t parameter_bytes(const DecoderModel<double>&);
template std::vector<BenchRow> bench_decode(const DecoderModel<float>&, const std::vector<std::size_t>&,
                                            const BenchOptions&);
template std::vector<BenchRow> bench_decode(const DecoderModel<double>&, const std::vector<std::size_t>&,
                                            const BenchOptions&);

}  // namespace q2l
