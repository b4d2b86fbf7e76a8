// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

// Decode benchmarks, the analytical cache/state memory model, experiment configs,
// run manifests, ablation grids and SVG plots.

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "quad2lin/distill.hpp"
#include "quad2lin/serialize.hpp"

namespace q2l {

// ---------------------------------------------------------------------------
// Memory model

struct MemoryEstimate {
  std::size_t kv_bytes = 0;
  std::size_t state_bytes = 0;
};

/// kv = sum over attention layers of 2 T G d_h b;
/// state = sum over Mamba-2 layers of (G d_h d_h + (w - 1)(H + 2G) d_h) b.
MemoryEstimate memory_model(const ModelConfig& cfg, const HybridPlan& plan, std::size_t context_length,
                            std::size_t bytes_per_scalar, std::size_t conv_width = 4);

/// Bytes of all parameters.
template <typename T>
std::size_t parameter_bytes(const DecoderModel<T>& model);

// ---------------------------------------------------------------------------
// Decode benchmark

struct BenchOptions {
  std::size_t reps = 5;
  std::size_t warmup = 2;
  /// Decode steps timed per repetition; the per-token latency is their mean.
  std::size_t decode_tokens = 32;
  /// Rows whose predicted cache + state bytes exceed this are recorded as "oom" without
  /// running. 0 means no limit.
  std::size_t memory_limit_bytes = 0;
  /// Let Mamba-2/hybrid models run past max_pos without position embeddings.
  bool allow_beyond_max_pos = false;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::size_t context_length = 0;
  double prefill_s = 0.0;
  double decode_s_per_token = 0.0;
  std::size_t kv_bytes = 0;
  std::size_t state_bytes = 0;
  std::string status = "ok";  // "ok", "oom", or "error: ..."
};

/// For every length T: prefill a random token prefix of length T through a DecodeSession,
/// then time single-token decode steps (median over reps after warmups). kv/state bytes
/// are the session's live counts right after the prefill. Lengths must be strictly
/// increasing.
template <typename T>
std::vector<BenchRow> bench_decode(const DecoderModel<T>& model, const std::vector<std::size_t>& lengths,
                                   const BenchOptions& opts = {});

/// Header "context_length,prefill_s,decode_s_per_token,kv_bytes,state_bytes,status".
void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows);
std::vector<BenchRow> read_bench_csv(std::istream& is);

/// A header line and rows of comma-separated fields. Throws ConfigError on ragged rows.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::size_t column(const std::string& name) const;
};
CsvTable read_csv(std::istream& is);

// ---------------------------------------------------------------------------
// Experiment configuration

/// How to pick the student's hybrid plan.
struct PlanSpec {
  std::string strategy = "head-interleaved";
  std::size_t n_attention = 0;
  HybridPlan resolve(std::size_t layers) const;
};

struct EvalSpec {
  std::size_t samples = 256;
  std::uint64_t seed = 7919;
};

struct BenchSpec {
  std::vector<std::size_t> lengths = {1024, 4096, 16384};
  BenchOptions options;
  /// Bench models are built from `model` with max_pos raised to cover the longest run.
  /// Defaults to L=4, d=32, H=2, G=1, d_h=16.
  ModelConfig model;

  BenchSpec();
  /// `model` with max_pos covering the longest length plus the timed decode steps.
  ModelConfig sized_model() const;
};

struct AblationSpec {
  /// Seeds for the repeated grids (medians are taken over them).
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  /// hybrid-ratio grid: attention-layer counts.
  std::vector<std::size_t> n_attention = {0, 2, 4};
  /// hybrid-strategy grid: attention-layer count.
  std::size_t strategy_n_attention = 1;
  /// Stages run by the init, hybrid-ratio and hybrid-strategy grids.
  std::vector<int> stages = {3};
  /// stages grid: subsets to run, written like "1+2+3". Empty runs all seven.
  std::vector<std::string> stage_subsets;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  ModelConfig model;
  TaskConfig task;
  TaskMix mix;
  /// > 0: the teacher trains on this many fixed samples (cycled) instead of a stream.
  std::size_t train_set_size = 0;
  StageConfig teacher = StageConfig::defaults(0);
  StageConfig stage1 = StageConfig::defaults(1);
  StageConfig stage2 = StageConfig::defaults(2);
  StageConfig stage3 = StageConfig::defaults(3);
  SeedConfig seeding;
  InitStrategy init = InitStrategy::kInheritMimic;
  PlanSpec plan;
  EvalSpec eval;
  BenchSpec bench;
  AblationSpec ablate;
  /// "float32" or "float64".
  std::string dtype = "float32";

  const StageConfig& stage(int s) const;
  /// Cross-field checks; throws ConfigError with the dotted path.
  void validate() const;
};

Json to_json(const ExperimentConfig& c);
ExperimentConfig experiment_config_from_json(const Json& j);
/// Reads and parses a JSON file; syntax errors become ConfigError("<file>").
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
/// QUAD2LIN_SEED, when set, replaces c.seed. Returns true if it did.
bool apply_env_overrides(ExperimentConfig& c);
Json stage_to_json(const StageConfig& s);
StageConfig stage_config_from_json(const Json& j, const std::string& path, int stage);

// ---------------------------------------------------------------------------
// Run manifest

struct RunManifest {
  std::string command;
  std::string config_hash;  // SHA-1 of the canonical config JSON
  std::uint64_t seed = 0;
  std::vector<std::string> provenance;
  std::string checkpoint_hash;
  std::string metrics_hash;  // SHA-1 of metrics.csv, empty when none

  Json to_json() const;
  static RunManifest from_json(const Json& j);
  void write(const std::filesystem::path& file) const;
  static RunManifest read(const std::filesystem::path& file);
};

std::string config_hash(const ExperimentConfig& c);
std::string file_sha1(const std::filesystem::path& file);

// ---------------------------------------------------------------------------
// Pipelines

/// Batch source for stage training: the task mix stream or the cycled fixed train set.
BatchSource make_source(const ExperimentConfig& c, std::uint64_t seed, std::size_t batch, std::size_t steps);
/// Fixed train set of the teacher (empty when train_set_size == 0).
std::vector<Sample> make_train_set(const ExperimentConfig& c);
/// Held-out evaluation samples of one task.
std::vector<Sample> make_eval_samples(const ExperimentConfig& c, TaskKind kind);

/// Data of stage s (0 is teacher training) in a run seeded with `seed`.
BatchSource stage_source(const ExperimentConfig& c, int stage, std::uint64_t seed, std::size_t steps);
/// Seed handed to convert() in a run seeded with `seed`.
std::uint64_t convert_seed(std::uint64_t seed);

/// Fresh teacher weights for c.seed.
template <typename T>
DecoderModel<T> init_teacher(const ExperimentConfig& c);

/// Trains `model` for c.teacher.steps on stage_source(c, 0, c.seed).
template <typename T>
std::vector<MetricsRow> train_teacher_from_config(const ExperimentConfig& c, DecoderModel<T>& model,
                                                  const StageRunOptions& run = {});

/// Runs `stages` in order with the step counts given (stage s uses c.stage(s) otherwise).
/// Each stage reads stage_source(c, stage, seed).
template <typename T>
std::vector<MetricsRow> run_pipeline(const ExperimentConfig& c, const DecoderModel<T>& teacher,
                                     DecoderModel<T>& student, const std::vector<int>& stages,
                                     const std::vector<std::size_t>& steps, std::uint64_t seed);

struct AblationRow {
  std::string grid;
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  double accuracy = 0.0;
  double kl = 0.0;
};

/// Header "grid,variant,seed,steps,accuracy,kl".
void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows);

/// Grid names: "stages", "init", "hybrid-ratio", "hybrid-strategy".
std::vector<std::string> ablation_grids();

/// Runs one grid against a trained teacher. Every variant of a grid gets the same total
/// number of optimizer steps. Accuracy is on the recall eval set, KL on the same samples.
template <typename T>
std::vector<AblationRow> run_ablation(const std::string& grid, const ExperimentConfig& c,
                                      const DecoderModel<T>& teacher);

/// Median accuracy and KL per variant, in first-appearance order.
std::vector<AblationRow> median_by_variant(const std::vector<AblationRow>& rows);

// ---------------------------------------------------------------------------
// Plots

struct PlotSeries {
  std::string name;
  std::vector<double> x, y;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = false;
};

/// Standalone SVG line chart with axes, ticks and a legend.
std::string render_svg(const std::vector<PlotSeries>& series, const PlotSpec& spec);

/// Reads bench or metrics CSVs written by this tool and plots `y` against the natural x
/// column (context_length or step). Series are named after the file stems. Failed bench
/// rows are skipped.
std::string plot_csv_files(const std::vector<std::filesystem::path>& files, const std::string& y_column,
                           const std::string& title = "");

}  // namespace q2l
