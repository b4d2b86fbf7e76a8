// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include "quad2lin/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "quad2lin/checkpoint.hpp"
#include "quad2lin/harness.hpp"

namespace q2l {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string resume;

  std::string teacher;
  int stage = 0;
  std::string split = "eval";
  std::string lengths;
  std::string models = "attention,mamba,hybrid";
  std::string grid;
  std::string y = "decode_s_per_token";
  std::string title;
  std::vector<std::string> files;
  std::optional<std::size_t> n_attention;
  std::string strategy;
  std::string init;
};

ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_experiment_config(o.config);
  apply_env_overrides(c);
  if (o.seed) c.seed = *o.seed;
  return c;
}

void write_json(const fs::path& file, const Json& j) {
  std::ofstream os(file);
  os << j.dump(1) << '\n';
  if (!os) throw std::runtime_error("cannot write " + file.string());
}

// config.json and run.json next to the command's outputs.
void write_run(const Options& o, const ExperimentConfig& c, const std::string& command,
               const std::vector<std::string>& provenance, const std::string& checkpoint_hash) {
  const fs::path dir = o.out;
  write_json(dir / "config.json", to_json(c));
  RunManifest m;
  m.command = command;
  m.config_hash = config_hash(c);
  m.seed = c.seed;
  m.provenance = provenance;
  m.checkpoint_hash = checkpoint_hash;
  if (fs::exists(dir / "metrics.csv")) m.metrics_hash = file_sha1(dir / "metrics.csv");
  m.write(dir / "run.json");
}

template <typename T>
DecoderModel<T> require_checkpoint(const std::string& path, const std::string& flag, CheckpointInfo* info) {
  if (path.empty()) throw ConfigError("a checkpoint directory is required", flag);
  return load_checkpoint<T>(path, info);
}

std::vector<std::size_t> parse_lengths(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("expected comma-separated positive integers", "--lengths");
    out.push_back(std::stoull(item));
  }
  return out;
}

std::vector<TaskKind> active_tasks(const ExperimentConfig& c) {
  std::vector<TaskKind> out;
  if (c.mix.caption > 0) out.push_back(TaskKind::kCaption);
  if (c.mix.recall > 0) out.push_back(TaskKind::kRecall);
  return out;
}

std::vector<Sample> train_split(const ExperimentConfig& c, TaskKind kind) {
  if (c.train_set_size > 0) {
    std::vector<Sample> out;
    for (auto& s : make_train_set(c))
      if (s.task == kind) out.push_back(std::move(s));
    return out;
  }
  // First samples of the teacher's training stream.
  std::vector<Sample> out;
  auto src = stage_source(c, 0, c.seed, std::numeric_limits<std::size_t>::max());
  while (out.size() < c.eval.samples) {
    auto b = src();
    for (auto& s : b->samples)
      if (s.task == kind && out.size() < c.eval.samples) out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
int cmd_train_teacher(const Options& o, const ExperimentConfig& c, std::ostream& out) {
  std::vector<std::string> prov;
  CheckpointInfo info;
  auto model = o.resume.empty() ? init_teacher<T>(c) : load_checkpoint<T>(o.resume, &info);
  if (!o.resume.empty()) {
    if (model.plan.attention_count() != model.cfg.layers)
      throw ConfigError("train-teacher resumes only all-attention checkpoints", "--resume");
    prov = info.provenance;
  }
  const auto rows = train_teacher_from_config(c, model, StageRunOptions{o.out, prov});
  const auto ckpt = read_checkpoint_info(fs::path(o.out) / "checkpoint");
  write_run(o, c, "train-teacher", ckpt.provenance, ckpt.content_hash);
  out << "trained teacher: " << rows.size() << " steps, final loss " << (rows.empty() ? 0.0 : rows.back().loss)
      << "\ncheckpoint " << ckpt.content_hash << '\n';
  return kExitOk;
}

template <typename T>
int cmd_convert(const Options& o, ExperimentConfig c, std::ostream& out) {
  CheckpointInfo info;
  const auto teacher = require_checkpoint<T>(o.teacher, "--teacher", &info);
  if (o.n_attention) c.plan.n_attention = *o.n_attention;
  if (!o.strategy.empty()) c.plan.strategy = o.strategy;
  if (!o.init.empty()) {
    try {
      c.init = parse_init_strategy(o.init);
    } catch (const ConfigError& e) {
      throw ConfigError(e.message(), "--init");
    }
  }
  const auto plan = c.plan.resolve(teacher.cfg.layers);
  const auto student = convert(teacher, plan, c.seeding, c.init, convert_seed(c.seed));
  auto prov = info.provenance;
  prov.push_back("convert:" + plan.pattern() + ":" + to_string(c.init));
  fs::create_directories(o.out);
  const auto hash = save_checkpoint(student, fs::path(o.out) / "checkpoint", prov);
  write_run(o, c, "convert", prov, hash);
  out << "converted " << plan.pattern() << " (" << to_string(c.init) << ")\ncheckpoint " << hash << '\n';
  return kExitOk;
}

template <typename T>
int cmd_distill(const Options& o, const ExperimentConfig& c, std::ostream& out) {
  const auto teacher = require_checkpoint<T>(o.teacher, "--teacher", nullptr);
  CheckpointInfo info;
  auto student = require_checkpoint<T>(o.resume, "--resume", &info);
  const StageConfig& cfg = c.stage(o.stage);
  const auto rows = run_stage(cfg, teacher, student, stage_source(c, o.stage, c.seed, cfg.steps),
                              StageRunOptions{o.out, info.provenance});
  const auto ckpt = read_checkpoint_info(fs::path(o.out) / "checkpoint");
  write_run(o, c, "distill", ckpt.provenance, ckpt.content_hash);
  out << "stage " << o.stage << ": " << rows.size() << " steps, final loss " << (rows.empty() ? 0.0 : rows.back().loss)
      << "\ncheckpoint " << ckpt.content_hash << '\n';
  return kExitOk;
}

template <typename T>
int cmd_eval(const Options& o, const ExperimentConfig& c, std::ostream& out) {
  const auto model = require_checkpoint<T>(o.resume, "--resume", nullptr);
  if (o.split != "train" && o.split != "eval") throw ConfigError("must be train or eval", "--split");
  std::optional<DecoderModel<T>> teacher;
  if (!o.teacher.empty()) teacher = load_checkpoint<T>(o.teacher);
  Json result{{"split", o.split}};
  for (auto kind : active_tasks(c)) {
    const auto samples = o.split == "train" ? train_split(c, kind) : make_eval_samples(c, kind);
    if (samples.empty()) continue;
    const auto acc = evaluate_accuracy(model, samples);
    Json task{{"accuracy", acc.value()}, {"correct", acc.correct}, {"total", acc.total}};
    if (teacher) task["kl"] = evaluate_kl(*teacher, model, samples);
    result[to_string(kind)] = task;
  }
  fs::create_directories(o.out);
  write_json(fs::path(o.out) / "eval.json", result);
  out << result.dump(1) << '\n';
  return kExitOk;
}

template <typename T>
int cmd_bench(const Options& o, ExperimentConfig c, std::ostream& out) {
  if (!o.lengths.empty()) c.bench.lengths = parse_lengths(o.lengths);
  c.validate();
  const ModelConfig cfg = c.bench.sized_model();
  const auto teacher = build_teacher<T>(cfg, c.bench.options.seed);
  fs::create_directories(o.out);
  Json summary = Json::object();
  std::stringstream ss(o.models);
  std::string name;
  while (std::getline(ss, name, ',')) {
    HybridPlan plan;
    if (name == "attention") {
      plan = all_attention_plan(cfg.layers);
    } else if (name == "mamba") {
      plan = all_mamba_plan(cfg.layers);
    } else if (name == "hybrid") {
      plan = hybrid_plan(cfg.layers, std::max<std::size_t>(1, cfg.layers / 4), HybridStrategy::kHeadInterleaved);
    } else {
      throw ConfigError("unknown model '" + name + "' (attention, mamba, hybrid)", "--models");
    }
    const auto model = convert(teacher, plan, c.seeding);
    const auto rows = bench_decode(model, c.bench.lengths, c.bench.options);
    std::ofstream csv(fs::path(o.out) / ("bench_" + name + ".csv"));
    write_bench_csv(csv, rows);
    summary[name] = Json{{"plan", plan.pattern()}, {"parameter_bytes", parameter_bytes(model)}};
    out << name << " (" << plan.pattern() << ")\n";
    write_bench_csv(out, rows);
  }
  write_json(fs::path(o.out) / "bench_summary.json", summary);
  write_run(o, c, "bench", {}, "");
  return kExitOk;
}

template <typename T>
int cmd_ablate(const Options& o, const ExperimentConfig& c, std::ostream& out) {
  const auto teacher = require_checkpoint<T>(o.teacher, "--teacher", nullptr);
  const auto grids = ablation_grids();
  if (std::find(grids.begin(), grids.end(), o.grid) == grids.end())
    throw ConfigError("unknown grid '" + o.grid + "'", "--grid");
  const auto rows = run_ablation(o.grid, c, teacher);
  fs::create_directories(o.out);
  std::ofstream csv(fs::path(o.out) / ("ablation_" + o.grid + ".csv"));
  write_ablation_csv(csv, rows);
  std::ofstream med(fs::path(o.out) / ("ablation_" + o.grid + "_median.csv"));
  write_ablation_csv(med, median_by_variant(rows));
  write_ablation_csv(out, median_by_variant(rows));
  write_run(o, c, "ablate", {}, "");
  return kExitOk;
}

int cmd_plot(const Options& o, std::ostream& out) {
  std::vector<fs::path> files(o.files.begin(), o.files.end());
  const std::string svg = plot_csv_files(files, o.y, o.title);
  fs::path target = o.out;
  if (target.extension() != ".svg") {
    fs::create_directories(target);
    target /= o.y + ".svg";
  } else if (target.has_parent_path()) {
    fs::create_directories(target.parent_path());
  }
  std::ofstream os(target);
  os << svg;
  if (!os) throw std::runtime_error("cannot write " + target.string());
  out << "wrote " << target.string() << '\n';
  return kExitOk;
}

template <typename T>
int dispatch(const std::string& cmd, const Options& o, const ExperimentConfig& c, std::ostream& out) {
  if (cmd == "train-teacher") return cmd_train_teacher<T>(o, c, out);
  if (cmd == "convert") return cmd_convert<T>(o, c, out);
  if (cmd == "distill") return cmd_distill<T>(o, c, out);
  if (cmd == "eval") return cmd_eval<T>(o, c, out);
  if (cmd == "bench") return cmd_bench<T>(o, c, out);
  return cmd_ablate<T>(o, c, out);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Convert attention decoders to Mamba-2 hybrids and distill them.", "quad2lin"};
  app.require_subcommand(1, 1);
  app.add_option("--config", o.config, "JSON experiment config");
  app.add_option("--seed", o.seed, "Override the config seed");
  app.add_option("--out", o.out, "Output directory")->capture_default_str();
  app.add_option("--resume", o.resume, "Checkpoint to start from (the student for distill, the model for eval)");

  auto* train = app.add_subcommand("train-teacher", "Pre-train the all-attention teacher");
  auto* conv = app.add_subcommand("convert", "Convert a teacher checkpoint into a Mamba-2/hybrid student");
  conv->add_option("--teacher", o.teacher, "Teacher checkpoint")->required();
  conv->add_option("--n-attention", o.n_attention, "Attention layers kept (overrides plan.n_attention)");
  conv->add_option("--strategy", o.strategy, "Hybrid strategy (overrides plan.strategy)");
  conv->add_option("--init", o.init, "inherit-mimic, inherit-only or from-scratch");
  auto* dist = app.add_subcommand("distill", "Run one distillation stage on the --resume student");
  dist->add_option("--stage", o.stage, "Stage")->required()->check(CLI::Range(1, 3));
  dist->add_option("--teacher", o.teacher, "Teacher checkpoint")->required();
  auto* eval = app.add_subcommand("eval", "Masked-token accuracy per task of the --resume model");
  eval->add_option("--split", o.split, "train or eval")->check(CLI::IsMember({"train", "eval"}));
  eval->add_option("--teacher", o.teacher, "Also report KL against this teacher");
  auto* bench = app.add_subcommand("bench", "Decode latency and cache/state memory over context lengths");
  bench->add_option("--lengths", o.lengths, "Comma-separated context lengths");
  bench->add_option("--models", o.models, "Comma-separated subset of attention,mamba,hybrid")->capture_default_str();
  auto* ablate = app.add_subcommand("ablate", "Run an ablation grid against a teacher");
  ablate->add_option("--grid", o.grid, "stages, init, hybrid-ratio or hybrid-strategy")->required();
  ablate->add_option("--teacher", o.teacher, "Teacher checkpoint")->required();
  auto* plot = app.add_subcommand("plot", "Render bench or metrics CSVs as an SVG line chart");
  plot->add_option("--y", o.y, "Column to plot")->capture_default_str();
  plot->add_option("--title", o.title, "Chart title");
  plot->add_option("files", o.files, "CSV files")->required();
  for (auto* sub : {train, conv, dist, eval, bench, ablate, plot}) {
    sub->fallthrough();
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "plot") return cmd_plot(o, out);
    const ExperimentConfig c = resolve_config(o);
    if (c.dtype == "float64") return dispatch<double>(cmd, o, c, out);
    return dispatch<float>(cmd, o, c, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

}  // namespace q2l
