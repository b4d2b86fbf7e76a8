// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <memory>
#include <ostream>

#include "quad2lin/harness.hpp"
#include "quad2lin/rng.hpp"

namespace q2l {

namespace {

constexpr std::uint64_t kTeacherInitStream = 1;
constexpr std::uint64_t kTeacherDataStream = 2;
constexpr std::uint64_t kTrainSetStream = 3;
constexpr std::uint64_t kConvertStream = 4;
constexpr std::uint64_t kStageStream0 = 10;

Batch pad_batch(std::vector<Sample> samples) {
  Batch b;
  std::size_t longest = 0;
  for (const auto& s : samples) longest = std::max(longest, s.tokens.size());
  for (const auto& s : samples) {
    auto t = s.tokens;
    auto m = s.loss_mask;
    t.resize(longest, vocab::kPad);
    m.resize(longest, 0);
    b.padded_tokens.push_back(std::move(t));
    b.padded_masks.push_back(std::move(m));
  }
  b.samples = std::move(samples);
  return b;
}

TaskKind eval_task(const ExperimentConfig& c) { return c.mix.recall > 0 ? TaskKind::kRecall : TaskKind::kCaption; }

}  // namespace

std::vector<Sample> make_train_set(const ExperimentConfig& c) {
  if (c.train_set_size == 0) return {};
  BatchStream s(c.mix, c.task, Rng::derive(c.seed, kTrainSetStream).next_u64(), c.train_set_size, 1);
  return s.next()->samples;
}

BatchSource make_source(const ExperimentConfig& c, std::uint64_t seed, std::size_t batch, std::size_t steps) {
  if (c.train_set_size > 0) {
    auto set = std::make_shared<const std::vector<Sample>>(make_train_set(c));
    auto state = std::make_shared<std::pair<std::size_t, std::size_t>>(0, 0);  // cursor, produced
    return [set, state, batch, steps]() -> std::optional<Batch> {
      if (state->second >= steps) return std::nullopt;
      std::vector<Sample> out;
      for (std::size_t j = 0; j < batch; ++j) {
        out.push_back((*set)[state->first]);
        state->first = (state->first + 1) % set->size();
      }
      ++state->second;
      return pad_batch(std::move(out));
    };
  }
  auto stream = std::make_shared<BatchStream>(c.mix, c.task, seed, batch, steps);
  return [stream]() { return stream->next(); };
}

std::vector<Sample> make_eval_samples(const ExperimentConfig& c, TaskKind kind) {
  return make_eval_set(kind, c.eval.seed, c.eval.samples, c.task);
}

BatchSource stage_source(const ExperimentConfig& c, int stage, std::uint64_t seed, std::size_t steps) {
  const std::uint64_t stream = stage == 0 ? kTeacherDataStream : kStageStream0 + static_cast<std::uint64_t>(stage);
  return make_source(c, Rng::derive(seed, stream).next_u64(), c.stage(stage).batch, steps);
}

std::uint64_t convert_seed(std::uint64_t seed) { return Rng::derive(seed, kConvertStream).next_u64(); }

template <typename T>
DecoderModel<T> init_teacher(const ExperimentConfig& c) {
  return build_teacher<T>(c.model, Rng::derive(c.seed, kTeacherInitStream).next_u64());
}

template <typename T>
std::vector<MetricsRow> train_teacher_from_config(const ExperimentConfig& c, DecoderModel<T>& model,
                                                  const StageRunOptions& run) {
  return train_teacher(c.teacher, model, stage_source(c, 0, c.seed, c.teacher.steps), run);
}

template <typename T>
std::vector<MetricsRow> run_pipeline(const ExperimentConfig& c, const DecoderModel<T>& teacher,
                                     DecoderModel<T>& student, const std::vector<int>& stages,
                                     const std::vector<std::size_t>& steps, std::uint64_t seed) {
  if (stages.size() != steps.size()) throw ContractError("run_pipeline: one step count per stage");
  std::vector<MetricsRow> all;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    StageConfig cfg = c.stage(stages[i]);
    cfg.steps = steps[i];
    if (cfg.steps == 0) continue;
    auto rows = run_stage(cfg, teacher, student, stage_source(c, stages[i], seed, cfg.steps));
    all.insert(all.end(), rows.begin(), rows.end());
  }
  return all;
}

void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "grid,variant,seed,steps,accuracy,kl\n" << std::setprecision(17);
  for (const auto& r : rows)
    os << r.grid << ',' << r.variant << ',' << r.seed << ',' << r.steps << ',' << r.accuracy << ',' << r.kl << '\n';
}

std::vector<std::string> ablation_grids() { return {"stages", "init", "hybrid-ratio", "hybrid-strategy"}; }

namespace {

struct Variant {
  std::string name;
  HybridPlan plan;
  InitStrategy init;
  std::vector<int> stages;
  std::vector<std::size_t> steps;
};

std::string join_stages(const std::vector<int>& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "+" : "") + std::to_string(s[i]);
  return out;
}

// Splits `budget` over the subset in proportion to the configured step counts.
std::vector<std::size_t> split_budget(const ExperimentConfig& c, const std::vector<int>& subset, std::size_t budget) {
  double total = 0;
  for (int s : subset) total += static_cast<double>(c.stage(s).steps);
  std::vector<std::size_t> out;
  std::size_t used = 0;
  for (std::size_t i = 0; i < subset.size(); ++i) {
    std::size_t n = budget - used;
    if (i + 1 < subset.size())
      n = static_cast<std::size_t>(std::llround(static_cast<double>(budget) * c.stage(subset[i]).steps / total));
    out.push_back(n);
    used += n;
  }
  return out;
}

std::vector<Variant> grid_variants(const std::string& grid, const ExperimentConfig& c) {
  const std::size_t L = c.model.layers;
  const HybridPlan base_plan = c.plan.resolve(L);
  std::vector<std::size_t> configured;
  for (int s : c.ablate.stages) configured.push_back(c.stage(s).steps);
  std::vector<Variant> out;
  if (grid == "stages") {
    const std::vector<int> all = {1, 2, 3};
    std::size_t budget = 0;
    for (int s : all) budget += c.stage(s).steps;
    const auto& wanted = c.ablate.stage_subsets;
    for (unsigned mask = 1; mask < 8; ++mask) {
      std::vector<int> subset;
      for (int s : all)
        if (mask & (1u << (s - 1))) subset.push_back(s);
      const std::string name = join_stages(subset);
      if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), name) == wanted.end()) continue;
      out.push_back({name, base_plan, c.init, subset, split_budget(c, subset, budget)});
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const Variant& a, const Variant& b) { return a.stages.size() < b.stages.size(); });
  } else if (grid == "init") {
    for (auto s : {InitStrategy::kFromScratch, InitStrategy::kInheritOnly, InitStrategy::kInheritMimic})
      out.push_back({to_string(s), base_plan, s, c.ablate.stages, configured});
  } else if (grid == "hybrid-ratio") {
    const auto strategy = parse_hybrid_strategy(c.plan.strategy);
    for (auto n : c.ablate.n_attention)
      out.push_back({"n=" + std::to_string(n), hybrid_plan(L, n, strategy), c.init, c.ablate.stages, configured});
  } else if (grid == "hybrid-strategy") {
    for (auto s : {HybridStrategy::kTailStacked, HybridStrategy::kHeadStacked, HybridStrategy::kTailInterleaved,
                   HybridStrategy::kHeadInterleaved})
      out.push_back({to_string(s), hybrid_plan(L, c.ablate.strategy_n_attention, s), c.init, c.ablate.stages,
                     configured});
  } else {
    throw ConfigError("unknown grid '" + grid + "'", "grid");
  }
  return out;
}

}  // namespace

template <typename T>
std::vector<AblationRow> run_ablation(const std::string& grid, const ExperimentConfig& c,
                                      const DecoderModel<T>& teacher) {
  const auto variants = grid_variants(grid, c);
  const auto eval = make_eval_samples(c, eval_task(c));
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    for (auto seed : c.ablate.seeds) {
      auto student = convert(teacher, v.plan, c.seeding, v.init, convert_seed(seed));
      run_pipeline(c, teacher, student, v.stages, v.steps, seed);
      AblationRow r;
      r.grid = grid;
      r.variant = v.name;
      r.seed = seed;
      for (auto n : v.steps) r.steps += n;
      r.accuracy = evaluate_accuracy(student, eval).value();
      r.kl = evaluate_kl(teacher, student, eval);
      rows.push_back(r);
    }
  }
  return rows;
}

std::vector<AblationRow> median_by_variant(const std::vector<AblationRow>& rows) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const AblationRow*>> groups;
  for (const auto& r : rows) {
    if (!groups.count(r.variant)) order.push_back(r.variant);
    groups[r.variant].push_back(&r);
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  std::vector<AblationRow> out;
  for (const auto& name : order) {
    const auto& g = groups[name];
    AblationRow m = *g.front();
    m.seed = 0;
    std::vector<double> acc, kl;
    for (const auto* r : g) {
      acc.push_back(r->accuracy);
      kl.push_back(r->kl);
    }
    m.accuracy = median(acc);
    m.kl = median(kl);
    out.push_back(m);
  }
  return out;
}

#define Q2L_INSTANTIATE(T)                                                                                          \
  template DecoderModel<T> init_teacher<T>(const ExperimentConfig&);                                               \
  template std::vector<MetricsRow> train_teacher_from_config<T>(const ExperimentConfig&, DecoderModel<T>&,          \
                                                                const StageRunOptions&);                            \
  template std::vector<MetricsRow> run_pipeline<T>(const ExperimentConfig&, const DecoderModel<T>&, DecoderModel<T>&, \
                                                   const std::vector<int>&, const std::vector<std::size_t>&,         \
                                                   std::uint64_t);                                                   \
  template std::vector<AblationRow> run_ablation<T>(const std::string&, const ExperimentConfig&, const DecoderModel<T>&);
Q2L_INSTANTIATE(float)
Q2L_INSTANTIATE(double)
#undef Q2L_INSTANTIATE

}  // namespace q2l
