// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
// if any fails. Usage: acceptance [--only N]... [--out DIR] [--config FILE]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "oracles.hpp"
#include "quad2lin/checkpoint.hpp"
#include "quad2lin/finite_diff.hpp"
#include "quad2lin/harness.hpp"
#include "quad2lin/rng.hpp"
#include "quad2lin/seeding.hpp"

using namespace q2l;
using namespace q2l::testing;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path out;
  ExperimentConfig toy;
  std::optional<DecoderModel<float>> teacher;
  double teacher_accuracy = 0.0;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

HeadGeometry random_geometry(Rng& rng, std::size_t max_dh) {
  static const std::size_t kHeads[] = {1, 2, 4};
  const std::size_t heads = kHeads[rng.below(3)];
  std::size_t groups = heads;
  while (groups > 1 && rng.uniform() < 0.5) groups /= 2;
  const std::size_t dh = 1 + rng.below(max_dh);
  return {heads * dh, heads, groups, dh};
}

template <typename To, typename From>
Mamba2Weights<To> cast_weights(const Mamba2Weights<From>& w) {
  auto out = Mamba2Weights<To>::allocate(w.geo, w.conv_width);
  out.options = w.options;
  w.for_each_param([&](const Parameter<From>& p) {
    out.for_each_param([&](Parameter<To>& q) {
      if (q.name == p.name) q.value = p.value.template cast<To>();
    });
  });
  return out;
}

// ---------------------------------------------------------------------------

Verdict oracle_equivalence(Context&) {
  Rng rng(2024);
  double err64 = 0.0, err32 = 0.0, scale = 0.0;
  const int cases = 100;
  for (int c = 0; c < cases; ++c) {
    const auto geo = random_geometry(rng, 32);
    const std::size_t steps = 1 + rng.below(128);
    auto wf = random_mamba<float>(geo, 1000 + c);
    wf.options.conv_activation = rng.uniform() < 0.7;
    wf.options.output_gate = rng.uniform() < 0.7;
    // The 64-bit weights are the exact widening of the 32-bit ones, so both precisions
    // are judged against the same 64-bit oracle.
    const auto wd = cast_weights<double>(wf);
    const auto xf = Tensor<double>::randn({steps, geo.model_dim}, rng, 1.0).cast<float>();
    const auto xd = xf.cast<double>();
    const auto oracle = mamba_oracle(xd, wd);

    std::vector<Tensor<double>> out64 = {mamba2_forward_recurrent(xd, wd), run_decode(xd, wd)};
    std::vector<Tensor<double>> out32 = {mamba2_forward_recurrent(xf, wf).cast<double>(),
                                         run_decode(xf, wf).cast<double>()};
    for (std::size_t chunk : {std::size_t{1}, std::size_t{8}, std::size_t{16}, steps}) {
      out64.push_back(mamba2_forward_chunked(xd, wd, chunk));
      out32.push_back(mamba2_forward_chunked(xf, wf, chunk).cast<double>());
    }
    for (const auto& y : out64) err64 = std::max(err64, max_abs_diff(y, oracle));
    for (const auto& y : out32) err32 = std::max(err32, max_abs_diff(y, oracle));
    scale = std::max(scale, oracle.max_abs());
  }
  return {err64 <= 1e-10 && err32 <= 1e-4, std::to_string(cases) + " cases; max err 64-bit " + fmt(err64, 3) +
                                                " (<= 1e-10), 32-bit " + fmt(err32, 3) + " (<= 1e-4); max |y| " + fmt(scale, 3)};
}

Verdict seeding_mimicry(Context&) {
  Rng rng(7);
  double lin_err = 0.0, gamma_err = 0.0;
  bool conv_exact = true;
  for (int c = 0; c < 20; ++c) {
    const auto geo = random_geometry(rng, 16);
    auto attn = AttentionWeights<double>::init(geo, rng, 0.3);
    const std::size_t steps = 1 + rng.below(64);
    const auto x = Tensor<double>::randn({steps, geo.model_dim}, rng, 1.0);

    auto m = carve(attn, SeedConfig{});
    const auto gammas = mamba2_gammas(x, m);
    for (auto g : gammas.span()) gamma_err = std::max(gamma_err, std::abs(g - 0.99976750));

    Tape<double> tp(false);
    const auto p = Tensor<double>::randn({steps, m.conv_channels()}, rng, 2.0);
    conv_exact = conv_exact &&
                 ops::causal_depthwise_conv(tp.constant(p), tp.param(m.conv_kernel), tp.param(m.conv_bias))
                     .value()
                     .bit_equal(p);

    m.options.fixed_gamma = 1.0;
    m.options.output_gate = false;
    m.options.conv_activation = false;
    const auto ref = linear_attention_reference(x, attn, m.options.qk_scale);
    lin_err = std::max({lin_err, max_abs_diff(mamba2_forward_recurrent(x, m), ref),
                        max_abs_diff(mamba2_forward_chunked(x, m, 8), ref), max_abs_diff(run_decode(x, m), ref)});
  }
  return {lin_err <= 1e-12 && gamma_err <= 1e-8 && conv_exact,
          "linear-attention err " + fmt(lin_err, 3) + " (<= 1e-12); |gamma - 0.99976750| " + fmt(gamma_err, 3) +
              " (<= 1e-8); conv identity " + (conv_exact ? "bit-exact" : "NOT bit-exact")};
}

Verdict gradient_correctness(Context&) {
  Rng rng(99);
  const int configs = 20;
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  auto record = [&](const std::string& name, double err) {
    ++checks;
    if (err > worst || std::isnan(err)) {
      worst = std::isnan(err) ? INFINITY : err;
      worst_name = name;
    }
  };
  for (int c = 0; c < configs; ++c) {
    const auto geo = random_geometry(rng, 4);
    const std::size_t steps = 2 + rng.below(7);
    const auto x0 = Tensor<double>::uniform({steps, geo.model_dim}, rng, -2.0, 2.0);
    const auto probe = Tensor<double>::uniform({steps, geo.model_dim}, rng, -1.0, 1.0);
    auto weighted = [&](Tape<double>& t, Var<double> y) { return ops::sum(ops::mul(y, t.constant(probe))); };

    auto aw = AttentionWeights<double>::init(geo, rng, 0.5);
    record("attention.x",
           gradient_check<double>([&](Tape<double>& t, Var<double> x) { return weighted(t, attention_forward(x, aw)); },
                                  x0));
    aw.for_each_param([&](Parameter<double>& p) {
      record("attention." + p.name, parameter_gradient_check<double>(p, [&](Tape<double>& t) {
               return weighted(t, attention_forward(t.constant(x0), aw));
             }));
    });

    auto mw = random_mamba<double>(geo, 500 + c);
    mw.options.head_norm = rng.uniform() < 0.5;
    for (std::size_t chunk : {std::size_t{0}, 1 + rng.below(steps)}) {
      const ops::ScanOptions scan{chunk};
      const std::string tag = "mamba2[chunk " + std::to_string(chunk) + "].";
      record(tag + "x", gradient_check<double>(
                            [&](Tape<double>& t, Var<double> x) { return weighted(t, mamba2_forward(x, mw, scan)); },
                            x0));
      mw.for_each_param([&](Parameter<double>& p) {
        record(tag + p.name, parameter_gradient_check<double>(p, [&](Tape<double>& t) {
                 return weighted(t, mamba2_forward(t.constant(x0), mw, scan));
               }));
      });
    }

    const std::size_t classes = 3 + rng.below(6);
    const auto z0 = Tensor<double>::randn({steps, classes}, rng, 2.0);
    const auto other = Tensor<double>::randn({steps, classes}, rng, 2.0);
    std::vector<std::int32_t> targets(steps);
    std::vector<std::uint8_t> mask(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      targets[t] = rng.uniform() < 0.2 ? -1 : static_cast<std::int32_t>(rng.below(classes));
      mask[t] = rng.uniform() < 0.7;
    }
    mask[0] = 1;
    targets[0] = 0;
    const double tau = 0.5 + 2.0 * rng.uniform();
    record("cross_entropy", gradient_check<double>(
                                [&](Tape<double>&, Var<double> z) { return ops::cross_entropy<double>(z, targets); },
                                z0));
    record("mse", gradient_check<double>(
                      [&](Tape<double>& t, Var<double> z) { return ops::mse(z, t.constant(other)); }, z0));
    record("kl.student", gradient_check<double>(
                             [&](Tape<double>& t, Var<double> z) { return kl_logits(t, other, z, tau, mask); }, z0));
    record("kl.teacher", gradient_check<double>(
                             [&](Tape<double>& t, Var<double> z) {
                               return ops::kl_div_logits<double>(z, t.constant(other), tau, mask);
                             },
                             z0));
    const auto w = Tensor<double>::uniform({geo.model_dim}, rng, 0.5, 1.5);
    record("rms_norm.x", gradient_check<double>(
                             [&](Tape<double>& t, Var<double> z) {
                               return weighted(t, ops::rms_norm(z, t.constant(w)));
                             },
                             x0));
    record("rms_norm.w", gradient_check<double>(
                             [&](Tape<double>& t, Var<double> z) {
                               return weighted(t, ops::rms_norm(t.constant(x0), z));
                             },
                             w));
    const auto qcols = geo.q_width();
    const auto hx = Tensor<double>::uniform({steps, qcols}, rng, -2.0, 2.0);
    const auto hprobe = Tensor<double>::uniform({steps, qcols}, rng, -1.0, 1.0);
    record("group_rms_norm", gradient_check<double>(
                                 [&](Tape<double>& t, Var<double> z) {
                                   return ops::sum(ops::mul(ops::group_rms_norm(z, geo.head_dim), t.constant(hprobe)));
                                 },
                                 hx));

    // Layerwise MSE through a small student's trainable parameters.
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.model_dim = 8;
    cfg.heads = 2;
    cfg.groups = 1 + rng.below(2);
    cfg.head_dim = 4;
    cfg.mlp_dim = 8;
    cfg.vocab = vocab::kSize;
    cfg.max_pos = 16;
    cfg.init_std = 0.3;
    auto teacher = build_teacher<double>(cfg, 700 + c);
    auto student = convert(teacher, all_mamba_plan(2), SeedConfig{}, InitStrategy::kInheritOnly, 800 + c);
    apply_stage_freezing(student, StageConfig::defaults(2));
    const auto in = to_model_input<double>(gen_recall_task(900 + c, TaskConfig{}), 2);
    const auto caps = capture_layer_io(teacher, in);
    const auto tl = logits(teacher, in);
    for (auto* p : {&student.blocks[c % 2].mamba.w_k, &student.blocks[(c + 1) % 2].mamba.conv_kernel}) {
      record("layerwise_mse." + p->name, parameter_gradient_check<double>(
                                             *p, [&](Tape<double>& t) { return layerwise_mse(t, student, caps); }));
      record("kl_model." + p->name, parameter_gradient_check<double>(
                                        *p, [&](Tape<double>& t) { return kl_logits(t, tl, forward(t, student, in)); }));
    }
  }
  return {worst < 1e-4, std::to_string(configs) + " configurations, " + std::to_string(checks) +
                            " checks; worst rel. err " + fmt(worst, 3) + " (" + worst_name + ", < 1e-4)"};
}

// ---------------------------------------------------------------------------
// Training-based criteria share one teacher.

bool ensure_teacher(Context& ctx, std::string& why) {
  if (!ctx.teacher) {
    const auto t0 = std::chrono::steady_clock::now();
    ctx.teacher = init_teacher<float>(ctx.toy);
    train_teacher_from_config(ctx.toy, *ctx.teacher, StageRunOptions{ctx.out / "teacher", {}});
    ctx.teacher_accuracy = evaluate_accuracy(*ctx.teacher, make_eval_samples(ctx.toy, TaskKind::kRecall)).value();
    std::cout << "  teacher: recall accuracy " << fmt(ctx.teacher_accuracy) << " after "
              << fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 3) << " s\n";
  }
  if (ctx.teacher_accuracy < 0.9) {
    why = "teacher recall accuracy " + fmt(ctx.teacher_accuracy) + " < 0.9";
    return false;
  }
  return true;
}

std::vector<AblationRow> ablation(Context& ctx, const std::string& grid) {
  const auto rows = run_ablation(grid, ctx.toy, *ctx.teacher);
  std::ofstream all(ctx.out / ("ablation_" + grid + ".csv"));
  write_ablation_csv(all, rows);
  const auto med = median_by_variant(rows);
  std::ofstream m(ctx.out / ("ablation_" + grid + "_median.csv"));
  write_ablation_csv(m, med);
  for (const auto& r : med)
    std::cout << "  " << grid << " " << r.variant << ": accuracy " << fmt(r.accuracy) << ", kl " << fmt(r.kl)
              << " (" << r.steps << " steps)\n";
  return med;
}

const AblationRow& find(const std::vector<AblationRow>& rows, const std::string& variant) {
  for (const auto& r : rows)
    if (r.variant == variant) return r;
  throw ContractError("missing variant " + variant);
}

Verdict stage_directionality(Context& ctx) {
  std::string why;
  if (!ensure_teacher(ctx, why)) return {false, why};
  const auto med = ablation(ctx, "stages");
  const double a123 = find(med, "1+2+3").accuracy, a3 = find(med, "3").accuracy, a1 = find(med, "1").accuracy;
  const double ratio = a123 / ctx.teacher_accuracy;
  return {a123 >= a3 && a3 >= a1 && ratio >= 0.85,
          "teacher " + fmt(ctx.teacher_accuracy) + "; acc(1+2+3) " + fmt(a123) + " >= acc(3) " + fmt(a3) +
              " >= acc(1) " + fmt(a1) + "; acc(1+2+3)/teacher " + fmt(ratio) + " (>= 0.85)"};
}

Verdict init_directionality(Context& ctx) {
  std::string why;
  if (!ensure_teacher(ctx, why)) return {false, why};
  const auto med = ablation(ctx, "init");
  const double scratch = find(med, "from-scratch").kl, inherit = find(med, "inherit-only").kl,
               mimic = find(med, "inherit-mimic").kl;
  return {scratch >= inherit && inherit >= mimic, "median KL from-scratch " + fmt(scratch) + " >= inherit-only " +
                                                      fmt(inherit) + " >= inherit-mimic " + fmt(mimic)};
}

Verdict hybrid_plans(Context& ctx) {
  const auto p = hybrid_plan(32, 8, HybridStrategy::kHeadInterleaved);
  std::vector<std::size_t> expected;
  for (std::size_t i = 0; i < 32; i += 4) expected.push_back(i);
  bool exact = p.attention_layers() == expected;
  const std::pair<HybridStrategy, std::string> patterns[] = {{HybridStrategy::kTailStacked, "MMMMMMAA"},
                                                             {HybridStrategy::kHeadStacked, "AAMMMMMM"},
                                                             {HybridStrategy::kTailInterleaved, "MMMAMMMA"},
                                                             {HybridStrategy::kHeadInterleaved, "AMMMAMMM"}};
  for (const auto& [s, pattern] : patterns) exact = exact && hybrid_plan(8, 2, s).pattern() == pattern;

  std::string why;
  if (!ensure_teacher(ctx, why)) return {false, std::string(exact ? "plans exact; " : "plans WRONG; ") + why};
  const auto med = ablation(ctx, "hybrid-ratio");
  bool monotone = true;
  std::string trend;
  for (std::size_t i = 0; i < med.size(); ++i) {
    if (i > 0 && med[i].accuracy < med[i - 1].accuracy) monotone = false;
    trend += (i ? " <= " : "") + med[i].variant + ":" + fmt(med[i].accuracy);
  }
  return {exact && monotone, std::string(exact ? "plans exact" : "plans WRONG") + "; median accuracy " + trend};
}

Verdict efficiency_scaling(Context& ctx) {
  BenchSpec spec;
  spec.lengths = {1024, 4096, 16384};
  const ModelConfig cfg = spec.sized_model();
  const auto teacher = build_teacher<float>(cfg, 1);
  std::map<std::string, std::vector<BenchRow>> results;
  std::vector<fs::path> csvs;
  bool memory_exact = true;
  for (const std::string name : {"attention", "mamba", "hybrid"}) {
    const HybridPlan plan = name == "attention" ? all_attention_plan(cfg.layers)
                            : name == "mamba"   ? all_mamba_plan(cfg.layers)
                                                : hybrid_plan(cfg.layers, 1, HybridStrategy::kHeadInterleaved);
    const auto model = convert(teacher, plan, SeedConfig{});
    const auto rows = bench_decode(model, spec.lengths, spec.options);
    for (const auto& r : rows) {
      const auto m = memory_model(cfg, plan, r.context_length, sizeof(float));
      memory_exact = memory_exact && r.status == "ok" && r.kv_bytes == m.kv_bytes && r.state_bytes == m.state_bytes;
      const auto m1 = memory_model(cfg, plan, 1, sizeof(float));
      memory_exact = memory_exact && m.kv_bytes == r.context_length * m1.kv_bytes && m.state_bytes == m1.state_bytes;
    }
    const fs::path csv = ctx.out / ("bench_" + name + ".csv");
    std::ofstream os(csv);
    write_bench_csv(os, rows);
    csvs.push_back(csv);
    results[name] = rows;
    std::cout << "  bench " << name << ":";
    for (const auto& r : rows) std::cout << " T=" << r.context_length << " " << fmt(r.decode_s_per_token * 1e6) << "us";
    std::cout << "\n";
  }
  std::ofstream(ctx.out / "decode_latency.svg") << plot_csv_files(csvs, "decode_s_per_token", "Decode latency");
  std::ofstream(ctx.out / "cache_bytes.svg") << plot_csv_files(csvs, "kv_bytes", "KV cache bytes");
  auto growth = [&](const std::string& n) {
    return results[n].back().decode_s_per_token / results[n].front().decode_s_per_token;
  };
  const double gm = growth("mamba"), ga = growth("attention"), gh = growth("hybrid");
  return {gm <= 1.2 && ga >= 2.0 && memory_exact,
          "latency T=16384 / T=1024: mamba " + fmt(gm, 3) + " (<= 1.2), attention " + fmt(ga, 3) +
              " (>= 2), hybrid " + fmt(gh, 3) + "; memory model " + (memory_exact ? "exact" : "MISMATCH")};
}

Verdict determinism(Context& ctx) {
  ExperimentConfig c;
  c.model.layers = 2;
  c.model.model_dim = 16;
  c.model.heads = 2;
  c.model.groups = 1;
  c.model.head_dim = 8;
  c.model.mlp_dim = 32;
  c.model.vocab = vocab::kSize;
  c.model.max_pos = 32;
  c.task.max_pos = 32;
  c.mix = {0.5, 0.5};
  c.teacher.steps = 20;
  c.stage1.steps = 10;
  c.stage3.steps = 10;
  auto run = [&](const std::string& tag) {
    const fs::path dir = ctx.out / ("determinism_" + tag);
    fs::remove_all(dir);
    auto teacher = init_teacher<float>(c);
    train_teacher_from_config(c, teacher, StageRunOptions{dir / "teacher", {}});
    auto student = convert(teacher, c.plan.resolve(2), c.seeding, c.init, convert_seed(c.seed));
    for (int s : {1, 3}) {
      run_stage(c.stage(s), teacher, student, stage_source(c, s, c.seed, c.stage(s).steps),
                StageRunOptions{dir / ("stage" + std::to_string(s)), {}});
    }
    return dir;
  };
  const auto a = run("a"), b = run("b");
  bool same = true;
  for (const std::string sub : {"teacher", "stage1", "stage3"}) {
    same = same && read_checkpoint_info(a / sub / "checkpoint").content_hash ==
                       read_checkpoint_info(b / sub / "checkpoint").content_hash;
    same = same && file_sha1(a / sub / "metrics.csv") == file_sha1(b / sub / "metrics.csv");
  }
  CheckpointInfo info;
  const auto loaded = load_checkpoint<float>(a / "stage3" / "checkpoint", &info);
  const auto hash = save_checkpoint(loaded, a / "roundtrip", info.provenance);
  const auto again = load_checkpoint<float>(a / "roundtrip");
  bool bit_identical = hash == read_checkpoint_info(a / "stage3" / "checkpoint").content_hash;
  std::vector<const Tensor<float>*> first, second;
  loaded.for_each_param([&](const std::string&, const Parameter<float>& p) { first.push_back(&p.value); });
  again.for_each_param([&](const std::string&, const Parameter<float>& p) { second.push_back(&p.value); });
  bit_identical = bit_identical && first.size() == second.size();
  for (std::size_t i = 0; bit_identical && i < first.size(); ++i) bit_identical = first[i]->bit_equal(*second[i]);
  return {same && bit_identical, std::string("repeat runs ") + (same ? "bit-identical" : "DIFFER") +
                                     " (checkpoints + metrics); round trip " +
                                     (bit_identical ? "bit-identical" : "NOT bit-identical")};
}

}  // namespace

int main(int argc, char** argv) {
  Context ctx;
  ctx.out = "acceptance_out";
  fs::path config = QUAD2LIN_ACCEPTANCE_CONFIG;
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      only.push_back(std::atoi(argv[++i]));
    } else if (a == "--out" && i + 1 < argc) {
      ctx.out = argv[++i];
    } else if (a == "--config" && i + 1 < argc) {
      config = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--only N]... [--out DIR] [--config FILE]\n";
      return 2;
    }
  }
  fs::create_directories(ctx.out);
  ctx.toy = load_experiment_config(config);

  const std::vector<std::pair<std::string, std::function<Verdict(Context&)>>> criteria = {
      {"oracle equivalence", oracle_equivalence},     {"seeding mimicry", seeding_mimicry},
      {"gradient correctness", gradient_correctness}, {"stage pipeline directionality", stage_directionality},
      {"init ablation directionality", init_directionality}, {"hybrid plans", hybrid_plans},
      {"efficiency scaling", efficiency_scaling},     {"determinism and persistence", determinism},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), n) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "criterion " << n << " (" << criteria[i].first << "): " << (v.pass ? "PASS" : "FAIL") << " - "
              << v.detail << " [" << fmt(secs, 3) << " s]" << std::endl;
    all = all && v.pass;
  }
  return all ? 0 : 1;
}
