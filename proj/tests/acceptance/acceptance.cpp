// ----------------------------------------------------------------------------
// Copyright 2026 The depthfuse Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// ----------------------------------------------------------------------------

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "depthfuse.hpp"

namespace fs = std::filesystem;
using namespace depthfuse;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(const char* name, bool pass, const std::string& detail) {
  std::printf("%s  %-28s %s\n", pass ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

void guarded(const char* name, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(name, false, std::string("exception: ") + e.what());
  }
}

Tensor uniform(const Shape& s, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t = Tensor::zeros(s);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

LayerIntermediates random_z(std::size_t L, std::size_t B, std::size_t T, std::size_t d, Rng& rng) {
  LayerIntermediates z;
  for (std::size_t i = 0; i < L; ++i) z.z.push_back(uniform({B, T, d}, rng));
  z.lengths.assign(B, T);
  return z;
}

void randomize(ParamStore& store, Rng& rng, double sd) {
  for (Parameter& p : store.all())
    if (!p.buffer)
      for (double& v : p.value.data()) v = rng.normal(0.0, sd);
}

// ---- criteria -------------------------------------------------------------------

void gradient_correctness() {
  const auto t0 = Clock::now();
  GradSuiteOptions o;  // L=3, d=8, d_pos=4, batch=2, seq=4
  const std::vector<GradCheckRow> rows = run_grad_suite(o);
  double worst = 0.0;
  std::set<std::string> components;
  for (const GradCheckRow& r : rows) {
    worst = std::max(worst, r.error);
    components.insert(r.component);
  }
  const double secs = seconds_since(t0);
  const bool covered = components.count("encoder_block") && components.count("average") &&
                       components.count("concat") && components.count("dwatt");
  report("gradient_correctness", covered && worst < 1e-4 && secs < 30.0,
         fmt("max_rel_error=%.3e", worst) + " groups=" + std::to_string(rows.size()) +
             fmt(" time=%.2fs", secs));
}

void depth_attention_normalization() {
  Rng rng(101);
  double worst = 0.0, min_score = 1.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t L = 1 + rng.below(6), d = 2 + rng.below(7), B = 1 + rng.below(3),
                      T = 1 + rng.below(5);
    FusionSpec spec;
    spec.kind = FusionKind::DWAtt;
    spec.d_pos = 1 + rng.below(6);
    ParamStore store;
    DWAttHead head = DWAttHead::create(store, L, d, spec, rng);
    randomize(store, rng, 0.5);
    LayerIntermediates z = random_z(L, B, T, d, rng);
    Tensor q = head.make_query(z.final());
    Tensor s = head.scores(q, head.keys());
    for (std::size_t r = 0; r < s.rows(); ++r) {
      double total = 0.0;
      for (std::size_t l = 0; l < L; ++l) {
        const double v = s.data()[r * L + l];
        min_score = std::min(min_score, v);
        total += v;
      }
      worst = std::max(worst, std::abs(total - 1.0));
    }
  }
  report("depth_attention_normalized", worst <= 1e-9 && min_score >= 0.0,
         fmt("max|sum-1|=%.2e", worst) + fmt(" min_score=%.3e", min_score) + " inputs=100");
}

void concat_equivalence() {
  Rng rng(202);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t L = 1 + rng.below(6), d = 1 + rng.below(8), B = 1 + rng.below(3),
                      T = 1 + rng.below(4);
    ParamStore store;
    ConcatHead head = ConcatHead::create(store, L, d, rng);
    randomize(store, rng, 1.0);
    LayerIntermediates z = random_z(L, B, T, d, rng);
    Tensor h = concat_fuse(z, head);
    // single affine map on the depth concatenation [z_1 ... z_L] (length L*d)
    // with weight rows stacked layer by layer and the summed bias
    for (std::size_t r = 0; r < B * T; ++r) {
      std::vector<double> cat;
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t c = 0; c < d; ++c) cat.push_back(z.z[i].data()[r * d + c]);
      for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < L; ++i) acc += head.biases[i].data()[j];
        for (std::size_t k = 0; k < L * d; ++k) {
          acc += cat[k] * head.weights[k / d].data()[(k % d) * d + j];
        }
        worst = std::max(worst, std::abs(acc - h.data()[r * d + j]));
      }
    }
  }
  report("concat_equivalence", worst < 1e-12, fmt("max_abs_diff=%.2e", worst) + " instances=100");
}

void dwatt_residual_transparency() {
  Rng rng(303);
  bool all_equal = true;
  for (int trial = 0; trial < 20; ++trial) {
    FusionSpec spec;
    spec.kind = FusionKind::DWAtt;
    spec.d_pos = 4;
    ParamStore store;
    DWAttHead head = DWAttHead::create(store, 4, 8, spec, rng);
    randomize(store, rng, 0.5);
    for (Parameter& p : store.all())
      if (p.name.starts_with("fusion/dwatt/value"))
        for (double& v : p.value.data()) v = 0.0;
    LayerIntermediates z = random_z(4, 2, 3, 8, rng);
    Tensor h = dwatt_fuse(z, head);
    all_equal = all_equal && std::memcmp(h.data().data(), z.final().data().data(),
                                         z.final().numel() * sizeof(double)) == 0;
  }
  report("dwatt_residual_transparency", all_equal, "h == z_L bitwise over 20 instances");
}

void parameter_accounting() {
  const auto t0 = Clock::now();
  const std::size_t L = 24, d = 1024;
  FusionSpec spec;
  spec.d_pos = 24;
  spec.gamma_q = spec.gamma_v = 0.5;
  auto count = [&](FusionKind k) {
    spec.kind = k;
    return count_added_params(spec, L, d);
  };
  const std::size_t concat = count(FusionKind::Concat), dwatt = count(FusionKind::DWAtt),
                    extra = count(FusionKind::ExtraLayers), average = count(FusionKind::Average);
  const double secs = seconds_since(t0);
  auto rel = [](std::size_t n, double ref) { return std::abs(static_cast<double>(n) - ref) / ref; };
  const bool pass = rel(concat, 25.18e6) < 0.01 && rel(dwatt, 26.38e6) < 0.01 && extra == 25192448 &&
                    rel(extra, 25.19e6) < 0.01 && average == 0 && secs < 1.0;
  report("parameter_accounting", pass,
         "concat=" + std::to_string(concat) + " dwatt=" + std::to_string(dwatt) +
             " extra2=" + std::to_string(extra) + " average=" + std::to_string(average) +
             fmt(" time=%.4fs", secs));
}

void few_shot_protocol() {
  const TaggedCorpus train = synth_ner_corpus(0, 1250).train;
  bool ok = true;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const FewShotSpec spec{8, 4, seed};
    TaggedCorpus a = few_shot_sample(train, spec);
    const auto idx = few_shot_indices(train.size(), spec);
    ok = ok && a.size() == 32 && std::set<std::size_t>(idx.begin(), idx.end()).size() == 32 &&
         few_shot_sample(train, spec) == a;
  }
  report("few_shot_protocol", ok, "32 distinct, reproducible, 1000 seeds");
}

void lr_schedule_endpoints() {
  bool ok = true;
  for (double max_lr : {5e-5, 1e-5, 1e-3, 1.0})
    for (std::uint64_t total : {2ull, 10ull, 1000ull, 123456ull}) {
      ok = ok && linear_decay_lr(0, total, max_lr) == max_lr &&
           linear_decay_lr(total, total, max_lr) == 0.0 &&
           linear_decay_lr(total / 2, total, max_lr) == max_lr / 2;
    }
  report("lr_schedule_endpoints", ok, "lr(0)=max, lr(total)=0, lr(total/2)=max/2 exactly");
}

using Labels = std::vector<std::string>;

std::set<std::tuple<std::size_t, std::size_t, std::string>> brute_chunks(const Labels& l) {
  std::set<std::tuple<std::size_t, std::size_t, std::string>> out;
  for (std::size_t s = 0; s < l.size(); ++s) {
    if (l[s] == "O") continue;
    const std::string x = l[s].substr(2);
    const bool starts = l[s][0] == 'B' || s == 0 || (l[s - 1] != "B-" + x && l[s - 1] != "I-" + x);
    if (!starts) continue;
    for (std::size_t e = s + 1; e <= l.size(); ++e) {
      bool inner = true;
      for (std::size_t k = s + 1; k < e; ++k) inner = inner && l[k] == "I-" + x;
      if (inner && (e == l.size() || l[e] != "I-" + x)) out.insert({s, e, x});
    }
  }
  return out;
}

void micro_f1_oracle() {
  static const Labels pool = {"O", "O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-MISC", "I-MISC"};
  Rng rng(404);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t len = 1 + rng.below(15);
    Labels g, p;
    for (std::size_t i = 0; i < len; ++i) {
      g.push_back(pool[rng.below(pool.size())]);
      p.push_back(pool[rng.below(pool.size())]);
    }
    const auto gs = brute_chunks(g), ps = brute_chunks(p);
    double tp = 0;
    for (const auto& c : ps) tp += gs.count(c);
    const double prec = ps.empty() ? 0.0 : tp / ps.size();
    const double rec = gs.empty() ? 0.0 : tp / gs.size();
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    const F1Report r = micro_f1({g}, {p});
    if (r.precision != prec || r.recall != rec || std::abs(r.f1 - f1) > 1e-15) ++mismatches;
  }
  const Labels gold = {"B-PER", "I-PER", "O", "B-LOC"};
  const double perfect = micro_f1({gold}, {gold}).f1;
  const double all_o = micro_f1({gold}, {Labels(4, "O")}).f1;
  report("micro_f1_oracle", mismatches == 0 && perfect == 1.0 && all_o == 0.0,
         "mismatches=" + std::to_string(mismatches) + "/1000" + fmt(" perfect=%.1f", perfect) +
             fmt(" all_O=%.1f", all_o));
}

void perplexity_analytics() {
  bool ok = true;
  double worst = 0.0;
  for (std::size_t V : {2u, 7u, 50u, 1000u}) {
    const double ppl = perplexity_from_logits(Tensor::full({5, V}, 0.3), {0, 1, 1, 0, 1});
    worst = std::max(worst, std::abs(ppl - static_cast<double>(V)) / static_cast<double>(V));
  }
  ok = worst <= 1e-9;
  const double perfect = perplexity_from_logits(Tensor({2, 3}, {1e3, 0, 0, 0, 0, 1e3}), {0, 2});
  ok = ok && std::abs(perfect - 1.0) <= 1e-12;
  report("perplexity_analytics", ok, fmt("uniform max rel err=%.2e", worst) + fmt(" perfect=%.12f", perfect));
}

// ---- desk-scale experiments --------------------------------------------------------

struct DeskScale {
  fs::path dir;
  fs::path encoder;
  ExperimentConfig grid_cfg;
};

// Pretraining and grid settings for the small-encoder runs.
DeskScale desk_scale_setup(const fs::path& dir) {
  DeskScale s;
  s.dir = dir;
  s.encoder = dir / "encoder.ckpt";

  ExperimentConfig pre;
  pre.encoder.layers = 6;
  pre.encoder.width = 64;
  pre.encoder.heads = 4;
  pre.task = TaskKind::MLM;
  pre.mode = TrainMode::FT;
  pre.fusion.kind = FusionKind::Base;
  pre.epochs = 10;
  pre.batch_size = 16;
  pre.max_lr = 2e-3;
  pre.data.synth_size = 2000;
  pre.seed = 7;
  const auto t0 = Clock::now();
  SharedInputs in = prepare_inputs(pre);
  RunResult r = run_experiment(pre, in);
  save_checkpoint(s.encoder, make_checkpoint(r.model->store, r.model->encoder.config(),
                                             in.data->vocab, {}, "encoder/"));
  std::printf("      pretrain: dev perplexity %.3f -> %.3f in %.0fs\n",
              r.history.epochs.front().dev_metric, r.history.epochs.back().dev_metric,
              seconds_since(t0));

  s.grid_cfg = pre;
  s.grid_cfg.encoder_checkpoint = s.encoder.string();
  s.grid_cfg.task = TaskKind::NER;
  s.grid_cfg.mode = TrainMode::FE;
  s.grid_cfg.batch_size = 0;
  s.grid_cfg.max_lr = 1e-3;
  s.grid_cfg.trials = 5;
  s.grid_cfg.seed = 0;
  s.grid_cfg.grid.shots = {8, 128};
  s.grid_cfg.grid.epochs = {50};
  s.grid_cfg.grid.fusion = {FusionKind::Base, FusionKind::Concat, FusionKind::DWAtt};
  return s;
}

std::string read_all(const fs::path& p) { return read_text(p); }

void desk_scale_trend(const DeskScale& s, Clock::time_point started) {
  SharedInputs in = prepare_inputs(s.grid_cfg);
  GridResult g = run_grid(s.grid_cfg, in);
  write_grid_outputs(s.dir / "grid_a", g);
  const double secs = seconds_since(started);

  bool trend = g.all_ok();
  std::string detail;
  for (std::size_t n : s.grid_cfg.grid.shots) {
    const double base = g.cell(FusionKind::Base, n, 50).median;
    const double concat = g.cell(FusionKind::Concat, n, 50).median;
    const double dwatt = g.cell(FusionKind::DWAtt, n, 50).median;
    trend = trend && concat >= base && dwatt >= base;
    if (n == 128) trend = trend && dwatt >= concat - 0.01;
    char buf[160];
    std::snprintf(buf, sizeof buf, "N=%zu base=%.3f concat=%.3f dwatt=%.3f; ", n, base, concat, dwatt);
    detail += buf;
  }
  report("desk_scale_trend", trend && secs < 1800.0, detail + fmt("time=%.0fs", secs));
}

// Reruns the trend grid, scheduled on two workers, and compares every file.
void determinism(const DeskScale& s) {
  if (!fs::exists(s.dir / "grid_a")) throw Error("first grid run missing");
  // second full run, scheduled on two workers
  ExperimentConfig again = s.grid_cfg;
  again.jobs = 2;
  write_grid_outputs(s.dir / "grid_b", run_grid(again, prepare_inputs(again)));
  std::size_t files = 0, differing = 0;
  for (const auto& entry : fs::recursive_directory_iterator(s.dir / "grid_a")) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), s.dir / "grid_a");
    ++files;
    const fs::path other = s.dir / "grid_b" / rel;
    if (!fs::exists(other) || read_all(entry.path()) != read_all(other)) ++differing;
  }
  report("determinism", files > 0 && differing == 0,
         std::to_string(files) + " CSV files compared, " + std::to_string(differing) + " differ");
}

void fe_freezing(const DeskScale& s) {
  ExperimentConfig c = s.grid_cfg;
  c.feature_cache = false;  // run the frozen encoder for real
  c.fusion.kind = FusionKind::DWAtt;
  c.shots = 8;
  c.epochs = 3;
  SharedInputs in = prepare_inputs(c);
  const RunResult fe = run_experiment(c, in);
  c.mode = TrainMode::FT;
  const RunResult ft = run_experiment(c, in);
  const bool pass = fe.history.encoder_hash_before == fe.history.encoder_hash_after &&
                    ft.history.encoder_hash_before == fe.history.encoder_hash_before &&
                    ft.history.encoder_hash_before != ft.history.encoder_hash_after;
  char buf[160];
  std::snprintf(buf, sizeof buf, "FE %016llx -> %016llx, FT -> %016llx",
                static_cast<unsigned long long>(fe.history.encoder_hash_before),
                static_cast<unsigned long long>(fe.history.encoder_hash_after),
                static_cast<unsigned long long>(ft.history.encoder_hash_after));
  report("fe_freezing", pass, buf);
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path dir = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "depthfuse_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);

  guarded("gradient_correctness", gradient_correctness);
  guarded("depth_attention_normalized", depth_attention_normalization);
  guarded("concat_equivalence", concat_equivalence);
  guarded("dwatt_residual_transparency", dwatt_residual_transparency);
  guarded("parameter_accounting", parameter_accounting);
  guarded("few_shot_protocol", few_shot_protocol);
  guarded("lr_schedule_endpoints", lr_schedule_endpoints);
  guarded("micro_f1_oracle", micro_f1_oracle);
  guarded("perplexity_analytics", perplexity_analytics);

  const auto started = Clock::now();
  std::optional<DeskScale> desk;
  try {
    desk = desk_scale_setup(dir);
  } catch (const std::exception& e) {
    for (const char* name : {"desk_scale_trend", "determinism", "fe_freezing"})
      report(name, false, std::string("pretraining failed: ") + e.what());
  }
  if (desk) {
    guarded("desk_scale_trend", [&] { desk_scale_trend(*desk, started); });
    guarded("determinism", [&] { determinism(*desk); });
    guarded("fe_freezing", [&] { fe_freezing(*desk); });
  }

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
