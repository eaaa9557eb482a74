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

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "depthfuse.hpp"

namespace fs = std::filesystem;
using namespace depthfuse;
using Json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

struct Common {
  std::string config_path;
  std::string output;
  std::optional<std::uint64_t> seed;
  int verbose = 0;
};

// Options shared by the subcommands that run training. Only flags the user
// actually passed are applied, on top of the config file.
struct RunFlags {
  std::optional<std::string> fusion, mode, task, checkpoint, data_source, train, dev, test;
  std::optional<std::size_t> shots, epochs, batch_size, trials, jobs, synth_size, layers, width, heads;
  std::optional<std::uint64_t> synth_seed;
  std::optional<double> lr, weight_decay, mask_rate;
  std::optional<bool> feature_cache;
  std::vector<std::size_t> grid_shots, grid_epochs;
  std::vector<std::string> grid_fusion;

  void attach(CLI::App* app, bool grid) {
    app->add_option("--fusion", fusion, "base | extra_layers | average | concat | dwatt");
    app->add_option("--mode", mode, "FE (frozen encoder) or FT (full finetuning)");
    app->add_option("--task", task, "NER or MLM");
    app->add_option("--encoder-checkpoint", checkpoint, "pretrained encoder container");
    app->add_option("--shots", shots, "N-shot per class (0 = full training set)");
    app->add_option("--epochs", epochs);
    app->add_option("--batch-size", batch_size, "0 = task default");
    app->add_option("--lr", lr, "maximum learning rate");
    app->add_option("--weight-decay", weight_decay);
    app->add_option("--mask-rate", mask_rate);
    app->add_option("--trials", trials);
    app->add_option("--jobs", jobs, "concurrent runs");
    app->add_option("--feature-cache", feature_cache, "reuse frozen-encoder features in FE runs");
    app->add_option("--data", data_source, "synth or conll");
    app->add_option("--train-file", train);
    app->add_option("--dev-file", dev);
    app->add_option("--test-file", test);
    app->add_option("--synth-seed", synth_seed);
    app->add_option("--synth-size", synth_size);
    app->add_option("--layers", layers, "encoder depth L");
    app->add_option("--width", width, "encoder width d");
    app->add_option("--heads", heads);
    if (grid) {
      app->add_option("--grid-shots", grid_shots)->delimiter(',');
      app->add_option("--grid-epochs", grid_epochs)->delimiter(',');
      app->add_option("--grid-fusion", grid_fusion)->delimiter(',');
    }
  }

  Json overlay() const {
    Json j = Json::object();
    if (fusion) j["fusion"]["kind"] = *fusion;
    if (mode) j["mode"] = *mode;
    if (task) j["task"] = *task;
    if (checkpoint) j["encoder_checkpoint"] = *checkpoint;
    if (shots) j["shots"] = *shots;
    if (epochs) j["epochs"] = *epochs;
    if (batch_size) j["batch_size"] = *batch_size;
    if (lr) j["max_lr"] = *lr;
    if (weight_decay) j["weight_decay"] = *weight_decay;
    if (mask_rate) j["mask_rate"] = *mask_rate;
    if (trials) j["trials"] = *trials;
    if (jobs) j["jobs"] = *jobs;
    if (feature_cache) j["feature_cache"] = *feature_cache;
    if (data_source) j["data"]["source"] = *data_source;
    if (train) j["data"]["train"] = *train;
    if (dev) j["data"]["dev"] = *dev;
    if (test) j["data"]["test"] = *test;
    if (synth_seed) j["data"]["synth_seed"] = *synth_seed;
    if (synth_size) j["data"]["synth_size"] = *synth_size;
    if (layers) j["encoder"]["layers"] = *layers;
    if (width) j["encoder"]["width"] = *width;
    if (heads) j["encoder"]["heads"] = *heads;
    if (!grid_shots.empty()) j["grid"]["shots"] = grid_shots;
    if (!grid_epochs.empty()) j["grid"]["epochs"] = grid_epochs;
    if (!grid_fusion.empty()) j["grid"]["fusion"] = grid_fusion;
    return j;
  }
};

fs::path output_dir(const Common& c, const std::string& sub) {
  if (!c.output.empty()) return c.output;
  const char* root = std::getenv("DEPTHFUSE_OUTPUT_ROOT");
  return fs::path(root && *root ? root : "runs") / sub;
}

/// defaults < config file < flags
ExperimentConfig resolve(const Common& c, const RunFlags& f) {
  ExperimentConfig cfg = c.config_path.empty() ? ExperimentConfig{} : load_config(c.config_path);
  apply_json(f.overlay(), cfg);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

void write_resolved(const fs::path& dir, const ExperimentConfig& cfg) {
  write_text_atomic(dir / "resolved_config.json", dump_config(cfg));
}

void log_epoch(const Common& c, const EpochRecord& e, const char* metric) {
  if (c.verbose < 0) return;
  std::fprintf(stderr, "epoch %3zu  loss %.5f  %s %.5f  lr %.3g  (%.1fs)\n", e.epoch, e.train_loss,
               metric, e.dev_metric, e.lr, e.seconds);
}

// ---- subcommands ----

int cmd_pretrain(const Common& c, const RunFlags& f) {
  ExperimentConfig cfg = resolve(c, f);
  cfg.task = TaskKind::MLM;
  cfg.mode = TrainMode::FT;
  cfg.shots = 0;
  const fs::path dir = output_dir(c, "pretrain");
  fs::create_directories(dir);
  write_resolved(dir, cfg);
  SharedInputs in = prepare_inputs(cfg);
  RunOptions opts;
  opts.on_epoch = [&](const EpochRecord& e) { log_epoch(c, e, "dev_ppl"); };
  RunResult r = run_experiment(cfg, in, opts);
  write_file_atomic(dir / "history.csv", [&](std::ostream& os) { r.history.write_csv(os); });
  write_file_atomic(dir / "vocab.txt", [&](std::ostream& os) { in.data->vocab.save(os); });
  save_checkpoint(dir / "encoder.ckpt",
                  make_checkpoint(r.model->store, r.model->encoder.config(), in.data->vocab,
                                  {{"config", to_json(cfg)}}, "encoder/"));
  std::printf("final dev perplexity %.4f; encoder written to %s\n",
              r.history.epochs.back().dev_metric, (dir / "encoder.ckpt").c_str());
  return kExitOk;
}

int cmd_train(const Common& c, const RunFlags& f, bool save_model) {
  ExperimentConfig cfg = resolve(c, f);
  const fs::path dir = output_dir(c, "train");
  fs::create_directories(dir);
  write_resolved(dir, cfg);
  SharedInputs in = prepare_inputs(cfg);
  RunOptions opts;
  opts.keep_best = save_model;
  const char* metric = cfg.task == TaskKind::NER ? "dev_f1" : "dev_ppl";
  opts.on_epoch = [&](const EpochRecord& e) { log_epoch(c, e, metric); };
  RunResult r = run_experiment(cfg, in, opts);
  write_file_atomic(dir / "history.csv", [&](std::ostream& os) { r.history.write_csv(os); });
  const BestDev best = best_dev(r.history);
  Json summary = {{"metric", r.history.metric},
                  {"best_epoch", best.epoch},
                  {"best_dev", best.metric},
                  {"total_steps", r.history.total_steps},
                  {"train_size", r.history.train_size},
                  {"seed", cfg.seed}};
  write_text_atomic(dir / "summary.json", summary.dump(2) + "\n");
  if (save_model && r.best) {
    r.best->meta["config"] = to_json(cfg);
    r.best->meta["labels"] = in.data->labels.types();
    save_checkpoint(dir / "model.ckpt", *r.best);
  }
  std::printf("best dev %s %.4f at epoch %zu\n", r.history.metric.c_str(), best.metric, best.epoch);
  return kExitOk;
}

int cmd_grid(const Common& c, const RunFlags& f) {
  ExperimentConfig cfg = resolve(c, f);
  const fs::path dir = output_dir(c, "grid");
  fs::create_directories(dir);
  write_resolved(dir, cfg);
  SharedInputs in = prepare_inputs(cfg);
  GridResult g = run_grid(cfg, in, [&](const TrialResult& r) {
    if (c.verbose < 0) return;
    if (r.ok) {
      std::fprintf(stderr, "%-24s best %.4f (epoch %zu)\n", run_stem(r).c_str(), r.best, r.best_epoch);
    } else {
      std::fprintf(stderr, "%-24s FAILED: %s\n", run_stem(r).c_str(), r.error.c_str());
    }
  });
  write_grid_outputs(dir, g);
  write_aggregate_csv(std::cout, g);
  return g.all_ok() ? kExitOk : kExitFailure;
}

int cmd_eval(const Common& c, const std::string& model_path, const std::string& split) {
  Checkpoint ck = load_checkpoint(model_path);
  if (!ck.meta.contains("config")) throw ConfigError("model checkpoint carries no config", "model");
  ExperimentConfig cfg;
  apply_json(ck.meta["config"], cfg);
  if (!c.config_path.empty()) {
    // a config file may point the evaluation at different data
    cfg.data = load_config(c.config_path).data;
  }
  cfg.encoder_checkpoint.clear();
  cfg.encoder = ck.encoder;
  const Vocab vocab = Vocab::from_tokens(ck.vocab);
  Dataset data = load_dataset(cfg, &vocab);
  if (ck.meta.contains("labels")) data.labels = LabelSet::from_types(ck.meta["labels"]);
  const TaggedCorpus& corpus = split == "test" ? data.test : data.dev;
  if (corpus.empty()) throw InputError("split '" + split + "' is empty");
  const std::size_t n_out = cfg.task == TaskKind::NER ? data.labels.size() : ck.encoder.vocab_size;
  auto m = build_model(cfg, ck.encoder, n_out, cfg.seed);
  restore(m->store, ck);
  const fs::path dir = output_dir(c, "eval");
  fs::create_directories(dir);
  write_resolved(dir, cfg);
  if (cfg.task == TaskKind::NER) {
    F1Report rep = evaluate_ner(*m, corpus, data);
    rep.write_table(std::cout);
    write_file_atomic(dir / ("report_" + split + ".csv"), [&](std::ostream& os) { rep.write_csv(os); });
  } else {
    const double ppl = evaluate_mlm(*m, corpus, data.vocab, cfg.mask_rate, derive_seed(0, "dev-mask"));
    std::printf("perplexity %.4f\n", ppl);
    write_text_atomic(dir / ("report_" + split + ".csv"), "perplexity\n" + std::to_string(ppl) + "\n");
  }
  return kExitOk;
}

int cmd_grad_check(const GradSuiteOptions& o) {
  const std::vector<GradCheckRow> rows = run_grad_suite(o);
  bool ok = true;
  std::printf("%-14s %-36s %6s %12s  %s\n", "component", "parameter", "size", "max_rel_err", "status");
  for (const GradCheckRow& r : rows) {
    std::printf("%-14s %-36s %6zu %12.3e  %s\n", r.component.c_str(), r.parameter.c_str(), r.size,
                r.error, r.pass ? "ok" : "FAIL");
    ok = ok && r.pass;
  }
  if (!ok) {
    std::fprintf(stderr, "gradient check failed for:\n");
    for (const GradCheckRow& r : rows)
      if (!r.pass) std::fprintf(stderr, "  %s %s\n", r.component.c_str(), r.parameter.c_str());
  }
  return ok ? kExitOk : kExitFailure;
}

struct ReferenceCount {
  FusionKind kind;
  const char* value;
  double count;  // 0 for "-"
};

int cmd_param_count(std::size_t L, std::size_t d, std::size_t d_pos, double gamma,
                    std::size_t extra, const std::string& only) {
  // reference column, L = 24 and d = 1024
  const ReferenceCount reference_counts[] = {{FusionKind::ExtraLayers, "25.19M", 25.19e6},
                              {FusionKind::Average, "-", 0.0},
                              {FusionKind::Concat, "25.18M", 25.18e6},
                              {FusionKind::DWAtt, "26.38M", 26.38e6}};
  const bool reference = L == 24 && d == 1024;
  std::printf("%-14s %14s", "fusion", "added_params");
  if (reference) std::printf(" %10s %9s", "reference", "rel_diff");
  std::printf("\n");
  for (FusionKind k : {FusionKind::Base, FusionKind::ExtraLayers, FusionKind::Average,
                       FusionKind::Concat, FusionKind::DWAtt}) {
    if (!only.empty() && only != "all" && parse_fusion_kind(only) != k) continue;
    FusionSpec spec;
    spec.kind = k;
    spec.d_pos = d_pos;
    spec.gamma_q = spec.gamma_v = gamma;
    spec.extra_layers = extra;
    const std::size_t n = count_added_params(spec, L, d);
    std::printf("%-14s %14zu", to_string(k), n);
    if (reference) {
      for (const ReferenceCount& p : reference_counts) {
        if (p.kind != k) continue;
        if (p.count > 0) {
          std::printf(" %10s %8.3f%%", p.value, 100.0 * (static_cast<double>(n) - p.count) / p.count);
        } else {
          std::printf(" %10s %9s", p.value, "");
        }
      }
    }
    std::printf("\n");
  }
  return kExitOk;
}

int cmd_synth_data(const Common& c, std::uint64_t seed, std::size_t size) {
  const fs::path dir = output_dir(c, "synth-data");
  SplitCorpus s = synth_ner_corpus(seed, size);
  write_file_atomic(dir / "train.conll", [&](std::ostream& os) { write_conll(os, s.train); });
  write_file_atomic(dir / "dev.conll", [&](std::ostream& os) { write_conll(os, s.dev); });
  write_file_atomic(dir / "test.conll", [&](std::ostream& os) { write_conll(os, s.test); });
  write_file_atomic(dir / "vocab.txt", [&](std::ostream& os) { synth_vocab().save(os); });
  ExperimentConfig cfg;
  cfg.data.synth_seed = seed;
  cfg.data.synth_size = size;
  write_resolved(dir, cfg);
  std::printf("%zu/%zu/%zu sentences written to %s\n", s.train.size(), s.dev.size(), s.test.size(),
              dir.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"depthfuse: layer-fusion heads over a transformer encoder"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  bool quiet = false;
  app.add_option("-c,--config", common.config_path, "JSON run configuration");
  app.add_option("-o,--output", common.output,
                 "output directory (default: $DEPTHFUSE_OUTPUT_ROOT/<subcommand> or runs/<subcommand>)");
  app.add_option("--seed", common.seed, "root seed override");
  app.add_flag("-v,--verbose", common.verbose, "more logging");
  app.add_flag("-q,--quiet", quiet, "no progress logging");

  RunFlags pre_flags, train_flags, grid_flags;
  auto* pretrain = app.add_subcommand("pretrain", "MLM-pretrain the encoder and save a checkpoint");
  pre_flags.attach(pretrain, false);

  auto* train = app.add_subcommand("train", "train one model and write its history");
  train_flags.attach(train, false);
  bool save_model = false;
  train->add_flag("--save-model", save_model, "write the best-dev parameters to model.ckpt");

  auto* grid = app.add_subcommand("grid", "run the fusion x N-shot x epochs grid");
  grid_flags.attach(grid, true);

  auto* eval = app.add_subcommand("eval", "evaluate a saved model");
  std::string model_path, split = "dev";
  eval->add_option("--model", model_path, "model.ckpt written by train --save-model")->required();
  eval->add_option("--split", split)->check(CLI::IsMember({"dev", "test"}));

  auto* grad = app.add_subcommand("grad-check", "finite-difference check of every block and head");
  GradSuiteOptions go;
  grad->add_option("--layers", go.layers);
  grad->add_option("--width", go.width);
  grad->add_option("--heads", go.heads);
  grad->add_option("--d-pos", go.d_pos);
  grad->add_option("--batch", go.batch);
  grad->add_option("--seq", go.seq);
  grad->add_option("--tolerance", go.tolerance);
  grad->add_option("--corrupt-grad", go.corrupt)->group("");

  auto* pc = app.add_subcommand("param-count", "count the parameters each fusion head adds");
  std::size_t pc_layers = 24, pc_width = 1024, pc_dpos = 24, pc_extra = 2;
  double pc_gamma = 0.5;
  std::string pc_kind = "all";
  pc->add_option("--layers", pc_layers);
  pc->add_option("--width", pc_width);
  pc->add_option("--d-pos", pc_dpos);
  pc->add_option("--gamma", pc_gamma, "bottleneck ratio for query and value MLPs");
  pc->add_option("--extra-layers", pc_extra);
  pc->add_option("--kind", pc_kind);

  auto* synth = app.add_subcommand("synth-data", "export the synthetic NER corpus as CoNLL files");
  std::uint64_t synth_seed = 0;
  std::size_t synth_size = 2000;
  synth->add_option("--synth-seed", synth_seed);
  synth->add_option("--size", synth_size);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  if (quiet) common.verbose = -1;

  try {
    if (pretrain->parsed()) return cmd_pretrain(common, pre_flags);
    if (train->parsed()) return cmd_train(common, train_flags, save_model);
    if (grid->parsed()) return cmd_grid(common, grid_flags);
    if (eval->parsed()) return cmd_eval(common, model_path, split);
    if (grad->parsed()) return cmd_grad_check(go);
    if (pc->parsed()) return cmd_param_count(pc_layers, pc_width, pc_dpos, pc_gamma, pc_extra, pc_kind);
    if (synth->parsed()) return cmd_synth_data(common, synth_seed, synth_size);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitConfig;
}
