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

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "depthfuse/checkpoint.hpp"
#include "depthfuse/config.hpp"
#include "depthfuse/data.hpp"
#include "depthfuse/encoder.hpp"
#include "depthfuse/fusion.hpp"
#include "depthfuse/metrics.hpp"
#include "depthfuse/ops.hpp"
#include "depthfuse/optim.hpp"
#include "depthfuse/param.hpp"

namespace depthfuse {

/// Raised when the training loss stops being finite.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::size_t epoch, std::uint64_t step, double loss)
      : Error("non-finite loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch) +
              ", step " + std::to_string(step)),
        epoch_(epoch),
        step_(step) {}
  std::size_t epoch() const { return epoch_; }
  std::uint64_t step() const { return step_; }

 private:
  std::size_t epoch_;
  std::uint64_t step_;
};

// ---- history --------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double dev_metric = 0.0;
  double lr = 0.0;  // scheduler value after the epoch's last step
  double seconds = 0.0;
};

struct RunHistory {
  std::vector<EpochRecord> epochs;
  bool higher_is_better = true;  // F1 up, perplexity down
  std::string metric = "f1";
  std::uint64_t total_steps = 0;
  std::size_t train_size = 0;
  std::uint64_t encoder_hash_before = 0;
  std::uint64_t encoder_hash_after = 0;

  /// Columns epoch, train_loss, dev_metric, lr. Wall-clock time is kept out
  /// so the file is a pure function of the configuration.
  void write_csv(std::ostream& os) const {
    os << "epoch,train_loss,dev_metric,lr\n";
    char buf[128];
    for (const EpochRecord& e : epochs) {
      std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g\n", e.epoch, e.train_loss, e.dev_metric,
                    e.lr);
      os << buf;
    }
  }
};

struct BestDev {
  std::size_t epoch = 0;
  double metric = 0.0;
};

/// Best dev score over the whole run: argmax for F1, argmin for perplexity,
/// earliest epoch on ties.
inline BestDev best_dev(const RunHistory& h) {
  if (h.epochs.empty()) throw ContractError("best_dev: empty history");
  BestDev b{h.epochs[0].epoch, h.epochs[0].dev_metric};
  for (const EpochRecord& e : h.epochs) {
    const bool better = h.higher_is_better ? e.dev_metric > b.metric : e.dev_metric < b.metric;
    if (better) b = {e.epoch, e.dev_metric};
  }
  return b;
}

// ---- data and model assembly ------------------------------------------------------

struct Dataset {
  Vocab vocab;
  LabelSet labels;
  TaggedCorpus train, dev, test;
  std::size_t truncated = 0;  // sentences cut to max_seq_len
};

/// Loads the corpus named by `cfg.data`. With `fixed_vocab` (from an encoder
/// checkpoint) unseen words map to UNK; otherwise the vocabulary is the
/// synthetic word list or the words of the training file.
inline Dataset load_dataset(const ExperimentConfig& cfg, const Vocab* fixed_vocab = nullptr) {
  Dataset d;
  if (cfg.data.source == "synth") {
    SplitCorpus s = synth_ner_corpus(cfg.data.synth_seed, cfg.data.synth_size);
    d.train = std::move(s.train);
    d.dev = std::move(s.dev);
    d.test = std::move(s.test);
    d.vocab = synth_vocab();
  } else {
    d.train = read_conll(cfg.data.train);
    d.dev = read_conll(cfg.data.dev);
    if (!cfg.data.test.empty()) d.test = read_conll(cfg.data.test);
    for (const TaggedSentence& s : d.train)
      for (const std::string& w : s.tokens) d.vocab.add(w);
  }
  if (fixed_vocab) d.vocab = *fixed_vocab;
  if (d.train.empty()) throw InputError("training set is empty");
  if (d.dev.empty()) throw InputError("dev set is empty");
  d.labels = LabelSet::from_corpus(d.train);
  for (auto* part : {&d.train, &d.dev, &d.test}) {
    for (TaggedSentence& s : *part) {
      if (s.tokens.size() > cfg.encoder.max_seq_len) {
        s.tokens.resize(cfg.encoder.max_seq_len);
        s.labels.resize(cfg.encoder.max_seq_len);
        ++d.truncated;
      }
    }
  }
  return d;
}

/// Encoder, fusion head and task head over one parameter registry.
struct Model {
  ParamStore store;
  Encoder encoder;
  FusionHead fusion;
  TaskHead head;

  Tensor logits(const LayerIntermediates& z, const ForwardContext& ctx) const {
    Tensor h = fusion.forward(z, ctx);
    Tensor out = head.forward(h);
    return reshape(out, {out.rows(), out.cols()});
  }
};

/// Builds the model for `cfg`, loading encoder weights from `ckpt` when
/// given, and applies the FE/FT freezing rule.
inline std::unique_ptr<Model> build_model(const ExperimentConfig& cfg, const EncoderConfig& enc,
                                          std::size_t n_out, std::uint64_t seed,
                                          const Checkpoint* ckpt = nullptr) {
  auto m = std::make_unique<Model>();
  Rng rng(derive_seed(seed, "init"));
  m->encoder = Encoder::create(m->store, enc, rng);
  if (ckpt) restore(m->store, *ckpt, "encoder/");
  m->fusion = FusionHead::create(m->store, cfg.fusion, enc, rng);
  m->head = TaskHead::create(m->store,
                             cfg.task == TaskKind::NER ? TaskHeadKind::TokenClassifier
                                                       : TaskHeadKind::Vocabulary,
                             enc.width, n_out, rng);
  freeze_base(m->store, cfg.mode);
  return m;
}

/// Inference-mode encoder outputs for each sentence, computed once and
/// shared read-only across FE runs over the same frozen encoder.
class FeatureBank {
 public:
  static FeatureBank build(const Encoder& encoder, const std::vector<std::vector<int>>& seqs) {
    NoGradGuard no_grad;
    FeatureBank bank;
    bank.width_ = encoder.config().width;
    bank.depth_ = encoder.config().layers;
    for (const auto& s : seqs) {
      LayerIntermediates z = encoder.encode(make_token_batch({s}));
      std::vector<std::vector<double>> layers;
      for (const Tensor& t : z.z) layers.emplace_back(t.data().begin(), t.data().end());
      bank.rows_.push_back(std::move(layers));
      bank.lengths_.push_back(s.size());
    }
    return bank;
  }

  std::size_t size() const { return rows_.size(); }

  /// Right-padded [B x T x d] intermediates for the listed sentences.
  LayerIntermediates gather(const std::vector<std::size_t>& idx) const {
    std::size_t T = 0;
    for (std::size_t i : idx) T = std::max(T, lengths_.at(i));
    LayerIntermediates z;
    for (std::size_t l = 0; l < depth_; ++l) {
      Tensor t = Tensor::zeros({idx.size(), T, width_});
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const std::vector<double>& src = rows_[idx[b]][l];
        std::copy(src.begin(), src.end(), t.data().begin() + b * T * width_);
      }
      z.z.push_back(t);
    }
    for (std::size_t i : idx) z.lengths.push_back(lengths_[i]);
    return z;
  }

 private:
  std::size_t width_ = 0, depth_ = 0;
  std::vector<std::vector<std::vector<double>>> rows_;
  std::vector<std::size_t> lengths_;
};

inline std::vector<std::vector<int>> corpus_ids(const TaggedCorpus& c, const Vocab& vocab) {
  std::vector<std::vector<int>> out;
  out.reserve(c.size());
  for (const TaggedSentence& s : c) out.push_back(to_ids(s.tokens, vocab));
  return out;
}

/// Everything that can be prepared once and shared across runs: the corpus,
/// the encoder checkpoint and, for FE, the cached features.
struct SharedInputs {
  std::shared_ptr<const Dataset> data;
  std::shared_ptr<const Checkpoint> encoder_ckpt;
  std::shared_ptr<const FeatureBank> train_features, dev_features;
};

inline EncoderConfig resolve_encoder(const ExperimentConfig& cfg, const SharedInputs& in) {
  if (in.encoder_ckpt) return in.encoder_ckpt->encoder;
  EncoderConfig e = cfg.encoder;
  e.vocab_size = in.data->vocab.size();
  return e;
}

/// Loads data and checkpoint named in `cfg`; builds the FE feature caches
/// when the configuration allows them.
inline SharedInputs prepare_inputs(const ExperimentConfig& cfg) {
  cfg.validate();
  SharedInputs in;
  if (!cfg.encoder_checkpoint.empty()) {
    in.encoder_ckpt = std::make_shared<Checkpoint>(load_checkpoint(cfg.encoder_checkpoint));
  }
  Vocab ck_vocab;
  if (in.encoder_ckpt) ck_vocab = Vocab::from_tokens(in.encoder_ckpt->vocab);
  ExperimentConfig c = cfg;
  if (in.encoder_ckpt) c.encoder = in.encoder_ckpt->encoder;
  in.data = std::make_shared<Dataset>(load_dataset(c, in.encoder_ckpt ? &ck_vocab : nullptr));
  if (cfg.task == TaskKind::NER && cfg.mode == TrainMode::FE && cfg.feature_cache) {
    auto m = build_model(cfg, resolve_encoder(cfg, in), in.data->labels.size(), cfg.seed,
                         in.encoder_ckpt.get());
    in.train_features = std::make_shared<FeatureBank>(
        FeatureBank::build(m->encoder, corpus_ids(in.data->train, in.data->vocab)));
    in.dev_features = std::make_shared<FeatureBank>(
        FeatureBank::build(m->encoder, corpus_ids(in.data->dev, in.data->vocab)));
  }
  return in;
}

// ---- evaluation ---------------------------------------------------------------------

inline constexpr std::size_t kEvalBatch = 32;

/// Entity micro-F1 of the model's argmax predictions on `corpus`. Uses the
/// feature bank when given, else runs the encoder in inference mode.
inline F1Report evaluate_ner(const Model& m, const TaggedCorpus& corpus, const Dataset& data,
                             const FeatureBank* bank = nullptr) {
  NoGradGuard no_grad;
  std::vector<std::vector<std::string>> gold, pred;
  for (std::size_t start = 0; start < corpus.size(); start += kEvalBatch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(corpus.size(), start + kEvalBatch); ++i) idx.push_back(i);
    LayerIntermediates z;
    std::size_t T = 0;
    if (bank) {
      z = bank->gather(idx);
    } else {
      std::vector<std::vector<int>> seqs;
      for (std::size_t i : idx) seqs.push_back(to_ids(corpus[i].tokens, data.vocab));
      z = m.encoder.encode(make_token_batch(seqs));
    }
    T = z.z[0].dim(1);
    Tensor logits = m.logits(z, {});
    const std::size_t C = logits.cols();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const TaggedSentence& s = corpus[idx[b]];
      std::vector<std::string> p;
      for (std::size_t t = 0; t < s.tokens.size(); ++t) {
        const double* row = logits.data().data() + (b * T + t) * C;
        p.push_back(data.labels.label(static_cast<int>(std::max_element(row, row + C) - row)));
      }
      gold.push_back(s.labels);
      pred.push_back(std::move(p));
    }
  }
  return micro_f1(gold, pred);
}

/// Perplexity over a masked copy of `corpus` fixed by `mask_seed`.
inline double evaluate_mlm(const Model& m, const TaggedCorpus& corpus, const Vocab& vocab,
                           double mask_rate, std::uint64_t mask_seed) {
  NoGradGuard no_grad;
  PerplexityAccumulator acc;
  for (std::size_t start = 0; start < corpus.size(); start += kEvalBatch) {
    std::vector<std::vector<int>> seqs;
    for (std::size_t i = start; i < std::min(corpus.size(), start + kEvalBatch); ++i) {
      seqs.push_back(to_ids(corpus[i].tokens, vocab));
    }
    MaskedBatch mb = mlm_mask(make_token_batch(seqs), mix_seed(mask_seed + start), mask_rate,
                              vocab.size());
    if (mb.empty()) continue;
    acc.add(m.logits(m.encoder.encode(mb.input), {}), mb.targets);
  }
  return acc.perplexity();
}

// ---- training -------------------------------------------------------------------------

struct RunOptions {
  /// Called after every epoch; may be empty.
  std::function<void(const EpochRecord&)> on_epoch;
  /// Keep the parameter values of the best dev epoch in the result.
  bool keep_best = false;
};

struct RunResult {
  RunHistory history;
  std::unique_ptr<Model> model;
  std::optional<Checkpoint> best;  // filled when RunOptions::keep_best
};

namespace detail {

inline std::vector<int> ner_targets(const TaggedCorpus& corpus, const std::vector<std::size_t>& idx,
                                    std::size_t T, const LabelSet& labels) {
  std::vector<int> targets(idx.size() * T, -1);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const TaggedSentence& s = corpus[idx[b]];
    for (std::size_t t = 0; t < s.labels.size(); ++t) targets[b * T + t] = labels.id(s.labels[t]);
  }
  return targets;
}

}  // namespace detail

/// Trains one model end to end. Deterministic for a fixed configuration:
/// every random stream (initialisation, few-shot sample, batch order,
/// dropout, masking) is derived from `cfg.seed`.
inline RunResult run_experiment(const ExperimentConfig& cfg, const SharedInputs& in,
                                const RunOptions& opts = {}) {
  cfg.validate();
  const Dataset& data = *in.data;
  const EncoderConfig enc = resolve_encoder(cfg, in);
  const bool ner = cfg.task == TaskKind::NER;
  const std::size_t n_out = ner ? data.labels.size() : enc.vocab_size;

  RunResult result;
  result.model = build_model(cfg, enc, n_out, cfg.seed, in.encoder_ckpt.get());
  Model& m = *result.model;
  RunHistory& hist = result.history;
  hist.higher_is_better = ner;
  hist.metric = ner ? "f1" : "perplexity";
  hist.encoder_hash_before = m.store.hash("encoder/");

  // Training subset, as indices into data.train.
  std::vector<std::size_t> train_idx;
  if (cfg.shots > 0) {
    train_idx = few_shot_indices(data.train.size(),
                                 FewShotSpec{cfg.shots, cfg.classes, derive_seed(cfg.seed, "sample")});
  } else {
    train_idx.resize(data.train.size());
    std::iota(train_idx.begin(), train_idx.end(), std::size_t{0});
  }
  hist.train_size = train_idx.size();

  const bool use_bank = ner && cfg.mode == TrainMode::FE && in.train_features && in.dev_features;
  const bool frozen_encoder = cfg.mode == TrainMode::FE;
  const std::size_t bs = cfg.effective_batch_size();
  const std::uint64_t steps_per_epoch = (train_idx.size() + bs - 1) / bs;
  hist.total_steps = cfg.epochs * steps_per_epoch;

  Rng order_rng(derive_seed(cfg.seed, "order"));
  Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
  const std::uint64_t mask_seed = derive_seed(cfg.seed, "mlm-mask");
  const std::uint64_t dev_mask_seed = derive_seed(0, "dev-mask");
  AdamW opt(m.store, AdamWOptions{.weight_decay = cfg.weight_decay});

  ForwardContext head_ctx{true, enc.dropout, &dropout_rng};
  ForwardContext enc_ctx = frozen_encoder ? ForwardContext{} : head_ctx;

  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order = train_idx;
    order_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bs)));
      const double lr = linear_decay_lr(step, hist.total_steps, cfg.max_lr);
      Tensor loss;
      if (ner) {
        LayerIntermediates z;
        if (use_bank) {
          z = in.train_features->gather(idx);
        } else {
          std::vector<std::vector<int>> seqs;
          for (std::size_t i : idx) seqs.push_back(to_ids(data.train[i].tokens, data.vocab));
          z = m.encoder.encode(make_token_batch(seqs), enc_ctx);
        }
        const std::vector<int> targets = detail::ner_targets(data.train, idx, z.z[0].dim(1), data.labels);
        loss = cross_entropy(m.logits(z, head_ctx), targets);
      } else {
        std::vector<std::vector<int>> seqs;
        for (std::size_t i : idx) seqs.push_back(to_ids(data.train[i].tokens, data.vocab));
        MaskedBatch mb = mlm_mask(make_token_batch(seqs), mix_seed(mask_seed + step), cfg.mask_rate,
                                  data.vocab.size());
        if (mb.empty()) {
          ++step;
          continue;
        }
        loss = cross_entropy(m.logits(m.encoder.encode(mb.input, enc_ctx), head_ctx), mb.targets);
      }
      const double value = loss.item();
      if (!std::isfinite(value)) throw TrainingDiverged(epoch, step, value);
      m.store.zero_grad();
      loss.backward();
      opt.step(lr);
      loss_sum += value;
      ++loss_count;
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
    rec.dev_metric = ner ? evaluate_ner(m, data.dev, data, use_bank ? in.dev_features.get() : nullptr).f1
                         : evaluate_mlm(m, data.dev, data.vocab, cfg.mask_rate, dev_mask_seed);
    rec.lr = linear_decay_lr(step, hist.total_steps, cfg.max_lr);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    hist.epochs.push_back(rec);
    if (opts.keep_best && best_dev(hist).epoch == epoch) {
      result.best = make_checkpoint(m.store, enc, data.vocab,
                                    {{"epoch", epoch}, {hist.metric, rec.dev_metric}});
    }
    if (opts.on_epoch) opts.on_epoch(rec);
  }
  hist.encoder_hash_after = m.store.hash("encoder/");
  return result;
}

inline RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  return run_experiment(cfg, prepare_inputs(cfg), opts);
}

// ---- grids ---------------------------------------------------------------------------

struct CellKey {
  FusionKind fusion = FusionKind::Base;
  std::size_t shots = 0;
  std::size_t epochs = 0;

  bool operator==(const CellKey&) const = default;
};

struct TrialResult {
  CellKey key;
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  RunHistory history;
  double best = 0.0;
  std::size_t best_epoch = 0;
};

struct CellSummary {
  CellKey key;
  std::size_t trials_ok = 0;
  std::size_t trials_failed = 0;
  double mean = 0.0;
  double ci95 = 0.0;  // half-width
  double median = 0.0;
};

struct GridResult {
  std::vector<TrialResult> runs;
  std::vector<CellSummary> cells;

  bool all_ok() const {
    return std::all_of(runs.begin(), runs.end(), [](const TrialResult& r) { return r.ok; });
  }

  const CellSummary& cell(FusionKind k, std::size_t shots, std::size_t epochs) const {
    for (const CellSummary& c : cells)
      if (c.key == CellKey{k, shots, epochs}) return c;
    throw ContractError("no such grid cell");
  }
};

/// The configuration one grid run executes.
inline ExperimentConfig cell_config(const ExperimentConfig& base, const CellKey& key,
                                    std::size_t trial) {
  ExperimentConfig c = base;
  c.fusion.kind = key.fusion;
  c.shots = key.shots;
  c.epochs = key.epochs;
  c.seed = base.seed + trial;
  c.trials = 1;
  c.jobs = 1;
  return c;
}

inline double t_quantile_975(std::size_t dof) {
  return boost::math::quantile(boost::math::students_t(static_cast<double>(dof)), 0.975);
}

/// Mean, 95% Student-t confidence half-width and median of `values`.
inline CellSummary summarize(const CellKey& key, std::vector<double> values, std::size_t failed) {
  CellSummary s;
  s.key = key;
  s.trials_ok = values.size();
  s.trials_failed = failed;
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.ci95 = t_quantile_975(values.size() - 1) * std::sqrt(ss / (n - 1)) / std::sqrt(n);
  }
  std::sort(values.begin(), values.end());
  const std::size_t k = values.size();
  s.median = k % 2 ? values[k / 2] : 0.5 * (values[k / 2 - 1] + values[k / 2]);
  return s;
}

/// Runs the Cartesian product fusion x shots x epochs x trials. Trial t of
/// every cell uses seed base.seed + t. Up to `jobs` runs execute at once;
/// results are stored by position, so the outcome does not depend on
/// scheduling. A failing run is recorded and the grid continues.
inline GridResult run_grid(const ExperimentConfig& base, const SharedInputs& in,
                           const std::function<void(const TrialResult&)>& on_done = {}) {
  base.validate();
  std::vector<std::pair<CellKey, std::size_t>> plan;
  std::vector<CellKey> keys;
  for (FusionKind k : base.grid.fusion)
    for (std::size_t n : base.grid.shots)
      for (std::size_t e : base.grid.epochs) {
        keys.push_back({k, n, e});
        for (std::size_t t = 0; t < base.trials; ++t) plan.emplace_back(keys.back(), t);
      }

  GridResult out;
  out.runs.resize(plan.size());
  std::atomic<std::size_t> next{0};
  std::mutex done_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < plan.size(); i = next++) {
      const auto& [key, trial] = plan[i];
      TrialResult r;
      r.key = key;
      r.trial = trial;
      const ExperimentConfig c = cell_config(base, key, trial);
      r.seed = c.seed;
      try {
        r.history = run_experiment(c, in).history;
        const BestDev b = best_dev(r.history);
        r.best = b.metric;
        r.best_epoch = b.epoch;
        r.ok = true;
      } catch (const std::exception& e) {
        r.error = e.what();
      }
      out.runs[i] = std::move(r);
      if (on_done) {
        std::lock_guard<std::mutex> lock(done_mu);
        on_done(out.runs[i]);
      }
    }
  };
  const std::size_t jobs = std::min<std::size_t>(base.jobs, plan.size());
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  for (const CellKey& key : keys) {
    std::vector<double> values;
    std::size_t failed = 0;
    for (const TrialResult& r : out.runs) {
      if (!(r.key == key)) continue;
      if (r.ok) {
        values.push_back(r.best);
      } else {
        ++failed;
      }
    }
    out.cells.push_back(summarize(key, std::move(values), failed));
  }
  return out;
}

}  // namespace depthfuse

