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

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "depthfuse/encoder.hpp"
#include "depthfuse/error.hpp"
#include "depthfuse/fusion.hpp"

namespace depthfuse {

enum class TaskKind { NER, MLM };

inline const char* to_string(TaskKind t) { return t == TaskKind::NER ? "NER" : "MLM"; }
inline const char* to_string(TrainMode m) { return m == TrainMode::FE ? "FE" : "FT"; }

/// Where sentences come from: the synthetic grammar or CoNLL files.
struct DataConfig {
  std::string source = "synth";  // "synth" or "conll"
  std::uint64_t synth_seed = 0;
  std::size_t synth_size = 2000;
  std::string train, dev, test;

  bool operator==(const DataConfig&) const = default;
};

/// Axes of a grid run. Each list must be non-empty.
struct GridConfig {
  std::vector<std::size_t> shots = {8, 16, 32, 64, 128};
  std::vector<std::size_t> epochs = {50};
  std::vector<FusionKind> fusion = {FusionKind::Base, FusionKind::ExtraLayers, FusionKind::Concat,
                                    FusionKind::DWAtt};

  bool operator==(const GridConfig&) const = default;
};

struct ExperimentConfig {
  EncoderConfig encoder;
  std::string encoder_checkpoint;
  FusionSpec fusion;
  TrainMode mode = TrainMode::FE;
  TaskKind task = TaskKind::NER;
  std::size_t shots = 0;  // 0 trains on the full training set
  std::size_t classes = 4;
  std::size_t epochs = 50;
  std::size_t batch_size = 0;  // 0 picks the task default
  double max_lr = 5e-5;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  std::size_t trials = 5;
  double mask_rate = 0.15;
  bool feature_cache = true;
  std::size_t jobs = 1;
  DataConfig data;
  GridConfig grid;

  bool operator==(const ExperimentConfig&) const = default;

  std::size_t effective_batch_size() const {
    if (batch_size) return batch_size;
    return task == TaskKind::NER ? 16 : 8;
  }

  void validate() const {
    if (epochs < 1) throw ConfigError("must be >= 1", "epochs");
    if (trials < 1) throw ConfigError("must be >= 1", "trials");
    if (classes < 1) throw ConfigError("must be >= 1", "classes");
    if (jobs < 1) throw ConfigError("must be >= 1", "jobs");
    if (!(max_lr >= 0.0)) throw ConfigError("must be >= 0", "max_lr");
    if (!(weight_decay >= 0.0)) throw ConfigError("must be >= 0", "weight_decay");
    if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ConfigError("must be in (0, 1)", "mask_rate");
    if (fusion.extra_layers < 1) throw ConfigError("must be >= 1", "fusion.extra_layers");
    if (fusion.d_pos < 1) throw ConfigError("must be >= 1", "fusion.d_pos");
    if (!(fusion.gamma_q > 0.0)) throw ConfigError("must be > 0", "fusion.gamma_q");
    if (!(fusion.gamma_v > 0.0)) throw ConfigError("must be > 0", "fusion.gamma_v");
    if (data.source == "synth") {
      if (data.synth_size < 100) throw ConfigError("must be >= 100", "data.synth_size");
    } else if (data.source == "conll") {
      if (data.train.empty()) throw ConfigError("required for conll data", "data.train");
      if (data.dev.empty()) throw ConfigError("required for conll data", "data.dev");
    } else {
      throw ConfigError("must be \"synth\" or \"conll\"", "data.source");
    }
    if (grid.shots.empty()) throw ConfigError("must be non-empty", "grid.shots");
    if (grid.epochs.empty()) throw ConfigError("must be non-empty", "grid.epochs");
    if (grid.fusion.empty()) throw ConfigError("must be non-empty", "grid.fusion");
    for (std::size_t e : grid.epochs)
      if (e < 1) throw ConfigError("entries must be >= 1", "grid.epochs");
  }
};

// ---- JSON ------------------------------------------------------------------------

namespace detail {

using Json = nlohmann::ordered_json;

/// Reads the members of one JSON object, rejecting unknown keys and
/// mistyped values with the dotted field path.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError("must be an object", path_.empty() ? "<root>" : path_);
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        if (!it->is_number_integer() || *it < 0) throw ConfigError("must be a non-negative integer", field(key));
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError("must be a number", field(key));
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("must be true or false", field(key));
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("must be a string", field(key));
      }
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("has the wrong type", field(key));
    }
  }

  const Json* child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown field", field(it.key()));
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline TrainMode parse_mode(const std::string& s) {
  if (s == "FE" || s == "fe") return TrainMode::FE;
  if (s == "FT" || s == "ft") return TrainMode::FT;
  throw ConfigError("must be FE or FT", "mode");
}

inline TaskKind parse_task(const std::string& s) {
  if (s == "NER" || s == "ner") return TaskKind::NER;
  if (s == "MLM" || s == "mlm") return TaskKind::MLM;
  throw ConfigError("must be NER or MLM", "task");
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const EncoderConfig& e) {
  return {{"layers", e.layers},         {"width", e.width},     {"heads", e.heads},
          {"ffn_mult", e.ffn_mult},     {"vocab_size", e.vocab_size},
          {"max_seq_len", e.max_seq_len}, {"dropout", e.dropout}};
}

inline void read_encoder(const nlohmann::ordered_json& j, EncoderConfig& e,
                         const std::string& path = "encoder") {
  detail::ObjectReader r(j, path);
  r.get("layers", e.layers);
  r.get("width", e.width);
  r.get("heads", e.heads);
  r.get("ffn_mult", e.ffn_mult);
  r.get("vocab_size", e.vocab_size);
  r.get("max_seq_len", e.max_seq_len);
  r.get("dropout", e.dropout);
  r.finish();
}

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json fusion_list = nlohmann::ordered_json::array();
  for (FusionKind k : c.grid.fusion) fusion_list.push_back(to_string(k));
  return {
      {"encoder", to_json(c.encoder)},
      {"encoder_checkpoint", c.encoder_checkpoint},
      {"fusion",
       {{"kind", to_string(c.fusion.kind)},
        {"extra_layers", c.fusion.extra_layers},
        {"d_pos", c.fusion.d_pos},
        {"gamma_q", c.fusion.gamma_q},
        {"gamma_v", c.fusion.gamma_v}}},
      {"mode", to_string(c.mode)},
      {"task", to_string(c.task)},
      {"shots", c.shots},
      {"classes", c.classes},
      {"epochs", c.epochs},
      {"batch_size", c.batch_size},
      {"max_lr", c.max_lr},
      {"weight_decay", c.weight_decay},
      {"seed", c.seed},
      {"trials", c.trials},
      {"mask_rate", c.mask_rate},
      {"feature_cache", c.feature_cache},
      {"jobs", c.jobs},
      {"data",
       {{"source", c.data.source},
        {"synth_seed", c.data.synth_seed},
        {"synth_size", c.data.synth_size},
        {"train", c.data.train},
        {"dev", c.data.dev},
        {"test", c.data.test}}},
      {"grid", {{"shots", c.grid.shots}, {"epochs", c.grid.epochs}, {"fusion", fusion_list}}},
  };
}

/// Overlays the fields present in `j` onto `c`. Absent fields keep their
/// current value, so applying defaults, then a file, then flags gives the
/// documented precedence.
inline void apply_json(const nlohmann::ordered_json& j, ExperimentConfig& c) {
  detail::ObjectReader r(j, "");
  if (const auto* e = r.child("encoder")) read_encoder(*e, c.encoder);
  r.get("encoder_checkpoint", c.encoder_checkpoint);
  if (const auto* f = r.child("fusion")) {
    detail::ObjectReader fr(*f, "fusion");
    std::string kind = to_string(c.fusion.kind);
    fr.get("kind", kind);
    c.fusion.kind = parse_fusion_kind(kind);
    fr.get("extra_layers", c.fusion.extra_layers);
    fr.get("d_pos", c.fusion.d_pos);
    fr.get("gamma_q", c.fusion.gamma_q);
    fr.get("gamma_v", c.fusion.gamma_v);
    fr.finish();
  }
  std::string mode = to_string(c.mode), task = to_string(c.task);
  r.get("mode", mode);
  r.get("task", task);
  c.mode = detail::parse_mode(mode);
  c.task = detail::parse_task(task);
  r.get("shots", c.shots);
  r.get("classes", c.classes);
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("max_lr", c.max_lr);
  r.get("weight_decay", c.weight_decay);
  r.get("seed", c.seed);
  r.get("trials", c.trials);
  r.get("mask_rate", c.mask_rate);
  r.get("feature_cache", c.feature_cache);
  r.get("jobs", c.jobs);
  if (const auto* d = r.child("data")) {
    detail::ObjectReader dr(*d, "data");
    dr.get("source", c.data.source);
    dr.get("synth_seed", c.data.synth_seed);
    dr.get("synth_size", c.data.synth_size);
    dr.get("train", c.data.train);
    dr.get("dev", c.data.dev);
    dr.get("test", c.data.test);
    dr.finish();
  }
  if (const auto* g = r.child("grid")) {
    detail::ObjectReader gr(*g, "grid");
    gr.get("shots", c.grid.shots);
    gr.get("epochs", c.grid.epochs);
    if (const auto* f = gr.child("fusion")) {
      if (!f->is_array()) throw ConfigError("must be a list", "grid.fusion");
      c.grid.fusion.clear();
      for (const auto& k : *f) {
        if (!k.is_string()) throw ConfigError("entries must be strings", "grid.fusion");
        try {
          c.grid.fusion.push_back(parse_fusion_kind(k.get<std::string>()));
        } catch (const ConfigError&) {
          throw ConfigError("unknown fusion kind '" + k.get<std::string>() + "'", "grid.fusion");
        }
      }
    }
    gr.finish();
  }
  r.finish();
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what(), "<file>");
  }
  ExperimentConfig c;
  apply_json(j, c);
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path, "<file>");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string dump_config(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

}  // namespace depthfuse
