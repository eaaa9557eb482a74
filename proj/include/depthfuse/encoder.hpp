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

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "depthfuse/error.hpp"
#include "depthfuse/ops.hpp"
#include "depthfuse/param.hpp"
#include "depthfuse/rng.hpp"

namespace depthfuse {

inline constexpr double kInitStddev = 0.02;

struct EncoderConfig {
  std::size_t layers = 6;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 64;
  double dropout = 0.1;

  void validate() const {
    if (layers < 1) throw ConfigError("must be >= 1", "encoder.layers");
    if (width < 1) throw ConfigError("must be >= 1", "encoder.width");
    if (heads < 1) throw ConfigError("must be >= 1", "encoder.heads");
    if (width % heads != 0) throw ConfigError("must divide encoder.width", "encoder.heads");
    if (ffn_mult < 1) throw ConfigError("must be >= 1", "encoder.ffn_mult");
    if (vocab_size < 1) throw ConfigError("must be >= 1", "encoder.vocab_size");
    if (max_seq_len < 1) throw ConfigError("must be >= 1", "encoder.max_seq_len");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("must be in [0, 1)", "encoder.dropout");
  }

  bool operator==(const EncoderConfig&) const = default;
};

/// Padded token ids, row-major [batch x seq], with the true length of each row.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> ids;
  std::vector<std::size_t> lengths;
};

/// Per-layer outputs z_1..z_L of the encoder, each [batch x seq x d].
struct LayerIntermediates {
  std::vector<Tensor> z;
  std::vector<std::size_t> lengths;

  std::size_t depth() const { return z.size(); }
  const Tensor& final() const { return z.back(); }
};

/// Training-time switches threaded through a forward pass.
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;

  Tensor maybe_dropout(const Tensor& x) const {
    if (!training || dropout <= 0.0 || rng == nullptr) return x;
    return depthfuse::dropout(x, dropout, *rng);
  }
};

/// Exact learned-parameter count of one transformer layer: four affine
/// attention projections, the two affine feed-forward maps and two LayerNorms.
constexpr std::size_t transformer_layer_param_count(std::size_t d, std::size_t ffn_mult = 4) {
  const std::size_t f = ffn_mult * d;
  return 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
}

constexpr std::size_t encoder_param_count(const EncoderConfig& cfg) {
  return cfg.vocab_size * cfg.width + cfg.max_seq_len * cfg.width +
         cfg.layers * transformer_layer_param_count(cfg.width, cfg.ffn_mult);
}

/// Pre-norm transformer block: x + Attn(LN(x)), then x + FFN(LN(x)).
class TransformerLayer {
 public:
  TransformerLayer() = default;

  static TransformerLayer create(ParamStore& store, const std::string& prefix, std::size_t d,
                                 std::size_t heads, std::size_t ffn_mult, Rng& rng) {
    if (heads == 0 || d % heads != 0) throw ConfigError("heads must divide width", "heads");
    TransformerLayer l;
    l.heads_ = heads;
    const std::size_t f = ffn_mult * d;
    l.ln1_g_ = store.add(prefix + "/ln1/gain", Tensor::full({d}, 1.0));
    l.ln1_b_ = store.add(prefix + "/ln1/bias", Tensor::zeros({d}));
    const char* names[4] = {"q", "k", "v", "o"};
    for (int i = 0; i < 4; ++i) {
      l.attn_w_[i] = store.add(prefix + "/attn/" + names[i] + "/weight", normal_init({d, d}, rng, kInitStddev));
      l.attn_b_[i] = store.add(prefix + "/attn/" + names[i] + "/bias", Tensor::zeros({d}));
    }
    l.ln2_g_ = store.add(prefix + "/ln2/gain", Tensor::full({d}, 1.0));
    l.ln2_b_ = store.add(prefix + "/ln2/bias", Tensor::zeros({d}));
    l.ffn_w1_ = store.add(prefix + "/ffn/in/weight", normal_init({d, f}, rng, kInitStddev));
    l.ffn_b1_ = store.add(prefix + "/ffn/in/bias", Tensor::zeros({f}));
    l.ffn_w2_ = store.add(prefix + "/ffn/out/weight", normal_init({f, d}, rng, kInitStddev));
    l.ffn_b2_ = store.add(prefix + "/ffn/out/bias", Tensor::zeros({d}));
    return l;
  }

  Tensor forward(const Tensor& x, const std::vector<std::size_t>& lengths,
                 const ForwardContext& ctx) const {
    const std::size_t d = x.cols();
    const Tensor a = layer_norm(x, ln1_g_, ln1_b_);
    const Tensor q = linear(a, attn_w_[0], attn_b_[0]);
    const Tensor k = linear(a, attn_w_[1], attn_b_[1]);
    const Tensor v = linear(a, attn_w_[2], attn_b_[2]);
    const double sc = 1.0 / std::sqrt(static_cast<double>(d / heads_));
    const Tensor att = self_attention(q, k, v, lengths, heads_, sc);
    const Tensor x1 = add(x, ctx.maybe_dropout(linear(att, attn_w_[3], attn_b_[3])));
    const Tensor f = layer_norm(x1, ln2_g_, ln2_b_);
    const Tensor hidden = gelu(linear(f, ffn_w1_, ffn_b1_));
    return add(x1, ctx.maybe_dropout(linear(hidden, ffn_w2_, ffn_b2_)));
  }

 private:
  std::size_t heads_ = 1;
  Tensor ln1_g_, ln1_b_, ln2_g_, ln2_b_;
  Tensor attn_w_[4], attn_b_[4];
  Tensor ffn_w1_, ffn_b1_, ffn_w2_, ffn_b2_;
};

/// Token + learned absolute position embeddings followed by L pre-norm
/// layers. `encode` returns the output of every layer; the embedding output
/// itself is not part of the intermediates.
class Encoder {
 public:
  Encoder() = default;

  static Encoder create(ParamStore& store, const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    Encoder e;
    e.cfg_ = cfg;
    e.tok_ = store.add("encoder/embed/token", normal_init({cfg.vocab_size, cfg.width}, rng, kInitStddev));
    e.pos_ = store.add("encoder/embed/position", normal_init({cfg.max_seq_len, cfg.width}, rng, kInitStddev));
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      e.layers_.push_back(TransformerLayer::create(store, "encoder/layer" + std::to_string(i),
                                                   cfg.width, cfg.heads, cfg.ffn_mult, rng));
    }
    return e;
  }

  const EncoderConfig& config() const { return cfg_; }

  LayerIntermediates encode(const TokenBatch& batch, const ForwardContext& ctx = {}) const {
    if (batch.ids.size() != batch.batch * batch.seq || batch.lengths.size() != batch.batch) {
      throw ShapeError("encode: malformed token batch");
    }
    if (batch.seq > cfg_.max_seq_len) {
      throw InputError("encode: sequence length " + std::to_string(batch.seq) +
                       " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    }
    for (std::size_t i = 0; i < batch.ids.size(); ++i) {
      const int id = batch.ids[i];
      if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
        throw InputError("encode: token id " + std::to_string(id) + " at (" +
                         std::to_string(i / batch.seq) + ", " + std::to_string(i % batch.seq) +
                         ") outside vocabulary of size " + std::to_string(cfg_.vocab_size));
      }
    }
    std::vector<int> positions(batch.ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % batch.seq);
    Tensor x = add(embedding(tok_, batch.ids, {batch.batch, batch.seq}),
                   embedding(pos_, positions, {batch.batch, batch.seq}));
    x = ctx.maybe_dropout(x);
    LayerIntermediates out;
    out.lengths = batch.lengths;
    for (const TransformerLayer& layer : layers_) {
      x = layer.forward(x, batch.lengths, ctx);
      out.z.push_back(x);
    }
    return out;
  }

 private:
  EncoderConfig cfg_;
  Tensor tok_, pos_;
  std::vector<TransformerLayer> layers_;
};

enum class TaskHeadKind { TokenClassifier, Vocabulary };

/// Affine projection from the final representation to label or vocabulary
/// logits.
struct TaskHead {
  TaskHeadKind kind = TaskHeadKind::TokenClassifier;
  std::size_t n_out = 0;
  Tensor weight, bias;

  static TaskHead create(ParamStore& store, TaskHeadKind kind, std::size_t d, std::size_t n_out,
                         Rng& rng) {
    TaskHead h;
    h.kind = kind;
    h.n_out = n_out;
    h.weight = store.add("head/weight", normal_init({d, n_out}, rng, kInitStddev));
    h.bias = store.add("head/bias", Tensor::zeros({n_out}));
    return h;
  }

  Tensor forward(const Tensor& h) const { return linear(h, weight, bias); }
};

enum class TrainMode { FE, FT };

/// FE: freeze everything under "encoder/"; the fusion head and task head stay
/// trainable. FT: unfreeze all learned parameters.
inline void freeze_base(ParamStore& store, TrainMode mode) {
  store.set_frozen_prefix("", false);
  if (mode == TrainMode::FE) store.set_frozen_prefix("encoder/", true);
}

}  // namespace depthfuse
