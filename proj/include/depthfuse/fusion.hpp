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
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "depthfuse/encoder.hpp"
#include "depthfuse/error.hpp"
#include "depthfuse/ops.hpp"
#include "depthfuse/param.hpp"

namespace depthfuse {

enum class FusionKind { Base, ExtraLayers, Average, Concat, DWAtt };

inline const char* to_string(FusionKind k) {
  switch (k) {
    case FusionKind::Base: return "base";
    case FusionKind::ExtraLayers: return "extra_layers";
    case FusionKind::Average: return "average";
    case FusionKind::Concat: return "concat";
    case FusionKind::DWAtt: return "dwatt";
  }
  return "?";
}

inline FusionKind parse_fusion_kind(const std::string& s) {
  for (FusionKind k : {FusionKind::Base, FusionKind::ExtraLayers, FusionKind::Average,
                       FusionKind::Concat, FusionKind::DWAtt}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown fusion kind '" + s + "'", "fusion.kind");
}

/// Which add-on sits between the encoder and the task head, with its
/// hyper-parameters. Fields that do not apply to `kind` are ignored.
struct FusionSpec {
  FusionKind kind = FusionKind::Base;
  std::size_t extra_layers = 2;
  std::size_t d_pos = 24;
  double gamma_q = 0.5;
  double gamma_v = 0.5;

  bool operator==(const FusionSpec&) const = default;
};

/// Width of the bottleneck for ratio gamma, at least 1.
inline std::size_t bottleneck_width(std::size_t d, double gamma) {
  if (!(gamma > 0.0)) throw ConfigError("bottleneck ratio must be > 0", "fusion.gamma");
  const auto m = static_cast<std::size_t>(std::llround(gamma * static_cast<double>(d)));
  return m == 0 ? 1 : m;
}

/// U [d x m] + bias, LayerNorm over m, W [m x d] + bias.
constexpr std::size_t bottleneck_param_count(std::size_t d, std::size_t m) {
  return d * m + m + 2 * m + m * d + d;
}

/// Learned parameters added on top of a depth-L, width-d base model. The
/// static layer-position table of DWAtt is not learned and is not counted.
inline std::size_t count_added_params(const FusionSpec& spec, std::size_t L, std::size_t d,
                                      std::size_t ffn_mult = 4) {
  switch (spec.kind) {
    case FusionKind::Base:
    case FusionKind::Average:
      return 0;
    case FusionKind::ExtraLayers:
      return spec.extra_layers * transformer_layer_param_count(d, ffn_mult);
    case FusionKind::Concat:
      return L * (d * d + d);
    case FusionKind::DWAtt:
      return bottleneck_param_count(d, bottleneck_width(d, spec.gamma_q)) +
             L * bottleneck_param_count(d, bottleneck_width(d, spec.gamma_v)) + L * 2 * d +
             spec.d_pos * d + d;
  }
  return 0;
}

/// f(z) = W . LN(gelu(U z)) with affine U and W.
class BottleneckMLP {
 public:
  BottleneckMLP() = default;

  static BottleneckMLP create(ParamStore& store, const std::string& prefix, std::size_t d,
                              double gamma, Rng& rng) {
    const std::size_t m = bottleneck_width(d, gamma);
    BottleneckMLP f;
    f.down_w = store.add(prefix + "/down/weight", normal_init({d, m}, rng, kInitStddev));
    f.down_b = store.add(prefix + "/down/bias", Tensor::zeros({m}));
    f.ln_g = store.add(prefix + "/ln/gain", Tensor::full({m}, 1.0));
    f.ln_b = store.add(prefix + "/ln/bias", Tensor::zeros({m}));
    f.up_w = store.add(prefix + "/up/weight", normal_init({m, d}, rng, kInitStddev));
    f.up_b = store.add(prefix + "/up/bias", Tensor::zeros({d}));
    return f;
  }

  Tensor forward(const Tensor& x) const {
    return linear(layer_norm(gelu(linear(x, down_w, down_b)), ln_g, ln_b), up_w, up_b);
  }

  Tensor down_w, down_b, ln_g, ln_b, up_w, up_b;
};

namespace detail {

inline void require_depth(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw ConfigError(std::string(what) + ": head built for " + std::to_string(want) +
                          " layers, got " + std::to_string(got),
                      "layers");
  }
}

}  // namespace detail

/// Sum of per-layer affine maps, h = sum_i W_i z_i + b_i.
class ConcatHead {
 public:
  static ConcatHead create(ParamStore& store, std::size_t L, std::size_t d, Rng& rng) {
    ConcatHead h;
    for (std::size_t i = 0; i < L; ++i) {
      const std::string p = "fusion/concat/layer" + std::to_string(i);
      h.weights.push_back(store.add(p + "/weight", normal_init({d, d}, rng, kInitStddev)));
      h.biases.push_back(store.add(p + "/bias", Tensor::zeros({d})));
    }
    return h;
  }

  std::size_t depth() const { return weights.size(); }

  Tensor fuse(std::span<const Tensor> z) const {
    detail::require_depth(z.size(), depth(), "concat_fuse");
    Tensor h = linear(z[0], weights[0], biases[0]);
    for (std::size_t i = 1; i < z.size(); ++i) h = add(h, linear(z[i], weights[i], biases[i]));
    return h;
  }

  std::vector<Tensor> weights;
  std::vector<Tensor> biases;
};

/// Depth-wise attention over layer outputs.
///
/// Keys come from a static U(0,1) table of layer positions mapped through a
/// learned affine map, so they do not depend on the input. Each layer has its
/// own value MLP followed by its own LayerNorm. The query is
/// 1 + elu(z_L + f_Q(z_L)), and scores are softmax over layers of q . K^T
/// with no temperature.
class DWAttHead {
 public:
  static DWAttHead create(ParamStore& store, std::size_t L, std::size_t d, const FusionSpec& spec,
                          Rng& rng) {
    if (spec.d_pos < 1) throw ConfigError("must be >= 1", "fusion.d_pos");
    DWAttHead h;
    Tensor table = Tensor::zeros({L, spec.d_pos});
    for (double& v : table.data()) v = rng.uniform();
    h.k_pos = store.add_buffer("fusion/dwatt/k_pos", table);
    h.key_w = store.add("fusion/dwatt/key/weight", normal_init({spec.d_pos, d}, rng, kInitStddev));
    h.key_b = store.add("fusion/dwatt/key/bias", Tensor::zeros({d}));
    h.query = BottleneckMLP::create(store, "fusion/dwatt/query", d, spec.gamma_q, rng);
    for (std::size_t i = 0; i < L; ++i) {
      const std::string p = "fusion/dwatt/value" + std::to_string(i);
      h.values.push_back(BottleneckMLP::create(store, p + "/mlp", d, spec.gamma_v, rng));
      h.value_ln_g.push_back(store.add(p + "/ln/gain", Tensor::full({d}, 1.0)));
      h.value_ln_b.push_back(store.add(p + "/ln/bias", Tensor::zeros({d})));
    }
    return h;
  }

  std::size_t depth() const { return values.size(); }

  /// K [L x d].
  Tensor keys() const { return linear(k_pos, key_w, key_b); }

  /// V [L x batch x seq x d].
  Tensor layer_values(std::span<const Tensor> z) const {
    detail::require_depth(z.size(), depth(), "dwatt_values");
    std::vector<Tensor> v;
    v.reserve(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
      v.push_back(layer_norm(values[i].forward(z[i]), value_ln_g[i], value_ln_b[i]));
    }
    return stack(v);
  }

  Tensor make_query(const Tensor& z_last) const {
    return add_scalar(elu(add(z_last, query.forward(z_last))), 1.0);
  }

  /// Per-token distribution over layers, [tokens x L].
  Tensor scores(const Tensor& q, const Tensor& K) const {
    const Tensor flat = reshape(q, {q.rows(), q.cols()});
    return softmax(matmul(flat, transpose(K)), 1);
  }

  /// h = z_last + softmax(q K^T) V. `z_last` is passed separately from the
  /// layer list so that layer order can be permuted independently of the
  /// query source.
  Tensor fuse(std::span<const Tensor> z, const Tensor& z_last) const {
    const Tensor K = keys();
    const Tensor V = layer_values(z);
    const Tensor S = scores(make_query(z_last), K);
    return add(z_last, depth_attend(S, V));
  }

  Tensor k_pos;
  Tensor key_w, key_b;
  BottleneckMLP query;
  std::vector<BottleneckMLP> values;
  std::vector<Tensor> value_ln_g, value_ln_b;
};

/// n freshly initialised transformer layers stacked on z_L.
class ExtraLayersHead {
 public:
  static ExtraLayersHead create(ParamStore& store, std::size_t n, std::size_t d, std::size_t heads,
                                std::size_t ffn_mult, Rng& rng) {
    if (n < 1) throw ConfigError("must be >= 1", "fusion.extra_layers");
    ExtraLayersHead h;
    for (std::size_t i = 0; i < n; ++i) {
      h.layers.push_back(TransformerLayer::create(store, "fusion/extra/layer" + std::to_string(i),
                                                  d, heads, ffn_mult, rng));
    }
    return h;
  }

  Tensor forward(const Tensor& z_last, const std::vector<std::size_t>& lengths,
                 const ForwardContext& ctx = {}) const {
    Tensor x = z_last;
    for (const TransformerLayer& l : layers) x = l.forward(x, lengths, ctx);
    return x;
  }

  std::vector<TransformerLayer> layers;
};

inline Tensor concat_fuse(const LayerIntermediates& z, const ConcatHead& head) {
  return head.fuse(z.z);
}

inline Tensor dwatt_keys(const DWAttHead& head) { return head.keys(); }

inline Tensor dwatt_values(const LayerIntermediates& z, const DWAttHead& head) {
  return head.layer_values(z.z);
}

inline Tensor dwatt_query(const Tensor& z_last, const DWAttHead& head) {
  return head.make_query(z_last);
}

inline Tensor dwatt_fuse(const LayerIntermediates& z, const DWAttHead& head) {
  detail::require_depth(z.depth(), head.depth(), "dwatt_fuse");
  return head.fuse(z.z, z.final());
}

inline Tensor average_fuse(const LayerIntermediates& z) {
  if (z.depth() == 0) throw ContractError("average_fuse: no layers");
  Tensor h = z.z[0];
  for (std::size_t i = 1; i < z.depth(); ++i) h = add(h, z.z[i]);
  return scale(h, 1.0 / static_cast<double>(z.depth()));
}

inline Tensor extra_layers_forward(const Tensor& z_last, const std::vector<std::size_t>& lengths,
                                   const ExtraLayersHead& head, const ForwardContext& ctx = {}) {
  return head.forward(z_last, lengths, ctx);
}

/// The add-on between encoder and task head. Every alternative maps
/// LayerIntermediates to one [batch x seq x d] representation, so heads are
/// interchangeable behind `forward`.
class FusionHead {
 public:
  struct Base {};
  struct Average {};
  using Variant = std::variant<Base, ExtraLayersHead, Average, ConcatHead, DWAttHead>;

  static FusionHead create(ParamStore& store, const FusionSpec& spec, const EncoderConfig& enc,
                           Rng& rng) {
    FusionHead f;
    f.spec_ = spec;
    switch (spec.kind) {
      case FusionKind::Base: f.head_ = Base{}; break;
      case FusionKind::Average: f.head_ = Average{}; break;
      case FusionKind::ExtraLayers:
        f.head_ = ExtraLayersHead::create(store, spec.extra_layers, enc.width, enc.heads,
                                          enc.ffn_mult, rng);
        break;
      case FusionKind::Concat: f.head_ = ConcatHead::create(store, enc.layers, enc.width, rng); break;
      case FusionKind::DWAtt: f.head_ = DWAttHead::create(store, enc.layers, enc.width, spec, rng); break;
    }
    return f;
  }

  FusionKind kind() const { return spec_.kind; }
  const FusionSpec& spec() const { return spec_; }
  const Variant& variant() const { return head_; }

  Tensor forward(const LayerIntermediates& z, const ForwardContext& ctx = {}) const {
    return std::visit(
        [&](const auto& h) -> Tensor {
          using H = std::decay_t<decltype(h)>;
          if constexpr (std::is_same_v<H, Base>) {
            return z.final();
          } else if constexpr (std::is_same_v<H, Average>) {
            return average_fuse(z);
          } else if constexpr (std::is_same_v<H, ExtraLayersHead>) {
            return h.forward(z.final(), z.lengths, ctx);
          } else if constexpr (std::is_same_v<H, ConcatHead>) {
            return concat_fuse(z, h);
          } else {
            return dwatt_fuse(z, h);
          }
        },
        head_);
  }

 private:
  FusionSpec spec_;
  Variant head_;
};

}  // namespace depthfuse
