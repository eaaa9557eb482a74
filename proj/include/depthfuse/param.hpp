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
#include <cstring>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "depthfuse/error.hpp"
#include "depthfuse/rng.hpp"
#include "depthfuse/tensor.hpp"

namespace depthfuse {

/// A named learned tensor. `buffer` marks persisted non-learned state (the
/// static layer-position table of DWAtt, for instance): buffers are always
/// frozen and never counted as learned parameters.
struct Parameter {
  std::string name;
  Tensor value;
  bool frozen = false;
  bool buffer = false;
};

/// Ordered registry of a model's parameters, keyed by hierarchical names such
/// as "encoder/layer0/attn/q/weight". Registration order is the iteration
/// order everywhere (optimizer, checkpoints, hashing).
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor value) { return insert(name, std::move(value), false); }

  Tensor add_buffer(const std::string& name, Tensor value) {
    return insert(name, std::move(value), true);
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter " + name);
    return params_[it->second];
  }
  const Parameter& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }

  void set_frozen(Parameter& p, bool frozen) {
    p.frozen = frozen || p.buffer;
    p.value.set_requires_grad(!p.frozen);
  }

  /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
  void set_frozen_prefix(std::string_view prefix, bool frozen) {
    for (Parameter& p : params_) {
      if (std::string_view(p.name).starts_with(prefix)) set_frozen(p, frozen);
    }
  }

  /// Allocates zeroed gradients for every trainable parameter.
  void zero_grad() {
    for (Parameter& p : params_) {
      if (!p.frozen) p.value.zero_grad();
    }
  }

  std::vector<const Parameter*> trainable() const {
    std::vector<const Parameter*> out;
    for (const Parameter& p : params_)
      if (!p.frozen) out.push_back(&p);
    return out;
  }

  /// Number of learned scalars under `prefix` (buffers excluded).
  std::size_t count(std::string_view prefix = {}) const {
    std::size_t n = 0;
    for (const Parameter& p : params_) {
      if (!p.buffer && std::string_view(p.name).starts_with(prefix)) n += p.value.numel();
    }
    return n;
  }

  /// FNV-1a over names and raw value bytes of parameters under `prefix`.
  std::uint64_t hash(std::string_view prefix = {}) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* bytes, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(bytes);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 0x100000001b3ULL;
      }
    };
    for (const Parameter& p : params_) {
      if (!std::string_view(p.name).starts_with(prefix)) continue;
      feed(p.name.data(), p.name.size());
      feed(p.value.data().data(), p.value.numel() * sizeof(double));
    }
    return h;
  }

 private:
  Tensor insert(const std::string& name, Tensor value, bool buffer) {
    if (index_.count(name)) throw ContractError("duplicate parameter name " + name);
    value.set_requires_grad(!buffer);
    index_.emplace(name, params_.size());
    params_.push_back(Parameter{name, value, buffer, buffer});
    return value;
  }

  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

inline Tensor normal_init(Shape shape, Rng& rng, double stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

}  // namespace depthfuse
