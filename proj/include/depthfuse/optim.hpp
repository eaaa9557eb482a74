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
#include <cmath>
#include <cstdint>
#include <vector>

#include "depthfuse/error.hpp"
#include "depthfuse/param.hpp"

namespace depthfuse {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Linearly decaying learning rate: max_lr at step 0, zero at total_steps.
/// Steps past the end clamp to zero.
inline double linear_decay_lr(std::uint64_t step, std::uint64_t total_steps, double max_lr) {
  if (total_steps == 0) throw ContractError("linear_decay_lr: total_steps must be >= 1");
  if (step >= total_steps) return 0.0;
  return max_lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

/// AdamW with bias correction and decoupled weight decay.
///
/// Moment buffers are keyed by position in the ParamStore and exist exactly
/// for the parameters that were trainable when the optimizer was created.
class AdamW {
 public:
  AdamW(ParamStore& store, AdamWOptions opts = {}) : store_(store), opts_(opts) {
    for (std::size_t i = 0; i < store.all().size(); ++i) {
      const Parameter& p = store.all()[i];
      if (p.frozen) continue;
      slots_.push_back(Slot{i, std::vector<double>(p.value.numel(), 0.0),
                            std::vector<double>(p.value.numel(), 0.0)});
    }
  }

  std::uint64_t steps() const { return step_; }
  std::size_t tracked() const { return slots_.size(); }
  const AdamWOptions& options() const { return opts_; }

  void step(double lr) {
    for (const Slot& s : slots_) {
      const Parameter& p = store_.all()[s.index];
      if (!p.frozen && !p.value.has_grad()) {
        throw ContractError("adamw_step: parameter " + p.name + " has no gradient");
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(step_));
    for (Slot& s : slots_) {
      Parameter& p = store_.all()[s.index];
      if (p.frozen) continue;
      auto w = p.value.data();
      auto g = p.value.grad();
      for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] *= 1.0 - lr * opts_.weight_decay;
        s.m[i] = opts_.beta1 * s.m[i] + (1.0 - opts_.beta1) * g[i];
        s.v[i] = opts_.beta2 * s.v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
        const double mhat = s.m[i] / bc1;
        const double vhat = s.v[i] / bc2;
        w[i] -= lr * mhat / (std::sqrt(vhat) + opts_.eps);
      }
    }
  }

 private:
  struct Slot {
    std::size_t index;
    std::vector<double> m;
    std::vector<double> v;
  };

  ParamStore& store_;
  AdamWOptions opts_;
  std::vector<Slot> slots_;
  std::uint64_t step_ = 0;
};

}  // namespace depthfuse
