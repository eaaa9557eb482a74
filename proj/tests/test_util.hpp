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

#include <vector>

#include "depthfuse/encoder.hpp"
#include "depthfuse/ops.hpp"
#include "depthfuse/rng.hpp"

namespace depthfuse::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline LayerIntermediates random_intermediates(std::size_t L, std::size_t batch, std::size_t seq,
                                               std::size_t d, Rng& rng,
                                               bool requires_grad = false) {
  LayerIntermediates z;
  for (std::size_t i = 0; i < L; ++i)
    z.z.push_back(random_tensor({batch, seq, d}, rng, -2.0, 2.0, requires_grad));
  z.lengths.assign(batch, seq);
  return z;
}

inline void fill(Tensor t, double v) {
  for (double& x : t.data()) x = v;
}

inline TokenBatch random_tokens(std::size_t batch, std::size_t seq, std::size_t vocab, Rng& rng) {
  TokenBatch b;
  b.batch = batch;
  b.seq = seq;
  for (std::size_t i = 0; i < batch * seq; ++i) b.ids.push_back(static_cast<int>(rng.below(vocab)));
  b.lengths.assign(batch, seq);
  return b;
}

}  // namespace depthfuse::testing
