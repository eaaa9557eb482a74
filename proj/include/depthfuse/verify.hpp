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

#include <string>
#include <vector>

#include "depthfuse/encoder.hpp"
#include "depthfuse/fusion.hpp"
#include "depthfuse/gradcheck.hpp"
#include "depthfuse/ops.hpp"
#include "depthfuse/param.hpp"

namespace depthfuse {

struct GradSuiteOptions {
  std::size_t layers = 3;
  std::size_t width = 8;
  std::size_t heads = 2;
  std::size_t d_pos = 4;
  std::size_t batch = 2;
  std::size_t seq = 4;
  double tolerance = 1e-4;
  double step = 1e-5;
  double corrupt = 0.0;  // added to analytic gradients; a test hook
  std::uint64_t seed = 0;
};

struct GradCheckRow {
  std::string component;
  std::string parameter;
  std::size_t size = 0;
  double error = 0.0;
  bool pass = false;
};

/// Finite-difference check of every learned parameter group of one encoder
/// block and of the Average, Concat, DWAtt and ExtraLayers heads, plus their
/// inputs. The loss is a fixed random projection of the output, with the
/// second sequence one token shorter so padding paths are exercised.
inline std::vector<GradCheckRow> run_grad_suite(const GradSuiteOptions& o) {
  Rng rng(derive_seed(o.seed, "grad-suite"));
  const Shape zshape{o.batch, o.seq, o.width};
  std::vector<std::size_t> lengths(o.batch, o.seq);
  if (o.batch > 1 && o.seq > 1) lengths[1] = o.seq - 1;

  auto uniform = [&](const Shape& s, bool tracked) {
    Tensor t = Tensor::zeros(s, tracked);
    for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
    return t;
  };
  LayerIntermediates z;
  for (std::size_t i = 0; i < o.layers; ++i) z.z.push_back(uniform(zshape, true));
  z.lengths = lengths;
  const Tensor proj = uniform(zshape, false);

  std::vector<GradCheckRow> rows;
  auto check = [&](const std::string& component, const std::string& name, Tensor t,
                   const std::function<Tensor()>& loss) {
    GradCheckRow r{component, name, t.numel(), 0.0, false};
    r.error = finite_diff_check_detail(loss, t, o.step, o.corrupt).max_rel_error;
    r.pass = r.error < o.tolerance;
    rows.push_back(r);
  };
  auto check_store = [&](const std::string& component, const ParamStore& store,
                         const std::function<Tensor()>& loss) {
    for (const Parameter& p : store.all()) {
      if (!p.buffer) check(component, p.name, p.value, loss);
    }
  };
  auto check_inputs = [&](const std::string& component, const std::function<Tensor()>& loss) {
    for (std::size_t i = 0; i < z.depth(); ++i) check(component, "input/z" + std::to_string(i + 1), z.z[i], loss);
  };

  {
    ParamStore store;
    TransformerLayer block = TransformerLayer::create(store, "block", o.width, o.heads, 4, rng);
    auto loss = [&] { return sum(mul(block.forward(z.z[0], lengths, {}), proj)); };
    check_store("encoder_block", store, loss);
    check("encoder_block", "input/x", z.z[0], loss);
  }
  FusionSpec spec;
  spec.d_pos = o.d_pos;
  EncoderConfig enc;
  enc.layers = o.layers;
  enc.width = o.width;
  enc.heads = o.heads;
  enc.vocab_size = 1;
  for (FusionKind kind : {FusionKind::Average, FusionKind::Concat, FusionKind::DWAtt,
                          FusionKind::ExtraLayers}) {
    spec.kind = kind;
    ParamStore store;
    FusionHead head = FusionHead::create(store, spec, enc, rng);
    auto loss = [&] { return sum(mul(head.forward(z), proj)); };
    check_store(to_string(kind), store, loss);
    check_inputs(to_string(kind), loss);
  }
  return rows;
}

}  // namespace depthfuse
