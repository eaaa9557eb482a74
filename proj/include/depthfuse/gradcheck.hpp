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
#include <functional>
#include <vector>

#include "depthfuse/error.hpp"
#include "depthfuse/tensor.hpp"

namespace depthfuse {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the reverse-mode gradient of `loss_fn` with respect to `param`
/// against central differences, coordinate by coordinate.
///
/// `loss_fn` must rebuild the graph on every call and return a scalar. The
/// per-coordinate error is |a - n| / max(1, |a|, |n|); the maximum is
/// returned. `corrupt` (if set) is added to every analytic coordinate and
/// exists so callers can verify that a broken gradient is caught.
inline GradCheckResult finite_diff_check_detail(const std::function<Tensor()>& loss_fn,
                                                Tensor param, double h = 1e-5,
                                                double corrupt = 0.0) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ContractError("finite_diff_check: step outside [1e-7, 1e-3]");
  const bool was_tracked = param.requires_grad();
  param.set_requires_grad(true);
  param.zero_grad();
  loss_fn().backward();
  std::vector<double> analytic(param.grad().begin(), param.grad().end());
  param.clear_grad();

  GradCheckResult res;
  auto w = param.data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double orig = w[i];
    w[i] = orig + h;
    const double up = loss_fn().item();
    w[i] = orig - h;
    const double down = loss_fn().item();
    w[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic[i] + corrupt;
    const double err =
        std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
    if (err > res.max_rel_error || i == 0) {
      res = GradCheckResult{err, i, a, numeric};
    }
  }
  param.set_requires_grad(was_tracked);
  return res;
}

inline double finite_diff_check(const std::function<Tensor()>& loss_fn, Tensor param,
                                double h = 1e-5) {
  return finite_diff_check_detail(loss_fn, std::move(param), h).max_rel_error;
}

}  // namespace depthfuse
