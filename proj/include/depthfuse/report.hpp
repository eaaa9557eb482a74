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

#include <cstdio>
#include <filesystem>
#include <ostream>
#include <sstream>
#include <string>

#include "depthfuse/io.hpp"
#include "depthfuse/train.hpp"

namespace depthfuse {

/// File stem of one grid run, e.g. "dwatt_N8_E50_t0".
inline std::string run_stem(const TrialResult& r) {
  return std::string(to_string(r.key.fusion)) + "_N" + std::to_string(r.key.shots) + "_E" +
         std::to_string(r.key.epochs) + "_t" + std::to_string(r.trial);
}

/// One row per cell: mean, 95% CI half-width and median of best dev scores.
inline void write_aggregate_csv(std::ostream& os, const GridResult& g) {
  os << "fusion,shots,epochs,trials,failed,mean,ci95,median\n";
  char buf[256];
  for (const CellSummary& c : g.cells) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%zu,%zu,%.6f,%.6f,%.6f\n", to_string(c.key.fusion),
                  c.key.shots, c.key.epochs, c.trials_ok, c.trials_failed, c.mean, c.ci95, c.median);
    os << buf;
  }
}

/// Long-format trial scores for external plotting: x = shots, y = best_dev,
/// hue = fusion, one panel per epoch budget.
inline void write_plot_data_csv(std::ostream& os, const GridResult& g) {
  os << "fusion,shots,epochs,trial,seed,best_dev,best_epoch,status\n";
  char buf[256];
  for (const TrialResult& r : g.runs) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%zu,%llu,%.6f,%zu,%s\n", to_string(r.key.fusion),
                  r.key.shots, r.key.epochs, r.trial, static_cast<unsigned long long>(r.seed),
                  r.ok ? r.best : 0.0, r.best_epoch, r.ok ? "ok" : "failed");
    os << buf;
  }
}

/// Writes aggregate.csv, plot_data.csv, one history CSV per run under
/// runs/, and failures.txt when any run failed.
inline void write_grid_outputs(const std::filesystem::path& dir, const GridResult& g) {
  for (const TrialResult& r : g.runs) {
    if (!r.ok) continue;
    write_file_atomic(dir / "runs" / (run_stem(r) + ".csv"),
                      [&](std::ostream& os) { r.history.write_csv(os); });
  }
  write_file_atomic(dir / "aggregate.csv", [&](std::ostream& os) { write_aggregate_csv(os, g); });
  write_file_atomic(dir / "plot_data.csv", [&](std::ostream& os) { write_plot_data_csv(os, g); });
  if (!g.all_ok()) {
    write_file_atomic(dir / "failures.txt", [&](std::ostream& os) {
      for (const TrialResult& r : g.runs)
        if (!r.ok) os << run_stem(r) << ": " << r.error << '\n';
    });
  }
}

}  // namespace depthfuse
