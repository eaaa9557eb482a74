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
#include <cstdio>
#include <iterator>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "depthfuse/data.hpp"
#include "depthfuse/error.hpp"
#include "depthfuse/tensor.hpp"

namespace depthfuse {

/// A labelled span [start, end) of one sentence.
struct Chunk {
  std::string type;
  std::size_t start = 0;
  std::size_t end = 0;

  bool operator==(const Chunk&) const = default;
  bool operator<(const Chunk& o) const {
    return std::tie(start, end, type) < std::tie(o.start, o.end, o.type);
  }
};

/// Default (non-strict) BIO chunking: B-X opens a chunk, I-X extends an open
/// chunk of the same type and otherwise opens a new one, O closes.
inline std::vector<Chunk> extract_chunks(const std::vector<std::string>& labels) {
  std::vector<Chunk> out;
  bool open = false;
  Chunk cur;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto tag = parse_tag(labels[i]);
    if (!tag) throw InputError("malformed tag '" + labels[i] + "' at index " + std::to_string(i));
    const bool continues = open && tag->prefix == 'I' && tag->type == cur.type;
    if (continues) continue;
    if (open) {
      cur.end = i;
      out.push_back(cur);
      open = false;
    }
    if (tag->prefix != 'O') {
      cur = Chunk{tag->type, i, i};
      open = true;
    }
  }
  if (open) {
    cur.end = labels.size();
    out.push_back(cur);
  }
  return out;
}

struct TypeCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

inline double safe_ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

struct TypeScore {
  std::string type;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::size_t support = 0;
};

struct F1Report {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::vector<TypeScore> per_type;

  void write_csv(std::ostream& os) const {
    os << "type,precision,recall,f1,support\n";
    char buf[160];
    for (const TypeScore& t : per_type) {
      std::snprintf(buf, sizeof buf, "%s,%.2f,%.2f,%.2f,%zu\n", t.type.c_str(), 100 * t.precision,
                    100 * t.recall, 100 * t.f1, t.support);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, "micro,%.2f,%.2f,%.2f,\n", 100 * precision, 100 * recall, 100 * f1);
    os << buf;
  }

  void write_table(std::ostream& os) const {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-10s %9s %9s %9s %9s\n", "type", "precision", "recall", "f1",
                  "support");
    os << buf;
    for (const TypeScore& t : per_type) {
      std::snprintf(buf, sizeof buf, "%-10s %9.2f %9.2f %9.2f %9zu\n", t.type.c_str(),
                    100 * t.precision, 100 * t.recall, 100 * t.f1, t.support);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, "%-10s %9.2f %9.2f %9.2f\n", "micro", 100 * precision,
                  100 * recall, 100 * f1);
    os << buf;
  }
};

/// Entity-level micro-averaged precision, recall and F1 over sentences.
/// A predicted chunk counts only when type, start and end all match.
inline F1Report micro_f1(const std::vector<std::vector<std::string>>& gold,
                         const std::vector<std::vector<std::string>>& pred) {
  if (gold.size() != pred.size()) {
    throw ContractError("micro_f1: " + std::to_string(gold.size()) + " gold vs " +
                        std::to_string(pred.size()) + " predicted sentences");
  }
  std::map<std::string, TypeCounts> counts;
  for (std::size_t s = 0; s < gold.size(); ++s) {
    if (gold[s].size() != pred[s].size()) {
      throw ContractError("micro_f1: length mismatch in sentence " + std::to_string(s));
    }
    std::vector<Chunk> g = extract_chunks(gold[s]);
    std::vector<Chunk> p = extract_chunks(pred[s]);
    std::sort(g.begin(), g.end());
    std::sort(p.begin(), p.end());
    std::vector<Chunk> hit;
    std::set_intersection(g.begin(), g.end(), p.begin(), p.end(), std::back_inserter(hit));
    for (const Chunk& c : hit) counts[c.type].tp++;
    for (const Chunk& c : g) counts[c.type].fn++;
    for (const Chunk& c : p) counts[c.type].fp++;
    for (const Chunk& c : hit) {
      counts[c.type].fn--;
      counts[c.type].fp--;
    }
  }
  F1Report r;
  TypeCounts total;
  for (const auto& [type, c] : counts) {
    TypeScore t;
    t.type = type;
    t.precision = safe_ratio(c.tp, c.tp + c.fp);
    t.recall = safe_ratio(c.tp, c.tp + c.fn);
    t.f1 = safe_ratio(2 * t.precision * t.recall, t.precision + t.recall);
    t.support = c.tp + c.fn;
    r.per_type.push_back(t);
    total.tp += c.tp;
    total.fp += c.fp;
    total.fn += c.fn;
  }
  r.precision = safe_ratio(total.tp, total.tp + total.fp);
  r.recall = safe_ratio(total.tp, total.tp + total.fn);
  r.f1 = safe_ratio(2 * r.precision * r.recall, r.precision + r.recall);
  return r;
}

/// Running mean negative log-likelihood (nats) over predicted positions.
class PerplexityAccumulator {
 public:
  /// Adds every row of logits [N x V] whose target is not -1.
  void add(const Tensor& logits, const std::vector<int>& targets) {
    const std::size_t v = logits.cols();
    if (logits.rows() != targets.size()) {
      throw ShapeError("perplexity: " + std::to_string(targets.size()) + " targets for logits " +
                       shape_str(logits.shape()));
    }
    auto x = logits.data();
    for (std::size_t r = 0; r < targets.size(); ++r) {
      if (targets[r] < 0) continue;
      if (static_cast<std::size_t>(targets[r]) >= v) {
        throw InputError("perplexity: target " + std::to_string(targets[r]) + " out of range");
      }
      const double* row = x.data() + r * v;
      const double m = *std::max_element(row, row + v);
      double z = 0.0;
      for (std::size_t c = 0; c < v; ++c) z += std::exp(row[c] - m);
      nll_ += m + std::log(z) - row[targets[r]];
      ++count_;
    }
  }

  std::size_t count() const { return count_; }

  double mean_nll() const {
    if (count_ == 0) throw ContractError("perplexity over zero predicted positions");
    return nll_ / static_cast<double>(count_);
  }

  double perplexity() const { return std::exp(mean_nll()); }

 private:
  double nll_ = 0.0;
  std::size_t count_ = 0;
};

inline double perplexity_from_logits(const Tensor& logits, const std::vector<int>& targets) {
  PerplexityAccumulator acc;
  acc.add(logits, targets);
  return acc.perplexity();
}

}  // namespace depthfuse
