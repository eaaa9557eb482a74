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

#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "depthfuse/metrics.hpp"
#include "depthfuse/rng.hpp"

using namespace depthfuse;

namespace {

using Labels = std::vector<std::string>;

// Span enumeration: [s, e) is a chunk of type X when it starts a run of X
// and the run ends exactly at e.
std::set<std::tuple<std::size_t, std::size_t, std::string>> brute_chunks(const Labels& l) {
  std::set<std::tuple<std::size_t, std::size_t, std::string>> out;
  auto type_of = [&](std::size_t i) { return l[i].size() > 2 ? l[i].substr(2) : std::string(); };
  auto is_i = [&](std::size_t i, const std::string& x) { return l[i] == "I-" + x; };
  for (std::size_t s = 0; s < l.size(); ++s) {
    if (l[s] == "O") continue;
    const std::string x = type_of(s);
    const bool starts =
        l[s][0] == 'B' || s == 0 || (l[s - 1] != "B-" + x && l[s - 1] != "I-" + x);
    if (!starts) continue;
    for (std::size_t e = s + 1; e <= l.size(); ++e) {
      bool inner = true;
      for (std::size_t k = s + 1; k < e; ++k) inner = inner && is_i(k, x);
      if (inner && (e == l.size() || !is_i(e, x))) out.insert({s, e, x});
    }
  }
  return out;
}

Labels random_labels(Rng& rng, std::size_t n) {
  static const Labels pool = {"O", "O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG"};
  Labels l;
  for (std::size_t i = 0; i < n; ++i) l.push_back(pool[rng.below(pool.size())]);
  return l;
}

}  // namespace

TEST(Chunks, Examples) {
  EXPECT_EQ(extract_chunks({"B-PER", "I-PER", "O", "B-LOC"}),
            (std::vector<Chunk>{{"PER", 0, 2}, {"LOC", 3, 4}}));
  EXPECT_EQ(extract_chunks({"I-PER", "I-PER"}), (std::vector<Chunk>{{"PER", 0, 2}}));
  EXPECT_EQ(extract_chunks({"B-PER", "I-LOC"}),
            (std::vector<Chunk>{{"PER", 0, 1}, {"LOC", 1, 2}}));
  EXPECT_EQ(extract_chunks({"B-PER", "B-PER"}),
            (std::vector<Chunk>{{"PER", 0, 1}, {"PER", 1, 2}}));
  EXPECT_TRUE(extract_chunks({"O", "O"}).empty());
  EXPECT_THROW(extract_chunks({"O", "X-PER"}), InputError);
}

TEST(Chunks, MatchesSpanEnumeration) {
  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    Labels l = random_labels(rng, 1 + rng.below(12));
    std::set<std::tuple<std::size_t, std::size_t, std::string>> got;
    for (const Chunk& c : extract_chunks(l)) got.insert({c.start, c.end, c.type});
    EXPECT_EQ(got, brute_chunks(l));
  }
}

TEST(MicroF1, HandCase) {
  // gold: PER[0,2) LOC[3,4); pred: PER[0,2) LOC[2,4) ORG[4,5)
  F1Report r = micro_f1({{"B-PER", "I-PER", "O", "B-LOC", "O"}},
                        {{"B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG"}});
  EXPECT_DOUBLE_EQ(r.precision, 1.0 / 3);
  EXPECT_DOUBLE_EQ(r.recall, 0.5);
  EXPECT_DOUBLE_EQ(r.f1, 0.4);
}

TEST(MicroF1, DegenerateCases) {
  EXPECT_EQ(micro_f1({{"O"}}, {{"O"}}).f1, 0.0);
  EXPECT_EQ(micro_f1({{"B-PER"}}, {{"O"}}).f1, 0.0);
  EXPECT_EQ(micro_f1({{"B-PER"}}, {{"B-PER"}}).f1, 1.0);
  EXPECT_THROW(micro_f1({{"O"}}, {}), ContractError);
  EXPECT_THROW(micro_f1({{"O"}}, {{"O", "O"}}), ContractError);
}

TEST(MicroF1, MatchesBruteForce) {
  Rng rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<Labels> gold, pred;
    double tp = 0, ng = 0, np = 0;
    const std::size_t n = 1 + rng.below(4);
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t len = 1 + rng.below(10);
      gold.push_back(random_labels(rng, len));
      pred.push_back(random_labels(rng, len));
      auto g = brute_chunks(gold.back());
      auto p = brute_chunks(pred.back());
      ng += g.size();
      np += p.size();
      for (const auto& c : p) tp += g.count(c);
    }
    const double prec = np ? tp / np : 0.0;
    const double rec = ng ? tp / ng : 0.0;
    const double f1 = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    EXPECT_NEAR(micro_f1(gold, pred).f1, f1, 1e-12);
  }
}

TEST(MicroF1, ReportFormats) {
  F1Report r = micro_f1({{"B-PER", "O"}}, {{"B-PER", "B-LOC"}});
  std::ostringstream csv;
  r.write_csv(csv);
  EXPECT_EQ(csv.str(),
            "type,precision,recall,f1,support\nLOC,0.00,0.00,0.00,0\nPER,100.00,100.00,100.00,1\n"
            "micro,50.00,100.00,66.67,\n");
}

TEST(Perplexity, UniformEqualsVocabSize) {
  Tensor logits = Tensor::zeros({3, 8});
  EXPECT_NEAR(perplexity_from_logits(logits, {1, 2, 3}), 8.0, 1e-12);
}

TEST(Perplexity, TwoOutcomeCase) {
  // p = 1/2 and p = 1/4: ppl = exp(-(ln 1/2 + ln 1/4)/2) = 2 sqrt 2
  Tensor logits({2, 4}, {0, 0, -1e300, -1e300, 0, 0, 0, 0});
  EXPECT_NEAR(perplexity_from_logits(logits, {0, 3}), 2 * std::sqrt(2.0), 1e-12);
}

TEST(Perplexity, IgnoresUnselectedAndRejectsEmpty) {
  Tensor logits({2, 2}, {5, -5, 0, 0});
  EXPECT_NEAR(perplexity_from_logits(logits, {-1, 0}), 2.0, 1e-12);
  EXPECT_THROW(perplexity_from_logits(logits, {-1, -1}), ContractError);
  EXPECT_THROW(perplexity_from_logits(logits, {0}), ShapeError);
}

TEST(Perplexity, AccumulatesAcrossBatches) {
  PerplexityAccumulator acc;
  acc.add(Tensor::zeros({1, 4}), {0});
  acc.add(Tensor::zeros({1, 16}), {0});
  EXPECT_NEAR(acc.perplexity(), 8.0, 1e-12);
}

TEST(MicroF1, OneCorrectOneSpurious) {
  F1Report r = micro_f1({{"B-PER", "O", "B-LOC", "O"}}, {{"B-PER", "O", "O", "B-ORG"}});
  EXPECT_DOUBLE_EQ(r.precision, 0.5);
  EXPECT_DOUBLE_EQ(r.recall, 0.5);
  EXPECT_DOUBLE_EQ(r.f1, 0.5);
}

TEST(MicroF1, SwapExchangesPrecisionAndRecall) {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t len = 1 + rng.below(10);
    std::vector<Labels> g{random_labels(rng, len)}, p{random_labels(rng, len)};
    F1Report a = micro_f1(g, p), b = micro_f1(p, g);
    EXPECT_EQ(a.precision, b.recall);
    EXPECT_EQ(a.recall, b.precision);
    EXPECT_NEAR(a.f1, b.f1, 1e-15);
  }
}

TEST(Chunks, TrailingOutsideTagsChangeNothing) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    Labels l = random_labels(rng, 1 + rng.below(10));
    Labels padded = l;
    padded.insert(padded.end(), 3, "O");
    EXPECT_EQ(extract_chunks(l), extract_chunks(padded));
  }
}

TEST(Perplexity, PerfectPredictorIsOne) {
  Tensor logits({2, 3}, {800, 0, 0, 0, 0, 800});
  EXPECT_NEAR(perplexity_from_logits(logits, {0, 2}), 1.0, 1e-12);
}
