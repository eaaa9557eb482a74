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
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "depthfuse/encoder.hpp"
#include "depthfuse/error.hpp"
#include "depthfuse/rng.hpp"

namespace depthfuse {

// ---- vocabulary ----------------------------------------------------------------

inline constexpr int kPadId = 0;
inline constexpr int kUnkId = 1;
inline constexpr int kMaskId = 2;
inline constexpr int kBosId = 3;
inline constexpr int kEosId = 4;
inline constexpr int kNumReserved = 5;

inline const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> r = {"<pad>", "<unk>", "<mask>", "<bos>", "<eos>"};
  return r;
}

/// Token <-> id bijection. Ids 0..4 are always PAD, UNK, MASK, BOS, EOS.
///
/// File format: one token per line, UTF-8. The first five lines are the
/// reserved block and must read exactly <pad> <unk> <mask> <bos> <eos>.
class Vocab {
 public:
  Vocab() {
    for (const std::string& t : reserved_tokens()) add(t);
  }

  int add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
  }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(std::ostream& os) const {
    for (const std::string& t : tokens_) os << t << '\n';
  }

  static Vocab load(std::istream& is) {
    Vocab v;
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
      ++n;
      if (n <= reserved_tokens().size()) {
        if (line != reserved_tokens()[n - 1]) {
          throw ParseError("expected reserved token " + reserved_tokens()[n - 1], n);
        }
        continue;
      }
      if (line.empty()) throw ParseError("empty token", n);
      if (v.contains(line)) throw ParseError("duplicate token '" + line + "'", n);
      v.add(line);
    }
    if (n < reserved_tokens().size()) throw ParseError("truncated reserved block", n);
    return v;
  }

  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    Vocab v;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i < reserved_tokens().size()) {
        if (tokens[i] != reserved_tokens()[i]) {
          throw ConfigError("reserved token mismatch at id " + std::to_string(i), "vocab");
        }
        continue;
      }
      v.add(tokens[i]);
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// ---- BIO tags -----------------------------------------------------------------

struct Tag {
  char prefix = 'O';  // 'O', 'B' or 'I'
  std::string type;
};

/// Parses "O", "B-X" or "I-X" (X non-empty). Anything else is malformed.
inline std::optional<Tag> parse_tag(std::string_view s) {
  if (s == "O") return Tag{'O', {}};
  if (s.size() >= 3 && (s[0] == 'B' || s[0] == 'I') && s[1] == '-') {
    return Tag{s[0], std::string(s.substr(2))};
  }
  return std::nullopt;
}

struct TaggedSentence {
  std::vector<std::string> tokens;
  std::vector<std::string> labels;

  bool operator==(const TaggedSentence&) const = default;
};

using TaggedCorpus = std::vector<TaggedSentence>;

struct SplitCorpus {
  TaggedCorpus train, dev, test;
};

/// Promotes every orphan I-X (one not preceded by B-X or I-X) to B-X.
/// Returns the number of repairs.
inline std::size_t repair_bio(std::vector<std::string>& labels) {
  std::size_t fixed = 0;
  std::string prev_type;
  char prev_prefix = 'O';
  for (std::string& l : labels) {
    auto tag = parse_tag(l);
    if (!tag) continue;
    if (tag->prefix == 'I' && (prev_prefix == 'O' || prev_type != tag->type)) {
      l = "B-" + tag->type;
      tag->prefix = 'B';
      ++fixed;
    }
    prev_prefix = tag->prefix;
    prev_type = tag->type;
  }
  return fixed;
}

/// Reads CoNLL column format: token in the first column, BIO tag in the last,
/// blank lines between sentences, "-DOCSTART-" lines skipped. Orphan I-X tags
/// are repaired to B-X and reported through `warnings`.
inline TaggedCorpus parse_conll(std::istream& is, std::vector<std::string>* warnings = nullptr) {
  TaggedCorpus corpus;
  TaggedSentence cur;
  std::size_t line_no = 0, sentence_start = 0;
  auto flush = [&] {
    if (cur.tokens.empty()) return;
    const std::size_t fixed = repair_bio(cur.labels);
    if (fixed && warnings) {
      warnings->push_back("sentence at line " + std::to_string(sentence_start) + ": repaired " +
                          std::to_string(fixed) + " orphan I- tag(s)");
    }
    corpus.push_back(std::move(cur));
    cur = {};
  };
  std::string line;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream cols(line);
    std::vector<std::string> fields;
    for (std::string f; cols >> f;) fields.push_back(f);
    if (fields.empty()) {
      flush();
      continue;
    }
    if (fields[0] == "-DOCSTART-") continue;
    if (fields.size() < 2) throw ParseError("row has no tag column", line_no);
    if (!parse_tag(fields.back())) throw ParseError("malformed tag '" + fields.back() + "'", line_no);
    if (cur.tokens.empty()) sentence_start = line_no;
    cur.tokens.push_back(fields.front());
    cur.labels.push_back(fields.back());
  }
  flush();
  return corpus;
}

inline TaggedCorpus read_conll(const std::string& path, std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  return parse_conll(in, warnings);
}

inline void write_conll(std::ostream& os, const TaggedCorpus& corpus) {
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    if (s) os << '\n';
    for (std::size_t i = 0; i < corpus[s].tokens.size(); ++i) {
      os << corpus[s].tokens[i] << ' ' << corpus[s].labels[i] << '\n';
    }
  }
}

/// Label inventory: "O" followed by B-/I- pairs for each entity type in
/// sorted order.
class LabelSet {
 public:
  static LabelSet from_types(std::vector<std::string> types) {
    std::sort(types.begin(), types.end());
    types.erase(std::unique(types.begin(), types.end()), types.end());
    LabelSet s;
    s.types_ = types;
    s.labels_.push_back("O");
    for (const std::string& t : types) {
      s.labels_.push_back("B-" + t);
      s.labels_.push_back("I-" + t);
    }
    for (std::size_t i = 0; i < s.labels_.size(); ++i) s.index_[s.labels_[i]] = static_cast<int>(i);
    return s;
  }

  static LabelSet from_corpus(const TaggedCorpus& corpus) {
    std::vector<std::string> types;
    for (const TaggedSentence& s : corpus)
      for (const std::string& l : s.labels) {
        auto t = parse_tag(l);
        if (t && t->prefix != 'O') types.push_back(t->type);
      }
    return from_types(std::move(types));
  }

  std::size_t size() const { return labels_.size(); }
  const std::vector<std::string>& labels() const { return labels_; }
  const std::vector<std::string>& types() const { return types_; }
  const std::string& label(int id) const { return labels_.at(static_cast<std::size_t>(id)); }

  int id(const std::string& label) const {
    auto it = index_.find(label);
    if (it == index_.end()) throw InputError("label '" + label + "' not in label set");
    return it->second;
  }

 private:
  std::vector<std::string> types_;
  std::vector<std::string> labels_;
  std::unordered_map<std::string, int> index_;
};

// ---- few-shot sampling -----------------------------------------------------------

/// N sentences per class for C classes; N*C sentences in total.
struct FewShotSpec {
  std::size_t shots = 8;
  std::size_t classes = 4;
  std::uint64_t seed = 0;

  std::size_t total() const { return shots * classes; }
};

/// Indices of N*C sentences drawn uniformly without replacement, in draw
/// order. No per-class balancing.
inline std::vector<std::size_t> few_shot_indices(std::size_t corpus_size, const FewShotSpec& spec) {
  if (spec.shots == 0 || spec.classes == 0) throw ConfigError("must be >= 1", "few_shot.shots");
  if (spec.total() > corpus_size) {
    throw ConfigError("N*C = " + std::to_string(spec.total()) + " exceeds corpus size " +
                          std::to_string(corpus_size),
                      "few_shot.shots");
  }
  std::vector<std::size_t> idx(corpus_size);
  for (std::size_t i = 0; i < corpus_size; ++i) idx[i] = i;
  Rng rng(derive_seed(spec.seed, "few-shot"));
  // partial Fisher-Yates: the first k slots are a uniform k-subset in random order
  for (std::size_t i = 0; i < spec.total(); ++i) {
    std::swap(idx[i], idx[i + rng.below(corpus_size - i)]);
  }
  idx.resize(spec.total());
  return idx;
}

inline TaggedCorpus few_shot_sample(const TaggedCorpus& corpus, const FewShotSpec& spec) {
  TaggedCorpus out;
  for (std::size_t i : few_shot_indices(corpus.size(), spec)) out.push_back(corpus[i]);
  return out;
}

// ---- synthetic NER grammar ---------------------------------------------------------
//
// Four entity types. PER and LOC are marked by token identity alone (closed
// name and place lists). ORG and MISC share one pool of ambiguous words whose
// type is fixed only by the nearest preceding non-filler word: an ORG verb
// ("joined"), a MISC verb ("celebrated"), or anything else, in which case the
// word is not an entity. Up to two fillers may sit between the verb and the
// word, so the cue is several positions away.

namespace synth {

inline const std::vector<std::string> kFirst = {"anna", "boris", "carla", "dmitri", "elena", "farid",
                                                "greta", "hugo", "ines", "jonas", "kira", "lars",
                                                "mara", "nils", "olga", "pavel"};
inline const std::vector<std::string> kLast = {"berg", "costa", "dahl", "ernst", "fischer", "garcia",
                                               "holm", "ivanov", "jensen", "kowalski", "lund",
                                               "moreau", "novak", "ortega", "petrov", "quist"};
inline const std::vector<std::string> kPlace = {"oslo", "lima", "kyoto", "cairo", "dublin", "quito",
                                                "riga", "porto", "tunis", "hanoi", "perth", "accra",
                                                "minsk", "bergen", "lyon", "nantes"};
inline const std::vector<std::string> kAmbiguous = {
    "apex", "nova", "delta", "orion", "summit", "vertex", "zenith", "falcon", "harbor", "meridian",
    "atlas", "beacon", "cobalt", "ember", "granite", "horizon", "lumen", "mosaic", "pioneer", "quartz"};
inline const std::vector<std::string> kOrgVerb = {"joined", "left", "founded", "sued", "acquired"};
inline const std::vector<std::string> kMiscVerb = {"celebrated", "watched", "attended", "won", "praised"};
inline const std::vector<std::string> kNeutralVerb = {"saw", "liked", "described", "mentioned", "painted"};
inline const std::vector<std::string> kOrgSuffix = {"group", "labs"};
inline const std::vector<std::string> kMiscSuffix = {"festival", "cup"};
inline const std::vector<std::string> kFiller = {"the", "new", "old", "local"};
inline const std::vector<std::string> kMoveVerb = {"travelled", "moved", "returned", "drove"};
inline const std::vector<std::string> kPrep = {"to", "from"};
inline const std::vector<std::string> kMeetVerb = {"met", "called", "thanked", "visited"};
inline const std::vector<std::string> kSubjectNoun = {"team", "board", "crowd", "council", "family"};
inline const std::vector<std::string> kTime = {"yesterday", "today", "recently", "again"};
inline const std::vector<std::string> kConj = {"and", "while", "but"};
inline const std::vector<std::string> kOther = {"city", "in", "they", "."};

inline bool in(const std::vector<std::string>& list, const std::string& w) {
  return std::find(list.begin(), list.end(), w) != list.end();
}

}  // namespace synth

/// Every word the synthetic grammar can emit, after the reserved block.
inline Vocab synth_vocab() {
  Vocab v;
  for (const auto* list :
       {&synth::kFirst, &synth::kLast, &synth::kPlace, &synth::kAmbiguous, &synth::kOrgVerb,
        &synth::kMiscVerb, &synth::kNeutralVerb, &synth::kOrgSuffix, &synth::kMiscSuffix,
        &synth::kFiller, &synth::kMoveVerb, &synth::kPrep, &synth::kMeetVerb,
        &synth::kSubjectNoun, &synth::kTime, &synth::kConj, &synth::kOther}) {
    for (const std::string& w : *list) v.add(w);
  }
  return v;
}

/// The grammar's own labelling rule, applied to raw tokens. Reproduces the
/// generator's labels exactly.
inline std::vector<std::string> oracle_tags(const std::vector<std::string>& tokens) {
  using namespace synth;
  std::vector<std::string> out(tokens.size(), "O");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& w = tokens[i];
    const std::string prev = i ? out[i - 1] : "O";
    if (in(kFirst, w)) {
      out[i] = "B-PER";
    } else if (in(kLast, w)) {
      out[i] = (i && in(kFirst, tokens[i - 1])) ? "I-PER" : "B-PER";
    } else if (in(kPlace, w)) {
      out[i] = "B-LOC";
    } else if (w == "city") {
      out[i] = prev == "B-LOC" ? "I-LOC" : "O";
    } else if (in(kAmbiguous, w)) {
      std::size_t j = i;
      while (j > 0 && in(kFiller, tokens[j - 1])) --j;
      if (j > 0 && in(kOrgVerb, tokens[j - 1])) out[i] = "B-ORG";
      if (j > 0 && in(kMiscVerb, tokens[j - 1])) out[i] = "B-MISC";
    } else if (in(kOrgSuffix, w)) {
      out[i] = prev == "B-ORG" ? "I-ORG" : "O";
    } else if (in(kMiscSuffix, w)) {
      out[i] = prev == "B-MISC" ? "I-MISC" : "O";
    }
  }
  return out;
}

namespace detail {

class SynthWriter {
 public:
  explicit SynthWriter(Rng& rng) : rng_(rng) {}

  const std::string& pick(const std::vector<std::string>& list) { return list[rng_.below(list.size())]; }

  void emit(const std::string& w, const std::string& label = "O") {
    s_.tokens.push_back(w);
    s_.labels.push_back(label);
  }

  void person() {
    emit(pick(synth::kFirst), "B-PER");
    if (rng_.bernoulli(0.6)) emit(pick(synth::kLast), "I-PER");
  }

  void place() {
    emit(pick(synth::kPlace), "B-LOC");
    if (rng_.bernoulli(0.2)) emit("city", "I-LOC");
  }

  void fillers(std::size_t min_count) {
    const std::size_t n = min_count + rng_.below(3 - min_count);
    if (n >= 1) emit(min_count ? "the" : pick(synth::kFiller));
    if (n >= 2) emit(pick({"new", "old", "local"}));
  }

  void subject() {
    const double u = rng_.uniform();
    if (u < 0.5) {
      person();
    } else if (u < 0.85) {
      emit("the");
      emit(pick(synth::kSubjectNoun));
    } else {
      emit("they");
    }
  }

  void clause() {
    subject();
    switch (rng_.below(5)) {
      case 0:
        emit(pick(synth::kMoveVerb));
        emit(pick(synth::kPrep));
        place();
        break;
      case 1:
        emit(pick(synth::kOrgVerb));
        fillers(0);
        emit(pick(synth::kAmbiguous), "B-ORG");
        if (rng_.bernoulli(0.3)) emit(pick(synth::kOrgSuffix), "I-ORG");
        break;
      case 2:
        emit(pick(synth::kMiscVerb));
        fillers(0);
        emit(pick(synth::kAmbiguous), "B-MISC");
        if (rng_.bernoulli(0.3)) emit(pick(synth::kMiscSuffix), "I-MISC");
        break;
      case 3:
        emit(pick(synth::kNeutralVerb));
        fillers(1);
        emit(pick(synth::kAmbiguous));
        break;
      default:
        emit(pick(synth::kMeetVerb));
        person();
        break;
    }
    if (rng_.bernoulli(0.2)) {
      emit("in");
      place();
    }
    if (rng_.bernoulli(0.3)) emit(pick(synth::kTime));
  }

  TaggedSentence sentence() {
    s_ = {};
    clause();
    if (rng_.bernoulli(0.4)) {
      emit(pick(synth::kConj));
      clause();
    }
    emit(".");
    return std::move(s_);
  }

 private:
  Rng& rng_;
  TaggedSentence s_;
};

}  // namespace detail

/// Generates `size` sentences from the synthetic grammar and splits them
/// 80/10/10 into train/dev/test. Bitwise reproducible for a given seed.
inline SplitCorpus synth_ner_corpus(std::uint64_t seed, std::size_t size) {
  if (size < 100) throw ConfigError("synthetic corpus size must be >= 100", "data.synth_size");
  Rng rng(derive_seed(seed, "synth-ner"));
  detail::SynthWriter writer(rng);
  SplitCorpus out;
  const std::size_t n_train = size * 8 / 10;
  const std::size_t n_dev = size / 10;
  for (std::size_t i = 0; i < size; ++i) {
    TaggedSentence s = writer.sentence();
    if (i < n_train) {
      out.train.push_back(std::move(s));
    } else if (i < n_train + n_dev) {
      out.dev.push_back(std::move(s));
    } else {
      out.test.push_back(std::move(s));
    }
  }
  return out;
}

// ---- batching and masking ---------------------------------------------------------

inline std::vector<int> to_ids(const std::vector<std::string>& tokens, const Vocab& vocab) {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const std::string& t : tokens) ids.push_back(vocab.id(t));
  return ids;
}

/// Right-pads sequences with PAD into one [batch x max_len] TokenBatch.
inline TokenBatch make_token_batch(const std::vector<std::vector<int>>& seqs) {
  if (seqs.empty()) throw ContractError("make_token_batch: empty batch");
  TokenBatch b;
  b.batch = seqs.size();
  for (const auto& s : seqs) {
    if (s.empty()) throw ContractError("make_token_batch: empty sequence");
    b.seq = std::max(b.seq, s.size());
  }
  b.ids.assign(b.batch * b.seq, kPadId);
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    std::copy(seqs[r].begin(), seqs[r].end(), b.ids.begin() + r * b.seq);
    b.lengths.push_back(seqs[r].size());
  }
  return b;
}

/// Inputs with mask substitutions; targets hold the original id at selected
/// positions and -1 everywhere else.
struct MaskedBatch {
  TokenBatch input;
  std::vector<int> targets;
  std::vector<std::uint8_t> selected;
  std::size_t masked_count = 0;

  bool empty() const { return masked_count == 0; }
};

/// Selects round(mask_rate * n) of the n non-special positions of each row,
/// uniformly without replacement. Of the selected positions 80% become MASK,
/// 10% a random non-special token, 10% stay unchanged.
inline MaskedBatch mlm_mask(const TokenBatch& batch, std::uint64_t seed, double mask_rate,
                            std::size_t vocab_size) {
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ConfigError("must be in (0, 1)", "mask_rate");
  if (vocab_size <= static_cast<std::size_t>(kNumReserved)) {
    throw ConfigError("vocabulary has no regular tokens", "vocab");
  }
  Rng rng(derive_seed(seed, "mlm-mask"));
  MaskedBatch out;
  out.input = batch;
  out.targets.assign(batch.ids.size(), -1);
  out.selected.assign(batch.ids.size(), 0);
  for (std::size_t r = 0; r < batch.batch; ++r) {
    std::vector<std::size_t> eligible;
    for (std::size_t t = 0; t < batch.lengths[r]; ++t) {
      if (batch.ids[r * batch.seq + t] >= kNumReserved) eligible.push_back(r * batch.seq + t);
    }
    const auto k = static_cast<std::size_t>(
        std::llround(mask_rate * static_cast<double>(eligible.size())));
    for (std::size_t i = 0; i < k; ++i) {
      std::swap(eligible[i], eligible[i + rng.below(eligible.size() - i)]);
    }
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t pos = eligible[i];
      out.targets[pos] = batch.ids[pos];
      out.selected[pos] = 1;
      const double u = rng.uniform();
      if (u < 0.8) {
        out.input.ids[pos] = kMaskId;
      } else if (u < 0.9) {
        out.input.ids[pos] =
            kNumReserved + static_cast<int>(rng.below(vocab_size - kNumReserved));
      }
    }
    out.masked_count += k;
  }
  return out;
}

}  // namespace depthfuse
