// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dialogue and labeled-query datasets, the synthetic world generator, and the
// k-shot sampler.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"

#include "tspmn/dialogue.hpp"
#include "tspmn/error.hpp"
#include "tspmn/random.hpp"
#include "tspmn/terminology.hpp"
#include "tspmn/unicode.hpp"

namespace tspmn {

struct SlotValue {
  std::string slot;
  TermId term_id = 0;
  friend bool operator==(const SlotValue&, const SlotValue&) = default;
  friend auto operator<=>(const SlotValue&, const SlotValue&) = default;
};

struct LabeledQuery {
  std::string query_id;
  std::string query;
  std::vector<SlotValue> gold;  // sorted by term id, no duplicates

  std::set<TermId> gold_ids() const {
    std::set<TermId> ids;
    for (const auto& g : gold) ids.insert(g.term_id);
    return ids;
  }
  bool has_term(TermId t) const {
    return std::any_of(gold.begin(), gold.end(), [t](const SlotValue& g) { return g.term_id == t; });
  }
  friend bool operator==(const LabeledQuery&, const LabeledQuery&) = default;
};

inline void validate(const LabeledQuery& q, const TermDictionary& dict) {
  for (const auto& g : q.gold) {
    if (!dict.contains(g.term_id))
      throw DataError("query " + q.query_id + ": gold term id " + std::to_string(g.term_id) + " not in dictionary");
    if (dict.slot(g.term_id) != g.slot)
      throw DataError("query " + q.query_id + ": slot \"" + g.slot + "\" does not match dictionary slot \"" +
                      dict.slot(g.term_id) + "\" for term " + dict.surface(g.term_id));
  }
}

// ---------------------------------------------------------------------------
// JSONL I/O

namespace detail {

template <typename Fn>
void for_each_jsonl_line(const std::string& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      fn(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline const nlohmann::json& require(const nlohmann::json& obj, const char* field) {
  if (!obj.is_object()) throw DataError("record is not a JSON object");
  auto it = obj.find(field);
  if (it == obj.end()) throw DataError(std::string("missing field \"") + field + "\"");
  return *it;
}

inline std::string require_string(const nlohmann::json& obj, const char* field) {
  const auto& v = require(obj, field);
  if (!v.is_string()) throw DataError(std::string("field \"") + field + "\" must be a string");
  return v.get<std::string>();
}

}  // namespace detail

inline nlohmann::json to_json(const Dialogue& d) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : d.turns) turns.push_back({{"speaker", speaker_tag(t.speaker)}, {"text", t.text}});
  return {{"dialogue_id", d.dialogue_id}, {"turns", std::move(turns)}};
}

inline Dialogue dialogue_from_json(const nlohmann::json& j) {
  Dialogue d;
  d.dialogue_id = detail::require_string(j, "dialogue_id");
  const auto& turns = detail::require(j, "turns");
  if (!turns.is_array()) throw DataError("field \"turns\" must be an array");
  for (std::size_t i = 0; i < turns.size(); ++i) {
    Turn t;
    try {
      t.speaker = parse_speaker(detail::require_string(turns[i], "speaker"));
      t.text = detail::require_string(turns[i], "text");
    } catch (const DataError& e) {
      throw DataError("turns[" + std::to_string(i) + "]: " + e.what());
    }
    d.turns.push_back(std::move(t));
  }
  validate(d);
  return d;
}

inline nlohmann::json to_json(const LabeledQuery& q, const TermDictionary& dict) {
  nlohmann::json labels = nlohmann::json::array();
  for (const auto& g : q.gold) labels.push_back({{"slot", g.slot}, {"value", dict.surface(g.term_id)}});
  return {{"query_id", q.query_id}, {"query", q.query}, {"labels", std::move(labels)}};
}

inline LabeledQuery query_from_json(const nlohmann::json& j, const TermDictionary& dict) {
  LabeledQuery q;
  q.query_id = detail::require_string(j, "query_id");
  if (q.query_id.empty()) throw DataError("empty query_id");
  q.query = detail::require_string(j, "query");
  const auto& labels = detail::require(j, "labels");
  if (!labels.is_array()) throw DataError("field \"labels\" must be an array");
  std::map<TermId, std::string> gold;
  for (const auto& l : labels) {
    const std::string value = detail::require_string(l, "value");
    const auto id = dict.find(value);
    if (!id) throw DataError("query " + q.query_id + ": label value \"" + value + "\" not in dictionary");
    const std::string slot = detail::require_string(l, "slot");
    const auto [it, inserted] = gold.emplace(*id, slot);
    if (!inserted && it->second != slot)
      throw DataError("query " + q.query_id + ": value \"" + value + "\" labeled with two slots");
  }
  for (auto& [id, slot] : gold) q.gold.push_back({std::move(slot), id});
  validate(q, dict);
  return q;
}

inline std::vector<Dialogue> load_dialogues(const std::string& path) {
  std::vector<Dialogue> out;
  std::unordered_set<std::string> ids;
  detail::for_each_jsonl_line(path, [&](const nlohmann::json& j) {
    Dialogue d = dialogue_from_json(j);
    if (!ids.insert(d.dialogue_id).second) throw DataError("duplicate dialogue_id " + d.dialogue_id);
    out.push_back(std::move(d));
  });
  return out;
}

inline std::vector<LabeledQuery> load_queries(const std::string& path, const TermDictionary& dict) {
  std::vector<LabeledQuery> out;
  std::unordered_set<std::string> ids;
  detail::for_each_jsonl_line(path, [&](const nlohmann::json& j) {
    LabeledQuery q = query_from_json(j, dict);
    if (!ids.insert(q.query_id).second) throw DataError("duplicate query_id " + q.query_id);
    out.push_back(std::move(q));
  });
  return out;
}

inline void save_dialogues(std::span<const Dialogue> dialogues, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& d : dialogues) out << to_json(d).dump() << '\n';
}

inline void save_queries(std::span<const LabeledQuery> queries, const TermDictionary& dict, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& q : queries) out << to_json(q, dict).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic world

struct IntRange {
  int lo = 1;
  int hi = 1;
};

struct SynthSpec {
  int term_count = 30;
  IntRange paraphrases_per_term{2, 2};
  int dialogue_count = 2000;
  int query_count = 600;
  IntRange terms_per_query{2, 4};
  int slot_count = 4;
  double dev_fraction = 0.2;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct Paraphrase {
  TermId term_id = 0;
  std::string text;
  friend bool operator==(const Paraphrase&, const Paraphrase&) = default;
};

struct SyntheticWorld {
  TermDictionary dictionary;
  std::vector<Dialogue> dialogues;
  std::vector<LabeledQuery> train;
  std::vector<LabeledQuery> dev;
  std::vector<LabeledQuery> test;
  std::vector<Paraphrase> paraphrases;  // grouped by term id
};

inline void validate(const SynthSpec& s) {
  const auto fail = [](const std::string& m) { throw InvalidArgument("synth spec: " + m); };
  if (s.term_count < 1 || s.dialogue_count < 1 || s.query_count < 1 || s.slot_count < 1) fail("counts must be positive");
  if (s.paraphrases_per_term.lo < 1 || s.paraphrases_per_term.hi < s.paraphrases_per_term.lo)
    fail("paraphrases_per_term must be a range with lo >= 1");
  if (s.terms_per_query.lo < 1 || s.terms_per_query.hi < s.terms_per_query.lo) fail("terms_per_query must be a range with lo >= 1");
  if (s.terms_per_query.hi > s.term_count) fail("terms_per_query exceeds term_count");
  if (s.dev_fraction < 0 || s.test_fraction < 0 || s.dev_fraction + s.test_fraction >= 1.0)
    fail("dev/test fractions must be non-negative and leave a train split");
  if (static_cast<long>(s.term_count) * (1 + s.paraphrases_per_term.hi) * 3 + 64 > 20000)
    fail("term_count too large for the character inventory");
}

namespace detail {

// Every surface, paraphrase and filler word is drawn from a disjoint pool of
// CJK ideographs, one character never reused across words, so no word can
// occur inside another or straddle a word boundary.
inline constexpr char32_t kPoolBase = 0x4E00;
inline constexpr std::size_t kPoolSize = 20000;
inline constexpr std::size_t kFillerChars = 48;

class CharPool {
 public:
  explicit CharPool(Rng& rng) : chars_(kPoolSize) {
    for (std::size_t i = 0; i < kPoolSize; ++i) chars_[i] = kPoolBase + static_cast<char32_t>(i);
    shuffle(std::span<char32_t>(chars_), rng);
  }
  std::string take(std::size_t n) { return utf8_encode(take_raw(n)); }
  std::u32string take_raw(std::size_t n) {
    std::u32string w(chars_.begin() + static_cast<std::ptrdiff_t>(next_), chars_.begin() + static_cast<std::ptrdiff_t>(next_ + n));
    next_ += n;
    return w;
  }

 private:
  std::vector<char32_t> chars_;
  std::size_t next_ = 0;
};

inline std::string render_utterance(Rng& rng, const std::u32string& filler_chars, std::vector<std::string> mentions) {
  shuffle(std::span<std::string>(mentions), rng);
  std::string out;
  const auto filler = [&](int count) {
    for (int i = 0; i < count; ++i) {
      const int len = static_cast<int>(uniform_int(rng, 1, 2));
      for (int c = 0; c < len; ++c) utf8_append(out, filler_chars[uniform_index(rng, filler_chars.size())]);
    }
  };
  filler(static_cast<int>(uniform_int(rng, 1, 2)));
  for (const auto& m : mentions) {
    out += m;
    filler(static_cast<int>(uniform_int(rng, 0, 2)));
  }
  return out;
}

inline std::vector<TermId> sample_distinct_terms(Rng& rng, int term_count, int k) {
  std::vector<TermId> all(static_cast<std::size_t>(term_count));
  for (int i = 0; i < term_count; ++i) all[static_cast<std::size_t>(i)] = i;
  shuffle(std::span<TermId>(all), rng);
  all.resize(static_cast<std::size_t>(k));
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace detail

/// Deterministic in spec.seed. Patient turns mention terms only through
/// paraphrases, doctor turns use the formal surfaces; labeled queries contain
/// paraphrases only and are labeled with the formal terms.
inline SyntheticWorld generate_synthetic_world(const SynthSpec& spec) {
  validate(spec);
  Rng rng(sub_seed(spec.seed, "synth-world"));
  static constexpr std::array<std::string_view, 4> kSlotNames = {"Symptom", "Medicine", "Examination", "Attribute"};

  detail::CharPool pool(rng);
  const std::u32string filler_chars = pool.take_raw(detail::kFillerChars);
  std::vector<std::pair<std::string, std::string>> entries;
  for (int t = 0; t < spec.term_count; ++t) {
    const auto slot_idx = static_cast<std::size_t>(t % spec.slot_count);
    std::string slot = slot_idx < kSlotNames.size() ? std::string(kSlotNames[slot_idx]) : "Slot" + std::to_string(slot_idx);
    entries.emplace_back(pool.take(2), std::move(slot));
  }
  SyntheticWorld world;
  world.dictionary = build_dictionary(entries);

  std::vector<std::vector<std::string>> para_of(static_cast<std::size_t>(spec.term_count));
  for (int t = 0; t < spec.term_count; ++t) {
    const int count = static_cast<int>(uniform_int(rng, spec.paraphrases_per_term.lo, spec.paraphrases_per_term.hi));
    for (int p = 0; p < count; ++p) {
      std::string w = pool.take(static_cast<std::size_t>(uniform_int(rng, 2, 3)));
      para_of[static_cast<std::size_t>(t)].push_back(w);
      world.paraphrases.push_back({t, std::move(w)});
    }
  }
  const auto pick_paraphrase = [&](TermId t) -> const std::string& {
    const auto& options = para_of[static_cast<std::size_t>(t)];
    return options[uniform_index(rng, options.size())];
  };

  const int width = static_cast<int>(std::to_string(std::max(spec.dialogue_count, spec.query_count)).size());
  const auto make_id = [width](const char* prefix, int i) {
    std::string n = std::to_string(i);
    return std::string(prefix) + std::string(static_cast<std::size_t>(width) - n.size(), '0') + n;
  };

  for (int i = 0; i < spec.dialogue_count; ++i) {
    const int k = static_cast<int>(uniform_int(rng, spec.terms_per_query.lo, spec.terms_per_query.hi));
    const auto terms = detail::sample_distinct_terms(rng, spec.term_count, k);
    std::vector<std::string> colloquial, formal;
    for (TermId t : terms) {
      colloquial.push_back(pick_paraphrase(t));
      formal.push_back(world.dictionary.surface(t));
    }
    Dialogue d{make_id("d", i), {}};
    d.turns.push_back({Speaker::Patient, detail::render_utterance(rng, filler_chars, colloquial)});
    d.turns.push_back({Speaker::Doctor, detail::render_utterance(rng, filler_chars, formal)});
    world.dialogues.push_back(std::move(d));
  }

  std::vector<LabeledQuery> queries;
  for (int i = 0; i < spec.query_count; ++i) {
    const int k = static_cast<int>(uniform_int(rng, spec.terms_per_query.lo, spec.terms_per_query.hi));
    const auto terms = detail::sample_distinct_terms(rng, spec.term_count, k);
    std::vector<std::string> mentions;
    LabeledQuery q{make_id("q", i), {}, {}};
    for (TermId t : terms) {
      mentions.push_back(pick_paraphrase(t));
      q.gold.push_back({world.dictionary.slot(t), t});
    }
    q.query = detail::render_utterance(rng, filler_chars, mentions);
    queries.push_back(std::move(q));
  }
  const auto n_test = static_cast<std::size_t>(std::lround(spec.test_fraction * spec.query_count));
  const auto n_dev = static_cast<std::size_t>(std::lround(spec.dev_fraction * spec.query_count));
  const std::size_t n_train = queries.size() - n_test - n_dev;
  world.train.assign(queries.begin(), queries.begin() + static_cast<std::ptrdiff_t>(n_train));
  world.dev.assign(queries.begin() + static_cast<std::ptrdiff_t>(n_train),
                   queries.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
  world.test.assign(queries.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), queries.end());
  return world;
}

inline void save_paraphrases(const SyntheticWorld& world, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& p : world.paraphrases) out << world.dictionary.surface(p.term_id) << '\t' << p.text << '\n';
}

inline std::vector<Paraphrase> load_paraphrases(const std::string& path, const TermDictionary& dict) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<Paraphrase> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError(path + ":" + std::to_string(lineno) + ": expected formal<TAB>paraphrase");
    const auto id = dict.find(line.substr(0, tab));
    if (!id) throw DataError(path + ":" + std::to_string(lineno) + ": unknown formal surface");
    out.push_back({*id, line.substr(tab + 1)});
  }
  return out;
}

/// Writes dictionary.tsv, dialogues.jsonl, {train,dev,test}.jsonl and paraphrases.tsv.
inline void save_world(const SyntheticWorld& world, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_dictionary(world.dictionary, (dir / "dictionary.tsv").string());
  save_dialogues(world.dialogues, (dir / "dialogues.jsonl").string());
  save_queries(world.train, world.dictionary, (dir / "train.jsonl").string());
  save_queries(world.dev, world.dictionary, (dir / "dev.jsonl").string());
  save_queries(world.test, world.dictionary, (dir / "test.jsonl").string());
  save_paraphrases(world, (dir / "paraphrases.tsv").string());
}

inline SyntheticWorld load_world(const std::filesystem::path& dir) {
  SyntheticWorld w;
  w.dictionary = load_dictionary((dir / "dictionary.tsv").string());
  w.dialogues = load_dialogues((dir / "dialogues.jsonl").string());
  w.train = load_queries((dir / "train.jsonl").string(), w.dictionary);
  w.dev = load_queries((dir / "dev.jsonl").string(), w.dictionary);
  w.test = load_queries((dir / "test.jsonl").string(), w.dictionary);
  if (std::filesystem::exists(dir / "paraphrases.tsv"))
    w.paraphrases = load_paraphrases((dir / "paraphrases.tsv").string(), w.dictionary);
  return w;
}

// ---------------------------------------------------------------------------
// Few-shot sampling

/// k-shot subset of `train`: afterwards every term that occurs in some gold
/// set is covered by at least min(k, support) selected queries.
///
/// Selection runs in rounds j = 1..k. In round j each term (ascending id) whose
/// coverage is below min(j, support) takes the next unselected query that
/// contains it, in a seeded ranking of the training set. Running the rounds in
/// this order makes the k-shot subset a prefix of the (k+1)-shot selection.
/// Returned queries keep their original training-set order.
inline std::vector<LabeledQuery> sample_few_shot(std::span<const LabeledQuery> train, int k, std::uint64_t seed) {
  if (k < 1) throw InvalidArgument("few-shot k must be >= 1, got " + std::to_string(k));
  if (train.empty()) throw InvalidArgument("few-shot sampling needs a non-empty training set");

  std::vector<std::size_t> rank(train.size());
  for (std::size_t i = 0; i < rank.size(); ++i) rank[i] = i;
  Rng rng(sub_seed(seed, "few-shot"));
  shuffle(std::span<std::size_t>(rank), rng);

  std::map<TermId, std::vector<std::size_t>> candidates;  // term -> query indices in rank order
  for (std::size_t r : rank)
    for (const auto& g : train[r].gold) candidates[g.term_id].push_back(r);

  std::vector<bool> selected(train.size(), false);
  std::map<TermId, std::size_t> coverage;
  std::map<TermId, std::size_t> cursor;
  const auto select = [&](std::size_t qi) {
    selected[qi] = true;
    for (const auto& g : train[qi].gold) ++coverage[g.term_id];
  };
  for (int round = 1; round <= k; ++round) {
    for (const auto& [term, cands] : candidates) {
      const std::size_t target = std::min<std::size_t>(static_cast<std::size_t>(round), cands.size());
      auto& pos = cursor[term];
      while (coverage[term] < target) {
        while (selected[cands[pos]]) ++pos;
        select(cands[pos]);
      }
    }
  }
  std::vector<LabeledQuery> out;
  for (std::size_t i = 0; i < train.size(); ++i)
    if (selected[i]) out.push_back(train[i]);
  return out;
}

}  // namespace tspmn
