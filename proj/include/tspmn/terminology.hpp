// SPDX-License-Identifier: Apache-2.0
#pragma once

// Term dictionary and multi-pattern retrieval of dictionary terms in text.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tspmn/dialogue.hpp"
#include "tspmn/error.hpp"
#include "tspmn/unicode.hpp"

namespace tspmn {

using TermId = std::int32_t;

struct TermEntry {
  TermId id = 0;
  std::string surface;  // normalized, UTF-8
  std::string slot;
};

/// Half-open span of code point offsets.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;
  friend bool operator==(const Span&, const Span&) = default;
  friend auto operator<=>(const Span&, const Span&) = default;
};

struct TermMatch {
  TermId term_id = 0;
  std::vector<Span> spans;  // ascending by start
  friend bool operator==(const TermMatch&, const TermMatch&) = default;
};

/// Aho-Corasick automaton over code points. Immutable once built.
class TermAutomaton {
 public:
  TermAutomaton() { nodes_.emplace_back(); }

  explicit TermAutomaton(std::span<const std::u32string> patterns) : TermAutomaton() {
    for (std::size_t p = 0; p < patterns.size(); ++p) insert(patterns[p], static_cast<TermId>(p));
    link();
  }

  /// Calls on_match(pattern_id, span) for every occurrence, including overlaps,
  /// in order of increasing end offset.
  template <typename Fn>
  void scan(std::u32string_view text, Fn&& on_match) const {
    std::int32_t state = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
      state = step(state, text[i]);
      for (std::int32_t s = nodes_[state].pattern >= 0 ? state : nodes_[state].output; s > 0;
           s = nodes_[s].output) {
        const auto& node = nodes_[s];
        on_match(node.pattern, Span{i + 1 - node.depth, i + 1});
      }
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<std::pair<char32_t, std::int32_t>> next;  // sorted by char
    std::int32_t fail = 0;
    std::int32_t output = 0;  // nearest proper suffix node carrying a pattern; 0 = none
    TermId pattern = -1;
    std::size_t depth = 0;
  };

  static std::int32_t child(const Node& n, char32_t c) {
    auto it = std::lower_bound(n.next.begin(), n.next.end(), c,
                               [](const auto& e, char32_t v) { return e.first < v; });
    return (it != n.next.end() && it->first == c) ? it->second : -1;
  }

  void insert(const std::u32string& pattern, TermId id) {
    std::int32_t s = 0;
    for (char32_t c : pattern) {
      std::int32_t nxt = child(nodes_[s], c);
      if (nxt < 0) {
        nxt = static_cast<std::int32_t>(nodes_.size());
        Node n;
        n.depth = nodes_[s].depth + 1;
        nodes_.push_back(std::move(n));
        auto& edges = nodes_[s].next;
        edges.insert(std::lower_bound(edges.begin(), edges.end(), c,
                                      [](const auto& e, char32_t v) { return e.first < v; }),
                     {c, nxt});
      }
      s = nxt;
    }
    nodes_[s].pattern = id;
  }

  void link() {
    std::deque<std::int32_t> queue;
    for (const auto& [c, s] : nodes_[0].next) {
      nodes_[s].fail = 0;
      queue.push_back(s);
    }
    while (!queue.empty()) {
      const std::int32_t u = queue.front();
      queue.pop_front();
      for (const auto& [c, v] : nodes_[u].next) {
        std::int32_t f = nodes_[u].fail;
        while (f > 0 && child(nodes_[f], c) < 0) f = nodes_[f].fail;
        const std::int32_t g = child(nodes_[f], c);
        nodes_[v].fail = (g >= 0 && g != v) ? g : 0;
        const std::int32_t fv = nodes_[v].fail;
        nodes_[v].output = nodes_[fv].pattern >= 0 ? fv : nodes_[fv].output;
        queue.push_back(v);
      }
    }
  }

  std::int32_t step(std::int32_t s, char32_t c) const {
    for (;;) {
      const std::int32_t nxt = child(nodes_[s], c);
      if (nxt >= 0) return nxt;
      if (s == 0) return 0;
      s = nodes_[s].fail;
    }
  }

  std::vector<Node> nodes_;
};

/// The terminology: contiguous ids 0..N-1, unique normalized surfaces, one slot
/// per term, and the retrieval automaton built once over all surfaces.
class TermDictionary {
 public:
  TermDictionary() = default;

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<TermEntry>& entries() const { return entries_; }
  const TermEntry& entry(TermId id) const { return entries_.at(static_cast<std::size_t>(id)); }
  const std::string& surface(TermId id) const { return entry(id).surface; }
  const std::u32string& surface_chars(TermId id) const { return chars_.at(static_cast<std::size_t>(id)); }
  const std::string& slot(TermId id) const { return entry(id).slot; }
  const std::set<std::string>& slots() const { return slots_; }
  bool contains(TermId id) const { return id >= 0 && static_cast<std::size_t>(id) < entries_.size(); }

  std::optional<TermId> find(std::string_view surface) const {
    auto it = index_.find(utf8_encode(normalize_utf8(surface)));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const TermAutomaton& automaton() const { return *automaton_; }

  friend TermDictionary build_dictionary(std::span<const std::pair<std::string, std::string>> entries);

 private:
  std::vector<TermEntry> entries_;
  std::vector<std::u32string> chars_;
  std::unordered_map<std::string, TermId> index_;
  std::set<std::string> slots_;
  std::shared_ptr<const TermAutomaton> automaton_ = std::make_shared<TermAutomaton>();
};

/// Normalizes and deduplicates (surface, slot) pairs; ids follow first occurrence.
inline TermDictionary build_dictionary(std::span<const std::pair<std::string, std::string>> entries) {
  if (entries.empty()) throw DataError("dictionary has no entries");
  TermDictionary dict;
  for (const auto& [raw_surface, slot] : entries) {
    std::u32string chars = normalize_utf8(raw_surface);
    if (chars.empty()) throw DataError("dictionary entry with empty surface");
    if (slot.empty()) throw DataError("dictionary entry \"" + raw_surface + "\" has empty slot");
    std::string surface = utf8_encode(chars);
    if (auto it = dict.index_.find(surface); it != dict.index_.end()) {
      const std::string& existing = dict.entries_[static_cast<std::size_t>(it->second)].slot;
      if (existing != slot)
        throw DataError("conflicting slot for surface \"" + surface + "\": " + existing + " vs " + slot);
      continue;
    }
    const auto id = static_cast<TermId>(dict.entries_.size());
    dict.index_.emplace(surface, id);
    dict.entries_.push_back({id, std::move(surface), slot});
    dict.chars_.push_back(std::move(chars));
    dict.slots_.insert(slot);
  }
  dict.automaton_ = std::make_shared<const TermAutomaton>(dict.chars_);
  return dict;
}

inline TermDictionary build_dictionary(const std::vector<std::pair<std::string, std::string>>& entries) {
  return build_dictionary(std::span<const std::pair<std::string, std::string>>(entries));
}

/// Parses `surface<TAB>slot` lines; `#` comments and blank lines are skipped.
inline std::vector<std::pair<std::string, std::string>> parse_dictionary_tsv(std::istream& in) {
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos)
      throw DataError("dictionary line " + std::to_string(lineno) + ": expected surface<TAB>slot");
    out.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return out;
}

inline TermDictionary load_dictionary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dictionary file: " + path);
  return build_dictionary(parse_dictionary_tsv(in));
}

inline void save_dictionary(const TermDictionary& dict, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dictionary file: " + path);
  for (const auto& e : dict.entries()) out << e.surface << '\t' << e.slot << '\n';
}

/// Every dictionary term occurring in the normalized text, with all spans,
/// ordered by term id.
inline std::vector<TermMatch> retrieve_terms(const TermDictionary& dict, std::u32string_view text) {
  const std::u32string norm = normalize(text);
  std::map<TermId, std::vector<Span>> hits;
  dict.automaton().scan(norm, [&](TermId id, Span s) { hits[id].push_back(s); });
  std::vector<TermMatch> out;
  out.reserve(hits.size());
  for (auto& [id, spans] : hits) {
    std::sort(spans.begin(), spans.end());
    out.push_back({id, std::move(spans)});
  }
  return out;
}

inline std::vector<TermMatch> retrieve_terms(const TermDictionary& dict, std::string_view utf8_text) {
  return retrieve_terms(dict, std::u32string_view(utf8_decode(utf8_text)));
}

struct TurnSpan {
  std::size_t turn = 0;
  std::size_t start = 0;
  std::size_t end = 0;
  friend bool operator==(const TurnSpan&, const TurnSpan&) = default;
  friend auto operator<=>(const TurnSpan&, const TurnSpan&) = default;
};

struct DialogueTermMatch {
  TermId term_id = 0;
  std::vector<TurnSpan> spans;
  friend bool operator==(const DialogueTermMatch&, const DialogueTermMatch&) = default;
};

struct DialogueTermsPair {
  std::string dialogue_id;
  std::vector<DialogueTermMatch> positive_matches;  // ascending term id, one entry per term
  friend bool operator==(const DialogueTermsPair&, const DialogueTermsPair&) = default;

  std::vector<TermId> positive_ids() const {
    std::vector<TermId> ids;
    ids.reserve(positive_matches.size());
    for (const auto& m : positive_matches) ids.push_back(m.term_id);
    return ids;
  }
};

inline DialogueTermsPair make_dialogue_terms_pair(const TermDictionary& dict, const Dialogue& dialogue) {
  validate(dialogue);
  std::map<TermId, std::vector<TurnSpan>> merged;
  for (std::size_t t = 0; t < dialogue.turns.size(); ++t) {
    for (auto& m : retrieve_terms(dict, std::string_view(dialogue.turns[t].text))) {
      auto& spans = merged[m.term_id];
      for (const Span& s : m.spans) spans.push_back({t, s.start, s.end});
    }
  }
  DialogueTermsPair pair{dialogue.dialogue_id, {}};
  for (auto& [id, spans] : merged) pair.positive_matches.push_back({id, std::move(spans)});
  return pair;
}

/// One pair per dialogue, in input order. Work is split across `workers`
/// threads; each output slot is written by exactly one worker.
inline std::vector<DialogueTermsPair> make_dialogue_terms_pairs(const TermDictionary& dict,
                                                                std::span<const Dialogue> dialogues,
                                                                unsigned workers = 1) {
  std::vector<DialogueTermsPair> out(dialogues.size());
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(1, dialogues.size()))));
  if (workers == 1) {
    for (std::size_t i = 0; i < dialogues.size(); ++i) out[i] = make_dialogue_terms_pair(dict, dialogues[i]);
    return out;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < dialogues.size(); i += workers) out[i] = make_dialogue_terms_pair(dict, dialogues[i]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace tspmn
