// SPDX-License-Identifier: Apache-2.0
#pragma once

// Model inputs. Every packed example has the layout
//   [CLS] T_1 [EOT] ... T_n [EOT] [SEP] body [SEP]
// where the body is a patient query (fine-tuning) or a dialogue rendered as
// [P] turn [D] turn ... with the sampled positive terms masked (pretraining).

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "tspmn/dialogue.hpp"
#include "tspmn/error.hpp"
#include "tspmn/random.hpp"
#include "tspmn/terminology.hpp"
#include "tspmn/unicode.hpp"
#include "tspmn/vocab.hpp"

namespace tspmn {

struct TermSequence {
  std::vector<TermId> term_ids;
  friend bool operator==(const TermSequence&, const TermSequence&) = default;
};

struct PackedExample {
  std::vector<TokenId> token_ids;
  std::vector<std::int32_t> segment_ids;
  std::vector<std::int32_t> eot_positions;  // aligned with term_ids
  std::vector<TermId> term_ids;
  std::optional<std::vector<bool>> labels;  // true = term present
  std::vector<std::int32_t> mask_positions;
  std::vector<TokenId> mlm_targets;
  std::int32_t attention_length = 0;  // tokens at or beyond this index are padding

  std::size_t size() const { return token_ids.size(); }
};

/// Splits the candidate terms into ceil(|terms| / n) sequences of at most n
/// terms. Without a seed terms are taken in ascending id order; with one the
/// order is a seeded shuffle.
inline std::vector<TermSequence> pack_term_sequences(std::span<const TermId> term_ids, int n,
                                                     std::optional<std::uint64_t> seed = std::nullopt) {
  if (n < 1) throw InvalidArgument("terms per sequence must be >= 1");
  if (term_ids.empty()) throw InvalidArgument("cannot pack an empty term list");
  std::vector<TermId> order(term_ids.begin(), term_ids.end());
  std::sort(order.begin(), order.end());
  if (std::adjacent_find(order.begin(), order.end()) != order.end())
    throw InvalidArgument("term list contains duplicates");
  if (seed) {
    Rng rng(*seed);
    shuffle(std::span<TermId>(order), rng);
  }
  std::vector<TermSequence> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(n)) {
    const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(n));
    out.push_back({std::vector<TermId>(order.begin() + static_cast<std::ptrdiff_t>(i),
                                       order.begin() + static_cast<std::ptrdiff_t>(end))});
  }
  return out;
}

inline std::vector<TermSequence> pack_all_terms(const TermDictionary& dict, int n,
                                                std::optional<std::uint64_t> seed = std::nullopt) {
  std::vector<TermId> ids(dict.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<TermId>(i);
  return pack_term_sequences(ids, n, seed);
}

namespace detail {

// Appends [CLS] T_1 [EOT] ... T_n [EOT] [SEP].
inline void append_term_side(PackedExample& ex, const Vocab& vocab, const TermDictionary& dict,
                             std::span<const TermId> terms) {
  ex.token_ids.push_back(special::kCls);
  for (TermId t : terms) {
    if (!dict.contains(t)) throw InvalidArgument("term id " + std::to_string(t) + " not in dictionary");
    for (char32_t c : dict.surface_chars(t)) ex.token_ids.push_back(vocab.id_of(c));
    ex.eot_positions.push_back(static_cast<std::int32_t>(ex.token_ids.size()));
    ex.token_ids.push_back(special::kEot);
    ex.term_ids.push_back(t);
  }
  ex.token_ids.push_back(special::kSep);
  ex.segment_ids.assign(ex.token_ids.size(), 0);
}

inline std::size_t term_side_length(const TermDictionary& dict, std::span<const TermId> terms) {
  std::size_t len = 2;
  for (TermId t : terms) len += dict.surface_chars(t).size() + 1;
  return len;
}

inline void finish_body(PackedExample& ex, std::span<const TokenId> body) {
  ex.token_ids.insert(ex.token_ids.end(), body.begin(), body.end());
  ex.token_ids.push_back(special::kSep);
  ex.segment_ids.resize(ex.token_ids.size(), 1);
  ex.attention_length = static_cast<std::int32_t>(ex.token_ids.size());
}

}  // namespace detail

/// Term sequence plus patient query; labels[i] says whether term i is in gold.
/// The query is cut from the right when the layout would exceed max_len.
inline PackedExample assemble_msf_example(const Vocab& vocab, const TermDictionary& dict, const TermSequence& seq,
                                          std::string_view query, const std::set<TermId>& gold,
                                          std::size_t max_len) {
  if (seq.term_ids.empty()) throw InvalidArgument("empty term sequence");
  const std::size_t term_len = detail::term_side_length(dict, seq.term_ids);
  if (term_len + 2 > max_len)
    throw InvalidArgument("term sequence of " + std::to_string(term_len) + " tokens leaves no room for the query in max_len " +
                          std::to_string(max_len));
  PackedExample ex;
  detail::append_term_side(ex, vocab, dict, seq.term_ids);
  std::vector<TokenId> body = encode_text(vocab, std::u32string_view(normalize_utf8(query)));
  body.resize(std::min(body.size(), max_len - term_len - 1));
  detail::finish_body(ex, body);
  std::vector<bool> labels;
  for (TermId t : seq.term_ids) labels.push_back(gold.contains(t));
  ex.labels = std::move(labels);
  return ex;
}

struct PretrainOptions {
  int terms_per_sequence = 20;
  double pos_ratio = 0.5;
  std::size_t max_len = 256;
};

/// Dialogue body rendered as [P] turn [D] turn ..., plus each turn's offset
/// into the body token stream.
struct RenderedDialogue {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> turn_offsets;
};

inline RenderedDialogue render_dialogue(const Vocab& vocab, const Dialogue& dialogue) {
  RenderedDialogue r;
  for (const auto& turn : dialogue.turns) {
    r.tokens.push_back(turn.speaker == Speaker::Patient ? special::kPatient : special::kDoctor);
    r.turn_offsets.push_back(r.tokens.size());
    const auto ids = encode_text(vocab, std::u32string_view(normalize_utf8(turn.text)));
    r.tokens.insert(r.tokens.end(), ids.begin(), ids.end());
  }
  return r;
}

/// CTD/MMTM input for one dialogue. Samples max(1, round(n * pos_ratio))
/// positives (fewer if the dialogue has fewer), fills the rest with negatives
/// absent from the dialogue, and replaces every occurrence of each sampled
/// positive inside the dialogue with [MASK]. Occurrences that do not fit
/// entirely inside the truncated body are left out of the mask set.
inline PackedExample assemble_pretrain_example(const Vocab& vocab, const DialogueTermsPair& pair, const Dialogue& dialogue,
                                               const TermDictionary& dict, const PretrainOptions& opt,
                                               std::uint64_t seed) {
  if (pair.positive_matches.empty()) throw InvalidArgument("dialogue " + pair.dialogue_id + " has no positive terms");
  if (opt.terms_per_sequence < 1) throw InvalidArgument("terms per sequence must be >= 1");
  if (!(opt.pos_ratio > 0.0 && opt.pos_ratio < 1.0)) throw InvalidArgument("pos_ratio must be in (0, 1)");
  if (pair.dialogue_id != dialogue.dialogue_id) throw InvalidArgument("pair/dialogue id mismatch");

  Rng rng(seed);
  const auto n = static_cast<std::size_t>(opt.terms_per_sequence);
  const auto want = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(n) * opt.pos_ratio)));

  std::vector<std::size_t> pos_idx(pair.positive_matches.size());
  for (std::size_t i = 0; i < pos_idx.size(); ++i) pos_idx[i] = i;
  shuffle(std::span<std::size_t>(pos_idx), rng);
  pos_idx.resize(std::min({want, pos_idx.size(), n}));

  std::set<TermId> in_dialogue;
  for (const auto& m : pair.positive_matches) in_dialogue.insert(m.term_id);
  std::vector<TermId> negatives;
  for (const auto& e : dict.entries())
    if (!in_dialogue.contains(e.id)) negatives.push_back(e.id);
  shuffle(std::span<TermId>(negatives), rng);
  negatives.resize(std::min(negatives.size(), n - pos_idx.size()));

  struct Slot {
    TermId term;
    bool positive;
  };
  std::vector<Slot> slots;
  for (std::size_t i : pos_idx) slots.push_back({pair.positive_matches[i].term_id, true});
  for (TermId t : negatives) slots.push_back({t, false});
  shuffle(std::span<Slot>(slots), rng);

  std::vector<TermId> terms;
  std::vector<bool> labels;
  for (const auto& s : slots) {
    terms.push_back(s.term);
    labels.push_back(s.positive);
  }
  const std::size_t term_len = detail::term_side_length(dict, terms);
  if (term_len + 2 > opt.max_len)
    throw InvalidArgument("pretraining term sequence of " + std::to_string(term_len) + " tokens exceeds max_len " +
                          std::to_string(opt.max_len));

  PackedExample ex;
  detail::append_term_side(ex, vocab, dict, terms);
  ex.labels = std::move(labels);
  const std::size_t body_start = ex.token_ids.size();

  RenderedDialogue body = render_dialogue(vocab, dialogue);
  const std::size_t budget = opt.max_len - term_len - 1;
  if (body.tokens.size() > budget) body.tokens.resize(budget);

  std::vector<bool> masked(body.tokens.size(), false);
  for (std::size_t i : pos_idx) {
    for (const TurnSpan& s : pair.positive_matches[i].spans) {
      const std::size_t begin = body.turn_offsets.at(s.turn) + s.start;
      const std::size_t end = body.turn_offsets.at(s.turn) + s.end;
      if (end > body.tokens.size()) continue;
      for (std::size_t p = begin; p < end; ++p) masked[p] = true;
    }
  }
  for (std::size_t p = 0; p < masked.size(); ++p) {
    if (!masked[p]) continue;
    ex.mask_positions.push_back(static_cast<std::int32_t>(body_start + p));
    ex.mlm_targets.push_back(body.tokens[p]);
    body.tokens[p] = special::kMask;
  }
  detail::finish_body(ex, body.tokens);
  return ex;
}

/// Appends PAD tokens up to `length`; attention_length is unchanged.
inline void pad_to(PackedExample& ex, std::size_t length) {
  if (ex.token_ids.size() >= length) return;
  ex.token_ids.resize(length, special::kPad);
  ex.segment_ids.resize(length, 1);
}

inline nlohmann::json to_json(const PackedExample& ex) {
  nlohmann::json j{{"token_ids", ex.token_ids},         {"segment_ids", ex.segment_ids},
                   {"eot_positions", ex.eot_positions}, {"term_ids", ex.term_ids},
                   {"mask_positions", ex.mask_positions}, {"mlm_targets", ex.mlm_targets},
                   {"attention_length", ex.attention_length}};
  if (ex.labels) {
    std::vector<int> labels(ex.labels->begin(), ex.labels->end());
    j["labels"] = labels;
  } else {
    j["labels"] = nullptr;
  }
  return j;
}

}  // namespace tspmn
