// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "tspmn/corpus.hpp"
#include "tspmn/packing.hpp"

using namespace tspmn;

namespace {

std::vector<TermId> iota_ids(int n) {
  std::vector<TermId> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

void check_structure(const PackedExample& ex, std::size_t max_len) {
  REQUIRE(ex.token_ids.size() == ex.segment_ids.size());
  CHECK(ex.token_ids.size() <= max_len);
  CHECK(ex.token_ids.front() == special::kCls);
  CHECK(ex.token_ids.back() == special::kSep);
  CHECK(ex.eot_positions.size() == ex.term_ids.size());
  if (ex.labels) CHECK(ex.labels->size() == ex.term_ids.size());
  CHECK(ex.mask_positions.size() == ex.mlm_targets.size());
  const auto first_sep = std::find(ex.token_ids.begin(), ex.token_ids.end(), special::kSep) - ex.token_ids.begin();
  for (std::size_t i = 0; i < ex.segment_ids.size(); ++i)
    CHECK(ex.segment_ids[i] == (static_cast<std::ptrdiff_t>(i) <= first_sep ? 0 : 1));
  // Oracle: rescan for [EOT].
  std::vector<std::int32_t> rescanned;
  for (std::size_t i = 0; i < ex.token_ids.size(); ++i)
    if (ex.token_ids[i] == special::kEot) rescanned.push_back(static_cast<std::int32_t>(i));
  CHECK(rescanned == ex.eot_positions);
  for (auto p : ex.mask_positions) CHECK(ex.token_ids[static_cast<std::size_t>(p)] == special::kMask);
}

}  // namespace

TEST_CASE("term sequences split into ceil(|T|/n) pieces", "[packing]") {
  const auto ids = iota_ids(29);
  const auto seqs = pack_term_sequences(ids, 15);
  REQUIRE(seqs.size() == 2);
  CHECK(seqs[0].term_ids.size() == 15);
  CHECK(seqs[1].term_ids.size() == 14);
  CHECK(seqs[0].term_ids.front() == 0);

  const std::vector<TermId> one{7};
  const auto single = pack_term_sequences(one, 20);
  REQUIRE(single.size() == 1);
  CHECK(single[0].term_ids == one);

  CHECK_THROWS_AS(pack_term_sequences(std::vector<TermId>{}, 3), InvalidArgument);
  CHECK_THROWS_AS(pack_term_sequences(ids, 0), InvalidArgument);
  CHECK_THROWS_AS(pack_term_sequences(std::vector<TermId>{1, 1}, 3), InvalidArgument);
}

TEST_CASE("packing partitions the input set", "[packing][property]") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const int count = 1 + static_cast<int>(rng() % 60);
    const int n = 1 + static_cast<int>(rng() % 25);
    auto ids = iota_ids(count);
    std::shuffle(ids.begin(), ids.end(), rng);
    const std::uint64_t seed_value = rng();
    const bool seeded = trial % 2 == 1;
    const auto seqs = seeded ? pack_term_sequences(ids, n, seed_value) : pack_term_sequences(ids, n);
    CHECK(seqs.size() == static_cast<std::size_t>((count + n - 1) / n));
    std::vector<TermId> all;
    for (const auto& s : seqs) {
      CHECK(!s.term_ids.empty());
      CHECK(s.term_ids.size() <= static_cast<std::size_t>(n));
      all.insert(all.end(), s.term_ids.begin(), s.term_ids.end());
    }
    std::sort(all.begin(), all.end());
    CHECK(all == iota_ids(count));
    if (seeded) CHECK(pack_term_sequences(ids, n, seed_value) == seqs);
  }
}

TEST_CASE("fine-tuning labels follow the gold set", "[packing]") {
  const TermDictionary dict = build_dictionary(
      {{"腹痛", "Symptom"}, {"稀便", "Symptom"}, {"腹胀", "Symptom"}, {"头孢克肟", "Medicine"}, {"发烧", "Symptom"}});
  const std::string query = "我这几天肚子感觉难受，肚脐眼上面的位置疼痛，一天大便两次，肚子胀，不成型，目前在吃头孢克肟，这是怎么回事呢？";
  const Vocab vocab = build_vocab(dict, std::vector<std::string>{query});
  const auto seq = pack_all_terms(dict, 15).front();
  const PackedExample ex = assemble_msf_example(vocab, dict, seq, query, {0, 1, 2, 3}, 256);
  REQUIRE(ex.labels);
  CHECK(*ex.labels == std::vector<bool>{true, true, true, true, false});
  CHECK(ex.mask_positions.empty());
  check_structure(ex, 256);
  CHECK(ex.size() == 2 + (2 + 1) * 4 + (4 + 1) + utf8_length(query) + 1);

  const PackedExample none = assemble_msf_example(vocab, dict, seq, query, {}, 256);
  CHECK(*none.labels == std::vector<bool>(5, false));
}

TEST_CASE("long queries are truncated from the right and terms are kept", "[packing]") {
  const TermDictionary dict = build_dictionary({{"ab", "S"}, {"cd", "S"}});
  const Vocab vocab = build_vocab(dict, std::vector<std::string>{"xyz"});
  const auto seq = pack_all_terms(dict, 2).front();
  const PackedExample ex = assemble_msf_example(vocab, dict, seq, "xyzxyzxyz", {}, 12);
  CHECK(ex.size() == 12);
  CHECK(ex.eot_positions == std::vector<std::int32_t>{3, 6});
  CHECK(ex.token_ids[8] == vocab.id_of(U'x'));
  check_structure(ex, 12);
  CHECK_THROWS_AS(assemble_msf_example(vocab, dict, seq, "x", {}, 8), InvalidArgument);
}

TEST_CASE("permuting the term sequence permutes labels and anchors", "[packing][property]") {
  const SyntheticWorld w = generate_synthetic_world(SynthSpec{.term_count = 12, .dialogue_count = 2, .query_count = 20, .seed = 4});
  std::vector<std::string> texts;
  for (const auto& q : w.train) texts.push_back(q.query);
  const Vocab vocab = build_vocab(w.dictionary, texts);
  std::mt19937_64 rng(2);
  for (const auto& q : w.train) {
    auto ids = iota_ids(12);
    std::shuffle(ids.begin(), ids.end(), rng);
    const PackedExample a = assemble_msf_example(vocab, w.dictionary, {ids}, q.query, q.gold_ids(), 256);
    std::vector<std::size_t> perm(ids.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<TermId> permuted;
    for (auto i : perm) permuted.push_back(ids[i]);
    const PackedExample b = assemble_msf_example(vocab, w.dictionary, {permuted}, q.query, q.gold_ids(), 256);
    check_structure(b, 256);
    for (std::size_t j = 0; j < perm.size(); ++j) {
      CHECK((*b.labels)[j] == (*a.labels)[perm[j]]);
      CHECK(b.term_ids[j] == a.term_ids[perm[j]]);
    }
  }
}

TEST_CASE("pretraining masks every occurrence of a sampled positive", "[packing]") {
  const TermDictionary dict = build_dictionary({{"Cefixime", "Medicine"}, {"fever", "Symptom"}});
  const Dialogue d{"d1", {{Speaker::Patient, "my belly hurts"}, {Speaker::Doctor, "take Cefixime"}}};
  const Vocab vocab = build_vocab(dict, std::vector<std::string>{d.turns[0].text, d.turns[1].text});
  const auto pair = make_dialogue_terms_pair(dict, d);
  const PackedExample ex = assemble_pretrain_example(vocab, pair, d, dict, PretrainOptions{2, 0.5, 256}, 1);
  REQUIRE(ex.term_ids.size() == 2);
  CHECK(ex.mask_positions.size() == 8);
  CHECK(decode_tokens(vocab, ex.mlm_targets) == "cefixime");
  check_structure(ex, 256);
  CHECK(oracle::audit_pretrain_example(vocab, dict, d, ex, 256).empty());

  // round(n * ratio) == 0 still forces one positive.
  const PackedExample forced = assemble_pretrain_example(vocab, pair, d, dict, PretrainOptions{2, 0.1, 256}, 1);
  CHECK(std::count(forced.labels->begin(), forced.labels->end(), true) == 1);

  const DialogueTermsPair empty{"d1", {}};
  CHECK_THROWS_AS(assemble_pretrain_example(vocab, empty, d, dict, PretrainOptions{}, 1), InvalidArgument);
  CHECK_THROWS_AS(assemble_pretrain_example(vocab, pair, d, dict, PretrainOptions{0, 0.5, 256}, 1), InvalidArgument);
}

TEST_CASE("overlapping positives merge into one masked run", "[packing]") {
  const TermDictionary dict = build_dictionary({{"abc", "S"}, {"bcd", "S"}, {"zz", "S"}});
  const Dialogue d{"d1", {{Speaker::Patient, "xabcdx"}}};
  const Vocab vocab = build_vocab(dict, std::vector<std::string>{"xabcdx"});
  const auto pair = make_dialogue_terms_pair(dict, d);
  const PackedExample ex = assemble_pretrain_example(vocab, pair, d, dict, PretrainOptions{3, 0.7, 256}, 9);
  CHECK(std::count(ex.labels->begin(), ex.labels->end(), true) == 2);
  CHECK(ex.mask_positions.size() == 4);
  CHECK(decode_tokens(vocab, ex.mlm_targets) == "abcd");
  CHECK(oracle::audit_pretrain_example(vocab, dict, d, ex, 256).empty());
}

TEST_CASE("masking audit on random dialogues", "[packing][property]") {
  std::mt19937_64 rng(17);
  const std::u32string alphabet = U"abcd";
  std::size_t checked = 0;
  while (checked < 300) {
    std::vector<std::pair<std::string, std::string>> entries;
    std::set<std::u32string> seen;
    const int terms = 2 + static_cast<int>(rng() % 6);
    while (static_cast<int>(entries.size()) < terms) {
      std::u32string s(1 + rng() % 3, U'a');
      for (auto& c : s) c = alphabet[rng() % alphabet.size()];
      if (seen.insert(s).second) entries.emplace_back(utf8_encode(s), "S");
    }
    const TermDictionary dict = build_dictionary(entries);
    Dialogue d{"r" + std::to_string(checked), {}};
    for (int t = 0; t < 1 + static_cast<int>(rng() % 3); ++t) {
      std::u32string text(rng() % 25, U'a');
      for (auto& c : text) c = (alphabet + U"xy")[rng() % 6];
      d.turns.push_back({t % 2 ? Speaker::Doctor : Speaker::Patient, utf8_encode(text) + "x"});
    }
    const auto pair = make_dialogue_terms_pair(dict, d);
    if (pair.positive_matches.empty() || pair.positive_matches.size() == dict.size()) continue;
    const Vocab vocab = build_vocab(dict, std::vector<std::string>{"abcdxy"});
    const int n = 1 + static_cast<int>(rng() % 6);
    const double ratio = 0.1 + 0.8 * static_cast<double>(rng() % 100) / 100.0;
    std::size_t max_len = 2 + 4 * static_cast<std::size_t>(n) + 1 + rng() % 40;
    const PretrainOptions opt{n, ratio, max_len};
    PackedExample ex;
    try {
      ex = assemble_pretrain_example(vocab, pair, d, dict, opt, rng());
    } catch (const InvalidArgument&) {
      continue;  // term side alone too long for this max_len
    }
    check_structure(ex, max_len);
    const auto violations = oracle::audit_pretrain_example(vocab, dict, d, ex, max_len);
    INFO((violations.empty() ? std::string() : violations.front()));
    CHECK(violations.empty());
    ++checked;
  }
}

TEST_CASE("pretraining examples are reproducible from the seed", "[packing]") {
  const SyntheticWorld w = generate_synthetic_world(SynthSpec{.dialogue_count = 20, .query_count = 5, .seed = 8});
  std::vector<std::string> texts;
  for (const auto& d : w.dialogues)
    for (const auto& t : d.turns) texts.push_back(t.text);
  const Vocab vocab = build_vocab(w.dictionary, texts);
  const auto pairs = make_dialogue_terms_pairs(w.dictionary, w.dialogues);
  for (std::size_t i = 0; i < w.dialogues.size(); ++i) {
    const auto a = assemble_pretrain_example(vocab, pairs[i], w.dialogues[i], w.dictionary, PretrainOptions{}, 100 + i);
    const auto b = assemble_pretrain_example(vocab, pairs[i], w.dialogues[i], w.dictionary, PretrainOptions{}, 100 + i);
    CHECK(to_json(a) == to_json(b));
    check_structure(a, 256);
    CHECK(oracle::audit_pretrain_example(vocab, w.dictionary, w.dialogues[i], a, 256).empty());
    // Negatives never occur in the dialogue.
    std::set<TermId> present;
    for (const auto& m : pairs[i].positive_matches) present.insert(m.term_id);
    for (std::size_t j = 0; j < a.term_ids.size(); ++j) CHECK((*a.labels)[j] == present.contains(a.term_ids[j]));
  }
}

TEST_CASE("padding leaves the attention length unchanged", "[packing]") {
  const TermDictionary dict = build_dictionary({{"ab", "S"}});
  const Vocab vocab = build_vocab(dict, {});
  PackedExample ex = assemble_msf_example(vocab, dict, {{0}}, "ab", {0}, 32);
  const auto len = ex.attention_length;
  pad_to(ex, 20);
  CHECK(ex.size() == 20);
  CHECK(ex.attention_length == len);
  CHECK(ex.token_ids.back() == special::kPad);
}
