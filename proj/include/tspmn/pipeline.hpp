// SPDX-License-Identifier: Apache-2.0
#pragma once

// End-to-end helpers shared by the command-line tool and the acceptance suite.

#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "tspmn/corpus.hpp"
#include "tspmn/gradcheck.hpp"
#include "tspmn/training.hpp"

namespace tspmn {

/// Every turn of every dialogue followed by every query text.
inline std::vector<std::string> corpus_texts(std::span<const Dialogue> dialogues,
                                             std::initializer_list<std::span<const LabeledQuery>> query_sets = {}) {
  std::vector<std::string> texts;
  for (const auto& d : dialogues)
    for (const auto& t : d.turns) texts.push_back(t.text);
  for (const auto& set : query_sets)
    for (const auto& q : set) texts.push_back(q.query);
  return texts;
}

inline Vocab world_vocab(const SyntheticWorld& w) {
  return build_vocab(w.dictionary, corpus_texts(w.dialogues, {w.train, w.dev, w.test}));
}

inline nlohmann::json to_json(const TermMatch& m, const TermDictionary& dict) {
  nlohmann::json spans = nlohmann::json::array();
  for (const Span& s : m.spans) spans.push_back({s.start, s.end});
  return {{"term_id", m.term_id}, {"surface", dict.entry(m.term_id).surface}, {"spans", spans}};
}

inline nlohmann::json to_json(const DialogueTermsPair& p, const TermDictionary& dict) {
  nlohmann::json matches = nlohmann::json::array();
  for (const auto& m : p.positive_matches) {
    nlohmann::json spans = nlohmann::json::array();
    for (const auto& s : m.spans) spans.push_back({{"turn", s.turn}, {"start", s.start}, {"end", s.end}});
    matches.push_back({{"term_id", m.term_id}, {"surface", dict.entry(m.term_id).surface}, {"spans", spans}});
  }
  return {{"dialogue_id", p.dialogue_id}, {"positive_matches", matches}};
}

inline void write_predictions(const Evaluation& ev, const TermDictionary& dict, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& [qid, pred] : ev.predictions) {
    nlohmann::json p = nlohmann::json::array(), g = nlohmann::json::array();
    for (TermId t : pred) p.push_back(dict.entry(t).surface);
    for (TermId t : ev.golds.at(qid)) g.push_back(dict.entry(t).surface);
    out << nlohmann::json{{"query_id", qid}, {"predicted", p}, {"gold", g}}.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Gradient check on a small generated world

struct GradCheckCase {
  std::string objective;
  GradCheckResult result;
};

struct GradCheckSuite {
  ModelConfig config;
  std::vector<GradCheckCase> cases;
  double max_rel_error() const {
    double m = 0;
    for (const auto& c : cases) m = std::max(m, c.result.max_rel_error);
    return m;
  }
};

/// MSF, CTD, MMTM and the combined pretraining loss, each checked at
/// `samples` random parameters of a fresh f64 model with `config`'s
/// architecture (vocabulary size is taken from the generated world).
inline GradCheckSuite run_gradcheck_suite(ModelConfig config, std::uint64_t seed, std::size_t samples = 200,
                                          double step = 1e-5, double lambda = 0.9) {
  SynthSpec spec;
  spec.term_count = 8;
  spec.dialogue_count = 8;
  spec.query_count = 8;
  spec.seed = sub_seed(seed, "gradcheck-world");
  const SyntheticWorld world = generate_synthetic_world(spec);
  const Vocab vocab = world_vocab(world);
  config.vocab_size = static_cast<int>(vocab.size());
  config.precision = Precision::CheckF64;
  validate(config);

  const auto pairs = make_dialogue_terms_pairs(world.dictionary, world.dialogues);
  const auto seq = pack_all_terms(world.dictionary, 4).front();
  const LabeledQuery& q = world.train.front();
  const PackedExample msf =
      assemble_msf_example(vocab, world.dictionary, seq, q.query, q.gold_ids(), static_cast<std::size_t>(config.max_len));
  std::size_t di = 0;
  while (di < pairs.size() && pairs[di].positive_matches.empty()) ++di;
  if (di == pairs.size()) throw DataError("gradient check world has no dialogue with terms");
  const PackedExample pre = assemble_pretrain_example(vocab, pairs[di], world.dialogues[di], world.dictionary,
                                                      PretrainOptions{4, 0.5, static_cast<std::size_t>(config.max_len)},
                                                      sub_seed(seed, "gradcheck-mask"));

  const ModelParams<double> params = init_params<double>(config, sub_seed(seed, "gradcheck-init"));
  GradCheckSuite suite{config, {}};
  const std::pair<const char*, Objective> objectives[] = {
      {"msf", Objective::Msf}, {"ctd", Objective::Ctd}, {"mmtm", Objective::Mmtm}, {"pretrain", Objective::Pretrain}};
  for (const auto& [name, objective] : objectives) {
    const PackedExample& ex = objective == Objective::Msf ? msf : pre;
    suite.cases.push_back({name, grad_check(params, ex, objective, lambda, step, samples, sub_seed(seed, name))});
  }
  return suite;
}

}  // namespace tspmn
