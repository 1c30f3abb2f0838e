// SPDX-License-Identifier: Apache-2.0
#pragma once

// Per-query aggregation of sequence decisions and the five headline metrics.

#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "tspmn/error.hpp"
#include "tspmn/terminology.hpp"

namespace tspmn {

struct SequenceDecision {
  std::vector<TermId> term_ids;
  std::vector<std::size_t> selected;  // indices into term_ids
};

/// Union of the selected terms over all sequences of one query.
inline std::set<TermId> aggregate_predictions(std::span<const SequenceDecision> sequences) {
  std::set<TermId> seen, out;
  for (const auto& seq : sequences) {
    for (TermId t : seq.term_ids)
      if (!seen.insert(t).second) throw InvalidArgument("term " + std::to_string(t) + " appears in more than one sequence");
    for (std::size_t i : seq.selected) {
      if (i >= seq.term_ids.size()) throw InvalidArgument("selected index out of range");
      out.insert(seq.term_ids[i]);
    }
  }
  return out;
}

struct TermCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double f1 = 0;
};

struct Metrics {
  double precision = 0;
  double recall = 0;
  double micro_f1 = 0;
  double macro_f1 = 0;
  double accuracy = 0;
  std::size_t tp = 0, fp = 0, fn = 0;
  std::size_t queries = 0;
  std::map<TermId, TermCounts> per_term;
};

using QuerySets = std::map<std::string, std::set<TermId>>;

/// Micro P/R/F1 over pooled (query, term) decisions; macro-F1 over terms with
/// any gold or predicted occurrence; accuracy = exact set match per query.
/// When a ratio's denominator is zero it is 1 if the opposing error count is
/// also zero and 0 otherwise, so all-empty inputs score 1.0 everywhere.
inline Metrics compute_metrics(const QuerySets& preds, const QuerySets& golds, std::span<const TermId> universe) {
  if (preds.size() != golds.size()) throw InvalidArgument("prediction and gold query sets differ in size");
  const std::set<TermId> uni(universe.begin(), universe.end());
  Metrics m;
  for (TermId t : uni) m.per_term[t] = {};
  std::size_t exact = 0;
  for (const auto& [qid, gold] : golds) {
    auto it = preds.find(qid);
    if (it == preds.end()) throw InvalidArgument("no prediction for query " + qid);
    const auto& pred = it->second;
    for (TermId t : pred)
      if (!uni.contains(t)) throw InvalidArgument("predicted term " + std::to_string(t) + " outside the universe");
    for (TermId t : gold)
      if (!uni.contains(t)) throw InvalidArgument("gold term " + std::to_string(t) + " outside the universe");
    for (TermId t : pred) {
      if (gold.contains(t)) ++m.per_term[t].tp;
      else ++m.per_term[t].fp;
    }
    for (TermId t : gold)
      if (!pred.contains(t)) ++m.per_term[t].fn;
    if (pred == gold) ++exact;
  }
  m.queries = golds.size();
  double macro_sum = 0;
  std::size_t macro_n = 0;
  for (auto& [t, c] : m.per_term) {
    m.tp += c.tp;
    m.fp += c.fp;
    m.fn += c.fn;
    if (c.tp + c.fp + c.fn == 0) continue;
    c.f1 = 2.0 * static_cast<double>(c.tp) / static_cast<double>(2 * c.tp + c.fp + c.fn);
    macro_sum += c.f1;
    ++macro_n;
  }
  const auto ratio = [](std::size_t num, std::size_t den, std::size_t other) {
    if (den == 0) return other == 0 ? 1.0 : 0.0;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.precision = ratio(m.tp, m.tp + m.fp, m.fn);
  m.recall = ratio(m.tp, m.tp + m.fn, m.fp);
  m.micro_f1 = (m.precision + m.recall) > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  m.macro_f1 = macro_n == 0 ? 1.0 : macro_sum / static_cast<double>(macro_n);
  m.accuracy = m.queries == 0 ? 1.0 : static_cast<double>(exact) / static_cast<double>(m.queries);
  return m;
}

inline nlohmann::json to_json(const Metrics& m, const TermDictionary* dict = nullptr) {
  nlohmann::json terms = nlohmann::json::array();
  for (const auto& [t, c] : m.per_term) {
    nlohmann::json row{{"term_id", t}, {"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"f1", c.f1}};
    if (dict && dict->contains(t)) row["surface"] = dict->surface(t);
    terms.push_back(std::move(row));
  }
  return {{"precision", m.precision}, {"recall", m.recall}, {"micro_f1", m.micro_f1}, {"macro_f1", m.macro_f1},
          {"accuracy", m.accuracy},   {"queries", m.queries}, {"per_term", std::move(terms)}};
}

inline void write_metrics_tsv(const Metrics& m, const std::string& path, const TermDictionary* dict = nullptr) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << "term_id\tsurface\ttp\tfp\tfn\tf1\n";
  for (const auto& [t, c] : m.per_term)
    out << t << '\t' << (dict && dict->contains(t) ? dict->surface(t) : "") << '\t' << c.tp << '\t' << c.fp << '\t' << c.fn
        << '\t' << c.f1 << '\n';
}

}  // namespace tspmn
