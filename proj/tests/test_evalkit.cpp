// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "tspmn/evalkit.hpp"

using namespace tspmn;

namespace {

std::vector<TermId> universe(int n) {
  std::vector<TermId> u(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) u[static_cast<std::size_t>(i)] = i;
  return u;
}

}  // namespace

TEST_CASE("hand case: micro and macro F1 are 2/3, accuracy 0", "[evalkit]") {
  constexpr TermId A = 0, B = 1, C = 2;
  const QuerySets golds{{"q1", {A, B}}, {"q2", {C}}};
  const QuerySets preds{{"q1", {A}}, {"q2", {B, C}}};
  const Metrics m = compute_metrics(preds, golds, universe(3));
  CHECK(m.tp == 2);
  CHECK(m.fp == 1);
  CHECK(m.fn == 1);
  CHECK(m.precision == Catch::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(m.recall == Catch::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(m.micro_f1 == Catch::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(m.macro_f1 == Catch::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(m.accuracy == 0.0);
  CHECK(m.per_term.at(A).f1 == 1.0);
  CHECK(m.per_term.at(B).f1 == 0.0);
  CHECK(m.per_term.at(C).f1 == 1.0);
}

TEST_CASE("perfect predictions score 1 everywhere", "[evalkit]") {
  const QuerySets golds{{"q1", {0, 3}}, {"q2", {1}}, {"q3", {}}};
  const Metrics m = compute_metrics(golds, golds, universe(5));
  CHECK(m.precision == 1.0);
  CHECK(m.recall == 1.0);
  CHECK(m.micro_f1 == 1.0);
  CHECK(m.macro_f1 == 1.0);
  CHECK(m.accuracy == 1.0);
}

TEST_CASE("all-empty predictions and golds follow the zero-support convention", "[evalkit]") {
  const QuerySets empty{{"q1", {}}, {"q2", {}}};
  const Metrics m = compute_metrics(empty, empty, universe(4));
  CHECK(m.accuracy == 1.0);
  CHECK(m.precision == 1.0);
  CHECK(m.recall == 1.0);
  CHECK(m.micro_f1 == 1.0);
  CHECK(m.macro_f1 == 1.0);

  // Nothing predicted but something missed: precision has no support and an error, so 0.
  const Metrics miss = compute_metrics(empty, QuerySets{{"q1", {1}}, {"q2", {}}}, universe(4));
  CHECK(miss.precision == 0.0);
  CHECK(miss.recall == 0.0);
  CHECK(miss.micro_f1 == 0.0);
}

TEST_CASE("metrics errors", "[evalkit]") {
  CHECK_THROWS_AS(compute_metrics(QuerySets{{"q1", {}}}, QuerySets{{"q2", {}}}, universe(2)), InvalidArgument);
  CHECK_THROWS_AS(compute_metrics(QuerySets{{"q1", {}}}, QuerySets{}, universe(2)), InvalidArgument);
  CHECK_THROWS_AS(compute_metrics(QuerySets{{"q1", {7}}}, QuerySets{{"q1", {}}}, universe(2)), InvalidArgument);
}

TEST_CASE("metrics equal the brute-force oracle on random cases", "[evalkit][property]") {
  std::mt19937_64 rng(2024);
  QuerySets preds, golds;
  for (int trial = 0; trial < 1000; ++trial) {
    const int terms = 1 + static_cast<int>(rng() % 8);
    oracle::random_metrics_case(rng, terms, preds, golds);
    const Metrics m = compute_metrics(preds, golds, universe(terms));
    const auto b = oracle::brute_force_metrics(preds, golds, universe(terms));
    CHECK(m.precision == b.precision);
    CHECK(m.recall == b.recall);
    CHECK(m.micro_f1 == b.micro_f1);
    CHECK(m.macro_f1 == b.macro_f1);
    CHECK(m.accuracy == b.accuracy);
    for (double v : {m.precision, m.recall, m.micro_f1, m.macro_f1, m.accuracy}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("aggregation is the union of per-sequence selections", "[evalkit]") {
  const std::vector<SequenceDecision> seqs{{{0, 1}, {0}}, {{2}, {}}};
  CHECK(aggregate_predictions(seqs) == std::set<TermId>{0});
  const std::vector<SequenceDecision> none{{{0, 1}, {}}, {{2}, {}}};
  CHECK(aggregate_predictions(none).empty());
  const std::vector<SequenceDecision> dup{{{0, 1}, {}}, {{1}, {}}};
  CHECK_THROWS_AS(aggregate_predictions(dup), InvalidArgument);

  // Label-level oracle: any partition of the same decisions gives the same union.
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 30);
    std::vector<bool> chosen(static_cast<std::size_t>(n));
    std::set<TermId> expected;
    for (int t = 0; t < n; ++t)
      if ((chosen[static_cast<std::size_t>(t)] = rng() % 3 == 0)) expected.insert(t);
    std::vector<SequenceDecision> parts;
    for (int t = 0; t < n;) {
      const int len = 1 + static_cast<int>(rng() % 7);
      SequenceDecision d;
      for (int k = 0; k < len && t < n; ++k, ++t) {
        if (chosen[static_cast<std::size_t>(t)]) d.selected.push_back(d.term_ids.size());
        d.term_ids.push_back(t);
      }
      parts.push_back(std::move(d));
    }
    CHECK(aggregate_predictions(parts) == expected);
  }
}

TEST_CASE("metrics report serializes headline numbers and per-term rows", "[evalkit]") {
  const QuerySets golds{{"q1", {0, 1}}, {"q2", {2}}};
  const QuerySets preds{{"q1", {0}}, {"q2", {1, 2}}};
  const Metrics m = compute_metrics(preds, golds, universe(3));
  const auto j = to_json(m);
  CHECK(j.at("micro_f1").get<double>() == m.micro_f1);
  CHECK(j.at("accuracy").get<double>() == 0.0);
  CHECK(j.at("per_term").size() == 3);
  const auto path = std::filesystem::temp_directory_path() / "tspmn_test_metrics.tsv";
  write_metrics_tsv(m, path.string());
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header.find("term") != std::string::npos);
}
