// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tspmn/training.hpp"

using namespace tspmn;
namespace fs = std::filesystem;

namespace {

struct Small {
  SyntheticWorld world;
  Vocab vocab;
  std::vector<DialogueTermsPair> pairs;
  ModelConfig config;

  Small() : world(generate_synthetic_world(SynthSpec{.term_count = 8, .dialogue_count = 24, .query_count = 30, .seed = 4})) {
    std::vector<std::string> texts;
    for (const auto& d : world.dialogues)
      for (const auto& t : d.turns) texts.push_back(t.text);
    for (const auto* split : {&world.train, &world.dev, &world.test})
      for (const auto& q : *split) texts.push_back(q.query);
    vocab = build_vocab(world.dictionary, texts);
    pairs = make_dialogue_terms_pairs(world.dictionary, world.dialogues);
    config.layers = 1;
    config.hidden = 32;
    config.ffn = 64;
    config.max_len = 128;
  }

  Checkpoint fresh(std::uint64_t seed = 1) const { return fresh_checkpoint(config, vocab, world.dictionary, seed); }

  TrainConfig pre_cfg(unsigned workers = 1) const {
    TrainConfig c = pretrain_defaults();
    c.lr = 1e-3;
    c.epochs = 2;
    c.batch_size = 8;
    c.terms_per_sequence = 4;
    c.max_len = 128;
    c.seed = 17;
    c.workers = workers;
    return c;
  }

  TrainConfig fine_cfg(unsigned workers = 1) const {
    TrainConfig c = finetune_defaults();
    c.lr = 1e-3;
    c.epochs = 2;
    c.batch_size = 8;
    c.terms_per_sequence = 4;
    c.max_len = 128;
    c.seed = 23;
    c.workers = workers;
    return c;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tspmn_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("every logged pretraining step combines the two losses exactly", "[training]") {
  const Small s;
  const auto r = run_pretraining(s.world.dictionary, s.vocab, s.world.dialogues, s.pairs, s.fresh(), s.pre_cfg());
  REQUIRE(r.steps.size() == 6);  // 24 dialogues, batch 8, 2 epochs
  for (const auto& step : r.steps) {
    CHECK(step.l_pretrain == 0.9 * step.l_ctd + (1.0 - 0.9) * step.l_mmtm);
    CHECK(step.l_ctd > 0);
    CHECK(step.l_mmtm > 0);
  }
  REQUIRE(r.epochs.size() == 2);
  CHECK(r.epochs[0].steps == 3);
  CHECK(r.checkpoint.phase == "pretrain");
  CHECK(r.checkpoint.step == 6);
  CHECK(r.checkpoint.optimizer.has_value());
}

TEST_CASE("lambda = 1 reduces the pretraining loss to CTD", "[training]") {
  const Small s;
  TrainConfig c = s.pre_cfg();
  c.lambda = 1.0;
  c.epochs = 1;
  const auto r = run_pretraining(s.world.dictionary, s.vocab, s.world.dialogues, s.pairs, s.fresh(), c);
  for (const auto& step : r.steps) CHECK(step.l_pretrain == step.l_ctd);
}

TEST_CASE("pretraining and fine-tuning are reproducible across worker counts", "[training]") {
  const Small s;
  std::vector<std::string> digests, logs;
  for (unsigned workers : {1u, 4u, 1u}) {
    const fs::path dir = temp_dir("det" + std::to_string(digests.size()));
    const auto pre = run_pretraining(s.world.dictionary, s.vocab, s.world.dialogues, s.pairs, s.fresh(), s.pre_cfg(workers),
                                     RunOutput{dir});
    const auto fine = run_finetuning(s.world.dictionary, s.vocab, s.world.train, s.world.dev, pre.checkpoint,
                                     s.fine_cfg(workers), RunOutput{dir});
    digests.push_back(slurp(dir / "pretrain.ckpt") + slurp(dir / "finetune.ckpt"));
    logs.push_back(slurp(dir / "pretrain_steps.jsonl") + slurp(dir / "pretrain_metrics.jsonl") +
                   slurp(dir / "finetune_metrics.jsonl"));
    CHECK(fs::exists(dir / "pretrain-epoch1.ckpt"));
    CHECK(fs::exists(dir / "pretrain-epoch2.ckpt"));
    fs::remove_all(dir);
  }
  CHECK(digests[0] == digests[1]);
  CHECK(digests[0] == digests[2]);
  CHECK(logs[0] == logs[1]);
  CHECK(logs[0] == logs[2]);
  CHECK_FALSE(logs[0].empty());
}

TEST_CASE("a different seed changes the trained weights", "[training]") {
  const Small s;
  TrainConfig a = s.fine_cfg();
  TrainConfig b = a;
  b.seed = a.seed + 1;
  const auto ra = run_finetuning(s.world.dictionary, s.vocab, s.world.train, s.world.dev, s.fresh(), a);
  const auto rb = run_finetuning(s.world.dictionary, s.vocab, s.world.train, s.world.dev, s.fresh(), b);
  CHECK(checkpoint_digest(ra.best) != checkpoint_digest(rb.best));
}

TEST_CASE("term order during fine-tuning is fixed unless shuffling is requested", "[training]") {
  const Small s;
  TrainConfig fixed = s.fine_cfg();
  fixed.epochs = 1;
  TrainConfig shuffled = fixed;
  shuffled.shuffle_terms = true;
  const auto run = [&](const TrainConfig& c) {
    return checkpoint_digest(run_finetuning(s.world.dictionary, s.vocab, s.world.train, {}, s.fresh(), c).best);
  };
  CHECK_FALSE(fixed.shuffle_terms);
  CHECK(run(fixed) == run(fixed));
  CHECK(run(shuffled) == run(shuffled));
  CHECK(run(fixed) != run(shuffled));
}

TEST_CASE("fine-tuning lowers the training loss", "[training]") {
  Small s;
  s.config.dropout = 0;
  TrainConfig c = s.fine_cfg();
  c.epochs = 20;
  c.batch_size = 2;
  const std::vector<LabeledQuery> four(s.world.train.begin(), s.world.train.begin() + 4);
  const auto r = run_finetuning(s.world.dictionary, s.vocab, four, s.world.dev, s.fresh(), c);
  REQUIRE(r.epochs.size() == 20);
  // A fresh model first has to find the label prior; the loss must move below
  // both its first epoch and the uninformed ln 2.
  CHECK(r.epochs.back().l_msf < r.epochs.front().l_msf);
  CHECK(r.epochs.back().l_msf < std::log(2.0));
  CHECK(r.best_epoch >= 1);
  CHECK(r.best.phase == "finetune");
  double best = -1;
  for (const auto& e : r.epochs) best = std::max(best, e.dev.micro_f1);
  CHECK(r.epochs[static_cast<std::size_t>(r.best_epoch - 1)].dev.micro_f1 == best);
}

TEST_CASE("an epoch hook can stop fine-tuning early", "[training]") {
  const Small s;
  TrainConfig c = s.fine_cfg();
  c.epochs = 10;
  const auto r = run_finetuning(s.world.dictionary, s.vocab, s.world.train, {}, s.fresh(), c, {},
                                [](int epoch, const ModelParams<float>&) { return epoch < 3; });
  CHECK(r.epochs.size() == 3);
}

TEST_CASE("mismatched vocabularies are refused before training", "[training]") {
  const Small s;
  Vocab other = s.vocab;
  other.add(U'~');
  const Checkpoint ck = fresh_checkpoint(s.config, other, s.world.dictionary, 1);
  CHECK_THROWS_AS(run_finetuning(s.world.dictionary, s.vocab, s.world.train, s.world.dev, ck, s.fine_cfg()), DataError);
  CHECK_THROWS_AS(run_pretraining(s.world.dictionary, s.vocab, s.world.dialogues, s.pairs, ck, s.pre_cfg()), DataError);

  const TermDictionary dict2 = build_dictionary({{"x", "s"}});
  const Checkpoint ck2 = fresh_checkpoint(s.config, s.vocab, dict2, 1);
  CHECK_THROWS_AS(run_finetuning(s.world.dictionary, s.vocab, s.world.train, s.world.dev, ck2, s.fine_cfg()), DataError);
}

TEST_CASE("invalid configurations and empty inputs are rejected", "[training]") {
  const Small s;
  TrainConfig c = s.fine_cfg();
  c.lr = 0;
  CHECK_THROWS_AS(run_finetuning(s.world.dictionary, s.vocab, s.world.train, s.world.dev, s.fresh(), c), InvalidArgument);
  c = s.fine_cfg();
  c.lambda = 1.5;
  CHECK_THROWS_AS(validate(c), InvalidArgument);
  CHECK_THROWS_AS(run_finetuning(s.world.dictionary, s.vocab, {}, s.world.dev, s.fresh(), s.fine_cfg()), DataError);

  std::vector<DialogueTermsPair> empty_pairs = s.pairs;
  for (auto& p : empty_pairs) p.positive_matches.clear();
  CHECK_THROWS_AS(run_pretraining(s.world.dictionary, s.vocab, s.world.dialogues, empty_pairs, s.fresh(), s.pre_cfg()),
                  DataError);
}

TEST_CASE("evaluation covers every query and matches the metrics module", "[training]") {
  const Small s;
  const Checkpoint ck = s.fresh();
  const auto ev = evaluate(ck.params, s.world.dictionary, s.vocab, s.world.test, 3, 128);
  CHECK(ev.predictions.size() == s.world.test.size());
  CHECK(ev.golds.size() == s.world.test.size());
  std::vector<TermId> universe;
  for (std::size_t i = 0; i < s.world.dictionary.size(); ++i) universe.push_back(static_cast<TermId>(i));
  const Metrics m = compute_metrics(ev.predictions, ev.golds, universe);
  CHECK(m.micro_f1 == ev.metrics.micro_f1);
  const auto ev4 = evaluate(ck.params, s.world.dictionary, s.vocab, s.world.test, 3, 128, 4);
  CHECK(ev4.predictions == ev.predictions);
}
