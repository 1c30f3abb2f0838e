// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pretraining (term discrimination + masked-term modeling) and fine-tuning
// (term/query matching) loops, plus batch evaluation.
//
// Reproducibility: every random choice is drawn from a sub-seed of
// TrainConfig::seed keyed by (purpose, epoch, index). Per-example gradients
// are computed into separate buffers and summed in ascending example order, so
// results do not depend on the worker count.

#include <algorithm>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "tspmn/checkpoint.hpp"
#include "tspmn/corpus.hpp"
#include "tspmn/evalkit.hpp"
#include "tspmn/model.hpp"
#include "tspmn/optim.hpp"
#include "tspmn/packing.hpp"
#include "tspmn/terminology.hpp"
#include "tspmn/vocab.hpp"

namespace tspmn {

enum class Phase { Pretrain, Finetune };

struct TrainConfig {
  Phase phase = Phase::Finetune;
  double lr = 1e-5;
  int batch_size = 16;
  int epochs = 5;
  double lambda = 0.9;
  int terms_per_sequence = 15;
  double pos_ratio = 0.5;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  int max_len = 256;
  double clip_norm = 1.0;
  unsigned workers = 1;
  bool shuffle_terms = false;  // fine-tuning: re-shuffle term order per epoch instead of the ascending ids used in evaluation
};

inline TrainConfig pretrain_defaults() {
  TrainConfig c;
  c.phase = Phase::Pretrain;
  c.lr = 3e-5;
  c.epochs = 5;
  c.terms_per_sequence = 20;
  return c;
}

inline TrainConfig finetune_defaults() {
  TrainConfig c;
  c.phase = Phase::Finetune;
  c.lr = 1e-5;
  c.epochs = 5;
  c.terms_per_sequence = 15;
  return c;
}

inline void validate(const TrainConfig& c) {
  if (!(c.lr > 0)) throw InvalidArgument("learning rate must be positive");
  if (c.batch_size < 1 || c.epochs < 1) throw InvalidArgument("batch size and epochs must be positive");
  if (!(c.lambda >= 0 && c.lambda <= 1)) throw InvalidArgument("lambda must be in [0, 1]");
  if (c.terms_per_sequence < 1) throw InvalidArgument("terms per sequence must be >= 1");
  if (!(c.pos_ratio > 0 && c.pos_ratio < 1)) throw InvalidArgument("pos_ratio must be in (0, 1)");
  if (c.weight_decay < 0 || c.clip_norm < 0) throw InvalidArgument("weight decay and clip norm must be non-negative");
  if (c.max_len < 4) throw InvalidArgument("max_len too small");
}

inline std::string dictionary_digest(const TermDictionary& dict) {
  std::string s;
  for (const auto& e : dict.entries()) s += e.surface + '\t' + e.slot + '\n';
  std::ostringstream os;
  os << std::hex << fnv1a(s);
  return os.str();
}

/// Flushes subnormal floats to zero on the current thread while in scope.
/// Tiny Adam moments and softmax tails otherwise slow training several-fold.
class DenormalGuard {
 public:
#if defined(__SSE__)
  DenormalGuard() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040u); }  // FTZ | DAZ
  ~DenormalGuard() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#endif
};

/// Runs fn(i) for i in [0, n) on up to `workers` threads (strided assignment).
template <typename Fn>
void parallel_for(std::size_t n, unsigned workers, Fn&& fn) {
  workers = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, workers), std::max<std::size_t>(1, n)));
  if (workers == 1) {
    const DenormalGuard ftz;
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      const DenormalGuard ftz;
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct BatchResult {
  double match_loss = 0;  // mean over examples
  double mmtm_loss = 0;   // mean over examples that have masks; 0 if none
  std::size_t mmtm_examples = 0;
  double grad_norm = 0;
};

/// Forward/backward over a batch, deterministic reduction, clipping and one
/// AdamW step. Per example, the match loss is weighted `match_weight / B` and
/// the MMTM loss `mmtm_weight / B_masked`.
inline BatchResult train_batch(ModelParams<float>& params, OptState<float>& opt, std::span<const PackedExample> batch,
                               double match_weight, double mmtm_weight, const TrainConfig& cfg, double dropout,
                               std::int64_t step) {
  const DenormalGuard ftz;
  const std::size_t B = batch.size();
  std::size_t masked = 0;
  for (const auto& ex : batch) masked += ex.mask_positions.empty() ? 0 : 1;
  const LossWeights w{match_weight / static_cast<double>(B),
                      masked == 0 ? 0.0 : mmtm_weight / static_cast<double>(masked)};

  std::vector<ModelParams<float>> grads(B);
  std::vector<ExampleLoss<float>> losses(B);
  parallel_for(B, cfg.workers, [&](std::size_t i) {
    grads[i] = zeros_like(params);
    const EncodeOptions enc{true, dropout, sub_seed(cfg.seed, "dropout", static_cast<std::uint64_t>(step), i)};
    losses[i] = example_loss(params, batch[i], w, enc, &grads[i]);
  });

  BatchResult r;
  ModelParams<float>& total = grads[0];
  for (std::size_t i = 1; i < B; ++i)
    visit_model_tensors([](const std::string&, auto& acc, const auto& g) { acc += g; }, total, grads[i]);
  for (std::size_t i = 0; i < B; ++i) {
    r.match_loss += static_cast<double>(losses[i].match);
    if (losses[i].has_mmtm) r.mmtm_loss += static_cast<double>(losses[i].mmtm);
  }
  r.match_loss /= static_cast<double>(B);
  r.mmtm_examples = masked;
  if (masked > 0) r.mmtm_loss /= static_cast<double>(masked);
  r.grad_norm = clip_grad_norm(total, cfg.clip_norm);
  adamw_step(params, total, opt, AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  return r;
}

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainStepLog {
  std::int64_t step = 0;
  int epoch = 0;
  double l_ctd = 0;
  double l_mmtm = 0;
  double l_pretrain = 0;
};

struct PretrainEpochLog {
  int epoch = 0;
  std::size_t steps = 0;
  double l_ctd = 0;
  double l_mmtm = 0;
  double l_pretrain = 0;
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<PretrainEpochLog> epochs;
  std::vector<PretrainStepLog> steps;
};

inline nlohmann::json to_json(const PretrainStepLog& s) {
  return {{"step", s.step}, {"epoch", s.epoch}, {"l_ctd", s.l_ctd}, {"l_mmtm", s.l_mmtm}, {"l_pretrain", s.l_pretrain}};
}

inline nlohmann::json to_json(const PretrainEpochLog& e) {
  return {{"epoch", e.epoch}, {"steps", e.steps}, {"l_ctd", e.l_ctd}, {"l_mmtm", e.l_mmtm}, {"l_pretrain", e.l_pretrain}};
}

struct RunOutput {
  std::optional<std::filesystem::path> dir;  // checkpoints and logs go here when set
};

/// Fresh checkpoint (phase "init") for a vocabulary and dictionary.
inline Checkpoint fresh_checkpoint(const ModelConfig& config, const Vocab& vocab, const TermDictionary& dict,
                                   std::uint64_t seed) {
  Checkpoint ck;
  ck.config = config;
  ck.config.vocab_size = static_cast<int>(vocab.size());
  ck.vocab_digest = vocab.digest();
  ck.dictionary_digest = dictionary_digest(dict);
  ck.phase = "init";
  ck.seed = seed;
  ck.params = init_params<float>(ck.config, seed);
  return ck;
}

inline void check_compatible(const Checkpoint& ck, const Vocab& vocab, const TermDictionary& dict) {
  if (ck.vocab_digest != vocab.digest())
    throw DataError("checkpoint vocabulary digest " + ck.vocab_digest + " does not match vocabulary " + vocab.digest());
  if (ck.dictionary_digest != dictionary_digest(dict))
    throw DataError("checkpoint dictionary digest " + ck.dictionary_digest + " does not match dictionary " +
                    dictionary_digest(dict));
  if (ck.config.vocab_size != static_cast<int>(vocab.size())) throw DataError("checkpoint vocab size mismatch");
}

namespace detail {

inline void append_jsonl(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump() << '\n';
}

inline void reset_file(const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream(path, std::ios::binary | std::ios::trunc);
}

}  // namespace detail

/// Per step: assemble a batch of masked examples, minimise
/// lambda * L_CTD + (1 - lambda) * L_MMTM, clip, AdamW. Term sequences and
/// masks are re-drawn per (epoch, dialogue) from the seed.
inline PretrainResult run_pretraining(const TermDictionary& dict, const Vocab& vocab, std::span<const Dialogue> dialogues,
                                      std::span<const DialogueTermsPair> pairs, Checkpoint init, const TrainConfig& cfg,
                                      const RunOutput& output = {}) {
  validate(cfg);
  check_compatible(init, vocab, dict);
  if (pairs.size() != dialogues.size()) throw InvalidArgument("pairs and dialogues differ in length");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (!pairs[i].positive_matches.empty()) eligible.push_back(i);
  if (eligible.empty()) throw DataError("no dialogue contains a dictionary term; nothing to pretrain on");
  if (init.config.max_len < cfg.max_len) throw InvalidArgument("max_len exceeds model position table");

  PretrainResult result;
  Checkpoint& ck = result.checkpoint;
  ck = std::move(init);
  ck.phase = "pretrain";
  ck.seed = cfg.seed;
  ModelParams<float>& params = ck.params;
  OptState<float> opt = init_opt_state(params);
  const PretrainOptions popt{cfg.terms_per_sequence, cfg.pos_ratio, static_cast<std::size_t>(cfg.max_len)};
  if (output.dir) {
    detail::reset_file(*output.dir / "pretrain_steps.jsonl");
    detail::reset_file(*output.dir / "pretrain_metrics.jsonl");
  }

  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = eligible;
    Rng rng(sub_seed(cfg.seed, "pretrain-order", static_cast<std::uint64_t>(epoch)));
    shuffle(std::span<std::size_t>(order), rng);
    PretrainEpochLog elog{epoch, 0, 0, 0, 0};
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      std::vector<PackedExample> batch(e - b);
      parallel_for(batch.size(), cfg.workers, [&](std::size_t i) {
        const std::size_t di = order[b + i];
        batch[i] = assemble_pretrain_example(vocab, pairs[di], dialogues[di], dict, popt,
                                             sub_seed(cfg.seed, "pretrain-mask", static_cast<std::uint64_t>(epoch), di));
      });
      ++step;
      const BatchResult r = train_batch(params, opt, batch, cfg.lambda, 1.0 - cfg.lambda, cfg, ck.config.dropout, step);
      PretrainStepLog slog{step, epoch, r.match_loss, r.mmtm_loss, pretrain_loss(r.match_loss, r.mmtm_loss, cfg.lambda)};
      if (!std::isfinite(slog.l_pretrain)) throw NumericalError("non-finite pretraining loss at step " + std::to_string(step));
      elog.l_ctd += slog.l_ctd;
      elog.l_mmtm += slog.l_mmtm;
      elog.l_pretrain += slog.l_pretrain;
      ++elog.steps;
      if (output.dir) detail::append_jsonl(*output.dir / "pretrain_steps.jsonl", to_json(slog));
      result.steps.push_back(slog);
    }
    const auto n = static_cast<double>(elog.steps);
    elog.l_ctd /= n;
    elog.l_mmtm /= n;
    elog.l_pretrain /= n;
    result.epochs.push_back(elog);
    ck.step = step;
    ck.epoch = epoch;
    ck.optimizer = opt;
    if (output.dir) {
      detail::append_jsonl(*output.dir / "pretrain_metrics.jsonl", to_json(elog));
      save_checkpoint(ck, *output.dir / ("pretrain-epoch" + std::to_string(epoch) + ".ckpt"));
    }
  }
  if (output.dir) save_checkpoint(ck, *output.dir / "pretrain.ckpt");
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  QuerySets predictions;
  QuerySets golds;
  Metrics metrics;
};

/// Predicts every query against the full dictionary (ascending-id term
/// sequences of n terms) and scores the union of selected terms.
template <typename S>
Evaluation evaluate(const ModelParams<S>& params, const TermDictionary& dict, const Vocab& vocab,
                    std::span<const LabeledQuery> queries, int terms_per_sequence, int max_len, unsigned workers = 1) {
  const auto seqs = pack_all_terms(dict, terms_per_sequence);
  std::vector<std::set<TermId>> preds(queries.size());
  parallel_for(queries.size(), workers, [&](std::size_t qi) {
    std::vector<SequenceDecision> decisions;
    for (const auto& seq : seqs) {
      const PackedExample ex = assemble_msf_example(vocab, dict, seq, queries[qi].query, {}, static_cast<std::size_t>(max_len));
      decisions.push_back({seq.term_ids, decide(predict(params, ex))});
    }
    preds[qi] = aggregate_predictions(decisions);
  });
  Evaluation ev;
  for (std::size_t qi = 0; qi < queries.size(); ++qi) {
    ev.predictions[queries[qi].query_id] = preds[qi];
    ev.golds[queries[qi].query_id] = queries[qi].gold_ids();
  }
  std::vector<TermId> universe(dict.size());
  for (std::size_t i = 0; i < universe.size(); ++i) universe[i] = static_cast<TermId>(i);
  ev.metrics = compute_metrics(ev.predictions, ev.golds, universe);
  return ev;
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct FinetuneEpochLog {
  int epoch = 0;
  std::size_t steps = 0;
  double l_msf = 0;
  Metrics dev;
};

inline nlohmann::json to_json(const FinetuneEpochLog& e) {
  return {{"epoch", e.epoch},
          {"steps", e.steps},
          {"l_msf", e.l_msf},
          {"dev", {{"precision", e.dev.precision},
                   {"recall", e.dev.recall},
                   {"micro_f1", e.dev.micro_f1},
                   {"macro_f1", e.dev.macro_f1},
                   {"accuracy", e.dev.accuracy}}}};
}

struct FinetuneResult {
  Checkpoint best;  // best dev micro-F1 (earliest on ties)
  int best_epoch = 0;
  std::vector<FinetuneEpochLog> epochs;
};

/// Called after every epoch with the current parameters; returning false ends
/// training early.
using EpochHook = std::function<bool(int epoch, const ModelParams<float>&)>;

/// Every query expands to ceil(|T| / n) packed examples over the full
/// dictionary (ascending term ids unless cfg.shuffle_terms); trains on the averaged MSF
/// loss and keeps the parameters with the best dev micro-F1.
inline FinetuneResult run_finetuning(const TermDictionary& dict, const Vocab& vocab, std::span<const LabeledQuery> train,
                                     std::span<const LabeledQuery> dev, Checkpoint init, const TrainConfig& cfg,
                                     const RunOutput& output = {}, const EpochHook& hook = {}) {
  validate(cfg);
  check_compatible(init, vocab, dict);
  if (train.empty()) throw DataError("fine-tuning needs at least one training query");
  for (const auto& q : train) validate(q, dict);
  for (const auto& q : dev) validate(q, dict);
  if (init.config.max_len < cfg.max_len) throw InvalidArgument("max_len exceeds model position table");

  FinetuneResult result;
  Checkpoint ck = std::move(init);
  ck.phase = "finetune";
  ck.seed = cfg.seed;
  ck.optimizer.reset();
  OptState<float> opt = init_opt_state(ck.params);
  const std::span<const LabeledQuery> selection = dev.empty() ? train : dev;
  double best_f1 = -1;
  if (output.dir) detail::reset_file(*output.dir / "finetune_metrics.jsonl");

  std::vector<TermId> all_terms(dict.size());
  for (std::size_t i = 0; i < all_terms.size(); ++i) all_terms[i] = static_cast<TermId>(i);

  std::int64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<PackedExample> examples;
    for (std::size_t qi = 0; qi < train.size(); ++qi) {
      const auto gold = train[qi].gold_ids();
      const auto seqs =
          cfg.shuffle_terms
              ? pack_term_sequences(all_terms, cfg.terms_per_sequence,
                                    sub_seed(cfg.seed, "finetune-pack", static_cast<std::uint64_t>(epoch), qi))
              : pack_term_sequences(all_terms, cfg.terms_per_sequence);
      for (const auto& seq : seqs)
        examples.push_back(assemble_msf_example(vocab, dict, seq, train[qi].query, gold, static_cast<std::size_t>(cfg.max_len)));
    }
    Rng rng(sub_seed(cfg.seed, "finetune-order", static_cast<std::uint64_t>(epoch)));
    shuffle(std::span<PackedExample>(examples), rng);

    FinetuneEpochLog elog{epoch, 0, 0, {}};
    for (std::size_t b = 0; b < examples.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t e = std::min(examples.size(), b + static_cast<std::size_t>(cfg.batch_size));
      ++step;
      const BatchResult r = train_batch(ck.params, opt, std::span<const PackedExample>(examples).subspan(b, e - b), 1.0, 0.0,
                                        cfg, ck.config.dropout, step);
      if (!std::isfinite(r.match_loss)) throw NumericalError("non-finite fine-tuning loss at step " + std::to_string(step));
      elog.l_msf += r.match_loss;
      ++elog.steps;
    }
    elog.l_msf /= static_cast<double>(elog.steps);
    elog.dev = evaluate(ck.params, dict, vocab, selection, cfg.terms_per_sequence, cfg.max_len, cfg.workers).metrics;
    result.epochs.push_back(elog);
    if (output.dir) detail::append_jsonl(*output.dir / "finetune_metrics.jsonl", to_json(elog));
    ck.step = step;
    ck.epoch = epoch;
    if (elog.dev.micro_f1 > best_f1) {
      best_f1 = elog.dev.micro_f1;
      result.best = ck;
      result.best_epoch = epoch;
    }
    if (hook && !hook(epoch, ck.params)) break;
  }
  if (output.dir) save_checkpoint(result.best, *output.dir / "finetune.ckpt");
  return result;
}

}  // namespace tspmn
