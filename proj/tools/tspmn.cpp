// SPDX-License-Identifier: Apache-2.0
// Command-line front end. Exit codes: 0 ok, 1 usage, 2 data/validation,
// 3 numerical failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "tspmn/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tspmn;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

// JSON config files. Keys are option names of the selected subcommand
// (without dashes); nested objects are not allowed. Unknown keys are rejected
// by CLI11.
class JsonConfig : public CLI::Config {
 public:
  explicit JsonConfig(const CLI::App* app) : app_(app) {}

  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    nlohmann::json j = nlohmann::json::object();
    for (const CLI::Option* opt : app->get_options({})) {
      if (!opt->get_configurable() || opt->get_lnames().empty()) continue;
      std::vector<std::string> values = opt->results();
      if (values.empty() && default_also && !opt->get_default_str().empty()) values = {opt->get_default_str()};
      if (values.empty()) continue;
      j[opt->get_lnames().front()] = values.size() == 1 ? nlohmann::json(values.front()) : nlohmann::json(values);
    }
    return j.dump(2) + "\n";
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
    std::vector<CLI::ConfigItem> items;
    const auto selected = app_->get_subcommands();
    for (const auto& [key, value] : j.items()) {
      CLI::ConfigItem item;
      if (!selected.empty()) item.parents = {selected.front()->get_name()};
      item.name = key;
      if (value.is_object()) throw CLI::ConversionError("config key '" + key + "' must not be an object");
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      } else {
        item.inputs.push_back(scalar(value));
      }
      items.push_back(std::move(item));
    }
    return items;
  }

 private:
  const CLI::App* app_;

  static std::string scalar(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number()) return v.dump();
    throw CLI::ConversionError("config values must be strings, numbers or booleans");
  }
};

void require_file(const std::string& path, const std::string& flag) {
  if (!fs::is_regular_file(path)) throw DataError(flag + ": no such file: " + path);
}

// Options every subcommand shares.
struct Common {
  std::uint64_t seed = 0;
  unsigned workers = 1;
};

CLI::App* add_command(CLI::App& app, const std::string& name, const std::string& about, Common& common) {
  CLI::App* sub = app.add_subcommand(name, about);
  sub->fallthrough();  // --config belongs to the top level
  sub->add_option("--seed", common.seed, "Seed for every random choice")->capture_default_str();
  sub->add_option("--workers", common.workers, "Worker threads (results do not depend on this)")
      ->capture_default_str()
      ->check(CLI::Range(1u, 256u));
  return sub;
}

void add_model_options(CLI::App* sub, ModelConfig& m) {
  sub->add_option("--layers", m.layers, "Encoder layers (fresh models only)")->capture_default_str();
  sub->add_option("--heads", m.heads, "Attention heads (fresh models only)")->capture_default_str();
  sub->add_option("--hidden", m.hidden, "Hidden size d (fresh models only)")->capture_default_str();
  sub->add_option("--ffn", m.ffn, "Feed-forward inner size (fresh models only)")->capture_default_str();
  sub->add_option("--dropout", m.dropout, "Dropout rate (fresh models only)")->capture_default_str();
  sub->add_option("--positions", m.max_len, "Position table size (fresh models only)")->capture_default_str();
}

void add_train_options(CLI::App* sub, TrainConfig& c) {
  sub->add_option("--lr", c.lr, "Learning rate")->capture_default_str();
  sub->add_option("--batch-size", c.batch_size, "Examples per step")->capture_default_str();
  sub->add_option("--epochs", c.epochs, "Passes over the data")->capture_default_str();
  sub->add_option("--terms-per-seq,-n", c.terms_per_sequence, "Terms per packed sequence")->capture_default_str();
  sub->add_option("--weight-decay", c.weight_decay, "Decoupled weight decay")->capture_default_str();
  sub->add_option("--clip-norm", c.clip_norm, "Global gradient-norm clip")->capture_default_str();
  sub->add_option("--max-len", c.max_len, "Maximum packed example length")->capture_default_str();
}

std::vector<LabeledQuery> read_queries(const std::string& path, const TermDictionary& dict, const std::string& flag) {
  require_file(path, flag);
  return load_queries(path, dict);
}

Checkpoint initial_checkpoint(const std::string& init, const ModelConfig& model, const Vocab& vocab,
                              const TermDictionary& dict, std::uint64_t seed) {
  if (init.empty()) return fresh_checkpoint(model, vocab, dict, seed);
  require_file(init, "--init");
  Checkpoint ck = load_checkpoint(init);
  check_compatible(ck, vocab, dict);
  return ck;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Medical slot filling as term/query matching: corpus tools, pretraining, fine-tuning and evaluation."};
  app.set_help_flag("-h,--help", "Print this help with every subcommand and flag");
  app.set_help_all_flag("--help-all", "Same as --help");
  app.require_subcommand(1, 1);
  app.config_formatter(std::make_shared<JsonConfig>(&app));
  app.set_config("--config", "", "JSON file of option values for the subcommand; command-line flags take precedence");
  app.allow_config_extras(CLI::config_extras_mode::error);

  Common common;
  std::function<int()> action;

  // gen-world -------------------------------------------------------------
  SynthSpec spec;
  std::string world_out;
  {
    CLI::App* sub = add_command(app, "gen-world", "Generate a synthetic dictionary, dialogues and labeled queries", common);
    sub->add_option("--out", world_out, "Output directory")->required();
    sub->add_option("--terms", spec.term_count, "Number of dictionary terms")->capture_default_str();
    sub->add_option("--paraphrases-min", spec.paraphrases_per_term.lo, "Fewest paraphrases per term")->capture_default_str();
    sub->add_option("--paraphrases-max", spec.paraphrases_per_term.hi, "Most paraphrases per term")->capture_default_str();
    sub->add_option("--dialogues", spec.dialogue_count, "Pretraining dialogues")->capture_default_str();
    sub->add_option("--queries", spec.query_count, "Labeled queries over all splits")->capture_default_str();
    sub->add_option("--terms-per-query-min", spec.terms_per_query.lo, "Fewest gold terms per query")->capture_default_str();
    sub->add_option("--terms-per-query-max", spec.terms_per_query.hi, "Most gold terms per query")->capture_default_str();
    sub->add_option("--slots", spec.slot_count, "Number of slot names")->capture_default_str();
    sub->add_option("--dev-fraction", spec.dev_fraction, "Share of queries in dev")->capture_default_str();
    sub->add_option("--test-fraction", spec.test_fraction, "Share of queries in test")->capture_default_str();
    sub->callback([&] {
      action = [&] {
        spec.seed = common.seed;
        const SyntheticWorld world = generate_synthetic_world(spec);
        save_world(world, world_out);
        save_vocab(world_vocab(world), (fs::path(world_out) / "vocab.txt").string());
        std::cout << "terms " << world.dictionary.size() << " dialogues " << world.dialogues.size() << " train "
                  << world.train.size() << " dev " << world.dev.size() << " test " << world.test.size() << "\n";
        return 0;
      };
    });
  }

  // build-dict ------------------------------------------------------------
  std::string bd_terms, bd_out;
  std::vector<std::string> bd_dialogues, bd_queries;
  {
    CLI::App* sub = add_command(app, "build-dict", "Normalize a term list and build the character vocabulary", common);
    sub->add_option("--terms", bd_terms, "TSV of surface<TAB>slot")->required();
    sub->add_option("--dialogues", bd_dialogues, "Dialogue JSONL files whose characters join the vocabulary");
    sub->add_option("--queries", bd_queries, "Query JSONL files whose characters join the vocabulary");
    sub->add_option("--out", bd_out, "Output directory for dictionary.tsv and vocab.txt")->required();
    sub->callback([&] {
      action = [&] {
        require_file(bd_terms, "--terms");
        const TermDictionary dict = load_dictionary(bd_terms);
        std::vector<std::string> texts;
        for (const auto& path : bd_dialogues) {
          require_file(path, "--dialogues");
          const auto ds = load_dialogues(path);
          for (const auto& t : corpus_texts(ds)) texts.push_back(t);
        }
        for (const auto& path : bd_queries) {
          const auto qs = read_queries(path, dict, "--queries");
          for (const auto& q : qs) texts.push_back(q.query);
        }
        const Vocab vocab = build_vocab(dict, texts);
        fs::create_directories(bd_out);
        save_dictionary(dict, (fs::path(bd_out) / "dictionary.tsv").string());
        save_vocab(vocab, (fs::path(bd_out) / "vocab.txt").string());
        std::cout << "terms " << dict.size() << " vocab " << vocab.size() << "\n";
        return 0;
      };
    });
  }

  // retrieve --------------------------------------------------------------
  std::string rt_dict, rt_dialogues, rt_text, rt_out;
  {
    CLI::App* sub = add_command(app, "retrieve", "Find dictionary terms in dialogues or in one text", common);
    sub->add_option("--dict", rt_dict, "Dictionary TSV")->required();
    auto* d = sub->add_option("--dialogues", rt_dialogues, "Dialogue JSONL; writes one dialogue-terms pair per line");
    auto* t = sub->add_option("--text", rt_text, "A single text to scan");
    d->excludes(t);
    sub->add_option("--out", rt_out, "Output JSONL file (default: standard output)");
    sub->callback([&] {
      action = [&] {
        require_file(rt_dict, "--dict");
        const TermDictionary dict = load_dictionary(rt_dict);
        std::ofstream file;
        if (!rt_out.empty()) {
          file.open(rt_out, std::ios::binary);
          if (!file) throw DataError("--out: cannot write " + rt_out);
        }
        std::ostream& out = rt_out.empty() ? std::cout : file;
        if (!rt_dialogues.empty()) {
          require_file(rt_dialogues, "--dialogues");
          const auto dialogues = load_dialogues(rt_dialogues);
          for (const auto& p : make_dialogue_terms_pairs(dict, dialogues, common.workers))
            out << to_json(p, dict).dump() << '\n';
        } else {
          nlohmann::json matches = nlohmann::json::array();
          for (const auto& m : retrieve_terms(dict, std::string_view(rt_text))) matches.push_back(to_json(m, dict));
          out << matches.dump() << '\n';
        }
        return 0;
      };
    });
  }

  // pack ------------------------------------------------------------------
  std::string pk_dict, pk_vocab, pk_queries, pk_dialogues, pk_out;
  int pk_n = 15;
  double pk_ratio = 0.5;
  std::size_t pk_max_len = 256;
  bool pk_shuffle = false;
  {
    CLI::App* sub = add_command(app, "pack", "Write packed model inputs as JSONL", common);
    sub->add_option("--dict", pk_dict, "Dictionary TSV")->required();
    sub->add_option("--vocab", pk_vocab, "Vocabulary file")->required();
    auto* q = sub->add_option("--queries", pk_queries, "Labeled query JSONL (matching examples)");
    auto* d = sub->add_option("--dialogues", pk_dialogues, "Dialogue JSONL (masked pretraining examples)");
    q->excludes(d);
    sub->add_option("--terms-per-seq,-n", pk_n, "Terms per packed sequence")->capture_default_str();
    sub->add_option("--pos-ratio", pk_ratio, "Share of positive terms in pretraining sequences")->capture_default_str();
    sub->add_option("--max-len", pk_max_len, "Maximum example length")->capture_default_str();
    sub->add_flag("--shuffle", pk_shuffle, "Seeded term order instead of ascending ids (queries only)");
    sub->add_option("--out", pk_out, "Output JSONL file")->required();
    sub->callback([&] {
      action = [&] {
        if (pk_queries.empty() == pk_dialogues.empty()) throw CLI::ValidationError("pack needs --queries or --dialogues");
        require_file(pk_dict, "--dict");
        require_file(pk_vocab, "--vocab");
        const TermDictionary dict = load_dictionary(pk_dict);
        const Vocab vocab = load_vocab(pk_vocab);
        std::ofstream out(pk_out, std::ios::binary);
        if (!out) throw DataError("--out: cannot write " + pk_out);
        std::size_t count = 0;
        if (!pk_queries.empty()) {
          const auto queries = read_queries(pk_queries, dict, "--queries");
          for (std::size_t qi = 0; qi < queries.size(); ++qi) {
            const auto seqs = pk_shuffle ? pack_all_terms(dict, pk_n, sub_seed(common.seed, "pack-terms", qi))
                                         : pack_all_terms(dict, pk_n);
            for (const auto& seq : seqs) {
              nlohmann::json j =
                  to_json(assemble_msf_example(vocab, dict, seq, queries[qi].query, queries[qi].gold_ids(), pk_max_len));
              j["query_id"] = queries[qi].query_id;
              out << j.dump() << '\n';
              ++count;
            }
          }
        } else {
          require_file(pk_dialogues, "--dialogues");
          const auto dialogues = load_dialogues(pk_dialogues);
          const auto pairs = make_dialogue_terms_pairs(dict, dialogues, common.workers);
          const PretrainOptions opt{pk_n, pk_ratio, pk_max_len};
          for (std::size_t i = 0; i < dialogues.size(); ++i) {
            if (pairs[i].positive_matches.empty()) continue;
            nlohmann::json j = to_json(
                assemble_pretrain_example(vocab, pairs[i], dialogues[i], dict, opt, sub_seed(common.seed, "pack-mask", i)));
            j["dialogue_id"] = dialogues[i].dialogue_id;
            out << j.dump() << '\n';
            ++count;
          }
        }
        std::cout << "examples " << count << "\n";
        return 0;
      };
    });
  }

  // pretrain --------------------------------------------------------------
  std::string pt_dict, pt_vocab, pt_dialogues, pt_init, pt_out;
  ModelConfig pt_model;
  TrainConfig pt_cfg = pretrain_defaults();
  {
    CLI::App* sub = add_command(app, "pretrain", "Pretrain with the CTD and MMTM objectives", common);
    sub->add_option("--dict", pt_dict, "Dictionary TSV")->required();
    sub->add_option("--vocab", pt_vocab, "Vocabulary file")->required();
    sub->add_option("--dialogues", pt_dialogues, "Dialogue JSONL")->required();
    sub->add_option("--init", pt_init, "Start from this checkpoint instead of a fresh model");
    sub->add_option("--out", pt_out, "Directory for checkpoints and logs")->required();
    add_model_options(sub, pt_model);
    add_train_options(sub, pt_cfg);
    sub->add_option("--lambda", pt_cfg.lambda, "Weight of CTD; MMTM gets 1 - lambda")->capture_default_str();
    sub->add_option("--pos-ratio", pt_cfg.pos_ratio, "Share of positive terms per sequence")->capture_default_str();
    sub->callback([&] {
      action = [&] {
        require_file(pt_dict, "--dict");
        require_file(pt_vocab, "--vocab");
        require_file(pt_dialogues, "--dialogues");
        const TermDictionary dict = load_dictionary(pt_dict);
        const Vocab vocab = load_vocab(pt_vocab);
        const auto dialogues = load_dialogues(pt_dialogues);
        const auto pairs = make_dialogue_terms_pairs(dict, dialogues, common.workers);
        pt_cfg.seed = common.seed;
        pt_cfg.workers = common.workers;
        Checkpoint init = initial_checkpoint(pt_init, pt_model, vocab, dict, common.seed);
        const auto r = run_pretraining(dict, vocab, dialogues, pairs, std::move(init), pt_cfg, RunOutput{fs::path(pt_out)});
        for (const auto& e : r.epochs)
          std::cout << "epoch " << e.epoch << " l_ctd " << fmt(e.l_ctd) << " l_mmtm " << fmt(e.l_mmtm) << " l_pretrain "
                    << fmt(e.l_pretrain) << "\n";
        std::cout << "checkpoint " << (fs::path(pt_out) / "pretrain.ckpt").string() << "\n";
        return 0;
      };
    });
  }

  // finetune --------------------------------------------------------------
  std::string ft_dict, ft_vocab, ft_train, ft_dev, ft_init, ft_out;
  ModelConfig ft_model;
  TrainConfig ft_cfg = finetune_defaults();
  {
    CLI::App* sub = add_command(app, "finetune", "Fine-tune on labeled queries with the matching loss", common);
    sub->add_option("--dict", ft_dict, "Dictionary TSV")->required();
    sub->add_option("--vocab", ft_vocab, "Vocabulary file")->required();
    sub->add_option("--train", ft_train, "Training query JSONL")->required();
    sub->add_option("--dev", ft_dev, "Dev query JSONL used to pick the best epoch (default: training set)");
    sub->add_option("--init", ft_init, "Start from this checkpoint instead of a fresh model");
    sub->add_option("--out", ft_out, "Directory for the checkpoint and log")->required();
    add_model_options(sub, ft_model);
    add_train_options(sub, ft_cfg);
    sub->add_flag("--shuffle-terms", ft_cfg.shuffle_terms, "Re-shuffle term order every epoch instead of ascending ids");
    sub->callback([&] {
      action = [&] {
        require_file(ft_dict, "--dict");
        require_file(ft_vocab, "--vocab");
        const TermDictionary dict = load_dictionary(ft_dict);
        const Vocab vocab = load_vocab(ft_vocab);
        const auto train = read_queries(ft_train, dict, "--train");
        const auto dev = ft_dev.empty() ? std::vector<LabeledQuery>{} : read_queries(ft_dev, dict, "--dev");
        ft_cfg.seed = common.seed;
        ft_cfg.workers = common.workers;
        Checkpoint init = initial_checkpoint(ft_init, ft_model, vocab, dict, common.seed);
        const auto r = run_finetuning(dict, vocab, train, dev, std::move(init), ft_cfg, RunOutput{fs::path(ft_out)});
        for (const auto& e : r.epochs)
          std::cout << "epoch " << e.epoch << " l_msf " << fmt(e.l_msf) << " dev_micro_f1 " << fmt(e.dev.micro_f1) << "\n";
        std::cout << "best epoch " << r.best_epoch << " checkpoint " << (fs::path(ft_out) / "finetune.ckpt").string() << "\n";
        return 0;
      };
    });
  }

  // evaluate --------------------------------------------------------------
  std::string ev_dict, ev_vocab, ev_ckpt, ev_queries, ev_out;
  int ev_n = 15, ev_max_len = 256;
  {
    CLI::App* sub = add_command(app, "evaluate", "Predict slot values for queries and score them", common);
    sub->add_option("--dict", ev_dict, "Dictionary TSV")->required();
    sub->add_option("--vocab", ev_vocab, "Vocabulary file")->required();
    sub->add_option("--checkpoint", ev_ckpt, "Model checkpoint")->required();
    sub->add_option("--queries", ev_queries, "Labeled query JSONL")->required();
    sub->add_option("--terms-per-seq,-n", ev_n, "Terms per packed sequence")->capture_default_str();
    sub->add_option("--max-len", ev_max_len, "Maximum example length")->capture_default_str();
    sub->add_option("--out", ev_out, "Directory for metrics.json, metrics.tsv and predictions.jsonl");
    sub->callback([&] {
      action = [&] {
        require_file(ev_dict, "--dict");
        require_file(ev_vocab, "--vocab");
        require_file(ev_ckpt, "--checkpoint");
        const TermDictionary dict = load_dictionary(ev_dict);
        const Vocab vocab = load_vocab(ev_vocab);
        const auto queries = read_queries(ev_queries, dict, "--queries");
        const Checkpoint ck = load_checkpoint(ev_ckpt);
        check_compatible(ck, vocab, dict);
        const Evaluation ev = evaluate(ck.params, dict, vocab, queries, ev_n, ev_max_len, common.workers);
        if (!ev_out.empty()) {
          fs::create_directories(ev_out);
          std::ofstream(fs::path(ev_out) / "metrics.json") << to_json(ev.metrics, &dict).dump(2) << '\n';
          write_metrics_tsv(ev.metrics, (fs::path(ev_out) / "metrics.tsv").string(), &dict);
          write_predictions(ev, dict, fs::path(ev_out) / "predictions.jsonl");
        }
        std::cout << "precision " << fmt(ev.metrics.precision) << " recall " << fmt(ev.metrics.recall) << " micro_f1 "
                  << fmt(ev.metrics.micro_f1) << " macro_f1 " << fmt(ev.metrics.macro_f1) << " accuracy "
                  << fmt(ev.metrics.accuracy) << "\n";
        return 0;
      };
    });
  }

  // fewshot ---------------------------------------------------------------
  std::string fs_dict, fs_train, fs_out;
  int fs_k = 2;
  {
    CLI::App* sub = add_command(app, "fewshot", "Sample a k-shot training subset", common);
    sub->add_option("--dict", fs_dict, "Dictionary TSV")->required();
    sub->add_option("--train", fs_train, "Training query JSONL")->required();
    sub->add_option("--k", fs_k, "Queries per term")->capture_default_str();
    sub->add_option("--out", fs_out, "Output query JSONL")->required();
    sub->callback([&] {
      action = [&] {
        require_file(fs_dict, "--dict");
        const TermDictionary dict = load_dictionary(fs_dict);
        const auto train = read_queries(fs_train, dict, "--train");
        const auto subset = sample_few_shot(train, fs_k, common.seed);
        save_queries(subset, dict, fs_out);
        std::cout << "selected " << subset.size() << " of " << train.size() << "\n";
        return 0;
      };
    });
  }

  // gradcheck -------------------------------------------------------------
  ModelConfig gc_model;
  std::size_t gc_samples = 200;
  double gc_step = 1e-5, gc_threshold = 1e-5, gc_lambda = 0.9;
  {
    CLI::App* sub = add_command(app, "gradcheck", "Compare analytic gradients with central differences", common);
    add_model_options(sub, gc_model);
    sub->add_option("--samples", gc_samples, "Parameters sampled per loss")->capture_default_str();
    sub->add_option("--step", gc_step, "Finite-difference step")->capture_default_str();
    sub->add_option("--threshold", gc_threshold, "Largest accepted relative error")->capture_default_str();
    sub->add_option("--lambda", gc_lambda, "CTD weight in the combined loss")->capture_default_str();
    sub->callback([&] {
      action = [&] {
        const GradCheckSuite suite = run_gradcheck_suite(gc_model, common.seed, gc_samples, gc_step, gc_lambda);
        for (const auto& c : suite.cases)
          std::cout << c.objective << " max_rel_error " << std::scientific << std::setprecision(3)
                    << c.result.max_rel_error << "\n";
        const double worst = suite.max_rel_error();
        std::cout << "max_rel_error " << std::scientific << std::setprecision(3) << worst << "\n";
        if (!(worst < gc_threshold)) {
          std::cerr << "tspmn: gradient check failed: " << worst << " >= " << gc_threshold << "\n";
          return kExitNumerical;
        }
        return 0;
      };
    });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    if (!app.get_subcommands().empty()) return app.exit(e);
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    return action();
  } catch (const CLI::ParseError& e) {
    std::cerr << "tspmn: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    std::cerr << "tspmn: numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DataError& e) {
    std::cerr << "tspmn: " << e.what() << "\n";
    return kExitData;
  } catch (const InvalidArgument& e) {
    std::cerr << "tspmn: invalid value: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "tspmn: " << e.what() << "\n";
    return kExitData;
  }
}
