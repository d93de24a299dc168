#include "tokendrop/commands.hpp"

#include <fstream>
#include <json.hpp>
#include <ostream>

#include "tokendrop/error.hpp"

namespace tokendrop {

namespace fs = std::filesystem;

namespace {

std::vector<std::vector<std::string>> sides(const ParallelText& text, bool source, bool target) {
  std::vector<std::vector<std::string>> out;
  for (const auto& pair : text) {
    if (source) out.push_back(pair.source);
    if (target) out.push_back(pair.target);
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

fs::path prepare_output(const RunConfig& config) {
  const fs::path dir(config.output_dir);
  fs::create_directories(dir);
  write_text(dir / kConfigSnapshot, to_text(config));
  return dir;
}

// The checkpoint decides the architecture; a config that says otherwise is
// pointing at the wrong run.
void check_model_matches(const RunConfig& config, const CheckpointInfo& info) {
  if (!(config.train.model == info.config.model)) {
    throw ConfigError("checkpoint/config mismatch: the [model] section differs from the checkpoint's");
  }
}

struct LoadedModel {
  Experiment experiment;
  Transformer model;
};

LoadedModel load_for_eval(const RunConfig& config, const fs::path& checkpoint) {
  const CheckpointInfo info = read_checkpoint_info(checkpoint);
  check_model_matches(config, info);
  Experiment experiment = prepare_experiment(config, checkpoint.parent_path());
  if (experiment.test.empty()) throw DataError("no test set configured");
  Transformer model = load_model(checkpoint, experiment.data.source_vocab, experiment.data.target_vocab);
  return {std::move(experiment), std::move(model)};
}

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    fn();
    return 0;
  } catch (const DivergenceError& e) {
    err << "error: training diverged in " << e.component() << ": " << e.what() << '\n';
    return 3;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

std::string rate_label(double rate) { return "p_s_" + format_number(rate); }

}  // namespace

Experiment prepare_experiment(const RunConfig& config, const fs::path& vocab_dir) {
  config.validate();
  ParallelText train, valid, test;
  if (config.synthetic) {
    SyntheticCorpus corpus = generate_synthetic_corpus(config.task);
    train = std::move(corpus.train);
    valid = std::move(corpus.valid);
    test = std::move(corpus.test);
  } else {
    train = load_parallel(config.train_prefix + ".src", config.train_prefix + ".tgt");
    valid = load_parallel(config.valid_prefix + ".src", config.valid_prefix + ".tgt");
    if (!config.test_prefix.empty())
      test = load_parallel(config.test_prefix + ".src", config.test_prefix + ".tgt");
  }

  auto vocab_path = [&](const std::string& configured, const char* name) -> fs::path {
    if (!configured.empty()) return configured;
    if (!vocab_dir.empty()) return vocab_dir / name;
    return {};
  };
  const fs::path src_path = vocab_path(config.source_vocab_file, kSourceVocabFile);
  const fs::path tgt_path = vocab_path(config.target_vocab_file, kTargetVocabFile);

  Vocabulary source_vocab, target_vocab;
  if (config.train.model.shared_vocab) {
    source_vocab = src_path.empty() ? Vocabulary::build(sides(train, true, true), config.vocab_size)
                                    : Vocabulary::load(src_path);
    target_vocab = source_vocab;
  } else {
    source_vocab = src_path.empty() ? Vocabulary::build(sides(train, true, false), config.vocab_size)
                                    : Vocabulary::load(src_path);
    target_vocab = tgt_path.empty() ? Vocabulary::build(sides(train, false, true), config.vocab_size)
                                    : Vocabulary::load(tgt_path);
  }

  Experiment e;
  e.data.train = encode_pairs(train, source_vocab, target_vocab);
  e.data.valid = encode_pairs(valid, source_vocab, target_vocab);
  e.test = encode_pairs(test, source_vocab, target_vocab);
  e.test_text = std::move(test);
  e.data.source_vocab = std::move(source_vocab);
  e.data.target_vocab = std::move(target_vocab);
  return e;
}

int cmd_train(const RunConfig& config, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    Experiment experiment = prepare_experiment(config);
    const fs::path dir = prepare_output(config);
    experiment.data.source_vocab.save(dir / kSourceVocabFile);
    experiment.data.target_vocab.save(dir / kTargetVocabFile);
    if (config.synthetic) {
      fs::create_directories(dir / "data");
      const SyntheticCorpus corpus = generate_synthetic_corpus(config.task);
      save_parallel(corpus.train, dir / "data" / "train");
      save_parallel(corpus.valid, dir / "data" / "valid");
      save_parallel(corpus.test, dir / "data" / "test");
    }

    std::ofstream metrics(dir / kMetricsFile, std::ios::trunc);
    if (!metrics) throw Error("cannot write " + (dir / kMetricsFile).string());
    Trainer trainer(config.train, experiment.data);
    const RunLog& log = trainer.train(std::nullopt, [&](const MetricsRecord& r) {
      metrics << r.to_json() << '\n';
      metrics.flush();
      out << "step " << r.step << "  l_m " << format_number(r.l_m) << "  joint "
          << format_number(r.joint) << "  valid_ppl " << format_number(r.valid_ppl) << '\n';
    });
    save_checkpoint(trainer, dir / kCheckpointFile);
    write_curve_csv(log, dir / kCurveFile);

    nlohmann::ordered_json summary;
    summary["step"] = trainer.step();
    summary["valid_ppl"] = log.empty() ? trainer.validate() : log.back().valid_ppl;
    if (!experiment.test.empty()) {
      summary["test_bleu"] = evaluate_bleu(trainer.model(), experiment.test, config.decode).bleu;
    }
    write_text(dir / kFinalMetricsFile, summary.dump(2) + "\n");
    out << "final " << summary.dump() << '\n';
  });
}

int cmd_evaluate(const RunConfig& config, const fs::path& checkpoint, std::ostream& out,
                 std::ostream& err) {
  return guarded(err, [&] {
    LoadedModel loaded = load_for_eval(config, checkpoint);
    const fs::path dir = prepare_output(config);
    const auto& test = loaded.experiment.test;
    std::vector<TokenSequence> sources, references;
    for (const auto& pair : test) {
      sources.push_back(pair.source);
      references.push_back(pair.target);
    }
    const auto hypotheses = greedy_decode(loaded.model, sources, config.decode);
    const BleuReport report = corpus_bleu(hypotheses, references);

    std::ofstream csv(dir / kBleuFile, std::ios::trunc);
    csv << "bleu,p1,p2,p3,p4,brevity_penalty,hyp_len,ref_len\n" << format_number(report.bleu);
    for (double p : report.precisions) csv << ',' << format_number(p);
    csv << ',' << format_number(report.brevity_penalty) << ',' << report.hypothesis_length << ','
        << report.reference_length << '\n';
    if (config.write_hypotheses) {
      std::ofstream hyp(dir / kHypothesesFile, std::ios::trunc);
      for (const auto& h : hypotheses) {
        const auto words = loaded.experiment.data.target_vocab.decode(h);
        for (std::size_t i = 0; i < words.size(); ++i) hyp << (i ? " " : "") << words[i];
        hyp << '\n';
      }
    }
    out << "BLEU = " << format_number(report.bleu) << " (";
    for (std::size_t n = 0; n < kBleuOrder; ++n)
      out << (n ? "/" : "") << format_number(100.0 * report.precisions[n]);
    out << ", BP = " << format_number(report.brevity_penalty) << ", hyp_len = "
        << report.hypothesis_length << ", ref_len = " << report.reference_length << ")\n";
  });
}

int cmd_robustness(const RunConfig& config, const fs::path& checkpoint, std::ostream& out,
                   std::ostream& err) {
  return guarded(err, [&] {
    LoadedModel loaded = load_for_eval(config, checkpoint);
    const fs::path dir = prepare_output(config);
    const auto rows = noise_eval(loaded.model, loaded.experiment.test, config.noise, config.decode);
    write_noise_csv(rows, dir / kRobustnessFile);
    out << "rate,mean_bleu,std_bleu\n";
    for (const auto& r : rows)
      out << format_number(r.rate) << ',' << format_number(r.mean_bleu) << ','
          << format_number(r.std_bleu) << '\n';
  });
}

int cmd_sweep(const RunConfig& config, std::ostream& out, std::ostream& err) {
  int status = 0;
  const int setup = guarded(err, [&] {
    const Experiment experiment = prepare_experiment(config);
    if (experiment.test.empty()) throw DataError("the sweep needs a test set");
    const fs::path dir = prepare_output(config);
    const auto rows = drop_rate_sweep(
        config.sweep_rates, config.train, experiment.data, experiment.test, config.decode,
        [&](const SweepRow& row, const Trainer* trainer) {
          if (row.error) {
            err << "p_s = " << format_number(row.p_source) << " failed: " << *row.error << '\n';
            status = 4;
            return;
          }
          const fs::path run_dir = dir / "runs" / rate_label(row.p_source);
          fs::create_directories(run_dir);
          std::ofstream metrics(run_dir / kMetricsFile, std::ios::trunc);
          for (const auto& r : trainer->log()) metrics << r.to_json() << '\n';
          write_curve_csv(trainer->log(), run_dir / kCurveFile);
          out << "p_s " << format_number(row.p_source) << "  bleu " << format_number(row.bleu)
              << '\n';
        });
    write_sweep_csv(rows, dir / kSweepFile);
  });
  return setup != 0 ? setup : status;
}

}  // namespace tokendrop
