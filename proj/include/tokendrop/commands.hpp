#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "tokendrop/run_config.hpp"

namespace tokendrop {

struct Experiment {
  TrainingData data;
  ParallelText test_text;
  std::vector<EncodedPair> test;
};

/// Generates or loads the corpus. Vocabularies come from the configured files,
/// else from `vocab_dir` when given, else they are built from the training split.
Experiment prepare_experiment(const RunConfig& config,
                              const std::filesystem::path& vocab_dir = {});

// File names inside an output directory.
inline constexpr const char* kConfigSnapshot = "config.ini";
inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kMetricsFile = "metrics.jsonl";
inline constexpr const char* kCurveFile = "learning_curve.csv";
inline constexpr const char* kFinalMetricsFile = "final_metrics.json";
inline constexpr const char* kSourceVocabFile = "source.vocab";
inline constexpr const char* kTargetVocabFile = "target.vocab";
inline constexpr const char* kBleuFile = "bleu.csv";
inline constexpr const char* kHypothesesFile = "hypotheses.txt";
inline constexpr const char* kRobustnessFile = "robustness.csv";
inline constexpr const char* kSweepFile = "sweep.csv";

// Each command writes into config.output_dir and returns a process exit code.
// Failures are reported on `err`; `out` receives progress and results.
int cmd_train(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_evaluate(const RunConfig& config, const std::filesystem::path& checkpoint,
                 std::ostream& out, std::ostream& err);
int cmd_robustness(const RunConfig& config, const std::filesystem::path& checkpoint,
                   std::ostream& out, std::ostream& err);
int cmd_sweep(const RunConfig& config, std::ostream& out, std::ostream& err);

}  // namespace tokendrop
