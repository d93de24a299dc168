#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tokendrop/corpus.hpp"
#include "tokendrop/evaluation.hpp"
#include "tokendrop/trainer.hpp"

namespace tokendrop {

// Everything one command needs. Every field has a default; the all-default
// config trains the desk-scale Unk-Tag model on the built-in synthetic task.
struct RunConfig {
  // [data]
  bool synthetic = true;  // false: read <prefix>.src / <prefix>.tgt files
  std::string train_prefix;
  std::string valid_prefix;
  std::string test_prefix;
  std::size_t vocab_size = 10000;  // upper bound per side, specials included
  std::string source_vocab_file;   // empty: built from training data (or the run directory)
  std::string target_vocab_file;

  SyntheticTaskSpec task;  // [synthetic]
  TrainConfig train;       // [train], [model], [drop], [objective]

  // [eval]
  NoiseEvalSpec noise;
  std::vector<double> sweep_rates = kDefaultSweepRates;
  DecodeOptions decode;

  // [output]
  std::string output_dir = "run";
  bool write_hypotheses = false;

  void validate() const;
};

/// Parses the sectioned `key = value` format. Unknown sections or keys and
/// malformed values throw ConfigError naming the key and line.
RunConfig parse_run_config(const std::string& text, const std::string& origin = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies one `section.key=value` override.
void apply_override(RunConfig& config, const std::string& assignment);

/// Resolved config with every field spelled out; parse_run_config(to_text(c)) == c.
std::string to_text(const RunConfig& config);

/// All `section.key` names, in snapshot order.
std::vector<std::string> config_keys();

}  // namespace tokendrop
