#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tokendrop/bleu.hpp"
#include "tokendrop/corpus.hpp"
#include "tokendrop/model.hpp"
#include "tokendrop/trainer.hpp"

namespace tokendrop {

struct DecodeOptions {
  /// Generated tokens per sentence, EOS excluded. 0 means source length + 10.
  std::size_t max_len = 0;
  std::size_t batch_size = 64;
};

/// Argmax decoding from BOS until EOS or max_len; ties go to the lowest id.
/// Output i belongs to source i regardless of batching.
std::vector<TokenSequence> greedy_decode(const Transformer& model,
                                         const std::vector<TokenSequence>& sources,
                                         const DecodeOptions& options = {});
TokenSequence greedy_decode(const Transformer& model, const TokenSequence& source,
                            std::size_t max_len);

/// Decodes every source and scores against the paired targets (token ids).
BleuReport evaluate_bleu(const Transformer& model, const std::vector<EncodedPair>& test,
                         const DecodeOptions& options = {});

struct NoiseEvalSpec {
  std::vector<double> rates{0.0, 0.05, 0.10, 0.15};
  std::size_t samples = 100;
  std::uint64_t seed = 99;

  void validate() const;
};

struct NoiseRow {
  double rate = 0.0;
  double mean_bleu = 0.0;
  double std_bleu = 0.0;  // sample standard deviation; 0 for a single evaluation
};

/// Replaces each non-special token with UNK with probability `rate`.
TokenSequence add_unk_noise(const TokenSequence& tokens, double rate, Rng& rng);

/// Test-time robustness: for each rate, corrupt the test sources `samples`
/// times, decode and score each corrupted corpus. Rate 0 is evaluated once.
std::vector<NoiseRow> noise_eval(const Transformer& model, const std::vector<EncodedPair>& test,
                                 const NoiseEvalSpec& spec, const DecodeOptions& options = {});

struct SweepRow {
  double p_source = 0.0;
  double bleu = 0.0;
  std::optional<std::string> error;  // set when this rate's run failed
  double final_valid_ppl = 0.0;
};

inline const std::vector<double> kDefaultSweepRates{0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3};

/// Trains one model per source drop rate with everything else fixed and
/// reports clean test BLEU. A failing run yields a row with `error` set.
std::vector<SweepRow> drop_rate_sweep(
    const std::vector<double>& rates, const TrainConfig& base, const TrainingData& data,
    const std::vector<EncodedPair>& test, const DecodeOptions& options = {},
    const std::function<void(const SweepRow&, const Trainer*)>& on_row = {});

void write_noise_csv(const std::vector<NoiseRow>& rows, const std::filesystem::path& path);
void write_sweep_csv(const std::vector<SweepRow>& rows, const std::filesystem::path& path);
/// step,train_ppl,valid_ppl per logged record.
void write_curve_csv(const RunLog& log, const std::filesystem::path& path);

/// Shortest round-trip decimal for CSV and console output.
std::string format_number(double value);

}  // namespace tokendrop
