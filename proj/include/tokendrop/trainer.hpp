#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tokendrop/corpus.hpp"
#include "tokendrop/model.hpp"
#include "tokendrop/objectives.hpp"
#include "tokendrop/token_drop.hpp"
#include "tokendrop/vocab.hpp"

namespace tokendrop {

struct TrainConfig {
  std::size_t max_steps = 3000;
  std::size_t batch_size = 32;
  double learning_rate = 3e-3;  // peak, reached at the end of warmup
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  std::size_t warmup_steps = 400;
  double clip_norm = 1.0;
  std::size_t valid_interval = 250;
  std::uint64_t seed = 1;
  /// false removes corruption and both auxiliary heads from the step entirely.
  bool token_drop = true;
  DropConfig drop;
  ObjectiveConfig objective;
  ModelConfig model;

  void validate() const;
};

/// Linear warmup to the peak rate, then decay with 1/sqrt(step). Steps are 1-based.
double learning_rate_at(const TrainConfig& config, std::size_t step);

struct MetricsRecord {
  std::size_t step = 0;
  double l_m = 0.0;
  double l_rtd = 0.0;
  double l_dtp = 0.0;
  double joint = 0.0;
  double perplexity = 0.0;  // exp(l_m) over the logged interval
  double valid_ppl = 0.0;
  double elapsed_s = 0.0;

  /// One JSON object, no trailing newline. Keys are stable.
  std::string to_json() const;
};

using RunLog = std::vector<MetricsRecord>;

struct TrainingData {
  Vocabulary source_vocab;
  Vocabulary target_vocab;
  std::vector<EncodedPair> train;
  std::vector<EncodedPair> valid;
};

// Adaptive-moment optimizer over a fixed list of parameter tensors.
class AdamOptimizer {
 public:
  AdamOptimizer() = default;
  explicit AdamOptimizer(const std::vector<NamedTensor>& params);

  void step(std::vector<NamedTensor>& params, double lr, double beta1, double beta2, double eps);

  std::size_t steps_taken() const { return t_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_steps_taken(std::size_t t) { t_ = t; }

 private:
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

/// Scales gradients in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::vector<NamedTensor>& params, double max_norm);
double grad_norm(const std::vector<NamedTensor>& params);

// One training run: owns the model, optimizer state and every random stream,
// so a run is a pure function of its TrainConfig and data.
class Trainer {
 public:
  Trainer(TrainConfig config, TrainingData data);

  const TrainConfig& config() const { return config_; }
  const TrainingData& data() const { return data_; }
  Transformer& model() { return model_; }
  const Transformer& model() const { return model_; }
  std::size_t step() const { return step_; }
  const RunLog& log() const { return log_; }

  /// Corrupt, forward, joint loss, backward, clip, one optimizer update.
  LossReport train_step(const ParallelBatch& batch);

  /// Next minibatch from the epoch iterator (reshuffled every epoch).
  ParallelBatch next_batch();

  /// Runs until max_steps (or `until` when given), appending a record every
  /// valid_interval steps and at the final step.
  const RunLog& train(std::optional<std::size_t> until = std::nullopt,
                      const std::function<void(const MetricsRecord&)>& on_record = {});

  /// Teacher-forced perplexity in eval mode with no corruption.
  double validate(const std::vector<EncodedPair>& pairs) const;
  double validate() const { return validate(data_.valid); }

  double last_grad_norm() const { return last_grad_norm_; }
  double last_clipped_norm() const { return last_clipped_norm_; }
  /// Names of parameters whose gradient has never been nonzero.
  std::vector<std::string> never_updated() const;

 private:
  friend void save_checkpoint(const Trainer&, const std::filesystem::path&);
  friend Trainer load_checkpoint(const std::filesystem::path&, TrainingData);

  MetricsRecord flush_interval();

  TrainConfig config_;
  TrainingData data_;
  Transformer model_;
  AdamOptimizer optimizer_;
  Rng drop_rng_;
  Rng dropout_rng_;
  std::size_t step_ = 0;
  std::size_t epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<ParallelBatch> epoch_batches_;

  // running sums for the current logging interval
  double sum_l_m_ = 0.0, sum_l_rtd_ = 0.0, sum_l_dtp_ = 0.0, sum_joint_ = 0.0;
  std::size_t interval_steps_ = 0;
  RunLog log_;
  std::chrono::steady_clock::time_point started_;
  double elapsed_offset_ = 0.0;

  std::vector<bool> ever_nonzero_;
  double last_grad_norm_ = 0.0;
  double last_clipped_norm_ = 0.0;
};

/// Writes model, optimizer and rng state. Restoring and continuing gives the
/// same trajectory as never stopping.
void save_checkpoint(const Trainer& trainer, const std::filesystem::path& path);
Trainer load_checkpoint(const std::filesystem::path& path, TrainingData data);

struct CheckpointInfo {
  TrainConfig config;
  std::size_t source_vocab = 0;
  std::size_t target_vocab = 0;
  std::uint64_t source_fingerprint = 0;
  std::uint64_t target_fingerprint = 0;
  std::size_t step = 0;
};

/// Loads only the model (for evaluation); vocabularies are checked against the header.
Transformer load_model(const std::filesystem::path& path, const Vocabulary& source_vocab,
                       const Vocabulary& target_vocab, CheckpointInfo* info = nullptr);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

}  // namespace tokendrop
