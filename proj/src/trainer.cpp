#include "tokendrop/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

#include "tokendrop/error.hpp"

namespace tokendrop {

namespace {

// Independent random streams of one run.
enum Stream : std::uint64_t { kInitStream = 0, kShuffleStream = 1, kDropStream = 2, kDropoutStream = 3 };

}  // namespace

void TrainConfig::validate() const {
  if (max_steps == 0) throw ConfigError("max_steps must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam decays must lie in (0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (warmup_steps == 0) throw ConfigError("warmup_steps must be positive");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (valid_interval == 0) throw ConfigError("valid_interval must be positive");
  drop.validate();
  objective.validate();
  model.validate();
}

double learning_rate_at(const TrainConfig& config, std::size_t step) {
  const double s = static_cast<double>(std::max<std::size_t>(step, 1));
  const double w = static_cast<double>(config.warmup_steps);
  return config.learning_rate * std::min(s / w, std::sqrt(w / s));
}

std::string MetricsRecord::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["l_m"] = l_m;
  j["l_rtd"] = l_rtd;
  j["l_dtp"] = l_dtp;
  j["joint"] = joint;
  j["perplexity"] = perplexity;
  j["valid_ppl"] = valid_ppl;
  j["elapsed_s"] = elapsed_s;
  return j.dump();
}

AdamOptimizer::AdamOptimizer(const std::vector<NamedTensor>& params) {
  for (const auto& p : params) {
    m_.emplace_back(p.tensor.size(), 0.0);
    v_.emplace_back(p.tensor.size(), 0.0);
  }
}

void AdamOptimizer::step(std::vector<NamedTensor>& params, double lr, double beta1, double beta2,
                         double eps) {
  ++t_;
  const double correction1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double correction2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& tensor = params[i].tensor;
    if (!tensor.has_grad()) continue;
    auto data = tensor.data();
    auto grad = tensor.grad_buffer();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * grad[j] * grad[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      data[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

double grad_norm(const std::vector<NamedTensor>& params) {
  double total = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.storage()->grad) total += g * g;
  }
  return std::sqrt(total);
}

double clip_grad_norm(std::vector<NamedTensor>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (auto& g : p.tensor.grad_buffer()) g *= factor;
    }
  }
  return norm;
}

Trainer::Trainer(TrainConfig config, TrainingData data)
    : config_(std::move(config)),
      data_(std::move(data)),
      model_(config_.model, data_.source_vocab.size(), data_.target_vocab.size(),
             derive_seed(config_.seed, kInitStream)),
      drop_rng_(derive_seed(config_.seed ^ config_.drop.seed, kDropStream)),
      dropout_rng_(derive_seed(config_.seed, kDropoutStream)),
      started_(std::chrono::steady_clock::now()) {
  config_.validate();
  if (data_.train.empty()) throw DataError("training set is empty");
  optimizer_ = AdamOptimizer(model_.params().named());
  ever_nonzero_.assign(model_.params().named().size(), false);
}

ParallelBatch Trainer::next_batch() {
  if (cursor_ >= epoch_batches_.size()) {
    if (!epoch_batches_.empty()) ++epoch_;
    epoch_batches_ = make_batches(data_.train, config_.batch_size,
                                  derive_seed(config_.seed, kShuffleStream) + epoch_);
    cursor_ = 0;
  }
  return epoch_batches_[cursor_++];
}

LossReport Trainer::train_step(const ParallelBatch& batch) {
  Tape tape;
  const ForwardContext ctx{true, &dropout_rng_};
  Tensor loss;
  LossReport report;
  if (config_.token_drop) {
    const CorruptedPair corrupted = corrupt(batch, config_.drop, drop_rng_);
    const EncodedBatch enc = model_.encode(tape, corrupted.source, ctx);
    const Tensor logits = model_.decode(tape, corrupted.target_input, enc, ctx);
    const LossTerm l_m = translation_loss(tape, logits, batch.target_output);
    // Heads whose weight is zero are not evaluated and report 0.
    LossTerm l_rtd{Tensor({1}, {0.0}), 0, true};
    LossTerm l_dtp{Tensor({1}, {0.0}), 0, true};
    if (config_.objective.alpha != 0.0) {
      l_rtd = rtd_loss(tape, model_.rtd_head(tape, enc), corrupted.source.mask, corrupted.source.droppable);
    }
    if (config_.objective.beta != 0.0) {
      const DropRecords records = drop_records(corrupted.source);
      l_dtp = dtp_loss(tape, model_.dtp_head(tape, enc, records.dropped), records.original);
    }
    auto objective = joint_objective(tape, l_m, l_rtd, l_dtp, config_.objective);
    loss = objective.value;
    report = objective.report;
  } else {
    const EncodedBatch enc = model_.encode(tape, uncorrupted(batch.source), ctx);
    const Tensor logits = model_.decode(tape, uncorrupted(batch.target_input), enc, ctx);
    const LossTerm l_m = translation_loss(tape, logits, batch.target_output);
    report = joint_loss(l_m.value.item(), 0.0, 0.0, ObjectiveConfig{0.0, 0.0});
    report.target_tokens = l_m.count;
    loss = l_m.value;
  }

  auto params = model_.params().named();
  for (auto& p : params) p.tensor.zero_grad();
  tape.backward(loss);
  last_grad_norm_ = clip_grad_norm(params, config_.clip_norm);
  last_clipped_norm_ = grad_norm(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ever_nonzero_[i] || !params[i].tensor.has_grad()) continue;
    const auto& g = params[i].tensor.storage()->grad;
    ever_nonzero_[i] = std::any_of(g.begin(), g.end(), [](double x) { return x != 0.0; });
  }
  ++step_;
  optimizer_.step(params, learning_rate_at(config_, step_), config_.beta1, config_.beta2,
                  config_.adam_eps);

  sum_l_m_ += report.l_m;
  sum_l_rtd_ += report.l_rtd;
  sum_l_dtp_ += report.l_dtp;
  sum_joint_ += report.joint;
  ++interval_steps_;
  return report;
}

std::vector<std::string> Trainer::never_updated() const {
  std::vector<std::string> names;
  const auto params = model_.params().named();
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!ever_nonzero_[i]) names.push_back(params[i].name);
  return names;
}

double Trainer::validate(const std::vector<EncodedPair>& pairs) const {
  if (pairs.empty()) throw DataError("validation set is empty");
  Tape tape(false);
  double total_nll = 0.0;
  std::size_t total_tokens = 0;
  std::vector<std::size_t> indices;
  for (std::size_t begin = 0; begin < pairs.size(); begin += config_.batch_size) {
    indices.clear();
    for (std::size_t i = begin; i < std::min(pairs.size(), begin + config_.batch_size); ++i)
      indices.push_back(i);
    const ParallelBatch batch = make_batch(pairs, indices);
    const EncodedBatch enc = model_.encode(tape, uncorrupted(batch.source), {});
    const Tensor logits = model_.decode(tape, uncorrupted(batch.target_input), enc, {});
    const LossTerm term = translation_loss(tape, logits, batch.target_output);
    total_nll += term.value.item() * static_cast<double>(term.count);
    total_tokens += term.count;
  }
  return std::exp(total_nll / static_cast<double>(total_tokens));
}

MetricsRecord Trainer::flush_interval() {
  MetricsRecord record;
  const double n = static_cast<double>(std::max<std::size_t>(interval_steps_, 1));
  record.step = step_;
  record.l_m = sum_l_m_ / n;
  record.l_rtd = sum_l_rtd_ / n;
  record.l_dtp = sum_l_dtp_ / n;
  record.joint = sum_joint_ / n;
  record.perplexity = std::exp(record.l_m);
  record.valid_ppl = data_.valid.empty() ? 0.0 : validate();
  record.elapsed_s =
      elapsed_offset_ +
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  sum_l_m_ = sum_l_rtd_ = sum_l_dtp_ = sum_joint_ = 0.0;
  interval_steps_ = 0;
  return record;
}

const RunLog& Trainer::train(std::optional<std::size_t> until,
                             const std::function<void(const MetricsRecord&)>& on_record) {
  const std::size_t last = std::min(until.value_or(config_.max_steps), config_.max_steps);
  started_ = std::chrono::steady_clock::now();
  while (step_ < last) {
    train_step(next_batch());
    if (step_ % config_.valid_interval == 0 || step_ == config_.max_steps) {
      log_.push_back(flush_interval());
      if (on_record) on_record(log_.back());
    }
  }
  elapsed_offset_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  return log_;
}

}  // namespace tokendrop
