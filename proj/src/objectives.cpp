#include "tokendrop/objectives.hpp"

#include <cmath>

#include "tokendrop/error.hpp"

namespace tokendrop {

void ObjectiveConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be finite and >= 0");
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be finite and >= 0");
}

double LossReport::perplexity() const { return std::exp(l_m); }

LossTerm translation_loss(Tape& tape, const Tensor& logits, const IdMatrix& target_output) {
  return cross_entropy(tape, logits, target_output.data, kPadId);
}

LossTerm rtd_loss(Tape& tape, const Tensor& probs, const BitMatrix& mask, const BitMatrix& droppable) {
  if (mask.data.size() != droppable.data.size()) {
    throw DimensionError("rtd_loss: mask and droppable shapes differ");
  }
  const std::vector<double> labels(mask.data.begin(), mask.data.end());
  return binary_cross_entropy(tape, probs, labels, droppable.data);
}

LossTerm dtp_loss(Tape& tape, const Tensor& dtp_logits, const std::vector<TokenId>& original_ids) {
  // No id equals -1, so nothing is ignored.
  return cross_entropy(tape, dtp_logits, original_ids, -1);
}

LossReport joint_loss(double l_m, double l_rtd, double l_dtp, const ObjectiveConfig& config) {
  if (!std::isfinite(l_m)) throw DivergenceError("l_m", "translation loss l_m is not finite");
  if (!std::isfinite(l_rtd)) throw DivergenceError("l_rtd", "detection loss l_rtd is not finite");
  if (!std::isfinite(l_dtp)) throw DivergenceError("l_dtp", "prediction loss l_dtp is not finite");
  LossReport report;
  report.l_m = l_m;
  report.l_rtd = l_rtd;
  report.l_dtp = l_dtp;
  report.joint = combine_losses(l_m, config.alpha, l_rtd, config.beta, l_dtp);
  return report;
}

JointObjective joint_objective(Tape& tape, const LossTerm& l_m, const LossTerm& l_rtd,
                               const LossTerm& l_dtp, const ObjectiveConfig& config) {
  JointObjective out;
  out.report = joint_loss(l_m.value.item(), l_rtd.value.item(), l_dtp.value.item(), config);
  out.report.target_tokens = l_m.count;
  out.report.droppable_tokens = l_rtd.count;
  out.report.dropped_tokens = l_dtp.count;
  out.value = linear_combination(tape, l_m.value, config.alpha, l_rtd.value, config.beta, l_dtp.value);
  return out;
}

}  // namespace tokendrop
