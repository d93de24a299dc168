#pragma once

#include <cstddef>
#include <vector>

#include "tokendrop/corpus.hpp"
#include "tokendrop/ops.hpp"
#include "tokendrop/token_drop.hpp"

namespace tokendrop {

/// Weights of the auxiliary terms in the joint objective.
struct ObjectiveConfig {
  double alpha = 1.0;  // replaced token detection
  double beta = 1.0;   // dropped token prediction

  void validate() const;
};

struct LossReport {
  double l_m = 0.0;
  double l_rtd = 0.0;
  double l_dtp = 0.0;
  double joint = 0.0;
  std::size_t target_tokens = 0;
  std::size_t droppable_tokens = 0;
  std::size_t dropped_tokens = 0;

  double perplexity() const;
};

/// Token-level NLL averaged over non-pad target positions.
LossTerm translation_loss(Tape& tape, const Tensor& logits, const IdMatrix& target_output);

/// Binary cross-entropy of drop probabilities against the mask, averaged over
/// droppable positions (label 1 = dropped).
LossTerm rtd_loss(Tape& tape, const Tensor& probs, const BitMatrix& mask, const BitMatrix& droppable);

/// NLL of the original token at each dropped position; zero with no_signal
/// when nothing was dropped.
LossTerm dtp_loss(Tape& tape, const Tensor& dtp_logits, const std::vector<TokenId>& original_ids);

/// Builds the report, checking that every component is finite. The joint
/// value uses combine_losses, the same arithmetic as the differentiable sum.
LossReport joint_loss(double l_m, double l_rtd, double l_dtp, const ObjectiveConfig& config);

struct JointObjective {
  Tensor value;
  LossReport report;
};

/// Differentiable joint objective plus its report (value == report.joint bitwise).
JointObjective joint_objective(Tape& tape, const LossTerm& l_m, const LossTerm& l_rtd,
                               const LossTerm& l_dtp, const ObjectiveConfig& config);

}  // namespace tokendrop
