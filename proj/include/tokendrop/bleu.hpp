#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <vector>

#include "tokendrop/error.hpp"

namespace tokendrop {

inline constexpr std::size_t kBleuOrder = 4;

struct BleuReport {
  double bleu = 0.0;                           // [0, 100]
  std::array<double, kBleuOrder> precisions{};  // modified n-gram precisions p1..p4
  std::array<std::size_t, kBleuOrder> matches{};
  std::array<std::size_t, kBleuOrder> totals{};
  double brevity_penalty = 0.0;
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;
};

/// Corpus-level single-reference BLEU with clipped n-gram counts up to 4-grams.
/// Any zero precision makes the score 0 (no smoothing).
template <typename Token>
BleuReport corpus_bleu(const std::vector<std::vector<Token>>& hypotheses,
                       const std::vector<std::vector<Token>>& references) {
  if (hypotheses.empty()) throw ContractError("corpus_bleu needs at least one sentence");
  if (hypotheses.size() != references.size()) {
    throw DimensionError("corpus_bleu got " + std::to_string(hypotheses.size()) +
                         " hypotheses for " + std::to_string(references.size()) + " references");
  }
  BleuReport report;
  std::map<std::vector<Token>, std::size_t> ref_counts;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& hyp = hypotheses[s];
    const auto& ref = references[s];
    report.hypothesis_length += hyp.size();
    report.reference_length += ref.size();
    for (std::size_t n = 1; n <= kBleuOrder; ++n) {
      if (hyp.size() < n) break;
      report.totals[n - 1] += hyp.size() - n + 1;
      ref_counts.clear();
      for (std::size_t i = 0; i + n <= ref.size(); ++i) {
        ++ref_counts[std::vector<Token>(ref.begin() + i, ref.begin() + i + n)];
      }
      std::map<std::vector<Token>, std::size_t> hyp_counts;
      for (std::size_t i = 0; i + n <= hyp.size(); ++i) {
        ++hyp_counts[std::vector<Token>(hyp.begin() + i, hyp.begin() + i + n)];
      }
      for (const auto& [gram, count] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) report.matches[n - 1] += std::min(count, it->second);
      }
    }
  }

  double log_sum = 0.0;
  bool any_zero = false;
  for (std::size_t n = 0; n < kBleuOrder; ++n) {
    report.precisions[n] = report.totals[n] == 0 ? 0.0
                                                 : static_cast<double>(report.matches[n]) /
                                                       static_cast<double>(report.totals[n]);
    if (report.precisions[n] == 0.0) {
      any_zero = true;
    } else {
      log_sum += std::log(report.precisions[n]);
    }
  }
  const auto hyp_len = static_cast<double>(report.hypothesis_length);
  const auto ref_len = static_cast<double>(report.reference_length);
  if (report.hypothesis_length == 0) {
    report.brevity_penalty = 0.0;
  } else if (report.hypothesis_length >= report.reference_length) {
    report.brevity_penalty = 1.0;
  } else {
    report.brevity_penalty = std::exp(1.0 - ref_len / hyp_len);
  }
  if (!any_zero) {
    report.bleu = 100.0 * report.brevity_penalty * std::exp(log_sum / static_cast<double>(kBleuOrder));
  }
  return report;
}

}  // namespace tokendrop
