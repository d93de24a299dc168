#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tokendrop/rng.hpp"
#include "tokendrop/tensor.hpp"

// Differentiable operations. Every op takes the tape it records onto; passing
// a non-recording tape evaluates without building a graph.
namespace tokendrop {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kProbabilityClip = 1e-7;

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& a);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);

/// x[m x n] + bias[n] broadcast over rows.
Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias);

/// x[m x n] with row i multiplied by the constant factors[i].
Tensor scale_rows(Tape& tape, const Tensor& x, std::span<const double> factors);

Tensor relu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);

/// Max-subtracted softmax along `axis`.
Tensor softmax(Tape& tape, const Tensor& x, int axis);

/// Normalizes over the last axis, then applies gain and bias.
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = kLayerNormEps);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

/// Rows of table[V x d] selected by ids, giving [ids.size() x d].
Tensor gather_rows(Tape& tape, const Tensor& table, std::span<const std::int32_t> ids);

/// Inverted dropout. Identity when p == 0 (and no rng draws are made).
Tensor dropout(Tape& tape, const Tensor& x, double p, Rng& rng);

/// Scalar loss plus bookkeeping. `no_signal` marks a loss that had nothing to
/// average over and was defined as zero.
struct LossTerm {
  Tensor value;
  std::size_t count = 0;
  bool no_signal = false;
};

/// Mean over non-ignored rows of -log softmax(logits)[target].
LossTerm cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::int32_t> targets,
                       std::int32_t ignore_id);

/// Mean binary cross-entropy over positions with include != 0. Probabilities
/// are clipped to [kProbabilityClip, 1 - kProbabilityClip].
LossTerm binary_cross_entropy(Tape& tape, const Tensor& probs, std::span<const double> labels,
                              std::span<const std::uint8_t> include);

/// The shared arithmetic for joint objectives: ((a + alpha*b) + beta*c).
double combine_losses(double a, double alpha, double b, double beta, double c);

/// Scalar tensor combine_losses(a, alpha, b, beta, c) with matching gradient.
Tensor linear_combination(Tape& tape, const Tensor& a, double alpha, const Tensor& b,
                          double beta, const Tensor& c);

struct AttentionLayout {
  std::size_t batch = 0;
  std::size_t query_len = 0;
  std::size_t key_len = 0;
  std::size_t heads = 1;
  bool causal = false;
};

/// Scaled dot-product multi-head attention.
///
/// q is [batch*query_len x d], k and v are [batch*key_len x d]; rows are
/// grouped by batch entry. Heads split d into equal contiguous slices.
/// key_valid[b*key_len + j] == 0 hides key j from every query of entry b.
/// With `causal`, query i only sees keys j <= i. Every query must see at
/// least one key.
Tensor attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                 const AttentionLayout& layout, std::span<const std::uint8_t> key_valid);

}  // namespace tokendrop
