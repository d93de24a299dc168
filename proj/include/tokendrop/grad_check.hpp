#pragma once

#include <functional>
#include <span>

#include "tokendrop/tensor.hpp"

namespace tokendrop {

/// A scalar-valued function of tensors captured by the closure. It is called
/// once with a recording tape for the analytic gradient and repeatedly with
/// non-recording tapes for finite differences.
using ScalarFunction = std::function<Tensor(Tape&)>;

// Compares reverse-mode gradients against central differences
// (f(x+eps) - f(x-eps)) / (2 eps) coordinate by coordinate. Returns the max
// over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// `inputs` must have requires_grad set; their values are restored on return.
// The default step sits near the cube root of machine epsilon, where
// truncation and roundoff error are of the same order.
double grad_check(const ScalarFunction& f, std::span<Tensor> inputs, double eps = 1e-5);

/// Convenience overload for a function of a single tensor.
double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, Tensor x,
                  double eps = 1e-5);

}  // namespace tokendrop
