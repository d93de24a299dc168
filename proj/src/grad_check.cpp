#include "tokendrop/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "tokendrop/error.hpp"

namespace tokendrop {

double grad_check(const ScalarFunction& f, std::span<Tensor> inputs, double eps) {
  if (!(eps > 0.0)) throw ContractError("grad_check: eps must be positive");
  for (auto& x : inputs) {
    if (!x.requires_grad()) throw ContractError("grad_check: inputs must require gradients");
    x.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = f(tape);
    if (loss.size() != 1) throw ContractError("grad_check: function must be scalar-valued");
    if (tape.size() > 0 && loss.requires_grad()) tape.backward(loss);
    for (auto& x : inputs) analytic.push_back(x.grad());
  }

  auto evaluate = [&] {
    Tape quiet(false);
    return f(quiet).item();
  };

  double worst = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto values = inputs[t].data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = evaluate();
      values[i] = saved - eps;
      const double down = evaluate();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[t][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, Tensor x, double eps) {
  x.set_requires_grad(true);
  Tensor inputs[] = {x};
  return grad_check([&](Tape& tape) { return f(tape, x); }, inputs, eps);
}

}  // namespace tokendrop
