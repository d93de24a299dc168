#include "tokendrop/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "tokendrop/error.hpp"

namespace tokendrop {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using Storage = std::shared_ptr<detail::TensorStorage>;

ConstMatrixMap as_matrix(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MatrixMap as_matrix(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return MatrixMap(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

// Products run on owned copies. Eigen picks its vectorized summation order from
// operand alignment, and std::vector buffers are not reliably aligned, so
// products straight over them can differ in the last bit between runs.
RowMatrix aligned(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return as_matrix(v, rows, cols);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

Tensor new_output(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

// Gradient of the output; only called from backward closures, where the tape
// guarantees the buffer exists.
const std::vector<double>& out_grad(const Storage& s) { return s->grad; }

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  if (m > 0) {
    const RowMatrix product = aligned(a.storage()->data, m, k) * aligned(b.storage()->data, k, n);
    as_matrix(out, m, n) = product;
  }
  const bool grad = tape.wants_grad({&a, &b});
  Tensor result = new_output({m, n}, std::move(out), grad);
  if (grad) {
    tape.record(result, [sa = a.storage(), sb = b.storage(), so = result.storage(), m, k, n] {
      if (m == 0) return;
      const RowMatrix dout = aligned(out_grad(so), m, n);
      if (sa->requires_grad) {
        const RowMatrix ga = dout * aligned(sb->data, k, n).transpose();
        as_matrix(sa->grad_buffer(), m, k) += ga;
      }
      if (sb->requires_grad) {
        const RowMatrix gb = aligned(sa->data, m, k).transpose() * dout;
        as_matrix(sb->grad_buffer(), k, n) += gb;
      }
    });
  }
  return result;
}

Tensor transpose(Tape& tape, const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto& in = a.storage()->data;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
  const bool grad = tape.wants_grad({&a});
  Tensor result = new_output({n, m}, std::move(out), grad);
  if (grad) {
    tape.record(result, [sa = a.storage(), so = result.storage(), m, n] {
      auto& ga = sa->grad_buffer();
      const auto& go = out_grad(so);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
    });
  }
  return result;
}

namespace {

template <typename Forward, typename GradA, typename GradB>
Tensor elementwise_binary(Tape& tape, const Tensor& a, const Tensor& b, const char* op,
                          Forward forward, GradA grad_a, GradB grad_b) {
  require_same_shape(a, b, op);
  const auto& da = a.storage()->data;
  const auto& db = b.storage()->data;
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(da[i], db[i]);
  const bool grad = tape.wants_grad({&a, &b});
  Tensor result = new_output(a.shape(), std::move(out), grad);
  if (grad) {
    tape.record(result, [sa = a.storage(), sb = b.storage(), so = result.storage(), grad_a, grad_b] {
      const auto& go = out_grad(so);
      if (sa->requires_grad) {
        auto& ga = sa->grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += grad_a(go[i], sa->data[i], sb->data[i]);
      }
      if (sb->requires_grad) {
        auto& gb = sb->grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += grad_b(go[i], sa->data[i], sb->data[i]);
      }
    });
  }
  return result;
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      tape, a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      tape, a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      tape, a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  const bool grad = tape.wants_grad({&a});
  Tensor result = new_output(a.shape(), std::move(out), grad);
  if (grad) {
    tape.record(result, [sa = a.storage(), so = result.storage(), factor] {
      auto& ga = sa->grad_buffer();
      const auto& go = out_grad(so);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * factor;
    });
  }
  return result;
}

Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.size() != n) {
    throw DimensionError("add_bias: bias " + shape_string(bias.shape()) + " does not match " +
                         shape_string(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto& db = bias.storage()->data;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += db[j];
  const bool grad = tape.wants_grad({&x, &bias});
  Tensor result = new_output(x.shape(), std::move(out), grad);
  if (grad) {
    tape.record(result, [sx = x.storage(), sb = bias.storage(), so = result.storage(), m, n] {
      const auto& go = out_grad(so);
      if (sx->requires_grad) {
        auto& gx = sx->grad_buffer();
        for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
      }
      if (sb->requires_grad) {
        auto& gb = sb->grad_buffer();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
      }
    });
  }
  return result;
}

Tensor scale_rows(Tape& tape, const Tensor& x, std::span<const double> factors) {
  require_rank(x, 2, "scale_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (factors.size() != m) throw DimensionError("scale_rows: one factor per row required");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= factors[i];
  const bool grad = tape.wants_grad({&x});
  Tensor result = new_output(x.shape(), std::move(out), grad);
  if (grad) {
    std::vector<double> f(factors.begin(), factors.end());
    tape.record(result, [sx = x.storage(), so = result.storage(), f = std::move(f), n] {
      auto& gx = sx->grad_buffer();
      const auto& go = out_grad(so);
      for (std::size_t i = 0; i < f.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[i * n + j] * f[i];
    });
  }
  return result;
}

Tensor relu(Tape& tape, const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  const bool grad = tape.wants_grad({&x});
  Tensor result = new_output(x.shape(), std::move(out), grad);
  if (grad) {
    tape.record(result, [sx = x.storage(), so = result.storage()] {
      auto& gx = sx->grad_buffer();
      const auto& go = out_grad(so);
      for (std::size_t i = 0; i < go.size(); ++i)
        if (sx->data[i] > 0.0) gx[i] += go[i];
    });
  }
  return result;
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
  std::vector<double> out(x.size());
  const auto& dx = x.storage()->data;
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Branch on sign so exp never overflows.
    const double v = dx[i];
    if (v >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out[i] = e / (1.0 + e);
    }
  }
  const bool grad = tape.wants_grad({&x});
  Tensor result = new_output(x.shape(), std::move(out), grad);
  if (grad) {
    tape.record(result, [sx = x.storage(), so = result.storage()] {
      auto& gx = sx->grad_buffer();
      const auto& go = out_grad(so);
      const auto& y = so->data;
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * y[i] * (1.0 - y[i]);
    });
  }
  return result;
}

Tensor softmax(Tape& tape, const Tensor& x, int axis) {
  const auto rank = static_cast<int>(x.rank());
  if (axis < -rank || axis >= rank) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(x.shape()));
  }
  const auto ax = static_cast<std::size_t>(axis < 0 ? axis + rank : axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.dim(i);
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(ax);

  const auto& in = x.storage()->data;
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, in[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(in[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  const bool grad = tape.wants_grad({&x});
  Tensor result = new_output(x.shape(), std::move(out), grad);
  if (grad) {
    tape.record(result, [sx = x.storage(), so = result.storage(), outer, inner, len] {
      auto& gx = sx->grad_buffer();
      const auto& go = out_grad(so);
      const auto& y = so->data;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * len * inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += go[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t idx = base + j * inner;
            gx[idx] += y[idx] * (go[idx] - dot);
          }
        }
      }
    });
  }
  return result;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t n = x.shape().back();
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain/bias of size " + std::to_string(gain.size()) + "/" +
                         std::to_string(bias.size()) + " do not match last axis of " +
                         shape_string(x.shape()));
  }
  const std::size_t rows = x.size() / n;
  const auto& in = x.storage()->data;
  const auto& g = gain.storage()->data;
  const auto& b = bias.storage()->data;
  std::vector<double> out(in.size());
  std::vector<double> normalized(in.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    inv_std[r] = rstd;
    for (std::size_t j = 0; j < n; ++j) {
      const double xhat = (row[j] - mu) * rstd;
      normalized[r * n + j] = xhat;
      out[r * n + j] = xhat * g[j] + b[j];
    }
  }
  const bool grad = tape.wants_grad({&x, &gain, &bias});
  Tensor result = new_output(x.shape(), std::move(out), grad);
  if (grad) {
    tape.record(result, [sx = x.storage(), sg = gain.storage(), sb = bias.storage(),
                         so = result.storage(), normalized = std::move(normalized),
                         inv_std = std::move(inv_std), rows, n] {
      const auto& go = out_grad(so);
      if (sg->requires_grad) {
        auto& gg = sg->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gg[j] += go[r * n + j] * normalized[r * n + j];
      }
      if (sb->requires_grad) {
        auto& gb = sb->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) gb[j] += go[r * n + j];
      }
      if (sx->requires_grad) {
        auto& gx = sx->grad_buffer();
        const auto& gain_v = sg->data;
        const double inv_n = 1.0 / static_cast<double>(n);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = go[r * n + j] * gain_v[j];
            mean_d += d;
            mean_dx += d * normalized[r * n + j];
          }
          mean_d *= inv_n;
          mean_dx *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = go[r * n + j] * gain_v[j];
            gx[r * n + j] += inv_std[r] * (d - mean_d - normalized[r * n + j] * mean_dx);
          }
        }
      }
    });
  }
  return result;
}

Tensor sum(Tape& tape, const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  const bool grad = tape.wants_grad({&x});
  Tensor result = new_output({1}, {total}, grad);
  if (grad) {
    tape.record(result, [sx = x.storage(), so = result.storage()] {
      auto& gx = sx->grad_buffer();
      const double g = out_grad(so)[0];
      for (auto& v : gx) v += g;
    });
  }
  return result;
}

Tensor mean(Tape& tape, const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean of an empty tensor");
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.size()));
}

Tensor gather_rows(Tape& tape, const Tensor& table, std::span<const std::int32_t> ids) {
  require_rank(table, 2, "gather_rows");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  const auto& src = table.storage()->data;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                           std::to_string(vocab) + " rows");
    }
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  const bool grad = tape.wants_grad({&table});
  Tensor result = new_output({ids.size(), d}, std::move(out), grad);
  if (grad) {
    std::vector<std::int32_t> idx(ids.begin(), ids.end());
    tape.record(result, [st = table.storage(), so = result.storage(), idx = std::move(idx), d] {
      auto& gt = st->grad_buffer();
      const auto& go = out_grad(so);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const std::size_t row = static_cast<std::size_t>(idx[i]) * d;
        for (std::size_t j = 0; j < d; ++j) gt[row + j] += go[i * d + j];
      }
    });
  }
  return result;
}

Tensor dropout(Tape& tape, const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout probability must be in [0, 1)");
  if (p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> factors(x.size());
  for (auto& f : factors) f = rng.bernoulli(p) ? 0.0 : keep_scale;
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factors[i];
  const bool grad = tape.wants_grad({&x});
  Tensor result = new_output(x.shape(), std::move(out), grad);
  if (grad) {
    tape.record(result, [sx = x.storage(), so = result.storage(), factors = std::move(factors)] {
      auto& gx = sx->grad_buffer();
      const auto& go = out_grad(so);
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * factors[i];
    });
  }
  return result;
}

LossTerm cross_entropy(Tape& tape, const Tensor& logits, std::span<const std::int32_t> targets,
                       std::int32_t ignore_id) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         shape_string(logits.shape()) + " logits");
  }
  const auto& z = logits.storage()->data;
  std::vector<double> probs(z.size(), 0.0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == ignore_id) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= classes) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[i]) +
                           " outside [0, " + std::to_string(classes) + ")");
    }
    const double* row = z.data() + i * classes;
    const double mx = *std::max_element(row, row + classes);
    double denom = 0.0;
    for (std::size_t j = 0; j < classes; ++j) {
      const double e = std::exp(row[j] - mx);
      probs[i * classes + j] = e;
      denom += e;
    }
    for (std::size_t j = 0; j < classes; ++j) probs[i * classes + j] /= denom;
    total += -(row[targets[i]] - mx - std::log(denom));
    ++count;
  }
  LossTerm term;
  term.count = count;
  term.no_signal = count == 0;
  const double value = count == 0 ? 0.0 : total / static_cast<double>(count);
  const bool grad = tape.wants_grad({&logits}) && count > 0;
  term.value = new_output({1}, {value}, grad);
  if (grad) {
    std::vector<std::int32_t> t(targets.begin(), targets.end());
    tape.record(term.value, [sl = logits.storage(), so = term.value.storage(),
                             probs = std::move(probs), t = std::move(t), ignore_id, classes, count] {
      auto& gl = sl->grad_buffer();
      const double g = out_grad(so)[0] / static_cast<double>(count);
      for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] == ignore_id) continue;
        for (std::size_t j = 0; j < classes; ++j) gl[i * classes + j] += g * probs[i * classes + j];
        gl[i * classes + static_cast<std::size_t>(t[i])] -= g;
      }
    });
  }
  return term;
}

LossTerm binary_cross_entropy(Tape& tape, const Tensor& probs, std::span<const double> labels,
                              std::span<const std::uint8_t> include) {
  const std::size_t n = probs.size();
  if (labels.size() != n || include.size() != n) {
    throw DimensionError("binary_cross_entropy: labels/include sizes do not match probabilities " +
                         shape_string(probs.shape()));
  }
  const auto& p = probs.storage()->data;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!include[i]) continue;
    const double q = std::clamp(p[i], kProbabilityClip, 1.0 - kProbabilityClip);
    total += -(labels[i] * std::log(q) + (1.0 - labels[i]) * std::log(1.0 - q));
    ++count;
  }
  LossTerm term;
  term.count = count;
  term.no_signal = count == 0;
  const double value = count == 0 ? 0.0 : total / static_cast<double>(count);
  const bool grad = tape.wants_grad({&probs}) && count > 0;
  term.value = new_output({1}, {value}, grad);
  if (grad) {
    std::vector<double> y(labels.begin(), labels.end());
    std::vector<std::uint8_t> inc(include.begin(), include.end());
    tape.record(term.value, [sp = probs.storage(), so = term.value.storage(), y = std::move(y),
                             inc = std::move(inc), count] {
      auto& gp = sp->grad_buffer();
      const double g = out_grad(so)[0] / static_cast<double>(count);
      for (std::size_t i = 0; i < y.size(); ++i) {
        if (!inc[i]) continue;
        const double q = sp->data[i];
        if (q < kProbabilityClip || q > 1.0 - kProbabilityClip) continue;  // clipped: flat
        gp[i] += g * (-(y[i] / q) + (1.0 - y[i]) / (1.0 - q));
      }
    });
  }
  return term;
}

double combine_losses(double a, double alpha, double b, double beta, double c) {
  return a + alpha * b + beta * c;
}

Tensor linear_combination(Tape& tape, const Tensor& a, double alpha, const Tensor& b, double beta,
                          const Tensor& c) {
  if (a.size() != 1 || b.size() != 1 || c.size() != 1) {
    throw DimensionError("linear_combination expects scalar inputs");
  }
  const double value = combine_losses(a.item(), alpha, b.item(), beta, c.item());
  const bool grad = tape.wants_grad({&a, &b, &c});
  Tensor result = new_output({1}, {value}, grad);
  if (grad) {
    tape.record(result, [sa = a.storage(), sb = b.storage(), sc = c.storage(),
                         so = result.storage(), alpha, beta] {
      const double g = out_grad(so)[0];
      if (sa->requires_grad) sa->grad_buffer()[0] += g;
      if (sb->requires_grad) sb->grad_buffer()[0] += alpha * g;
      if (sc->requires_grad) sc->grad_buffer()[0] += beta * g;
    });
  }
  return result;
}

Tensor attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                 const AttentionLayout& layout, std::span<const std::uint8_t> key_valid) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_rank(v, 2, "attention");
  const std::size_t B = layout.batch, Tq = layout.query_len, Tk = layout.key_len, H = layout.heads;
  const std::size_t d = q.dim(1);
  if (q.dim(0) != B * Tq || k.dim(0) != B * Tk || v.dim(0) != B * Tk || k.dim(1) != d ||
      v.dim(1) != d) {
    throw DimensionError("attention: q " + shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()) +
                         " inconsistent with layout");
  }
  if (H == 0 || d % H != 0) throw DimensionError("attention: width not divisible by heads");
  if (key_valid.size() != B * Tk) throw DimensionError("attention: key mask size mismatch");
  const std::size_t dh = d / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  const auto& qd = q.storage()->data;
  const auto& kd = k.storage()->data;
  const auto& vd = v.storage()->data;
  std::vector<double> out(B * Tq * d, 0.0);
  // probs laid out [b][h][i][j]
  std::vector<double> probs(B * H * Tq * Tk, 0.0);
  std::vector<double> scores(Tk);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < Tq; ++i) {
        const double* qi = qd.data() + (b * Tq + i) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < Tk; ++j) {
          const bool visible = key_valid[b * Tk + j] && (!layout.causal || j <= i);
          if (!visible) {
            scores[j] = -std::numeric_limits<double>::infinity();
            continue;
          }
          const double* kj = kd.data() + (b * Tk + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) {
          throw ContractError("attention: a query has no visible keys");
        }
        double* p = probs.data() + ((b * H + h) * Tq + i) * Tk;
        double total = 0.0;
        for (std::size_t j = 0; j < Tk; ++j) {
          p[j] = std::exp(scores[j] - mx);
          total += p[j];
        }
        double* oi = out.data() + (b * Tq + i) * d + h * dh;
        for (std::size_t j = 0; j < Tk; ++j) {
          p[j] /= total;
          if (p[j] == 0.0) continue;
          const double* vj = vd.data() + (b * Tk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  const bool grad = tape.wants_grad({&q, &k, &v});
  Tensor result = new_output({B * Tq, d}, std::move(out), grad);
  if (grad) {
    tape.record(result, [sq = q.storage(), sk = k.storage(), sv = v.storage(),
                         so = result.storage(), probs = std::move(probs), B, Tq, Tk, H, d, dh,
                         inv_sqrt] {
      const auto& go = out_grad(so);
      const auto& qd = sq->data;
      const auto& kd = sk->data;
      const auto& vd = sv->data;
      std::vector<double> scratch_q(qd.size(), 0.0), scratch_k(kd.size(), 0.0),
          scratch_v(vd.size(), 0.0);
      std::vector<double> dp(Tk);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          for (std::size_t i = 0; i < Tq; ++i) {
            const double* p = probs.data() + ((b * H + h) * Tq + i) * Tk;
            const double* gi = go.data() + (b * Tq + i) * d + h * dh;
            double weighted = 0.0;
            for (std::size_t j = 0; j < Tk; ++j) {
              if (p[j] == 0.0) {
                dp[j] = 0.0;
                continue;
              }
              const double* vj = vd.data() + (b * Tk + j) * d + h * dh;
              double* gvj = scratch_v.data() + (b * Tk + j) * d + h * dh;
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) {
                s += gi[c] * vj[c];
                gvj[c] += p[j] * gi[c];
              }
              dp[j] = s;
              weighted += p[j] * s;
            }
            const double* qi = qd.data() + (b * Tq + i) * d + h * dh;
            double* gqi = scratch_q.data() + (b * Tq + i) * d + h * dh;
            for (std::size_t j = 0; j < Tk; ++j) {
              if (p[j] == 0.0) continue;
              const double ds = p[j] * (dp[j] - weighted) * inv_sqrt;
              const double* kj = kd.data() + (b * Tk + j) * d + h * dh;
              double* gkj = scratch_k.data() + (b * Tk + j) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) {
                gqi[c] += ds * kj[c];
                gkj[c] += ds * qi[c];
              }
            }
          }
        }
      }
      auto accumulate = [](const std::shared_ptr<detail::TensorStorage>& s,
                           const std::vector<double>& g) {
        if (!s->requires_grad) return;
        auto& buf = s->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
      };
      // q, k and v may alias (self-attention on one tensor), so accumulate after.
      accumulate(sq, scratch_q);
      accumulate(sk, scratch_k);
      accumulate(sv, scratch_v);
    });
  }
  return result;
}

}  // namespace tokendrop
