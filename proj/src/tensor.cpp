#include "tokendrop/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "tokendrop/error.hpp"

namespace tokendrop {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << " x ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  // Only the leading axis may be empty (e.g. logits for zero dropped tokens).
  for (std::size_t i = 1; i < shape.size(); ++i) {
    if (shape[i] == 0) throw DimensionError("zero-sized axis in shape " + shape_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  impl_ = std::make_shared<detail::TensorStorage>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

std::vector<double> Tensor::grad() const {
  if (has_grad()) return impl_->grad;
  return std::vector<double>(size(), 0.0);
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  return Tensor(impl_->shape, impl_->data, impl_->requires_grad);
}

bool Tape::wants_grad(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->defined() && t->requires_grad(); });
}

void Tape::record(const Tensor& output, std::function<void()> backward) {
  if (!recording_) return;
  entries_.push_back({output.storage(), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  const auto produced = std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) {
    return e.output.lock() == loss.storage();
  });
  if (!produced) throw ContractError("backward() called on a loss that was not recorded on this tape");

  loss.storage()->grad_buffer()[0] += 1.0;
  visited_.clear();
  visited_.reserve(entries_.size());
  for (std::size_t i = entries_.size(); i-- > 0;) {
    visited_.push_back(i);
    auto out = entries_[i].output.lock();
    // Outputs with no gradient buffer are not upstream of the loss.
    if (!out || out->grad.size() != out->data.size()) continue;
    entries_[i].backward();
  }
}

}  // namespace tokendrop
