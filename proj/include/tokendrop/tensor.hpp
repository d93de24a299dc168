#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tokendrop {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

struct TensorStorage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Dense row-major array of doubles.
//
// Tensor is a handle: copies share storage. Two parameters that are "tied"
// are simply two handles to the same storage. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double& operator[](std::size_t i) { return impl_->data[i]; }

  /// Value of a one-element tensor.
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
  /// Accumulated gradient; all zeros if nothing reached this tensor.
  std::vector<double> grad() const;
  std::span<double> grad_buffer() { return impl_->grad_buffer(); }
  void zero_grad();

  Tensor clone() const;
  bool shares_storage(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorStorage>& storage() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorStorage> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorStorage> impl_;
};

// Ordered record of differentiable operations.
//
// Operations append a closure that propagates the output gradient into the
// inputs. backward() replays the closures in exact reverse order. A tape
// constructed with recording disabled records nothing and produces tensors
// that never require gradients, which is how inference runs.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return entries_.size(); }

  /// True if gradients should flow into an op with these inputs.
  bool wants_grad(std::initializer_list<const Tensor*> inputs) const;

  /// Registers `output` as produced here and stores its backward closure.
  void record(const Tensor& output, std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded closure in reverse.
  /// Gradients accumulate into each requires_grad tensor's grad buffer.
  void backward(const Tensor& loss);

  /// Visit order of the last backward() call, as indices into the record.
  const std::vector<std::size_t>& last_backward_order() const { return visited_; }

 private:
  struct Entry {
    std::weak_ptr<detail::TensorStorage> output;
    std::function<void()> backward;
  };
  bool recording_;
  std::vector<Entry> entries_;
  std::vector<std::size_t> visited_;
};

}  // namespace tokendrop
