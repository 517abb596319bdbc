#pragma once

// Double-precision tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle to row-major storage. Operations on tensors that
// participate in differentiation (requires_grad, or produced from such
// tensors) link their result to a backward node; Tensor::backward() orders
// those nodes topologically and runs each local rule once, summing gradient
// contributions into shared inputs.

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace advdistill {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
struct Node;
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access. Mutating a tensor that is already part of a recorded
  // graph invalidates that graph's saved values.
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Same storage values, no history, requires_grad false.
  Tensor detach() const;
  // Deep copy of the values, no history.
  Tensor clone() const;

  // Accumulates d(this)/d(t) into every participating leaf. This tensor must
  // be a scalar (numel 1).
  void backward() const;

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend struct TensorAccess;

  std::shared_ptr<detail::TensorImpl> impl_;
};

// Topologically ordered backward nodes reachable from a loss. Inputs of every
// node precede it; backward() walks the order in reverse.
class GradTape {
 public:
  static GradTape record(const Tensor& loss);

  std::size_t size() const { return order_.size(); }
  // True when every node's inputs appear earlier in the order.
  bool is_topological() const;
  void run_backward(const Tensor& loss) const;

 private:
  std::vector<std::shared_ptr<detail::TensorImpl>> order_;
};

// While alive, operations on this thread record no history.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

enum class Mode { train, eval };

// ---- operations ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// x[N x M] + bias[M], bias broadcast over rows.
Tensor add_row(const Tensor& x, const Tensor& bias);
// x[N x C x H x W] + bias[C], bias broadcast over batch and space.
Tensor add_channel(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& t, double factor);
Tensor add_scalar(const Tensor& t, double value);
Tensor neg(const Tensor& t);
Tensor square(const Tensor& t);
Tensor abs(const Tensor& t);
Tensor sum(const Tensor& t);
Tensor mean(const Tensor& t);
// Per-row sum of an N x M matrix, giving N x 1.
Tensor row_sum(const Tensor& t);

Tensor reshape(const Tensor& t, const Shape& shape);
// N x ... -> N x prod(...)
Tensor flatten(const Tensor& t);
// Stacks matrices with equal column count along rows.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end);

Tensor relu(const Tensor& t);
Tensor sigmoid(const Tensor& t);
Tensor softmax(const Tensor& t, double temperature = 1.0);
Tensor log_softmax(const Tensor& t, double temperature = 1.0);
// Elementwise clamp to [lo, hi]; gradient is zero where clamped.
Tensor clamp(const Tensor& t, double lo, double hi);
// Natural log of max(x, floor); gradient is zero where the floor applies.
Tensor log(const Tensor& t, double floor = 1e-12);

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding);
// Mean over kernel x kernel windows; output N x C x H' x W'.
Tensor avg_pool2d(const Tensor& input, std::size_t kernel, std::size_t stride);
// Mean over all spatial positions: N x C x H x W -> N x C.
Tensor global_avg_pool(const Tensor& input);

// Inverted dropout. Eval mode (or rate 0) returns the input unchanged.
Tensor dropout(const Tensor& t, double rate, Mode mode, std::mt19937_64* rng);

std::size_t conv_output_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad);

}  // namespace advdistill
