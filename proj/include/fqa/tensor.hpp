#pragma once

// Dense row-major float64 tensor with define-by-run reverse-mode autodiff.
//
// A Tensor is a cheap handle onto a shared node. Every op that has at least
// one parent with requires_grad records its parents plus a backward closure;
// otherwise no graph is kept. Gradients accumulate into leaves until
// zero_grad() is called.
//
// Broadcasting for add/sub/mul is limited to two cases: one operand holds a
// single element, or one operand's shape is a trailing suffix of the other's
// (it is repeated over the leading axes). Anything else throws.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fqa {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {
struct Node;
}

class Tensor;

/// While alive, ops on the current thread record no graph.
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

/// Gives a backward closure write access to the gradient buffers of the op's
/// parents. Returns an empty span for parents that do not need a gradient.
class GradAccess {
 public:
  explicit GradAccess(std::vector<detail::Node*> parents) : parents_(std::move(parents)) {}
  std::span<double> operator[](std::size_t parent) const;

 private:
  std::vector<detail::Node*> parents_;
};

using BackwardFn = std::function<void(std::span<const double> grad_out, const GradAccess& grads)>;

class Tensor {
 public:
  Tensor() = default;

  static Tensor create(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  /// Builds the result of a custom op. `backward` is recorded only when some
  /// parent requires a gradient.
  static Tensor from_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                        BackwardFn backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  /// Write access to a leaf's values (optimizer updates, finite differences).
  /// Throws for non-leaf tensors.
  std::span<double> mutable_values();

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  /// In-place gradient edits (clipping).
  std::span<double> mutable_grad();
  void zero_grad();

  /// Reverse pass from a scalar. Throws if this graph was already
  /// back-propagated.
  void backward() const;

  /// Same values, no graph, no gradient.
  Tensor detach() const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend class GradAccess;
};

// Elementwise and broadcasting arithmetic.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor neg(const Tensor& x);

Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
/// Throws std::domain_error on non-positive input.
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);

// Reductions to a scalar.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// (..., m, k) x (k, n) or (..., m, k) x (..., k, n) with identical leading
/// axes. A rank-1 left operand is a row vector, a rank-1 right operand a column
/// vector; the corresponding axis is dropped from the result.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Swaps the last two axes.
Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax_last(const Tensor& x);

/// Normalizes over the last axis, then applies gain and bias (both shaped as
/// the last axis).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

}  // namespace fqa
