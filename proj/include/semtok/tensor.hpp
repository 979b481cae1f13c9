#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// Every op records its parents and a backward closure on the output node when
// at least one input requires a gradient. Nodes carry a monotonically
// increasing creation id; Tensor::backward() collects the reachable subgraph
// and visits it in reverse creation order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace semtok {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writable access for parameter updates and test fixtures. Mutating a tensor
  // that is already part of a recorded graph invalidates that graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Seeds d(self)/d(self) = 1 and propagates. Requires a single-element tensor.
  void backward() const;

  // Same storage values, no history.
  Tensor detach() const;
  Tensor clone() const;

  // Internal: used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Boolean mask with its own shape. Used by softmax for key-side validity.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> values;

  static Mask from(Shape shape, std::vector<std::uint8_t> values);
};

// ---------------------------------------------------------------------------
// Ops. All ops are differentiable in their Tensor arguments unless noted.

Tensor matmul(const Tensor& a, const Tensor& b);
// Batched product over a leading batch axis: [B,m,k]·[B,k,n] -> [B,m,n].
// With transpose_b the second operand is read as [B,n,k].
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Elementwise with numpy-style broadcasting over equal-rank operands
// (a size-1 axis broadcasts). Lower-rank operands are left-padded with 1s.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor exp(const Tensor& x);
Tensor ln(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor clamp_max(const Tensor& x, double upper);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Normalizes each last-axis row to zero mean and unit variance (no affine).
Tensor layer_norm(const Tensor& x, double eps = 1e-5);
Tensor cumsum_lastdim(const Tensor& x);
// Divides each last-axis row by its Euclidean norm.
Tensor normalize_rows(const Tensor& x);

// Mask shape must be [G, n] (or [n]) where n is x's last extent and G divides
// the number of rows of x; consecutive row blocks share one mask row.
// Masked entries get probability exactly 0.
Tensor softmax_lastdim(const Tensor& x, const Mask* mask = nullptr);
Tensor log_softmax_lastdim(const Tensor& x);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor transpose(const Tensor& x);  // 2-D only
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor diagonal(const Tensor& x);  // square 2-D -> 1-D

// Row lookup: table [V, D], ids -> [ids.size(), D]. Gradient scatters back.
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);
// Same as embedding on a 2-D input; kept separate for readability at call sites.
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);
// out[i] = table[index[i]] for index[i] > 0, and exactly 0 where index[i] == 0.
Tensor take_nonzero(const Tensor& table, std::span<const std::uint8_t> index, Shape out_shape);

// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "<param index>[<coordinate>]" of the worst coordinate
  bool passed = false;
};

// Compares reverse-mode gradients of a scalar function against central finite
// differences over every coordinate of every parameter. Relative error is
// |analytic - numeric| / max(|analytic|, |numeric|, floor).
GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                           double step, double tol, double floor = 1e-6);

}  // namespace semtok
