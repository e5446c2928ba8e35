#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "stc/rng.hpp"

namespace stc {

// Dense 2-D tensor of 64-bit floats in row-major order. A Tensor is a cheap
// handle: copies share storage, so the optimizer can update parameters in
// place while closures recorded on a tape see the same buffers. Scalars are
// 1x1, row vectors 1xN, column vectors Nx1.
class Tensor {
 public:
  Tensor() : rows_(0), cols_(0) {}

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false);
  static Tensor full(std::size_t rows, std::size_t cols, double value, bool requires_grad = false);
  static Tensor from(std::vector<double> values, std::size_t rows, std::size_t cols,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor row(std::vector<double> values, bool requires_grad = false);
  static Tensor col(std::vector<double> values, bool requires_grad = false);
  // Glorot-uniform init in +-sqrt(6/(fan_in+fan_out)).
  static Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return rows_ * cols_; }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }
  bool same_shape(const Tensor& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols_ + c]; }
  double& at(std::size_t r, std::size_t c) { return (*data_)[r * cols_ + c]; }
  const std::vector<double>& data() const { return *data_; }
  std::vector<double>& data() { return *data_; }

  bool requires_grad() const { return grad_ != nullptr; }
  // Allocates (or drops) the gradient buffer.
  void set_requires_grad(bool on);
  const std::vector<double>& grad() const;
  std::vector<double>& grad();
  void zero_grad();

  // Value of a 1x1 tensor.
  double item() const;
  // Deep copy with fresh storage; gradient state is not copied.
  Tensor clone() const;
  // Same values, detached from any gradient bookkeeping.
  Tensor detach() const;

  // Throws NumericError naming `what` if any element is NaN or infinite.
  void assert_finite(const std::string& what) const;

 private:
  Tensor(std::size_t rows, std::size_t cols, std::shared_ptr<std::vector<double>> data,
         std::shared_ptr<std::vector<double>> grad)
      : rows_(rows), cols_(cols), data_(std::move(data)), grad_(std::move(grad)) {}

  std::size_t rows_, cols_;
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
};

// Reverse-mode tape. Ops append one closure per primitive in execution order;
// backward() runs them in exact reverse and may be called once.
class Tape {
 public:
  void record(std::function<void()> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
  // `loss` must be scalar and carry a gradient buffer.
  void backward(Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

enum class Activation { relu, gelu };

// ---- primitive operations -------------------------------------------------
// Every op takes the tape first; pass nullptr to run without recording
// (outputs are then detached from autodiff entirely).

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape* tape, const Tensor& a);

// Elementwise with broadcasting: shapes must match, or one operand may be a
// 1xN row, an Mx1 column, or a 1x1 scalar against an MxN tensor.
Tensor add(Tape* tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tape, const Tensor& a, const Tensor& b);
Tensor divide(Tape* tape, const Tensor& a, const Tensor& b);

Tensor neg(Tape* tape, const Tensor& a);
Tensor scale(Tape* tape, const Tensor& a, double c);
Tensor add_const(Tape* tape, const Tensor& a, double c);

Tensor exp_(Tape* tape, const Tensor& a);
Tensor log_(Tape* tape, const Tensor& a);
Tensor log1p_(Tape* tape, const Tensor& a);
Tensor sqrt_(Tape* tape, const Tensor& a);
Tensor sigmoid(Tape* tape, const Tensor& a);
Tensor relu(Tape* tape, const Tensor& a);
Tensor gelu(Tape* tape, const Tensor& a);
Tensor lgamma_(Tape* tape, const Tensor& a);
Tensor clamp(Tape* tape, const Tensor& a, double lo, double hi);
Tensor logaddexp(Tape* tape, const Tensor& a, const Tensor& b);

// Row-stabilized softmax; each output row is nonnegative and sums to 1.
Tensor softmax_rows(Tape* tape, const Tensor& a);
// Row-wise log(sum(exp(.))) -> Mx1.
Tensor logsumexp_rows(Tape* tape, const Tensor& a);

Tensor sum_all(Tape* tape, const Tensor& a);   // -> 1x1
Tensor mean_all(Tape* tape, const Tensor& a);  // -> 1x1
Tensor sum_rows(Tape* tape, const Tensor& a);  // -> Mx1
Tensor sum_cols(Tape* tape, const Tensor& a);  // -> 1xN

Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts);
// Columns [start, start+len) as a new tensor.
Tensor slice_cols(Tape* tape, const Tensor& a, std::size_t start, std::size_t len);
// Diagonal of a square matrix -> Bx1.
Tensor take_diag(Tape* tape, const Tensor& a);

// Per-row normalization to mean 0 / variance 1, then affine rescale by the
// 1xN `gain` and `bias`. Uses a tiny epsilon (1e-12) so the pre-affine output
// really does have unit variance to ~1e-12 on non-degenerate rows.
Tensor layer_norm_rows(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias);

// Inverted-scaling dropout: keep with prob 1-rate and multiply by 1/(1-rate).
// Identity when train is false or rate is 0.
Tensor dropout(Tape* tape, const Tensor& x, double rate, Rng* stream, bool train);

// Digamma function (derivative of lgamma), exposed because the lgamma
// backward needs it and tests pin its values.
double digamma(double x);

}  // namespace stc
