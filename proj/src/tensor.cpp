#include "stc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "stc/errors.hpp"

namespace stc {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

std::string shape_str(const Tensor& t) {
  return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

// Broadcast bookkeeping for binary elementwise ops. An operand either matches
// the output shape or is a 1xN row, Mx1 column, or 1x1 scalar.
struct Bcast {
  std::size_t out_r, out_c;
  std::size_t ar, ac, br, bc;
  std::size_t ia(std::size_t i, std::size_t j) const {
    return (ar == 1 ? 0 : i) * ac + (ac == 1 ? 0 : j);
  }
  std::size_t ib(std::size_t i, std::size_t j) const {
    return (br == 1 ? 0 : i) * bc + (bc == 1 ? 0 : j);
  }
};

Bcast broadcast_shapes(const Tensor& a, const Tensor& b, const char* op) {
  Bcast s{std::max(a.rows(), b.rows()), std::max(a.cols(), b.cols()),
          a.rows(), a.cols(), b.rows(), b.cols()};
  const bool ok_a = (s.ar == s.out_r || s.ar == 1) && (s.ac == s.out_c || s.ac == 1);
  const bool ok_b = (s.br == s.out_r || s.br == 1) && (s.bc == s.out_c || s.bc == 1);
  if (!ok_a || !ok_b || s.out_r == 0 || s.out_c == 0) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                     shape_str(b));
  }
  return s;
}

bool tracked(Tape* tape, const Tensor& a) { return tape != nullptr && a.requires_grad(); }
bool tracked(Tape* tape, const Tensor& a, const Tensor& b) {
  return tape != nullptr && (a.requires_grad() || b.requires_grad());
}

// Generic binary elementwise op. `fwd(x, y)` produces the value; `bwd_a` and
// `bwd_b` give d(out)/d(a) and d(out)/d(b) as functions of (x, y, out).
template <class F, class Da, class Db>
Tensor binary_op(Tape* tape, const Tensor& a, const Tensor& b, const char* name, F fwd, Da bwd_a,
                 Db bwd_b) {
  const Bcast s = broadcast_shapes(a, b, name);
  const bool track = tracked(tape, a, b);
  Tensor out = Tensor::zeros(s.out_r, s.out_c, track);
  {
    auto& o = out.data();
    const auto& x = a.data();
    const auto& y = b.data();
    for (std::size_t i = 0; i < s.out_r; ++i)
      for (std::size_t j = 0; j < s.out_c; ++j)
        o[i * s.out_c + j] = fwd(x[s.ia(i, j)], y[s.ib(i, j)]);
  }
  if (track) {
    Tensor ta = a, tb = b, to = out;
    tape->record([ta, tb, to, s, bwd_a, bwd_b]() {
      const auto& g = to.grad();
      const auto& o = to.data();
      const auto& x = ta.data();
      const auto& y = tb.data();
      const bool ga = ta.requires_grad();
      const bool gb = tb.requires_grad();
      auto* da = ga ? &const_cast<Tensor&>(ta).grad() : nullptr;
      auto* db = gb ? &const_cast<Tensor&>(tb).grad() : nullptr;
      for (std::size_t i = 0; i < s.out_r; ++i)
        for (std::size_t j = 0; j < s.out_c; ++j) {
          const std::size_t k = i * s.out_c + j;
          const std::size_t kia = s.ia(i, j), kib = s.ib(i, j);
          if (ga) (*da)[kia] += g[k] * bwd_a(x[kia], y[kib], o[k]);
          if (gb) (*db)[kib] += g[k] * bwd_b(x[kia], y[kib], o[k]);
        }
    });
  }
  return out;
}

// Generic unary elementwise op; `bwd(x, out)` is d(out)/d(x).
template <class F, class D>
Tensor unary_op(Tape* tape, const Tensor& a, const char* /*name*/, F fwd, D bwd) {
  const bool track = tracked(tape, a);
  Tensor out = Tensor::zeros(a.rows(), a.cols(), track);
  {
    auto& o = out.data();
    const auto& x = a.data();
    for (std::size_t k = 0; k < x.size(); ++k) o[k] = fwd(x[k]);
  }
  if (track) {
    Tensor ta = a, to = out;
    tape->record([ta, to, bwd]() {
      const auto& g = to.grad();
      const auto& o = to.data();
      const auto& x = ta.data();
      auto& da = const_cast<Tensor&>(ta).grad();
      for (std::size_t k = 0; k < x.size(); ++k) da[k] += g[k] * bwd(x[k], o[k]);
    });
  }
  return out;
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(std::size_t rows, std::size_t cols, bool requires_grad) {
  auto data = std::make_shared<std::vector<double>>(rows * cols, 0.0);
  auto grad = requires_grad ? std::make_shared<std::vector<double>>(rows * cols, 0.0) : nullptr;
  return Tensor(rows, cols, std::move(data), std::move(grad));
}

Tensor Tensor::full(std::size_t rows, std::size_t cols, double value, bool requires_grad) {
  Tensor t = zeros(rows, cols, requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::from(std::vector<double> values, std::size_t rows, std::size_t cols,
                    bool requires_grad) {
  if (values.size() != rows * cols) {
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
  auto data = std::make_shared<std::vector<double>>(std::move(values));
  auto grad = requires_grad ? std::make_shared<std::vector<double>>(rows * cols, 0.0) : nullptr;
  return Tensor(rows, cols, std::move(data), std::move(grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({value}, 1, 1, requires_grad);
}

Tensor Tensor::row(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return from(std::move(values), 1, n, requires_grad);
}

Tensor Tensor::col(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return from(std::move(values), n, 1, requires_grad);
}

Tensor Tensor::glorot(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t = zeros(rows, cols, true);
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  for (auto& v : t.data()) v = (2.0 * rng.uniform() - 1.0) * limit;
  return t;
}

void Tensor::set_requires_grad(bool on) {
  if (on && !grad_) {
    grad_ = std::make_shared<std::vector<double>>(size(), 0.0);
  } else if (!on) {
    grad_.reset();
  }
}

const std::vector<double>& Tensor::grad() const {
  if (!grad_) throw UsageError("Tensor::grad: tensor does not require gradients");
  return *grad_;
}

std::vector<double>& Tensor::grad() {
  if (!grad_) throw UsageError("Tensor::grad: tensor does not require gradients");
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("Tensor::item: tensor is " + shape_str(*this) + ", not 1x1");
  return (*data_)[0];
}

Tensor Tensor::clone() const {
  Tensor t = zeros(rows_, cols_, requires_grad());
  t.data() = *data_;
  return t;
}

Tensor Tensor::detach() const {
  auto data = std::make_shared<std::vector<double>>(*data_);
  return Tensor(rows_, cols_, std::move(data), nullptr);
}

void Tensor::assert_finite(const std::string& what) const {
  for (double v : *data_) {
    if (!std::isfinite(v)) {
      throw NumericError(what + ": non-finite value encountered");
    }
  }
}

// ---- Tape ------------------------------------------------------------------

void Tape::backward(Tensor& loss) {
  if (consumed_) throw UsageError("Tape::backward: tape already consumed");
  if (loss.size() != 1) throw UsageError("Tape::backward: loss must be scalar");
  if (!loss.requires_grad()) {
    throw UsageError("Tape::backward: loss is not connected to any tracked tensor");
  }
  loss.grad()[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  consumed_ = true;
  nodes_.clear();
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a) + " * " + shape_str(b));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const bool track = tracked(tape, a, b);
  Tensor out = Tensor::zeros(m, n, track);
  {
    auto& o = out.data();
    const auto& x = a.data();
    const auto& y = b.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double xv = x[i * k + p];
        if (xv == 0.0) continue;
        const double* yrow = y.data() + p * n;
        double* orow = o.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += xv * yrow[j];
      }
  }
  if (track) {
    Tensor ta = a, tb = b, to = out;
    tape->record([ta, tb, to, m, k, n]() {
      const auto& g = to.grad();
      if (ta.requires_grad()) {
        auto& da = const_cast<Tensor&>(ta).grad();
        const auto& y = tb.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double* grow = g.data() + i * n;
            const double* yrow = y.data() + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * yrow[j];
            da[i * k + p] += acc;
          }
      }
      if (tb.requires_grad()) {
        auto& db = const_cast<Tensor&>(tb).grad();
        const auto& x = ta.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double xv = x[i * k + p];
            if (xv == 0.0) continue;
            const double* grow = g.data() + i * n;
            double* drow = db.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) drow[j] += xv * grow[j];
          }
      }
    });
  }
  return out;
}

Tensor transpose(Tape* tape, const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  const bool track = tracked(tape, a);
  Tensor out = Tensor::zeros(n, m, track);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
  if (track) {
    Tensor ta = a, to = out;
    tape->record([ta, to, m, n]() {
      const auto& g = to.grad();
      auto& da = const_cast<Tensor&>(ta).grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_op(
      tape, a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_op(
      tape, a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_op(
      tape, a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor divide(Tape* tape, const Tensor& a, const Tensor& b) {
  return binary_op(
      tape, a, b, "divide", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Tensor logaddexp(Tape* tape, const Tensor& a, const Tensor& b) {
  auto fwd = [](double x, double y) {
    const double m = std::max(x, y);
    if (!std::isfinite(m)) return m;  // both -inf -> -inf
    return m + std::log1p(std::exp(std::min(x, y) - m));
  };
  auto da = [](double x, double y, double) { return 1.0 / (1.0 + std::exp(y - x)); };
  auto db = [](double x, double y, double) { return 1.0 / (1.0 + std::exp(x - y)); };
  return binary_op(tape, a, b, "logaddexp", fwd, da, db);
}

Tensor neg(Tape* tape, const Tensor& a) {
  return unary_op(
      tape, a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(Tape* tape, const Tensor& a, double c) {
  return unary_op(
      tape, a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_const(Tape* tape, const Tensor& a, double c) {
  return unary_op(
      tape, a, "add_const", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor exp_(Tape* tape, const Tensor& a) {
  return unary_op(
      tape, a, "exp", [](double x) { return std::exp(x); }, [](double, double o) { return o; });
}

Tensor log_(Tape* tape, const Tensor& a) {
  return unary_op(
      tape, a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor log1p_(Tape* tape, const Tensor& a) {
  return unary_op(
      tape, a, "log1p", [](double x) { return std::log1p(x); },
      [](double x, double) { return 1.0 / (1.0 + x); });
}

Tensor sqrt_(Tape* tape, const Tensor& a) {
  return unary_op(
      tape, a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double o) { return 0.5 / o; });
}

Tensor sigmoid(Tape* tape, const Tensor& a) {
  auto fwd = [](double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  };
  return unary_op(tape, a, "sigmoid", fwd, [](double, double o) { return o * (1.0 - o); });
}

Tensor relu(Tape* tape, const Tensor& a) {
  return unary_op(
      tape, a, "relu", [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor gelu(Tape* tape, const Tensor& a) {
  // Exact erf form: x * Phi(x).
  auto fwd = [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); };
  auto bwd = [](double x, double) {
    const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
  };
  return unary_op(tape, a, "gelu", fwd, bwd);
}

Tensor lgamma_(Tape* tape, const Tensor& a) {
  return unary_op(
      tape, a, "lgamma", [](double x) { return std::lgamma(x); },
      [](double x, double) { return digamma(x); });
}

Tensor clamp(Tape* tape, const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw UsageError("clamp: lo must not exceed hi");
  return unary_op(
      tape, a, "clamp", [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor softmax_rows(Tape* tape, const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  const bool track = tracked(tape, a);
  Tensor out = Tensor::zeros(m, n, track);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.data().data() + i * n;
    double* o = out.data().data() + i * n;
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(x[j] - mx);
      sum += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= sum;
  }
  if (track) {
    Tensor ta = a, to = out;
    tape->record([ta, to, m, n]() {
      const auto& g = to.grad();
      const auto& s = to.data();
      auto& da = const_cast<Tensor&>(ta).grad();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * s[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          da[i * n + j] += s[i * n + j] * (g[i * n + j] - dot);
      }
    });
  }
  return out;
}

Tensor logsumexp_rows(Tape* tape, const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  const bool track = tracked(tape, a);
  Tensor out = Tensor::zeros(m, 1, track);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.data().data() + i * n;
    double mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
    out.data()[i] = mx + std::log(sum);
  }
  if (track) {
    Tensor ta = a, to = out;
    tape->record([ta, to, m, n]() {
      const auto& g = to.grad();
      const auto& lse = to.data();
      const auto& x = ta.data();
      auto& da = const_cast<Tensor&>(ta).grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
          da[i * n + j] += g[i] * std::exp(x[i * n + j] - lse[i]);
    });
  }
  return out;
}

Tensor sum_all(Tape* tape, const Tensor& a) {
  const bool track = tracked(tape, a);
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor out = Tensor::zeros(1, 1, track);
  out.data()[0] = total;
  if (track) {
    Tensor ta = a, to = out;
    tape->record([ta, to]() {
      const double g = to.grad()[0];
      auto& da = const_cast<Tensor&>(ta).grad();
      for (auto& v : da) v += g;
    });
  }
  return out;
}

Tensor mean_all(Tape* tape, const Tensor& a) {
  return scale(tape, sum_all(tape, a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum_rows(Tape* tape, const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  const bool track = tracked(tape, a);
  Tensor out = Tensor::zeros(m, 1, track);
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += a.data()[i * n + j];
    out.data()[i] = acc;
  }
  if (track) {
    Tensor ta = a, to = out;
    tape->record([ta, to, m, n]() {
      const auto& g = to.grad();
      auto& da = const_cast<Tensor&>(ta).grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da[i * n + j] += g[i];
    });
  }
  return out;
}

Tensor sum_cols(Tape* tape, const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  const bool track = tracked(tape, a);
  Tensor out = Tensor::zeros(1, n, track);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data()[j] += a.data()[i * n + j];
  if (track) {
    Tensor ta = a, to = out;
    tape->record([ta, to, m, n]() {
      const auto& g = to.grad();
      auto& da = const_cast<Tensor&>(ta).grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da[i * n + j] += g[j];
    });
  }
  return out;
}

Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.rows() != m) throw ShapeError("concat_cols: row counts differ");
    n += p.cols();
    any_grad = any_grad || p.requires_grad();
  }
  const bool track = tape != nullptr && any_grad;
  Tensor out = Tensor::zeros(m, n, track);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j)
        out.data()[i * n + off + j] = p.data()[i * p.cols() + j];
    off += p.cols();
  }
  if (track) {
    std::vector<Tensor> caps = parts;
    Tensor to = out;
    tape->record([caps, to, m, n]() {
      const auto& g = to.grad();
      std::size_t off = 0;
      for (const auto& p : caps) {
        if (p.requires_grad()) {
          auto& dp = const_cast<Tensor&>(p).grad();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j)
              dp[i * p.cols() + j] += g[i * n + off + j];
        }
        off += p.cols();
      }
    });
  }
  return out;
}

Tensor slice_cols(Tape* tape, const Tensor& a, std::size_t start, std::size_t len) {
  if (start + len > a.cols() || len == 0) {
    throw ShapeError("slice_cols: window [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") outside " + shape_str(a));
  }
  const std::size_t m = a.rows(), n = a.cols();
  const bool track = tracked(tape, a);
  Tensor out = Tensor::zeros(m, len, track);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < len; ++j) out.data()[i * len + j] = a.data()[i * n + start + j];
  if (track) {
    Tensor ta = a, to = out;
    tape->record([ta, to, m, n, start, len]() {
      const auto& g = to.grad();
      auto& da = const_cast<Tensor&>(ta).grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < len; ++j) da[i * n + start + j] += g[i * len + j];
    });
  }
  return out;
}

Tensor take_diag(Tape* tape, const Tensor& a) {
  if (a.rows() != a.cols()) throw ShapeError("take_diag: matrix is " + shape_str(a) + ", not square");
  const std::size_t n = a.rows();
  const bool track = tracked(tape, a);
  Tensor out = Tensor::zeros(n, 1, track);
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i * n + i];
  if (track) {
    Tensor ta = a, to = out;
    tape->record([ta, to, n]() {
      const auto& g = to.grad();
      auto& da = const_cast<Tensor&>(ta).grad();
      for (std::size_t i = 0; i < n; ++i) da[i * n + i] += g[i];
    });
  }
  return out;
}

Tensor layer_norm_rows(Tape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw ShapeError("layer_norm_rows: gain/bias must be 1x" + std::to_string(n));
  }
  constexpr double eps = 1e-12;
  const bool track = tape != nullptr &&
                     (x.requires_grad() || gain.requires_grad() || bias.requires_grad());
  Tensor out = Tensor::zeros(m, n, track);
  std::vector<double> xhat(m * n);
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = x.data().data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += xi[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xi[j] - mean) * inv;
      out.data()[i * n + j] = gain.data()[j] * xhat[i * n + j] + bias.data()[j];
    }
  }
  if (track) {
    Tensor tx = x, tg = gain, tb = bias, to = out;
    tape->record([tx, tg, tb, to, xhat, inv_std, m, n]() {
      const auto& g = to.grad();
      if (tg.requires_grad()) {
        auto& dg = const_cast<Tensor&>(tg).grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) dg[j] += g[i * n + j] * xhat[i * n + j];
      }
      if (tb.requires_grad()) {
        auto& db = const_cast<Tensor&>(tb).grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
      }
      if (tx.requires_grad()) {
        auto& dx = const_cast<Tensor&>(tx).grad();
        const auto& gain_v = tg.data();
        for (std::size_t i = 0; i < m; ++i) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double dxh = g[i * n + j] * gain_v[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[i * n + j];
          }
          mean_dxhat /= static_cast<double>(n);
          mean_dxhat_xhat /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const double dxh = g[i * n + j] * gain_v[j];
            dx[i * n + j] +=
                inv_std[i] * (dxh - mean_dxhat - xhat[i * n + j] * mean_dxhat_xhat);
          }
        }
      }
    });
  }
  return out;
}

Tensor dropout(Tape* tape, const Tensor& x, double rate, Rng* stream, bool train) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0, 1)");
  if (!train || rate == 0.0) return x;
  if (stream == nullptr) throw UsageError("dropout: training mode requires an rng stream");
  const std::size_t sz = x.size();
  std::vector<double> mask(sz);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (std::size_t k = 0; k < sz; ++k) mask[k] = stream->uniform() >= rate ? keep_scale : 0.0;
  const bool track = tracked(tape, x);
  Tensor out = Tensor::zeros(x.rows(), x.cols(), track);
  for (std::size_t k = 0; k < sz; ++k) out.data()[k] = x.data()[k] * mask[k];
  if (track) {
    Tensor tx = x, to = out;
    tape->record([tx, to, mask, sz]() {
      const auto& g = to.grad();
      auto& dx = const_cast<Tensor&>(tx).grad();
      for (std::size_t k = 0; k < sz; ++k) dx[k] += g[k] * mask[k];
    });
  }
  return out;
}

double digamma(double x) {
  if (!(x > 0.0)) throw DomainError("digamma: argument must be positive");
  double result = 0.0;
  // Shift into the asymptotic regime.
  while (x < 10.0) {
    result -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // ln x - 1/(2x) - sum B_{2n} / (2n x^{2n})
  double series = std::log(x) - 0.5 * inv;
  series -= inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 -
            inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))));
  return result + series;
}

}  // namespace stc
