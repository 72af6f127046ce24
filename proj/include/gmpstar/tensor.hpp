#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gmpstar {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty means "no gradient"
  bool requires_grad = false;
};

}  // namespace detail

/// Dense FP64 array with an optional gradient slot.
///
/// A Tensor is a shared handle: copies alias the same storage, which is what
/// lets the tape write gradients back into model parameters. Use clone() for
/// an independent deep copy.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : data_(std::make_shared<detail::TensorData>()) {
    for (auto extent : shape) {
      if (extent == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
    if (values.size() != numel(shape)) {
      throw ShapeError("tensor of shape " + to_string(shape) + " needs " + std::to_string(numel(shape)) +
                       " values, got " + std::to_string(values.size()));
    }
    data_->shape = std::move(shape);
    data_->values = std::move(values);
    data_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

  explicit operator bool() const { return static_cast<bool>(data_); }

  const Shape& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t size() const { return data_->values.size(); }
  std::size_t extent(std::size_t axis) const { return data_->shape.at(axis); }

  std::span<double> values() { return data_->values; }
  std::span<const double> values() const { return data_->values; }
  double& operator[](std::size_t i) { return data_->values[i]; }
  double operator[](std::size_t i) const { return data_->values[i]; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor of shape " + to_string(shape()));
    return data_->values[0];
  }

  bool requires_grad() const { return data_->requires_grad; }
  void set_requires_grad(bool flag) {
    data_->requires_grad = flag;
    if (!flag) data_->grad.clear();
  }

  bool has_grad() const { return !data_->grad.empty(); }
  std::span<double> grad() { return data_->grad; }
  std::span<const double> grad() const { return data_->grad; }
  void zero_grad() { data_->grad.assign(size(), 0.0); }
  void clear_grad() { data_->grad.clear(); }

  bool same_storage(const Tensor& other) const { return data_ == other.data_; }

  Tensor clone() const {
    Tensor copy(shape(), data_->values, requires_grad());
    copy.data_->grad = data_->grad;
    return copy;
  }

 private:
  std::shared_ptr<detail::TensorData> data_;
};

/// Ordered record of differentiable operations.
///
/// Entries are appended as operations execute, so every entry follows the
/// entries producing its inputs. backward() replays them in reverse.
class Tape {
 public:
  using BackwardRule = std::function<void()>;

  /// Records `output` if any input requires grad; marks output accordingly.
  Tensor record(Tensor output, std::vector<Tensor> inputs, BackwardRule rule) {
    const bool tracked = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (!tracked) return output;
    output.set_requires_grad(true);
    entries_.push_back(Entry{std::move(inputs), output, std::move(rule)});
    return output;
  }

  std::size_t size() const { return entries_.size(); }

  /// Writes d(loss)/d(x) into the grad slot of every tensor on the tape up to
  /// `loss`. Existing gradients of those tensors are overwritten, so repeated
  /// calls from the same state give identical results.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
    std::size_t last = entries_.size();
    for (std::size_t i = entries_.size(); i-- > 0;) {
      if (entries_[i].output.same_storage(loss)) {
        last = i;
        break;
      }
    }
    if (last == entries_.size()) throw std::invalid_argument("backward: loss was not produced on this tape");

    for (std::size_t i = 0; i <= last; ++i) {
      auto& entry = entries_[i];
      for (auto& input : entry.inputs) {
        if (input.requires_grad()) input.zero_grad();
      }
      entry.output.zero_grad();
    }
    Tensor root = loss;
    root.grad()[0] = 1.0;
    for (std::size_t i = last + 1; i-- > 0;) entries_[i].rule();
  }

 private:
  struct Entry {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardRule rule;
  };
  std::vector<Entry> entries_;
};

namespace detail {

inline void require_finite(const Tensor& t, const char* op) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw std::domain_error(std::string(op) + " produced a non-finite value");
  }
}

inline bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.begin(), tail.end(), full.end() - static_cast<std::ptrdiff_t>(tail.size()));
}

// C[r][c] += sum_t X(r, t) * Y(t, c) with X(r, t) = x[r * xr + t * xt] and
// Y(t, c) = y[t * yt + c]. Each output entry is accumulated over t in
// ascending order, so results do not depend on the blocking.
inline void gemm_kernel(const double* __restrict x, std::size_t xr, std::size_t xt, const double* __restrict y,
                        std::size_t yt, double* __restrict c, std::size_t rows, std::size_t inner, std::size_t cols) {
  constexpr std::size_t kCols = 8;
  const auto tail = [&](std::size_t r, std::size_t col) {
    double acc = 0.0;
    for (std::size_t t = 0; t < inner; ++t) acc += x[r * xr + t * xt] * y[t * yt + col];
    c[r * cols + col] += acc;
  };
  std::size_t r0 = 0;
  for (; r0 + 4 <= rows; r0 += 4) {
    const double* x0 = x + r0 * xr;
    const double* x1 = x0 + xr;
    const double* x2 = x1 + xr;
    const double* x3 = x2 + xr;
    std::size_t c0 = 0;
    for (; c0 + kCols <= cols; c0 += kCols) {
      double a0[kCols] = {}, a1[kCols] = {}, a2[kCols] = {}, a3[kCols] = {};
      for (std::size_t t = 0; t < inner; ++t) {
        const double* yrow = y + t * yt + c0;
        const double v0 = x0[t * xt], v1 = x1[t * xt], v2 = x2[t * xt], v3 = x3[t * xt];
        for (std::size_t q = 0; q < kCols; ++q) {
          a0[q] += v0 * yrow[q];
          a1[q] += v1 * yrow[q];
          a2[q] += v2 * yrow[q];
          a3[q] += v3 * yrow[q];
        }
      }
      for (std::size_t q = 0; q < kCols; ++q) {
        c[r0 * cols + c0 + q] += a0[q];
        c[(r0 + 1) * cols + c0 + q] += a1[q];
        c[(r0 + 2) * cols + c0 + q] += a2[q];
        c[(r0 + 3) * cols + c0 + q] += a3[q];
      }
    }
    for (; c0 < cols; ++c0) {
      for (std::size_t r = r0; r < r0 + 4; ++r) tail(r, c0);
    }
  }
  for (; r0 < rows; ++r0) {
    for (std::size_t col = 0; col < cols; ++col) tail(r0, col);
  }
}

// C[M,N] += A[M,K] * B[K,N]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_kernel(a, k, 1, b, n, c, m, k, n);
}

// C[K,N] += A[M,K]^T * B[M,N]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_kernel(a, 1, k, b, n, c, k, m, n);
}

inline std::vector<double> transposed(const double* src, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  }
  return out;
}

// Copies src viewed as [pre, a, mid, b, post] into dst laid out as [pre, b, mid, a, post].
inline void swap_axes_copy(const double* src, double* dst, std::size_t pre, std::size_t a, std::size_t mid,
                           std::size_t b, std::size_t post) {
  for (std::size_t p = 0; p < pre; ++p) {
    for (std::size_t i = 0; i < a; ++i) {
      for (std::size_t m = 0; m < mid; ++m) {
        for (std::size_t j = 0; j < b; ++j) {
          const double* from = src + ((((p * a + i) * mid + m) * b + j) * post);
          double* to = dst + ((((p * b + j) * mid + m) * a + i) * post);
          std::copy(from, from + post, to);
        }
      }
    }
  }
}

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_derivative(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  return cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

}  // namespace detail

namespace ops {

/// Matrix product over the last two axes.
///
/// `a` of shape [..., M, K] times a rank-2 `b` of shape [K, N] treats the
/// leading axes of `a` as rows. Two rank-3 operands [G, M, K] x [G, K, N]
/// multiply batch-wise.
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  const auto mismatch = [&] {
    return ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  };
  if (a.rank() < 2 || b.rank() < 2) throw mismatch();

  if (b.rank() == 2) {
    const std::size_t k = a.shape().back();
    if (b.extent(0) != k) throw mismatch();
    const std::size_t n = b.extent(1);
    const std::size_t m = a.size() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Tensor out = Tensor::zeros(out_shape);
    detail::gemm_nn(a.values().data(), b.values().data(), out.values().data(), m, k, n);
    detail::require_finite(out, "matmul");
    return tape.record(out, {a, b}, [a = a, b = b, out, m, k, n]() mutable {
      if (a.requires_grad()) {
        const auto bt = detail::transposed(b.values().data(), k, n);
        detail::gemm_nn(out.grad().data(), bt.data(), a.grad().data(), m, n, k);
      }
      if (b.requires_grad()) detail::gemm_tn(a.values().data(), out.grad().data(), b.grad().data(), m, k, n);
    });
  }

  if (a.rank() != 3 || b.rank() != 3 || a.extent(0) != b.extent(0) || a.extent(2) != b.extent(1)) throw mismatch();
  const std::size_t g = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
  Tensor out = Tensor::zeros({g, m, n});
  for (std::size_t i = 0; i < g; ++i) {
    detail::gemm_nn(a.values().data() + i * m * k, b.values().data() + i * k * n, out.values().data() + i * m * n, m,
                    k, n);
  }
  detail::require_finite(out, "matmul");
  return tape.record(out, {a, b}, [a = a, b = b, out, g, m, k, n]() mutable {
    for (std::size_t i = 0; i < g; ++i) {
      const double* gout = out.grad().data() + i * m * n;
      if (a.requires_grad()) {
        const auto bt = detail::transposed(b.values().data() + i * k * n, k, n);
        detail::gemm_nn(gout, bt.data(), a.grad().data() + i * m * k, m, n, k);
      }
      if (b.requires_grad()) {
        detail::gemm_tn(a.values().data() + i * m * k, gout, b.grad().data() + i * k * n, m, k, n);
      }
    }
  });
}

/// Elementwise sum; `b` may broadcast over leading axes when its shape is a
/// suffix of `a`'s shape.
inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (!detail::is_suffix(a.shape(), b.shape())) {
    throw ShapeError("add: cannot broadcast " + to_string(b.shape()) + " onto " + to_string(a.shape()));
  }
  const std::size_t inner = b.size();
  const std::size_t outer = a.size() / inner;
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.values();
  for (std::size_t r = 0; r < outer; ++r) {
    for (std::size_t j = 0; j < inner; ++j) o[r * inner + j] = a[r * inner + j] + b[j];
  }
  detail::require_finite(out, "add");
  return tape.record(out, {a, b}, [a = a, b = b, out, outer, inner]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t r = 0; r < outer; ++r) {
        for (std::size_t j = 0; j < inner; ++j) gb[j] += g[r * inner + j];
      }
    }
  });
}

/// Elementwise product with the same suffix broadcasting rule as add().
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (!detail::is_suffix(a.shape(), b.shape())) {
    throw ShapeError("mul: cannot broadcast " + to_string(b.shape()) + " onto " + to_string(a.shape()));
  }
  const std::size_t inner = b.size();
  const std::size_t outer = a.size() / inner;
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.values();
  for (std::size_t r = 0; r < outer; ++r) {
    for (std::size_t j = 0; j < inner; ++j) o[r * inner + j] = a[r * inner + j] * b[j];
  }
  detail::require_finite(out, "mul");
  return tape.record(out, {a, b}, [a = a, b = b, out, outer, inner]() mutable {
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t r = 0; r < outer; ++r) {
        for (std::size_t j = 0; j < inner; ++j) ga[r * inner + j] += g[r * inner + j] * b[j];
      }
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t r = 0; r < outer; ++r) {
        for (std::size_t j = 0; j < inner; ++j) gb[j] += g[r * inner + j] * a[r * inner + j];
      }
    }
  });
}

inline Tensor scale(Tape& tape, const Tensor& a, double factor) {
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * factor;
  detail::require_finite(out, "scale");
  return tape.record(out, {a}, [a = a, out, factor]() mutable {
    auto g = out.grad();
    auto ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

inline Tensor relu(Tape& tape, const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] > 0.0 ? a[i] : 0.0;
  return tape.record(out, {a}, [a = a, out]() mutable {
    auto g = out.grad();
    auto ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (a[i] > 0.0) ga[i] += g[i];
    }
  });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(Tape& tape, const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = detail::gelu_value(a[i]);
  detail::require_finite(out, "gelu");
  return tape.record(out, {a}, [a = a, out]() mutable {
    auto g = out.grad();
    auto ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * detail::gelu_derivative(a[i]);
  });
}

namespace detail_ln {

inline Tensor layer_norm_impl(Tape& tape, const Tensor& x, const Tensor* gamma, const Tensor* beta, double eps) {
  const std::size_t d = x.shape().back();
  if (gamma && (gamma->shape() != Shape{d} || beta == nullptr || beta->shape() != Shape{d})) {
    throw ShapeError("layer_norm: affine parameters must have shape [" + std::to_string(d) + "], got " +
                     to_string(gamma->shape()) + " and " + (beta ? to_string(beta->shape()) : std::string("none")));
  }
  const std::size_t rows = x.size() / d;
  std::vector<double> xhat(x.size());
  std::vector<double> rstd(rows);
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.values().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * rstd[r];
      xhat[r * d + j] = h;
      o[r * d + j] = gamma ? h * (*gamma)[j] + (*beta)[j] : h;
    }
  }
  ::gmpstar::detail::require_finite(out, "layer_norm");
  std::vector<Tensor> inputs{x};
  Tensor g_param, b_param;
  if (gamma) {
    g_param = *gamma;
    b_param = *beta;
    inputs.push_back(g_param);
    inputs.push_back(b_param);
  }
  return tape.record(out, std::move(inputs),
                     [x = x, g_param, b_param, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, d]() mutable {
                       auto g = out.grad();
                       const bool affine = static_cast<bool>(g_param);
                       if (affine && g_param.requires_grad()) {
                         auto gg = g_param.grad();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
                         }
                       }
                       if (affine && b_param.requires_grad()) {
                         auto gb = b_param.grad();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                         }
                       }
                       if (!x.requires_grad()) return;
                       auto gx = x.grad();
                       std::vector<double> dh(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double mean_dh = 0.0, mean_dh_h = 0.0;
                         for (std::size_t j = 0; j < d; ++j) {
                           dh[j] = affine ? g[r * d + j] * g_param[j] : g[r * d + j];
                           mean_dh += dh[j];
                           mean_dh_h += dh[j] * xhat[r * d + j];
                         }
                         mean_dh /= static_cast<double>(d);
                         mean_dh_h /= static_cast<double>(d);
                         for (std::size_t j = 0; j < d; ++j) {
                           gx[r * d + j] += rstd[r] * (dh[j] - mean_dh - xhat[r * d + j] * mean_dh_h);
                         }
                       }
                     });
}

}  // namespace detail_ln

/// Normalizes over the last axis to zero mean and unit variance.
inline Tensor layer_norm(Tape& tape, const Tensor& x, double eps = 1e-5) {
  return detail_ln::layer_norm_impl(tape, x, nullptr, nullptr, eps);
}

/// Layer normalization followed by a per-feature affine map.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  return detail_ln::layer_norm_impl(tape, x, &gamma, &beta, eps);
}

/// Softmax over the last axis.
inline Tensor softmax(Tape& tape, const Tensor& x) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.values().data() + r * d;
    const double peak = *std::max_element(row, row + d);
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      o[r * d + j] = std::exp(row[j] - peak);
      total += o[r * d + j];
    }
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] /= total;
  }
  detail::require_finite(out, "softmax");
  return tape.record(out, {x}, [x = x, out, rows, d]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += g[r * d + j] * out[r * d + j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += out[r * d + j] * (g[r * d + j] - dot);
    }
  });
}

/// Log-softmax over the last axis.
inline Tensor log_softmax(Tape& tape, const Tensor& x) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.size() / d;
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.values().data() + r * d;
    const double peak = *std::max_element(row, row + d);
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) total += std::exp(row[j] - peak);
    const double log_total = std::log(total);
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] = row[j] - peak - log_total;
  }
  detail::require_finite(out, "log_softmax");
  return tape.record(out, {x}, [x = x, out, rows, d]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t j = 0; j < d; ++j) total += g[r * d + j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] - std::exp(out[r * d + j]) * total;
    }
  });
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()));
  return tape.record(out, {x}, [x = x, out]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

/// Swaps two axes.
inline Tensor transpose(Tape& tape, const Tensor& x, std::size_t axis_a, std::size_t axis_b) {
  if (axis_a >= x.rank() || axis_b >= x.rank()) {
    throw ShapeError("transpose: axes " + std::to_string(axis_a) + "," + std::to_string(axis_b) +
                     " out of range for " + to_string(x.shape()));
  }
  if (axis_a > axis_b) std::swap(axis_a, axis_b);
  const auto& s = x.shape();
  const auto span_product = [&](std::size_t from, std::size_t to) {
    std::size_t n = 1;
    for (std::size_t i = from; i < to; ++i) n *= s[i];
    return n;
  };
  const std::size_t pre = span_product(0, axis_a), a = s[axis_a], mid = span_product(axis_a + 1, axis_b),
                    b = s[axis_b], post = span_product(axis_b + 1, s.size());
  Shape out_shape = s;
  std::swap(out_shape[axis_a], out_shape[axis_b]);
  Tensor out = Tensor::zeros(out_shape);
  detail::swap_axes_copy(x.values().data(), out.values().data(), pre, a, mid, b, post);
  return tape.record(out, {x}, [x = x, out, pre, a, mid, b, post]() mutable {
    std::vector<double> back(out.size());
    detail::swap_axes_copy(out.grad().data(), back.data(), pre, b, mid, a, post);
    auto gx = x.grad();
    for (std::size_t i = 0; i < back.size(); ++i) gx[i] += back[i];
  });
}

/// Gathers rows of `table` ([V, H]); result shape is ids_shape + [H].
inline Tensor embedding(Tape& tape, const Tensor& table, std::span<const std::size_t> ids, Shape ids_shape) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + to_string(table.shape()));
  if (numel(ids_shape) != ids.size()) {
    throw ShapeError("embedding: " + std::to_string(ids.size()) + " ids do not fill shape " + to_string(ids_shape));
  }
  const std::size_t vocab = table.extent(0), h = table.extent(1);
  for (auto id : ids) {
    if (id >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(id) + " out of range for table " + to_string(table.shape()));
    }
  }
  Shape out_shape = std::move(ids_shape);
  out_shape.push_back(h);
  Tensor out = Tensor::zeros(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(table.values().data() + ids[i] * h, h, out.values().data() + i * h);
  }
  std::vector<std::size_t> saved(ids.begin(), ids.end());
  return tape.record(out, {table}, [table = table, out, saved = std::move(saved), h]() mutable {
    auto g = out.grad();
    auto gt = table.grad();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      for (std::size_t j = 0; j < h; ++j) gt[saved[i] * h + j] += g[i * h + j];
    }
  });
}

/// Mean over one axis; the axis is removed from the result.
inline Tensor mean(Tape& tape, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("mean: axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.extent(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.extent(i);
  const std::size_t n = x.extent(axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.extent(i));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out = Tensor::zeros(out_shape);
  auto o = out.values();
  for (std::size_t p = 0; p < outer; ++p) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t i = 0; i < inner; ++i) o[p * inner + i] += x[(p * n + j) * inner + i];
    }
  }
  for (auto& v : o) v /= static_cast<double>(n);
  return tape.record(out, {x}, [x = x, out, outer, inner, n]() mutable {
    auto g = out.grad();
    auto gx = x.grad();
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t p = 0; p < outer; ++p) {
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < inner; ++i) gx[(p * n + j) * inner + i] += g[p * inner + i] * inv;
      }
    }
  });
}

/// Sum of all entries as a scalar.
inline Tensor sum(Tape& tape, const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  Tensor out = Tensor::scalar(total);
  detail::require_finite(out, "sum");
  return tape.record(out, {x}, [x = x, out]() mutable {
    const double g = out.grad()[0];
    for (auto& v : x.grad()) v += g;
  });
}

/// Mean negative log-likelihood of `labels` under row-wise log-probabilities [B, C].
inline Tensor nll_loss(Tape& tape, const Tensor& log_probs, std::span<const std::size_t> labels) {
  if (log_probs.rank() != 2 || log_probs.extent(0) != labels.size()) {
    throw ShapeError("nll_loss: log-probabilities " + to_string(log_probs.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t rows = log_probs.extent(0), classes = log_probs.extent(1);
  for (auto y : labels) {
    if (y >= classes) throw std::invalid_argument("nll_loss: label " + std::to_string(y) + " out of range");
  }
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) total -= log_probs[r * classes + labels[r]];
  Tensor out = Tensor::scalar(total / static_cast<double>(rows));
  std::vector<std::size_t> saved(labels.begin(), labels.end());
  return tape.record(out, {log_probs}, [log_probs = log_probs, out, saved = std::move(saved), rows, classes]() mutable {
    const double g = out.grad()[0] / static_cast<double>(rows);
    auto gl = log_probs.grad();
    for (std::size_t r = 0; r < rows; ++r) gl[r * classes + saved[r]] -= g;
  });
}

/// Batch-mean KL(q || p) where both arguments are row-wise log-probabilities
/// and the target `target_log_q` is a constant.
inline Tensor kl_divergence(Tape& tape, const Tensor& log_p, const Tensor& target_log_q) {
  if (log_p.shape() != target_log_q.shape() || log_p.rank() != 2) {
    throw ShapeError("kl_divergence: shapes " + to_string(log_p.shape()) + " and " +
                     to_string(target_log_q.shape()) + " differ");
  }
  if (target_log_q.requires_grad()) throw std::invalid_argument("kl_divergence: target must not require grad");
  const std::size_t rows = log_p.extent(0), classes = log_p.extent(1);
  double total = 0.0;
  for (std::size_t i = 0; i < log_p.size(); ++i) {
    total += std::exp(target_log_q[i]) * (target_log_q[i] - log_p[i]);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(rows));
  detail::require_finite(out, "kl_divergence");
  return tape.record(out, {log_p}, [log_p = log_p, target_log_q = target_log_q, out, rows, classes]() mutable {
    const double g = out.grad()[0] / static_cast<double>(rows);
    auto gp = log_p.grad();
    for (std::size_t i = 0; i < rows * classes; ++i) gp[i] -= g * std::exp(target_log_q[i]);
  });
}

}  // namespace ops
}  // namespace gmpstar
