#pragma once

// Dense row-major matrices and the handful of kernels the attention stack needs.
//
// All kernels accumulate in a fixed order (the contraction index runs
// sequentially for every output element), so results are reproducible bit for
// bit across runs and platforms with IEEE-754 arithmetic.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "transolver/counters.hpp"
#include "transolver/error.hpp"

namespace transolver {

template <class T = double>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix initializer");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  std::span<T> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const T> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

  bool operator==(const Matrix&) const = default;

  Matrix& operator+=(const Matrix& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Matrix& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }
  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }

  // Rows [begin, end) as a new matrix.
  Matrix rows_range(std::size_t begin, std::size_t end) const {
    Matrix out(end - begin, cols_);
    std::copy(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
              data_.begin() + static_cast<std::ptrdiff_t>(end * cols_), out.data_.begin());
    return out;
  }

  // Columns [begin, begin + width) as a new matrix.
  Matrix col_block(std::size_t begin, std::size_t width) const {
    Matrix out(rows_, width);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < width; ++j) out(i, j) = (*this)(i, begin + j);
    return out;
  }

  void set_col_block(std::size_t begin, const Matrix& block) {
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < block.cols(); ++j) (*this)(i, begin + j) = block(i, j);
  }

  void set_rows(std::size_t begin, const Matrix& block) {
    std::copy(block.data_.begin(), block.data_.end(),
              data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_));
  }

  template <class U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  void require_same_shape(const Matrix& o, const char* op) const {
    if (o.rows_ != rows_ || o.cols_ != cols_)
      throw ShapeError(std::string("operator") + op + ": " + shape_str() + " vs " + o.shape_str());
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

// Seeded generator with platform-independent output.
//
// std::mt19937_64 is fully specified by the standard; the distributions in
// <random> are not, so the conversions to reals and indices live here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n) by rejection; unbiased.
  std::uint64_t index(std::uint64_t n) {
    if (n == 0) throw ShapeError("Rng::index: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % n;
  }

  // Standard normal via Box-Muller; one draw per call.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <class T = double>
  Matrix<T> uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi) {
    Matrix<T> m(rows, cols);
    for (auto& v : m.data()) v = static_cast<T>(uniform(lo, hi));
    return m;
  }

 private:
  std::mt19937_64 engine_;
};

namespace detail {
inline void require_dims(bool ok, const char* op, const std::string& a, const std::string& b) {
  if (!ok) throw ShapeError(std::string(op) + ": dimension mismatch " + a + " vs " + b);
}
}  // namespace detail

// c = a * b
template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_dims(a.cols() == b.rows(), "matmul", a.shape_str(), b.shape_str());
  const std::size_t p = a.rows(), q = a.cols(), r = b.cols();
  Matrix<T> c(p, r);
  for (std::size_t i = 0; i < p; ++i) {
    T* ci = c.row(i).data();
    for (std::size_t j = 0; j < q; ++j) {
      const T aij = a(i, j);
      const T* bj = b.row(j).data();
      for (std::size_t k = 0; k < r; ++k) ci[k] += aij * bj[k];
    }
  }
  count_madds(static_cast<std::uint64_t>(p) * q * r);
  return c;
}

// c += aᵀ * b, contraction over rows of a and b. The transposed-left product is
// the hot path for slice aggregation, so the transpose is never materialized.
template <class T>
void matmul_tn_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  detail::require_dims(a.rows() == b.rows(), "matmul_tn", a.shape_str(), b.shape_str());
  detail::require_dims(c.rows() == a.cols() && c.cols() == b.cols(), "matmul_tn(out)",
                       c.shape_str(), a.shape_str() + "^T*" + b.shape_str());
  const std::size_t n = a.rows(), q = a.cols(), r = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    const T* ai = a.row(i).data();
    const T* bi = b.row(i).data();
    for (std::size_t j = 0; j < q; ++j) {
      const T aij = ai[j];
      T* cj = c.row(j).data();
      for (std::size_t k = 0; k < r; ++k) cj[k] += aij * bi[k];
    }
  }
  count_madds(static_cast<std::uint64_t>(n) * q * r);
}

template <class T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  Matrix<T> c(a.cols(), b.cols());
  matmul_tn_acc(a, b, c);
  return c;
}

// c = a * bᵀ
template <class T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_dims(a.cols() == b.cols(), "matmul_nt", a.shape_str(), b.shape_str());
  const std::size_t p = a.rows(), q = a.cols(), r = b.rows();
  Matrix<T> c(p, r);
  for (std::size_t i = 0; i < p; ++i) {
    const T* ai = a.row(i).data();
    for (std::size_t k = 0; k < r; ++k) {
      const T* bk = b.row(k).data();
      T acc = T(0);
      for (std::size_t j = 0; j < q; ++j) acc += ai[j] * bk[j];
      c(i, k) = acc;
    }
  }
  count_madds(static_cast<std::uint64_t>(p) * q * r);
  return c;
}

// Adds a 1xC bias row to every row. An empty bias is a no-op.
template <class T>
void add_bias(Matrix<T>& x, const Matrix<T>& bias) {
  if (bias.empty()) return;
  detail::require_dims(bias.rows() == 1 && bias.cols() == x.cols(), "add_bias", x.shape_str(),
                       bias.shape_str());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    T* xi = x.row(i).data();
    for (std::size_t j = 0; j < x.cols(); ++j) xi[j] += bias(0, j);
  }
}

// x * w + b
template <class T>
Matrix<T> linear(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& b) {
  Matrix<T> y = matmul(x, w);
  add_bias(y, b);
  return y;
}

// Column sums as a 1xC row.
template <class T>
Matrix<T> column_sums(const Matrix<T>& x) {
  Matrix<T> s(1, x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) s(0, j) += x(i, j);
  return s;
}

// Row-wise softmax with max subtraction.
template <class T>
Matrix<T> softmax_rows(const Matrix<T>& z) {
  Matrix<T> out(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto zi = z.row(i);
    T mx = -std::numeric_limits<T>::infinity();
    for (T v : zi) {
      if (std::isnan(v)) throw DegenerateError("softmax_rows: NaN input in row " + std::to_string(i));
      mx = std::max(mx, v);
    }
    T sum = T(0);
    auto oi = out.row(i);
    for (std::size_t j = 0; j < zi.size(); ++j) {
      oi[j] = std::exp(zi[j] - mx);
      sum += oi[j];
    }
    for (auto& v : oi) v /= sum;
  }
  if (auto* c = counters()) c->softmax_elems += z.size();
  return out;
}

// Backward of softmax_rows given its output y and upstream gradient g.
template <class T>
Matrix<T> softmax_rows_backward(const Matrix<T>& y, const Matrix<T>& g) {
  Matrix<T> out(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    T dot = T(0);
    for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
    for (std::size_t j = 0; j < y.cols(); ++j) out(i, j) = y(i, j) * (g(i, j) - dot);
  }
  return out;
}

// Per-row normalization statistics kept for the backward pass.
template <class T>
struct LayerNormCache {
  Matrix<T> xhat;           // normalized input before gain/shift
  std::vector<T> inv_std;   // 1/sqrt(var + eps) per row
};

template <class T>
Matrix<T> layer_norm(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& shift, T eps,
                     LayerNormCache<T>* cache = nullptr) {
  if (!(eps > T(0))) throw ShapeError("layer_norm: eps must be positive");
  detail::require_dims(gain.cols() == x.cols() && shift.cols() == x.cols(), "layer_norm",
                       x.shape_str(), gain.shape_str());
  const std::size_t n = x.rows(), c = x.cols();
  Matrix<T> out(n, c);
  if (cache) {
    cache->xhat = Matrix<T>(n, c);
    cache->inv_std.assign(n, T(0));
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto xi = x.row(i);
    T mean = T(0);
    for (T v : xi) mean += v;
    mean /= static_cast<T>(c);
    T var = T(0);
    for (T v : xi) var += (v - mean) * (v - mean);
    var /= static_cast<T>(c);
    const T rstd = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xi[j] - mean) * rstd;
      if (cache) cache->xhat(i, j) = h;
      out(i, j) = h * gain(0, j) + shift(0, j);
    }
    if (cache) cache->inv_std[i] = rstd;
  }
  return out;
}

// Returns dL/dx; accumulates dL/dgain and dL/dshift.
template <class T>
Matrix<T> layer_norm_backward(const LayerNormCache<T>& cache, const Matrix<T>& gain,
                              const Matrix<T>& g, Matrix<T>& g_gain, Matrix<T>& g_shift) {
  const std::size_t n = g.rows(), c = g.cols();
  Matrix<T> gx(n, c);
  std::vector<T> gh(c);
  for (std::size_t i = 0; i < n; ++i) {
    T mean_gh = T(0), mean_ghx = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      const T h = cache.xhat(i, j);
      g_gain(0, j) += g(i, j) * h;
      g_shift(0, j) += g(i, j);
      gh[j] = g(i, j) * gain(0, j);
      mean_gh += gh[j];
      mean_ghx += gh[j] * h;
    }
    mean_gh /= static_cast<T>(c);
    mean_ghx /= static_cast<T>(c);
    for (std::size_t j = 0; j < c; ++j)
      gx(i, j) = cache.inv_std[i] * (gh[j] - mean_gh - cache.xhat(i, j) * mean_ghx);
  }
  return gx;
}

// Exact (erf) GELU.
template <class T>
T gelu(T v) {
  return T(0.5) * v * (T(1) + std::erf(v * T(0.70710678118654752440)));
}

template <class T>
T gelu_grad(T v) {
  const T cdf = T(0.5) * (T(1) + std::erf(v * T(0.70710678118654752440)));
  const T pdf = T(0.39894228040143267794) * std::exp(T(-0.5) * v * v);
  return cdf + v * pdf;
}

template <class T>
Matrix<T> gelu(const Matrix<T>& x) {
  Matrix<T> y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = gelu(x.data()[i]);
  return y;
}

template <class T>
double frobenius(const Matrix<T>& m) {
  double s = 0.0;
  for (T v : m.data()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

// ‖a − b‖_F / ‖b‖_F, falling back to the absolute difference when b is zero.
template <class T>
double relative_error(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_dims(a.rows() == b.rows() && a.cols() == b.cols(), "relative_error",
                       a.shape_str(), b.shape_str());
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
    diff += d * d;
  }
  const double ref = frobenius(b);
  return ref > 0.0 ? std::sqrt(diff) / ref : std::sqrt(diff);
}

template <class T>
bool all_finite(const Matrix<T>& m) {
  return std::all_of(m.data().begin(), m.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace transolver
