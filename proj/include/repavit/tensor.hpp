#pragma once

// Dense row-major matrices and the small set of kernels the blocks and the
// rewrite pass are built from. Everything here is a pure function of its
// inputs. Matrix products accumulate every output element in ascending
// inner-index order, so results do not depend on blocking or thread count.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include "repavit/errors.hpp"

namespace repavit {

template <class T>
concept Real = std::is_same_v<T, float> || std::is_same_v<T, double>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <Real T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

template <Real T>
using Vec = std::vector<T>;

template <Real T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                           " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }
  Matrix(std::initializer_list<std::initializer_list<T>> init) : rows_(init.size()) {
    cols_ = rows_ ? init.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& row : init) {
      if (row.size() != cols_) throw DimensionError("Matrix: ragged initializer");
      data_.insert(data_.end(), row.begin(), row.end());
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

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::string shape_str() const { return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]"; }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <Real U, Real T>
Matrix<U> cast(const Matrix<T>& m) {
  std::vector<U> out(m.size());
  std::transform(m.values().begin(), m.values().end(), out.begin(), [](T v) { return static_cast<U>(v); });
  return Matrix<U>(m.rows(), m.cols(), std::move(out));
}

template <Real U, Real T>
Vec<U> cast(const Vec<T>& v) {
  return Vec<U>(v.begin(), v.end());
}

namespace detail {

inline std::string shapes(const char* op, std::size_t ar, std::size_t ac, std::size_t br, std::size_t bc) {
  std::ostringstream os;
  os << op << ": shape mismatch [" << ar << "x" << ac << "] vs [" << br << "x" << bc << "]";
  return os.str();
}

template <Real T>
void require_same_shape(const char* op, const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(shapes(op, a.rows(), a.cols(), b.rows(), b.cols()));
}

template <Real T>
struct SimdLane;
template <>
struct SimdLane<float> {
  using type = float __attribute__((vector_size(64)));
};
template <>
struct SimdLane<double> {
  using type = double __attribute__((vector_size(64)));
};

// c[m x n] = a[m x k] * b[k x n]. Register tile of kRowTile rows by two
// vector lanes; b is packed one column panel at a time. Every accumulator
// walks p = 0..k-1 in order, so the result is bit-identical to the naive
// triple loop.
template <Real T>
void gemm_ordered(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  using V = typename SimdLane<T>::type;
  constexpr std::size_t kLane = sizeof(V) / sizeof(T);
  constexpr std::size_t kRowTile = 6;
  constexpr std::size_t kColTile = 2 * kLane;

  auto load = [](const T* src) {
    V v;
    std::memcpy(&v, src, sizeof(V));
    return v;
  };
  auto store = [](T* dst, const V& v) { std::memcpy(dst, &v, sizeof(V)); };

  std::vector<T> panel(k * kColTile);
  std::size_t j0 = 0;
  for (; j0 + kColTile <= n; j0 += kColTile) {
    for (std::size_t p = 0; p < k; ++p) std::copy_n(b + p * n + j0, kColTile, panel.data() + p * kColTile);
    std::size_t i0 = 0;
    for (; i0 + kRowTile <= m; i0 += kRowTile) {
      V acc[kRowTile][2] = {};
      const T* a0 = a + i0 * k;
      for (std::size_t p = 0; p < k; ++p) {
        const V b0 = load(panel.data() + p * kColTile);
        const V b1 = load(panel.data() + p * kColTile + kLane);
        for (std::size_t r = 0; r < kRowTile; ++r) {
          const T av = a0[r * k + p];
          acc[r][0] += av * b0;
          acc[r][1] += av * b1;
        }
      }
      for (std::size_t r = 0; r < kRowTile; ++r) {
        store(c + (i0 + r) * n + j0, acc[r][0]);
        store(c + (i0 + r) * n + j0 + kLane, acc[r][1]);
      }
    }
    for (; i0 < m; ++i0) {
      V acc[2] = {};
      for (std::size_t p = 0; p < k; ++p) {
        const T av = a[i0 * k + p];
        acc[0] += av * load(panel.data() + p * kColTile);
        acc[1] += av * load(panel.data() + p * kColTile + kLane);
      }
      store(c + i0 * n + j0, acc[0]);
      store(c + i0 * n + j0 + kLane, acc[1]);
    }
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = j0; j < n; ++j) {
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
}

}  // namespace detail

namespace detail {
inline std::atomic<unsigned>& matmul_threads_setting() {
  static std::atomic<unsigned> n{1};
  return n;
}
}  // namespace detail

/// Worker threads used by matmul. Rows are partitioned between workers; each
/// output element is still produced by one accumulation in fixed order, so
/// the result is independent of this setting.
inline void set_matmul_threads(unsigned n) { detail::matmul_threads_setting() = n == 0 ? 1 : n; }
inline unsigned matmul_threads() { return detail::matmul_threads_setting(); }

template <Real T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) throw DimensionError(detail::shapes("matmul", a.rows(), a.cols(), b.rows(), b.cols()));
  Matrix<T> c(a.rows(), b.cols());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (m == 0 || n == 0) return c;
  const std::size_t workers = std::min<std::size_t>(matmul_threads(), (m + 63) / 64);
  if (workers <= 1) {
    detail::gemm_ordered(a.data(), b.data(), c.data(), m, k, n);
    return c;
  }
  const std::size_t chunk = (m + workers - 1) / workers;
  {
    std::vector<std::jthread> pool;
    for (std::size_t lo = 0; lo < m; lo += chunk) {
      const std::size_t rows = std::min(chunk, m - lo);
      T* out = c.data() + lo * n;
      pool.emplace_back([&a, &b, out, lo, rows, k, n] { detail::gemm_ordered(a.data() + lo * k, b.data(), out, rows, k, n); });
    }
  }
  return c;
}

template <Real T>
Matrix<T> transpose(const Matrix<T>& a) {
  Matrix<T> t(a.cols(), a.rows());
  // Tiles keep both sides in cache; few destination rows per tile, since
  // long rows alias to the same cache sets.
  constexpr std::size_t BI = 64, BJ = 8;
  for (std::size_t i0 = 0; i0 < a.rows(); i0 += BI)
    for (std::size_t j0 = 0; j0 < a.cols(); j0 += BJ) {
      const std::size_t i1 = std::min(i0 + BI, a.rows()), j1 = std::min(j0 + BJ, a.cols());
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) t(j, i) = a(i, j);
    }
  return t;
}

// Standard normal density and CDF.
template <Real T>
T normal_pdf(T x) {
  return std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
}

template <Real T>
T normal_cdf(T x) {
  return T(0.5) * std::erfc(-x / std::numbers::sqrt2_v<T>);
}

template <Real T>
Matrix<T> gelu(const Matrix<T>& x) {
  Matrix<T> y = x;
  for (T& v : y.values()) v = v * normal_cdf(v);
  return y;
}

template <Real T>
Matrix<T> gelu_grad(const Matrix<T>& x) {
  Matrix<T> y = x;
  for (T& v : y.values()) v = normal_cdf(v) + v * normal_pdf(v);
  return y;
}

template <Real T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_same_shape("add", a, b);
  Matrix<T> c = a;
  auto cv = c.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < cv.size(); ++i) cv[i] += bv[i];
  return c;
}

template <Real T>
Matrix<T> sub(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_same_shape("sub", a, b);
  Matrix<T> c = a;
  auto cv = c.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < cv.size(); ++i) cv[i] -= bv[i];
  return c;
}

template <Real T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_same_shape("hadamard", a, b);
  Matrix<T> c = a;
  auto cv = c.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < cv.size(); ++i) cv[i] *= bv[i];
  return c;
}

template <Real T>
Matrix<T> scale(const Matrix<T>& a, T s) {
  Matrix<T> c = a;
  for (T& v : c.values()) v *= s;
  return c;
}

template <Real T>
void add_inplace(Matrix<T>& a, const Matrix<T>& b) {
  detail::require_same_shape("add_inplace", a, b);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
}

/// Adds a length-cols vector to every row.
template <Real T>
Matrix<T> add_bias(const Matrix<T>& x, std::span<const T> bias) {
  if (bias.size() != x.cols())
    throw DimensionError("add_bias: bias length " + std::to_string(bias.size()) + " vs " + x.shape_str());
  Matrix<T> y = x;
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto r = y.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
  return y;
}

template <Real T>
Matrix<T> add_bias(const Matrix<T>& x, const Vec<T>& bias) {
  return add_bias(x, std::span<const T>(bias));
}

/// Columns [lo, hi). An empty range (lo == hi) is allowed and yields rows x 0.
template <Real T>
Matrix<T> slice_cols(const Matrix<T>& x, std::size_t lo, std::size_t hi) {
  if (lo > hi || hi > x.cols())
    throw BoundsError("slice_cols: [" + std::to_string(lo) + ", " + std::to_string(hi) + ") outside " +
                      x.shape_str());
  Matrix<T> y(x.rows(), hi - lo);
  for (std::size_t i = 0; i < x.rows(); ++i) std::copy(x.row(i).begin() + lo, x.row(i).begin() + hi, y.row(i).begin());
  return y;
}

template <Real T>
Matrix<T> slice_rows(const Matrix<T>& x, std::size_t lo, std::size_t hi) {
  if (lo > hi || hi > x.rows())
    throw BoundsError("slice_rows: [" + std::to_string(lo) + ", " + std::to_string(hi) + ") outside " +
                      x.shape_str());
  std::vector<T> d(x.data() + lo * x.cols(), x.data() + hi * x.cols());
  return Matrix<T>(hi - lo, x.cols(), std::move(d));
}

template <Real T>
Matrix<T> concat_cols(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows()) throw DimensionError(detail::shapes("concat_cols", a.rows(), a.cols(), b.rows(), b.cols()));
  Matrix<T> y(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = y.row(i);
    std::copy(a.row(i).begin(), a.row(i).end(), out.begin());
    std::copy(b.row(i).begin(), b.row(i).end(), out.begin() + a.cols());
  }
  return y;
}

template <Real T>
Matrix<T> concat_rows(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) throw DimensionError(detail::shapes("concat_rows", a.rows(), a.cols(), b.rows(), b.cols()));
  std::vector<T> d(a.storage());
  d.insert(d.end(), b.storage().begin(), b.storage().end());
  return Matrix<T>(a.rows() + b.rows(), a.cols(), std::move(d));
}

template <Real T>
Matrix<T> softmax_rows(const Matrix<T>& x) {
  Matrix<T> y = x;
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto r = y.row(i);
    if (r.empty()) continue;
    const T mx = *std::max_element(r.begin(), r.end());
    T sum = 0;
    for (T& v : r) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (T& v : r) v /= sum;
  }
  return y;
}

template <Real T>
Vec<T> sum_over_rows(const Matrix<T>& x) {
  Vec<T> s(x.cols(), T(0));
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < s.size(); ++j) s[j] += r[j];
  }
  return s;
}

template <Real T>
Vec<T> mean_over_rows(const Matrix<T>& x) {
  if (x.rows() == 0) throw DimensionError("mean_over_rows: no rows");
  Vec<T> s = sum_over_rows(x);
  for (T& v : s) v /= static_cast<T>(x.rows());
  return s;
}

template <Real T>
T frobenius_norm(const Matrix<T>& x) {
  long double s = 0;
  for (T v : x.values()) s += static_cast<long double>(v) * v;
  return static_cast<T>(std::sqrt(s));
}

/// ||a - b||_F / ||b||_F, computed in double. Zero reference gives the
/// absolute norm of the difference.
template <Real T>
double rel_frobenius_diff(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_same_shape("rel_frobenius_diff", a, b);
  long double num = 0, den = 0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const long double d = static_cast<long double>(av[i]) - bv[i];
    num += d * d;
    den += static_cast<long double>(bv[i]) * bv[i];
  }
  return den > 0 ? static_cast<double>(std::sqrt(num / den)) : static_cast<double>(std::sqrt(num));
}

template <Real T>
double max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
  detail::require_same_shape("max_abs_diff", a, b);
  double m = 0;
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(static_cast<double>(av[i]) - bv[i]));
  return m;
}

template <Real T>
bool all_finite(const Matrix<T>& x) {
  return std::all_of(x.values().begin(), x.values().end(), [](T v) { return std::isfinite(v); });
}

template <Real T>
std::size_t argmax(std::span<const T> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace repavit
