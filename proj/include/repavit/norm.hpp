#pragma once

#include <cmath>
#include <string>

#include "repavit/tensor.hpp"

namespace repavit {

/// Per-channel batch normalization state. Running statistics are buffers;
/// only gamma and beta count as parameters.
template <Real T>
struct BatchNormParams {
  Vec<T> gamma;
  Vec<T> beta;
  Vec<T> running_mean;
  Vec<T> running_var;
  T eps = T(1e-5);
  bool frozen = false;

  static BatchNormParams identity(std::size_t channels, T eps = T(1e-5)) {
    return {Vec<T>(channels, T(1)), Vec<T>(channels, T(0)), Vec<T>(channels, T(0)), Vec<T>(channels, T(1)), eps,
            false};
  }

  std::size_t channels() const noexcept { return gamma.size(); }

  /// gamma / sqrt(running_var + eps)
  Vec<T> scale() const {
    Vec<T> s(channels());
    for (std::size_t c = 0; c < s.size(); ++c) s[c] = gamma[c] / std::sqrt(running_var[c] + eps);
    return s;
  }

  void validate() const {
    const std::size_t n = gamma.size();
    if (beta.size() != n || running_mean.size() != n || running_var.size() != n)
      throw DimensionError("BatchNormParams: vectors disagree on channel count");
    if (!(eps >= T(0))) throw ValidationError("BatchNormParams: eps must be non-negative");
    for (T v : running_var)
      if (v < T(0)) throw ValidationError("BatchNormParams: negative running variance");
  }
};

template <Real T>
struct LayerNormParams {
  Vec<T> gamma;
  Vec<T> beta;
  T eps = T(1e-6);

  static LayerNormParams identity(std::size_t channels, T eps = T(1e-6)) {
    return {Vec<T>(channels, T(1)), Vec<T>(channels, T(0)), eps};
  }
  std::size_t channels() const noexcept { return gamma.size(); }
};

namespace detail {
template <Real T>
void require_channels(const char* op, const Matrix<T>& x, std::size_t channels) {
  if (x.cols() != channels)
    throw DimensionError(std::string(op) + ": input " + x.shape_str() + " has " + std::to_string(x.cols()) +
                         " channels, normalization expects " + std::to_string(channels));
}
}  // namespace detail

/// Eval-mode batch norm: uses the stored running statistics only.
template <Real T>
Matrix<T> batchnorm_eval(const Matrix<T>& x, const BatchNormParams<T>& bn) {
  detail::require_channels("batchnorm_eval", x, bn.channels());
  Matrix<T> y = x;
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto r = y.row(i);
    for (std::size_t c = 0; c < r.size(); ++c)
      r[c] = bn.gamma[c] * (r[c] - bn.running_mean[c]) / std::sqrt(bn.running_var[c] + bn.eps) + bn.beta[c];
  }
  return y;
}

/// Batch statistics over rows: mean and biased variance per channel.
template <Real T>
struct BatchStats {
  Vec<T> mean;
  Vec<T> var;
};

template <Real T>
BatchStats<T> batch_stats(const Matrix<T>& x) {
  BatchStats<T> s{mean_over_rows(x), Vec<T>(x.cols(), T(0))};
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    for (std::size_t c = 0; c < r.size(); ++c) {
      const T d = r[c] - s.mean[c];
      s.var[c] += d * d;
    }
  }
  for (T& v : s.var) v /= static_cast<T>(x.rows());
  return s;
}

/// Train-mode batch norm: normalizes with the batch mean and biased batch
/// variance, then folds them into the running statistics as
/// running = (1 - momentum) * running + momentum * batch, where the running
/// variance tracks the unbiased batch variance.
template <Real T>
Matrix<T> batchnorm_train_step(const Matrix<T>& x, BatchNormParams<T>& bn, T momentum) {
  if (bn.frozen) throw StateError("batchnorm_train_step: batch norm is frozen");
  detail::require_channels("batchnorm_train_step", x, bn.channels());
  if (x.rows() < 2)
    throw DegenerateBatchError("batchnorm_train_step: need at least 2 rows, got " + std::to_string(x.rows()));
  if (!(momentum > T(0) && momentum <= T(1)))
    throw ValidationError("batchnorm_train_step: momentum must lie in (0, 1]");

  const BatchStats<T> st = batch_stats(x);
  Matrix<T> y = x;
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto r = y.row(i);
    for (std::size_t c = 0; c < r.size(); ++c)
      r[c] = bn.gamma[c] * (r[c] - st.mean[c]) / std::sqrt(st.var[c] + bn.eps) + bn.beta[c];
  }
  const T n = static_cast<T>(x.rows());
  for (std::size_t c = 0; c < bn.channels(); ++c) {
    const T unbiased = st.var[c] * n / (n - T(1));
    bn.running_mean[c] = (T(1) - momentum) * bn.running_mean[c] + momentum * st.mean[c];
    bn.running_var[c] = (T(1) - momentum) * bn.running_var[c] + momentum * unbiased;
  }
  return y;
}

/// Per-row normalization over channels followed by the affine map.
template <Real T>
Matrix<T> layernorm(const Matrix<T>& x, const Vec<T>& gamma, const Vec<T>& beta, T eps) {
  if (gamma.size() != x.cols() || beta.size() != x.cols())
    throw DimensionError("layernorm: gamma/beta length " + std::to_string(gamma.size()) + "/" +
                         std::to_string(beta.size()) + " vs input " + x.shape_str());
  Matrix<T> y = x;
  const T n = static_cast<T>(x.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto r = y.row(i);
    T mean = 0;
    for (T v : r) mean += v;
    mean /= n;
    T var = 0;
    for (T v : r) var += (v - mean) * (v - mean);
    var /= n;
    // A constant row has zero variance; with eps == 0 map it to zeros.
    const T denom = std::sqrt(var + eps);
    for (std::size_t c = 0; c < r.size(); ++c) {
      const T xhat = denom > T(0) ? (r[c] - mean) / denom : T(0);
      r[c] = gamma[c] * xhat + beta[c];
    }
  }
  return y;
}

template <Real T>
Matrix<T> layernorm(const Matrix<T>& x, const LayerNormParams<T>& ln) {
  return layernorm(x, ln.gamma, ln.beta, ln.eps);
}

/// Gradient of layernorm with respect to its input.
template <Real T>
Matrix<T> layernorm_backward_input(const Matrix<T>& x, const LayerNormParams<T>& ln, const Matrix<T>& upstream) {
  detail::require_same_shape("layernorm_backward_input", x, upstream);
  Matrix<T> dx(x.rows(), x.cols());
  const std::size_t n = x.cols();
  const T nf = static_cast<T>(n);
  Vec<T> xhat(n), g(n);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    T mean = 0;
    for (T v : r) mean += v;
    mean /= nf;
    T var = 0;
    for (T v : r) var += (v - mean) * (v - mean);
    var /= nf;
    const T inv = T(1) / std::sqrt(var + ln.eps);
    T sum_g = 0, sum_gx = 0;
    for (std::size_t c = 0; c < n; ++c) {
      xhat[c] = (r[c] - mean) * inv;
      g[c] = upstream(i, c) * ln.gamma[c];
      sum_g += g[c];
      sum_gx += g[c] * xhat[c];
    }
    for (std::size_t c = 0; c < n; ++c) dx(i, c) = inv * (g[c] - sum_g / nf - xhat[c] * sum_gx / nf);
  }
  return dx;
}

}  // namespace repavit
