#pragma once

// Finite-difference checks of the channel-idle FFN gradients, shared by the
// unit tests and the acceptance binary.

#include <functional>
#include <string>
#include <vector>

#include "oracles.hpp"

namespace gradcheck {

using namespace repavit;


using TrainFfn = IdleFfnTrain<double>;

inline Matrix<double> as_row(const Vec<double>& v) { return Matrix<double>(1, v.size(), v); }

inline double dot(const Matrix<double>& a, const Matrix<double>& b) {
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a.values()[i]) * b.values()[i];
  return static_cast<double>(s);
}

/// L = <ffn(x), upstream>, so dL/dy = upstream.
inline double loss(TrainFfn f, const Matrix<double>& x, const Matrix<double>& up, NormMode mode) {
  return dot(mode == NormMode::train ? forward_ffn_idle_train(f, x, NormMode::train) : forward_ffn_idle_train(f, x), up);
}

struct Check {
  std::string name;
  Matrix<double> analytic;
  Matrix<double> numeric;
};

/// Central differences for every parameter and the input.
inline std::vector<Check> all_checks(const TrainFfn& f, const Matrix<double>& x, const Matrix<double>& up, NormMode mode) {
  const GradBundle<double> g = ffn_backward(f, x, up, mode);
  const double h = 1e-5;
  std::vector<Check> out;
  auto mat = [&](const std::string& name, const Matrix<double>& an, const Matrix<double>& p,
                 std::function<void(TrainFfn&, const Matrix<double>&)> set) {
    out.push_back({name, an, finite_diff_grad(
                                 [&](const Matrix<double>& q) {
                                   TrainFfn c = f;
                                   set(c, q);
                                   return loss(c, x, up, mode);
                                 },
                                 p, h)});
  };
  auto vec = [&](const std::string& name, const Vec<double>& an, const Vec<double>& p,
                 std::function<Vec<double>&(TrainFfn&)> field) {
    mat(name, as_row(an), as_row(p), [field](TrainFfn& c, const Matrix<double>& q) { field(c) = q.storage(); });
  };
  mat("w_in", g.d_w_in, f.w_in, [](TrainFfn& c, const Matrix<double>& q) { c.w_in = q; });
  mat("w_out", g.d_w_out, f.w_out, [](TrainFfn& c, const Matrix<double>& q) { c.w_out = q; });
  vec("b_in", g.d_b_in, f.b_in, [](TrainFfn& c) -> Vec<double>& { return c.b_in; });
  vec("b_out", g.d_b_out, f.b_out, [](TrainFfn& c) -> Vec<double>& { return c.b_out; });
  vec("gamma1", g.d_gamma1, f.bn1.gamma, [](TrainFfn& c) -> Vec<double>& { return c.bn1.gamma; });
  vec("beta1", g.d_beta1, f.bn1.beta, [](TrainFfn& c) -> Vec<double>& { return c.bn1.beta; });
  vec("gamma2", g.d_gamma2, f.bn2.gamma, [](TrainFfn& c) -> Vec<double>& { return c.bn2.gamma; });
  vec("beta2", g.d_beta2, f.bn2.beta, [](TrainFfn& c) -> Vec<double>& { return c.bn2.beta; });
  out.push_back({"x", g.d_x, finite_diff_grad([&](const Matrix<double>& q) { return loss(f, q, up, mode); }, x, h)});
  return out;
}

/// Largest ||analytic - numeric|| / max(||numeric||, 1e-4) over all
/// components. The floor covers gradients that are exactly zero (shifts
/// cancelled by batch statistics), where only noise-level differences remain.
inline double worst_error(const std::vector<Check>& checks, std::string* which = nullptr) {
  double worst = 0;
  for (const Check& c : checks) {
    const double e = frobenius_norm(sub(c.analytic, c.numeric)) / std::max(frobenius_norm(c.numeric), 1e-4);
    if (e > worst) {
      worst = e;
      if (which) *which = c.name;
    }
  }
  return worst;
}

}  // namespace gradcheck
