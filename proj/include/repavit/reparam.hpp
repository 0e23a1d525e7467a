#pragma once

// Post-training rewrite of channel-idle FFNs into their condensed inference
// form:
//
//   1. fold bn1 into (w_in, b_in) and bn2 into (w_out, b_out);
//   2. split the folded projections at the active/idle boundary;
//   3. merge the idle route and the shortcut into one C x C matrix,
//        w_merged = w_in_idle * w_out_idle + I,
//        b_merged = b_in_idle * w_out_idle + b_out.
//
// The weight algebra runs in double and is cast to the model dtype once.

#include <cmath>
#include <string>
#include <vector>

#include "repavit/init.hpp"
#include "repavit/model.hpp"

namespace repavit {

template <Real T>
struct FoldedLinear {
  Matrix<T> weight;
  Vec<T> bias;
};

struct ReparamReport {
  std::size_t layer_index = 0;
  std::size_t params_before = 0;  // weights, biases and BN affine terms of the train form
  std::size_t params_after = 0;   // weights and biases of the infer form
  std::size_t weight_params_before = 0;
  std::size_t weight_params_after = 0;
  /// weight_params_after / weight_params_before; >= 1 means the rewrite inflates the layer.
  double reduction_ratio_measured = 0;
  bool reduces = false;
  double max_abs_diff_spotcheck = 0;
  bool spotcheck_passed = true;
};

struct ReparamOptions {
  std::size_t spotcheck_rows = 4;
  /// Relative tolerance for the spot check; 0 selects 1e-12 (f64) / 1e-4 (f32).
  double spotcheck_tolerance = 0;
  std::uint64_t spotcheck_seed = 0x5eed;
};

template <Real T>
constexpr double default_equivalence_tolerance() {
  return std::is_same_v<T, double> ? 1e-12 : 1e-4;
}

/// Folds a frozen batch norm that precedes a linear map:
/// BN(x) w + b == x (diag(s) w) + ((beta - s * mean) w + b), s = gamma / sqrt(var + eps).
template <Real T>
FoldedLinear<T> fold_batchnorm(const BatchNormParams<T>& bn, const Matrix<T>& w, const Vec<T>& b) {
  if (!bn.frozen) throw StateError("fold_batchnorm: batch norm must be frozen before folding");
  bn.validate();
  if (bn.channels() != w.rows())
    throw DimensionError("fold_batchnorm: batch norm over " + std::to_string(bn.channels()) +
                         " channels cannot fold into weight " + w.shape_str());
  if (b.size() != w.cols())
    throw DimensionError("fold_batchnorm: bias length " + std::to_string(b.size()) + " vs weight " + w.shape_str());

  const std::size_t rows = w.rows(), cols = w.cols();
  Matrix<double> weight(rows, cols);
  std::vector<double> shift(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double s = static_cast<double>(bn.gamma[r]) /
                     std::sqrt(static_cast<double>(bn.running_var[r]) + static_cast<double>(bn.eps));
    shift[r] = static_cast<double>(bn.beta[r]) - s * static_cast<double>(bn.running_mean[r]);
    for (std::size_t c = 0; c < cols; ++c) weight(r, c) = s * static_cast<double>(w(r, c));
  }
  std::vector<double> bias(b.begin(), b.end());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) bias[c] += shift[r] * static_cast<double>(w(r, c));
  return {cast<T>(weight), cast<T>(bias)};
}

template <Real T>
struct MergedIdlePath {
  Matrix<T> w_merged;
  Vec<T> bias_contrib;
};

/// w_merged = w_in_idle * w_out_idle + I, bias_contrib = b_in_idle * w_out_idle.
/// An idle width of zero yields the identity.
template <Real T>
MergedIdlePath<T> merge_idle_path(const Matrix<T>& w_in_idle, const Vec<T>& b_in_idle, const Matrix<T>& w_out_idle) {
  if (w_in_idle.cols() != w_out_idle.rows())
    throw DimensionError(detail::shapes("merge_idle_path", w_in_idle.rows(), w_in_idle.cols(), w_out_idle.rows(),
                                        w_out_idle.cols()));
  if (w_in_idle.rows() != w_out_idle.cols())
    throw DimensionError("merge_idle_path: merged matrix would be " + std::to_string(w_in_idle.rows()) + "x" +
                         std::to_string(w_out_idle.cols()) + ", not square");
  if (b_in_idle.size() != w_in_idle.cols())
    throw DimensionError("merge_idle_path: idle bias length " + std::to_string(b_in_idle.size()) + " vs idle width " +
                         std::to_string(w_in_idle.cols()));
  const std::size_t C = w_in_idle.rows();
  const Matrix<double> out64 = cast<double>(w_out_idle);
  Matrix<double> merged = matmul(cast<double>(w_in_idle), out64);
  for (std::size_t i = 0; i < C; ++i) merged(i, i) += 1.0;
  Matrix<double> brow(1, b_in_idle.size(), std::vector<double>(b_in_idle.begin(), b_in_idle.end()));
  const Matrix<double> contrib = matmul(brow, out64);
  return {cast<T>(merged), cast<T>(contrib.storage())};
}

namespace detail {
inline std::size_t train_form_params(std::size_t C, std::size_t H) { return 2 * C * H + H + C + 2 * (C + H); }
inline std::size_t infer_form_params(std::size_t C, std::size_t A) { return (2 * A + C) * C + A + C; }

template <Real T>
Matrix<T> spotcheck_input(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  const CounterRng rng(seed, "reparam.spotcheck");
  Matrix<T> x(rows, cols);
  auto v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(rng.normal(i));
  return x;
}
}  // namespace detail

template <Real T>
struct ReparamResult {
  IdleFfnInfer<T> ffn;
  ReparamReport report;
};

/// Rewrites one frozen channel-idle FFN into its inference form and spot
/// checks the two forms against each other on random rows.
template <Real T>
ReparamResult<T> reparameterize_ffn(const IdleFfnTrain<T>& ffn, ReparamOptions opts = {}) {
  if (!ffn.bn1.frozen || !ffn.bn2.frozen)
    throw StateError("reparameterize_ffn: both batch norms must be frozen");
  const std::size_t C = ffn.channels(), H = ffn.hidden(), A = ffn.active;
  if (A > H) throw DimensionError("reparameterize_ffn: active exceeds hidden width");

  // Fold in double so the f32 result is rounded only once.
  auto to64 = [](const BatchNormParams<T>& bn) {
    return BatchNormParams<double>{cast<double>(bn.gamma), cast<double>(bn.beta), cast<double>(bn.running_mean),
                                   cast<double>(bn.running_var), static_cast<double>(bn.eps), bn.frozen};
  };
  const FoldedLinear<double> in = fold_batchnorm(to64(ffn.bn1), cast<double>(ffn.w_in), cast<double>(ffn.b_in));
  const FoldedLinear<double> out = fold_batchnorm(to64(ffn.bn2), cast<double>(ffn.w_out), cast<double>(ffn.b_out));

  const Matrix<double> w_out_idle = slice_rows(out.weight, A, H);
  const Vec<double> b_in_idle(in.bias.begin() + A, in.bias.end());
  const MergedIdlePath<double> merged = merge_idle_path(slice_cols(in.weight, A, H), b_in_idle, w_out_idle);

  IdleFfnInfer<T> result;
  result.w_act_in = cast<T>(slice_cols(in.weight, 0, A));
  result.b_act_in = Vec<T>(in.bias.begin(), in.bias.begin() + A);
  result.w_act_out = cast<T>(slice_rows(out.weight, 0, A));
  result.w_merged = cast<T>(merged.w_merged);
  result.b_merged.resize(C);
  for (std::size_t c = 0; c < C; ++c) result.b_merged[c] = static_cast<T>(merged.bias_contrib[c] + out.bias[c]);

  ReparamReport rep;
  rep.params_before = detail::train_form_params(C, H);
  rep.params_after = detail::infer_form_params(C, A);
  rep.weight_params_before = 2 * C * H;
  rep.weight_params_after = (2 * A + C) * C;
  rep.reduction_ratio_measured = static_cast<double>(rep.weight_params_after) / static_cast<double>(rep.weight_params_before);
  rep.reduces = rep.reduction_ratio_measured < 1.0;

  if (opts.spotcheck_rows > 0) {
    const Matrix<T> x = detail::spotcheck_input<T>(opts.spotcheck_rows, C, opts.spotcheck_seed);
    const Matrix<T> want = forward_ffn_idle_train(ffn, x);
    const Matrix<T> got = forward_ffn_idle_infer(result, x);
    rep.max_abs_diff_spotcheck = max_abs_diff(got, want);
    const double tol = opts.spotcheck_tolerance > 0 ? opts.spotcheck_tolerance : default_equivalence_tolerance<T>();
    rep.spotcheck_passed = rel_frobenius_diff(got, want) <= tol;
  }
  return {std::move(result), rep};
}

template <Real T>
struct ModelReparamResult {
  Model<T> model;
  std::vector<ReparamReport> reports;
};

/// Rewrites every FFN of an idle-train model. Non-FFN tensors are copied
/// unchanged. The source model is not modified.
template <Real T>
ModelReparamResult<T> reparameterize_model(const Model<T>& model, ReparamOptions opts = {}) {
  if (model.config.ffn_form == FfnForm::idle_infer)
    throw StateError("reparameterize_model: model is already in idle-infer form");
  if (model.config.ffn_form == FfnForm::vanilla_ln)
    throw StateError("reparameterize_model: vanilla-ln FFNs use LayerNorm, which cannot be folded");
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const auto* f = std::get_if<IdleFfnTrain<T>>(&model.blocks[i].ffn);
    if (!f) throw StateError("reparameterize_model: block " + std::to_string(i) + " is not in idle-train form");
    if (!f->bn1.frozen || !f->bn2.frozen)
      throw StateError("reparameterize_model: block " + std::to_string(i) + " has an unfrozen batch norm");
  }

  ModelReparamResult<T> r;
  r.model.config = model.config;
  r.model.config.ffn_form = FfnForm::idle_infer;
  r.model.patch_embed = model.patch_embed;
  r.model.final_norm = model.final_norm;
  r.model.head = model.head;
  r.model.blocks.reserve(model.blocks.size());
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    ReparamOptions o = opts;
    o.spotcheck_seed = opts.spotcheck_seed + i;
    auto [ffn, rep] = reparameterize_ffn(std::get<IdleFfnTrain<T>>(model.blocks[i].ffn), o);
    rep.layer_index = i;
    r.model.blocks.push_back(Block<T>{model.blocks[i].mixer, std::move(ffn)});
    r.reports.push_back(rep);
  }
  return r;
}

}  // namespace repavit
