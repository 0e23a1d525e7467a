#pragma once

// Hand-derived gradients for the channel-idle FFN, a finite-difference
// checker, and a small full-batch trainer for pooling-mixer models on a
// synthetic classification task.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "repavit/build.hpp"
#include "repavit/init.hpp"
#include "repavit/model.hpp"
#include "repavit/reparam.hpp"

namespace repavit {

template <Real T>
struct GradBundle {
  Matrix<T> d_w_in;
  Vec<T> d_b_in;
  Matrix<T> d_w_out;
  Vec<T> d_b_out;
  Vec<T> d_gamma1;
  Vec<T> d_beta1;
  Vec<T> d_gamma2;
  Vec<T> d_beta2;
  Matrix<T> d_x;
};

namespace detail {

/// Normalized activations and the statistics that produced them.
template <Real T>
struct NormCache {
  Matrix<T> xhat;
  Vec<T> inv_std;
};

template <Real T>
NormCache<T> normalize(const Matrix<T>& x, const BatchNormParams<T>& bn, NormMode mode) {
  Vec<T> mean, var;
  if (mode == NormMode::train) {
    BatchStats<T> st = batch_stats(x);
    mean = std::move(st.mean);
    var = std::move(st.var);
  } else {
    mean = bn.running_mean;
    var = bn.running_var;
  }
  NormCache<T> c{x, Vec<T>(x.cols())};
  for (std::size_t j = 0; j < x.cols(); ++j) c.inv_std[j] = T(1) / std::sqrt(var[j] + bn.eps);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = c.xhat.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = (r[j] - mean[j]) * c.inv_std[j];
  }
  return c;
}

template <Real T>
Matrix<T> affine(const NormCache<T>& c, const BatchNormParams<T>& bn) {
  Matrix<T> z = c.xhat;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto r = z.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = bn.gamma[j] * r[j] + bn.beta[j];
  }
  return z;
}

/// Gradient through a batch norm. In eval mode the statistics are constants;
/// in train mode the batch mean and variance depend on every row.
template <Real T>
Matrix<T> batchnorm_backward(const NormCache<T>& c, const BatchNormParams<T>& bn, const Matrix<T>& dz, NormMode mode,
                             Vec<T>& d_gamma, Vec<T>& d_beta) {
  const std::size_t n = dz.rows(), ch = dz.cols();
  d_gamma.assign(ch, T(0));
  d_beta.assign(ch, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < ch; ++j) {
      d_gamma[j] += dz(i, j) * c.xhat(i, j);
      d_beta[j] += dz(i, j);
    }
  Matrix<T> dx(n, ch);
  if (mode == NormMode::eval) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < ch; ++j) dx(i, j) = dz(i, j) * bn.gamma[j] * c.inv_std[j];
    return dx;
  }
  // dxhat = dz * gamma; dx = inv_std / n * (n dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
  const T nf = static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < ch; ++j) {
      const T dxhat = dz(i, j) * bn.gamma[j];
      dx(i, j) = c.inv_std[j] / nf *
                 (nf * dxhat - d_beta[j] * bn.gamma[j] - c.xhat(i, j) * d_gamma[j] * bn.gamma[j]);
    }
  return dx;
}

template <Real T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  return matmul(transpose(a), b);
}

template <Real T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  return matmul(a, transpose(b));
}

}  // namespace detail

/// Reverse-mode gradients of the channel-idle FFN output against `upstream`
/// (dL/dy). Train mode differentiates through the batch statistics; eval
/// mode treats the running statistics as constants. Does not modify `ffn`.
template <Real T>
GradBundle<T> ffn_backward(const IdleFfnTrain<T>& ffn, const Matrix<T>& x, const Matrix<T>& upstream, NormMode mode) {
  detail::check_idle_train(ffn, x);
  detail::require_same_shape("ffn_backward", x, upstream);
  if (mode == NormMode::train && (ffn.bn1.frozen || ffn.bn2.frozen))
    throw StateError("ffn_backward: train mode on a frozen batch norm");
  if (mode == NormMode::train && x.rows() < 2)
    throw DegenerateBatchError("ffn_backward: train mode needs at least 2 rows");

  const std::size_t A = ffn.active;
  const detail::NormCache<T> n1 = detail::normalize(x, ffn.bn1, mode);
  const Matrix<T> z1 = detail::affine(n1, ffn.bn1);
  const Matrix<T> h = add_bias(matmul(z1, ffn.w_in), ffn.b_in);
  const Matrix<T> a = detail::partial_gelu(h, A);
  const detail::NormCache<T> n2 = detail::normalize(a, ffn.bn2, mode);
  const Matrix<T> z2 = detail::affine(n2, ffn.bn2);

  GradBundle<T> g;
  g.d_b_out = sum_over_rows(upstream);
  g.d_w_out = detail::matmul_tn(z2, upstream);
  const Matrix<T> dz2 = detail::matmul_nt(upstream, ffn.w_out);
  Matrix<T> dh = detail::batchnorm_backward(n2, ffn.bn2, dz2, mode, g.d_gamma2, g.d_beta2);
  for (std::size_t i = 0; i < dh.rows(); ++i)
    for (std::size_t j = 0; j < A; ++j) {
      const T v = h(i, j);
      dh(i, j) *= normal_cdf(v) + v * normal_pdf(v);
    }
  g.d_b_in = sum_over_rows(dh);
  g.d_w_in = detail::matmul_tn(z1, dh);
  const Matrix<T> dz1 = detail::matmul_nt(dh, ffn.w_in);
  g.d_x = detail::batchnorm_backward(n1, ffn.bn1, dz1, mode, g.d_gamma1, g.d_beta1);
  add_inplace(g.d_x, upstream);
  return g;
}

template <Real T>
struct InferGradBundle {
  Matrix<T> d_w_act_in;
  Vec<T> d_b_act_in;
  Matrix<T> d_w_act_out;
  Matrix<T> d_w_merged;
  Vec<T> d_b_merged;
  Matrix<T> d_x;
};

/// Gradients of the condensed inference-form FFN.
template <Real T>
InferGradBundle<T> ffn_infer_backward(const IdleFfnInfer<T>& ffn, const Matrix<T>& x, const Matrix<T>& upstream) {
  detail::require_same_shape("ffn_infer_backward", x, upstream);
  InferGradBundle<T> g;
  g.d_w_merged = detail::matmul_tn(x, upstream);
  g.d_b_merged = sum_over_rows(upstream);
  g.d_x = detail::matmul_nt(upstream, ffn.w_merged);
  if (ffn.active() == 0) {
    g.d_w_act_in = Matrix<T>(ffn.channels(), 0);
    g.d_w_act_out = Matrix<T>(0, ffn.channels());
    return g;
  }
  const Matrix<T> h = add_bias(matmul(x, ffn.w_act_in), ffn.b_act_in);
  g.d_w_act_out = detail::matmul_tn(gelu(h), upstream);
  const Matrix<T> dh = hadamard(detail::matmul_nt(upstream, ffn.w_act_out), gelu_grad(h));
  g.d_w_act_in = detail::matmul_tn(x, dh);
  g.d_b_act_in = sum_over_rows(dh);
  add_inplace(g.d_x, detail::matmul_nt(dh, ffn.w_act_in));
  return g;
}

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every element
/// of `param`. `f` maps a parameter tensor to a scalar.
template <Real T, class F>
Matrix<T> finite_diff_grad(F&& f, const Matrix<T>& param, T h) {
  if (!(h > T(0))) throw ValidationError("finite_diff_grad: step must be positive");
  Matrix<T> grad(param.rows(), param.cols());
  Matrix<T> p = param;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T orig = p.values()[i];
    p.values()[i] = orig + h;
    const double up = static_cast<double>(f(std::as_const(p)));
    p.values()[i] = orig - h;
    const double down = static_cast<double>(f(std::as_const(p)));
    p.values()[i] = orig;
    grad.values()[i] = static_cast<T>((up - down) / (2.0 * static_cast<double>(h)));
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Synthetic task

/// Gaussian class-prototype mixture: each class owns a tokens x dim
/// prototype with N(0, 1) entries; a sample is its class prototype plus
/// N(0, noise^2) noise. Labels cycle through the classes.
struct ToyTask {
  std::uint64_t seed = 7;
  std::size_t samples = 2000;
  std::size_t token_count = 4;
  std::size_t embed_dim = 32;
  std::size_t classes = 4;
  double noise = 1.0;

  void validate() const {
    if (classes < 2) throw ValidationError("ToyTask: need at least 2 classes");
    if (samples == 0 || token_count == 0 || embed_dim == 0) throw ValidationError("ToyTask: empty task");
    if (!(noise >= 0.0)) throw ValidationError("ToyTask: noise must be non-negative");
  }
};

template <Real T>
struct ToyData {
  Matrix<T> tokens;  // samples * token_count rows
  std::vector<std::size_t> labels;
  std::size_t tokens_per_sample = 0;
};

template <Real T>
ToyData<T> make_toy_data(const ToyTask& task) {
  task.validate();
  const std::size_t per = task.token_count * task.embed_dim;
  const CounterRng protos(task.seed, "toy.prototypes");
  const CounterRng noise(task.seed, "toy.noise");
  ToyData<T> d{Matrix<T>(task.samples * task.token_count, task.embed_dim), {}, task.token_count};
  d.labels.resize(task.samples);
  auto v = d.tokens.values();
  for (std::size_t s = 0; s < task.samples; ++s) {
    const std::size_t label = s % task.classes;
    d.labels[s] = label;
    for (std::size_t k = 0; k < per; ++k)
      v[s * per + k] = static_cast<T>(protos.normal(label * per + k) + task.noise * noise.normal(s * per + k));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Toy trainer

enum class TrainForm { idle_train, idle_infer };

inline TrainForm parse_train_form(const std::string& s) {
  if (s == "idle-train" || s == "train") return TrainForm::idle_train;
  if (s == "idle-infer" || s == "infer") return TrainForm::idle_infer;
  throw ValidationError("unknown train form '" + s + "' (expected idle-train or idle-infer)");
}

inline std::string to_string(TrainForm f) { return f == TrainForm::idle_train ? "idle-train" : "idle-infer"; }

struct TrainSummary {
  std::vector<double> loss_curve;
  double final_accuracy = 0;
};

inline nlohmann::json to_json(const TrainSummary& s) {
  return {{"loss_curve", s.loss_curve}, {"final_accuracy", s.final_accuracy}};
}

template <Real T>
struct ToyTrainResult {
  TrainSummary summary;
  Model<T> model;
};

namespace detail {

/// Mean softmax cross-entropy and its gradient with respect to the logits.
template <Real T>
double cross_entropy(const Matrix<T>& logits, const std::vector<std::size_t>& labels, Matrix<T>* dlogits) {
  const Matrix<T> p = softmax_rows(logits);
  double loss = 0;
  const T inv_b = T(1) / static_cast<T>(logits.rows());
  if (dlogits) *dlogits = scale(p, inv_b);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    loss -= std::log(std::max(static_cast<double>(p(i, labels[i])), 1e-300));
    if (dlogits) (*dlogits)(i, labels[i]) -= inv_b;
  }
  return loss / static_cast<double>(logits.rows());
}

template <Real T>
void sgd(Matrix<T>& w, const Matrix<T>& g, T lr) {
  auto wv = w.values();
  auto gv = g.values();
  for (std::size_t i = 0; i < wv.size(); ++i) wv[i] -= lr * gv[i];
}

template <Real T>
void sgd(Vec<T>& w, const Vec<T>& g, T lr) {
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
}

/// Gradient of the pooling mixer u = x + mean_tokens(z) - z, z = LN(x).
template <Real T>
Matrix<T> pool_mixer_backward(const PoolMixer<T>& mixer, const Matrix<T>& x, const Matrix<T>& du, std::size_t tps) {
  Matrix<T> dz(du.rows(), du.cols());
  for (std::size_t s = 0; s < du.rows() / tps; ++s) {
    const Vec<T> mean = mean_over_rows(slice_rows(du, s * tps, (s + 1) * tps));
    for (std::size_t t = s * tps; t < (s + 1) * tps; ++t)
      for (std::size_t c = 0; c < du.cols(); ++c) dz(t, c) = mean[c] - du(t, c);
  }
  Matrix<T> dx = layernorm_backward_input(x, mixer.norm, dz);
  add_inplace(dx, du);
  return dx;
}

template <Real T>
std::size_t count_correct(const Matrix<T>& logits, const std::vector<std::size_t>& labels) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) ok += argmax(logits.row(i)) == labels[i];
  return ok;
}

}  // namespace detail

/// Full-batch gradient descent on every FFN parameter (including batch-norm
/// affine terms) and the head. Batch norms run in train mode and update their
/// running statistics each step. Mixer and final norms stay fixed.
///
/// train_form idle-train trains the two-projection form; idle-infer trains
/// the condensed three-matrix form directly.
template <Real T>
ToyTrainResult<T> train_toy(ModelConfig cfg, const ToyTask& task, std::size_t steps, T lr, TrainForm train_form,
                            T momentum = T(0.1)) {
  if (cfg.mixer != MixerKind::average_pool)
    throw UnsupportedError("train_toy: backprop is implemented for average-pool mixers only");
  if (steps == 0) throw ValidationError("train_toy: steps must be >= 1");
  if (task.embed_dim != cfg.embed_dim)
    throw ValidationError("train_toy: task embed_dim " + std::to_string(task.embed_dim) + " != model embed_dim " +
                          std::to_string(cfg.embed_dim));
  if (task.classes != cfg.num_classes)
    throw ValidationError("train_toy: task classes " + std::to_string(task.classes) + " != model num_classes " +
                          std::to_string(cfg.num_classes));
  cfg.ffn_form = train_form == TrainForm::idle_train ? FfnForm::idle_train : FfnForm::idle_infer;

  ToyTrainResult<T> r{{}, build_model<T>(cfg)};
  Model<T>& m = r.model;
  const ToyData<T> data = make_toy_data<T>(task);
  const std::size_t tps = data.tokens_per_sample;
  const std::size_t depth = m.blocks.size();

  for (std::size_t step = 0; step < steps; ++step) {
    // Forward, keeping each sub-block's input.
    std::vector<Matrix<T>> mixer_in(depth), ffn_in(depth);
    Matrix<T> x = data.tokens;
    for (std::size_t b = 0; b < depth; ++b) {
      mixer_in[b] = x;
      x = forward_pool_mixer(std::get<PoolMixer<T>>(m.blocks[b].mixer), x, tps);
      ffn_in[b] = x;
      if (auto* f = std::get_if<IdleFfnTrain<T>>(&m.blocks[b].ffn)) x = forward_ffn_idle_train(*f, x, NormMode::train, momentum);
      else x = forward_ffn_idle_infer(std::get<IdleFfnInfer<T>>(m.blocks[b].ffn), x);
    }
    const Matrix<T> cls = class_tokens(x, tps);
    const Matrix<T> feat = layernorm(cls, m.final_norm);
    const Matrix<T> logits = m.head(feat);
    Matrix<T> dlogits;
    r.summary.loss_curve.push_back(detail::cross_entropy(logits, data.labels, &dlogits));

    // Backward.
    const Matrix<T> d_head_w = detail::matmul_tn(feat, dlogits);
    const Vec<T> d_head_b = sum_over_rows(dlogits);
    const Matrix<T> dcls = layernorm_backward_input(cls, m.final_norm, detail::matmul_nt(dlogits, m.head.weight));
    Matrix<T> dx(x.rows(), x.cols());
    for (std::size_t s = 0; s < dcls.rows(); ++s)
      std::copy(dcls.row(s).begin(), dcls.row(s).end(), dx.row(s * tps).begin());

    for (std::size_t b = depth; b-- > 0;) {
      Matrix<T> du;
      if (auto* f = std::get_if<IdleFfnTrain<T>>(&m.blocks[b].ffn)) {
        // ffn_backward recomputes batch statistics from ffn_in, matching the
        // forward above.
        GradBundle<T> g = ffn_backward(*f, ffn_in[b], dx, NormMode::train);
        detail::sgd(f->w_in, g.d_w_in, lr);
        detail::sgd(f->b_in, g.d_b_in, lr);
        detail::sgd(f->w_out, g.d_w_out, lr);
        detail::sgd(f->b_out, g.d_b_out, lr);
        detail::sgd(f->bn1.gamma, g.d_gamma1, lr);
        detail::sgd(f->bn1.beta, g.d_beta1, lr);
        detail::sgd(f->bn2.gamma, g.d_gamma2, lr);
        detail::sgd(f->bn2.beta, g.d_beta2, lr);
        du = std::move(g.d_x);
      } else {
        auto& f2 = std::get<IdleFfnInfer<T>>(m.blocks[b].ffn);
        InferGradBundle<T> g = ffn_infer_backward(f2, ffn_in[b], dx);
        if (f2.active() > 0) {
          detail::sgd(f2.w_act_in, g.d_w_act_in, lr);
          detail::sgd(f2.b_act_in, g.d_b_act_in, lr);
          detail::sgd(f2.w_act_out, g.d_w_act_out, lr);
        }
        detail::sgd(f2.w_merged, g.d_w_merged, lr);
        detail::sgd(f2.b_merged, g.d_b_merged, lr);
        du = std::move(g.d_x);
      }
      dx = detail::pool_mixer_backward(std::get<PoolMixer<T>>(m.blocks[b].mixer), mixer_in[b], du, tps);
    }
    detail::sgd(m.head.weight, d_head_w, lr);
    detail::sgd(m.head.bias, d_head_b, lr);
  }

  const Matrix<T> eval_logits = forward_tokens(m, data.tokens, tps);
  r.summary.final_accuracy =
      static_cast<double>(detail::count_correct(eval_logits, data.labels)) / static_cast<double>(data.labels.size());
  return r;
}

struct VerifyResult {
  double max_rel_diff = 0;
  bool predictions_match = true;
};

/// Per-sample relative logit difference ||a_i - b_i|| / ||b_i||, maximized
/// over samples, and whether every argmax agrees.
template <Real T>
VerifyResult compare_logits(const Matrix<T>& got, const Matrix<T>& want) {
  detail::require_same_shape("compare_logits", got, want);
  VerifyResult v;
  for (std::size_t i = 0; i < got.rows(); ++i) {
    double num = 0, den = 0;
    for (std::size_t j = 0; j < got.cols(); ++j) {
      const double d = static_cast<double>(got(i, j)) - want(i, j);
      num += d * d;
      den += static_cast<double>(want(i, j)) * want(i, j);
    }
    v.max_rel_diff = std::max(v.max_rel_diff, den > 0 ? std::sqrt(num / den) : std::sqrt(num));
    v.predictions_match = v.predictions_match && argmax(got.row(i)) == argmax(want.row(i));
  }
  return v;
}

/// Freezes a copy of an idle-train model, reparameterizes it and compares
/// logits of the frozen and the rewritten model on stacked probe tokens.
template <Real T>
VerifyResult freeze_then_verify(const Model<T>& model, const Matrix<T>& probe_tokens, std::size_t tokens_per_sample) {
  Model<T> frozen = model;
  freeze_batchnorms(frozen);
  const Model<T> rewritten = reparameterize_model(frozen).model;
  return compare_logits(forward_tokens(rewritten, probe_tokens, tokens_per_sample),
                        forward_tokens(frozen, probe_tokens, tokens_per_sample));
}

}  // namespace repavit
