#pragma once

// ViT building blocks and model assembly. Activations for a batch are held
// as one stacked matrix of (batch * tokens_per_sample) rows; token mixers
// operate on each sample's contiguous row range, everything else is
// row-wise (BatchNorm statistics are taken over every stacked row).

#include <chrono>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "repavit/config.hpp"
#include "repavit/norm.hpp"
#include "repavit/tensor.hpp"

namespace repavit {

enum class NormMode { train, eval };

/// y = x * weight + bias, weight stored in x inputs by outputs layout.
template <Real T>
struct Linear {
  Matrix<T> weight;
  Vec<T> bias;

  Matrix<T> operator()(const Matrix<T>& x) const { return add_bias(matmul(x, weight), bias); }
};

/// Pre-norm FFN with LayerNorm: Act(LN(x) W_in + b_in) W_out + b_out + x.
template <Real T>
struct VanillaFfn {
  LayerNormParams<T> norm;
  Linear<T> fc_in;
  Linear<T> fc_out;
};

/// Channel-idle FFN in training form. Hidden columns [0, active) go through
/// GELU; columns [active, hidden) are the idle linear route.
template <Real T>
struct IdleFfnTrain {
  BatchNormParams<T> bn1;
  Matrix<T> w_in;
  Vec<T> b_in;
  BatchNormParams<T> bn2;
  Matrix<T> w_out;
  Vec<T> b_out;
  std::size_t active = 0;

  std::size_t channels() const { return w_in.rows(); }
  std::size_t hidden() const { return w_in.cols(); }
};

/// Condensed inference form: Act(x W_act_in + b_act_in) W_act_out + x W_merged + b_merged.
/// The shortcut lives inside W_merged.
template <Real T>
struct IdleFfnInfer {
  Matrix<T> w_act_in;
  Vec<T> b_act_in;
  Matrix<T> w_act_out;
  Matrix<T> w_merged;
  Vec<T> b_merged;

  std::size_t channels() const { return w_merged.rows(); }
  std::size_t active() const { return w_act_in.cols(); }
};

template <Real T>
using Ffn = std::variant<VanillaFfn<T>, IdleFfnTrain<T>, IdleFfnInfer<T>>;

template <Real T>
struct AttentionBlock {
  LayerNormParams<T> norm;
  Linear<T> qkv;   // C x 3C, columns ordered [q | k | v], heads contiguous within each
  Linear<T> proj;  // C x C
  std::size_t heads = 1;

  std::size_t head_dim() const { return proj.weight.rows() / heads; }
};

/// Attention-free token mixer: x + mean_tokens(LN(x)) - LN(x).
template <Real T>
struct PoolMixer {
  LayerNormParams<T> norm;
};

template <Real T>
using TokenMixer = std::variant<AttentionBlock<T>, PoolMixer<T>>;

template <Real T>
struct Block {
  TokenMixer<T> mixer;
  Ffn<T> ffn;
};

template <Real T>
struct PatchEmbed {
  Linear<T> proj;       // (P*P*in_channels) x C
  Matrix<T> pos_embed;  // tokens x C, row 0 is the class-token position
  Vec<T> cls_token;     // C
};

template <Real T>
struct Model {
  ModelConfig config;
  PatchEmbed<T> patch_embed;
  std::vector<Block<T>> blocks;
  LayerNormParams<T> final_norm;
  Linear<T> head;
};

/// An image is in_channels rows by (height * width) columns, each row one
/// channel plane in row-major pixel order.
template <Real T>
using Image = Matrix<T>;

struct ComponentTimings {
  double patch_embed_ms = 0;
  double mhsa_ms = 0;  // token mixer, attention or pooling
  double ffn_ms = 0;
  double other_ms = 0;

  double total_ms() const { return patch_embed_ms + mhsa_ms + ffn_ms + other_ms; }
};

// ---------------------------------------------------------------------------
// FFN forwards

template <Real T>
Matrix<T> forward_ffn_vanilla(const VanillaFfn<T>& ffn, const Matrix<T>& x) {
  if (x.cols() != ffn.fc_in.weight.rows())
    throw DimensionError("forward_ffn_vanilla: input " + x.shape_str() + " vs fc_in " + ffn.fc_in.weight.shape_str());
  Matrix<T> h = gelu(ffn.fc_in(layernorm(x, ffn.norm)));
  Matrix<T> y = ffn.fc_out(h);
  add_inplace(y, x);
  return y;
}

namespace detail {
template <Real T>
void check_idle_train(const IdleFfnTrain<T>& ffn, const Matrix<T>& x) {
  if (x.cols() != ffn.channels())
    throw DimensionError("forward_ffn_idle_train: input " + x.shape_str() + " vs w_in " + ffn.w_in.shape_str());
  if (ffn.active > ffn.hidden()) throw DimensionError("forward_ffn_idle_train: active exceeds hidden width");
}

/// GELU on columns [0, active), identity on the rest. Equivalent to
/// concat(gelu(slice(h, 0, active)), slice(h, active, hidden)).
template <Real T>
Matrix<T> partial_gelu(Matrix<T> h, std::size_t active) {
  for (std::size_t i = 0; i < h.rows(); ++i) {
    auto r = h.row(i);
    for (std::size_t c = 0; c < active; ++c) r[c] = r[c] * normal_cdf(r[c]);
  }
  return h;
}
}  // namespace detail

/// Eval-mode forward of the channel-idle FFN (running statistics).
template <Real T>
Matrix<T> forward_ffn_idle_train(const IdleFfnTrain<T>& ffn, const Matrix<T>& x) {
  detail::check_idle_train(ffn, x);
  Matrix<T> h = add_bias(matmul(batchnorm_eval(x, ffn.bn1), ffn.w_in), ffn.b_in);
  h = detail::partial_gelu(std::move(h), ffn.active);
  Matrix<T> y = add_bias(matmul(batchnorm_eval(h, ffn.bn2), ffn.w_out), ffn.b_out);
  add_inplace(y, x);
  return y;
}

/// Forward in either mode. Train mode normalizes with batch statistics and
/// updates the running statistics; it requires both batch norms unfrozen.
template <Real T>
Matrix<T> forward_ffn_idle_train(IdleFfnTrain<T>& ffn, const Matrix<T>& x, NormMode mode, T momentum = T(0.1)) {
  if (mode == NormMode::eval) return forward_ffn_idle_train(std::as_const(ffn), x);
  detail::check_idle_train(ffn, x);
  if (ffn.bn1.frozen || ffn.bn2.frozen) throw StateError("forward_ffn_idle_train: train mode on a frozen batch norm");
  Matrix<T> h = add_bias(matmul(batchnorm_train_step(x, ffn.bn1, momentum), ffn.w_in), ffn.b_in);
  h = detail::partial_gelu(std::move(h), ffn.active);
  Matrix<T> y = add_bias(matmul(batchnorm_train_step(h, ffn.bn2, momentum), ffn.w_out), ffn.b_out);
  add_inplace(y, x);
  return y;
}

template <Real T>
Matrix<T> forward_ffn_idle_infer(const IdleFfnInfer<T>& ffn, const Matrix<T>& x) {
  if (x.cols() != ffn.channels())
    throw DimensionError("forward_ffn_idle_infer: input " + x.shape_str() + " vs w_merged " + ffn.w_merged.shape_str());
  Matrix<T> y = add_bias(matmul(x, ffn.w_merged), ffn.b_merged);
  if (ffn.active() > 0) add_inplace(y, matmul(gelu(add_bias(matmul(x, ffn.w_act_in), ffn.b_act_in)), ffn.w_act_out));
  return y;
}

template <Real T>
Matrix<T> forward_ffn(const Ffn<T>& ffn, const Matrix<T>& x) {
  return std::visit(
      [&](const auto& f) -> Matrix<T> {
        using F = std::decay_t<decltype(f)>;
        if constexpr (std::is_same_v<F, VanillaFfn<T>>) return forward_ffn_vanilla(f, x);
        else if constexpr (std::is_same_v<F, IdleFfnTrain<T>>) return forward_ffn_idle_train(f, x);
        else return forward_ffn_idle_infer(f, x);
      },
      ffn);
}

// ---------------------------------------------------------------------------
// Token mixers

namespace detail {
template <Real T>
void check_tokens(const char* op, const Matrix<T>& x, std::size_t tokens_per_sample) {
  if (tokens_per_sample == 0 || x.rows() % tokens_per_sample != 0)
    throw DimensionError(std::string(op) + ": " + std::to_string(x.rows()) + " rows is not a multiple of " +
                         std::to_string(tokens_per_sample) + " tokens per sample");
}
}  // namespace detail

/// Multi-head softmax attention on already-normalized input, before the
/// output projection. Returns the per-head context vectors, heads
/// concatenated along columns.
template <Real T>
Matrix<T> attention_context(const AttentionBlock<T>& attn, const Matrix<T>& normed, std::size_t tokens_per_sample) {
  detail::check_tokens("attention_context", normed, tokens_per_sample);
  const std::size_t C = attn.proj.weight.rows();
  const std::size_t d = attn.head_dim();
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
  const Matrix<T> qkv = attn.qkv(normed);
  Matrix<T> ctx(normed.rows(), C);
  const std::size_t n = tokens_per_sample;
  Matrix<T> q(n, d), kt(d, n), v(n, d);
  for (std::size_t s = 0; s < normed.rows() / n; ++s) {
    for (std::size_t h = 0; h < attn.heads; ++h) {
      for (std::size_t t = 0; t < n; ++t) {
        auto src = qkv.row(s * n + t);
        for (std::size_t j = 0; j < d; ++j) {
          q(t, j) = src[h * d + j] * inv_sqrt_d;
          kt(j, t) = src[C + h * d + j];
          v(t, j) = src[2 * C + h * d + j];
        }
      }
      const Matrix<T> out = matmul(softmax_rows(matmul(q, kt)), v);
      for (std::size_t t = 0; t < n; ++t) std::copy(out.row(t).begin(), out.row(t).end(), ctx.row(s * n + t).begin() + h * d);
    }
  }
  return ctx;
}

/// Residual attention sub-block: x + proj(attention(LN(x))).
template <Real T>
Matrix<T> forward_mhsa(const AttentionBlock<T>& attn, const Matrix<T>& x, std::size_t tokens_per_sample) {
  if (x.cols() != attn.proj.weight.rows())
    throw DimensionError("forward_mhsa: input " + x.shape_str() + " vs proj " + attn.proj.weight.shape_str());
  Matrix<T> y = attn.proj(attention_context(attn, layernorm(x, attn.norm), tokens_per_sample));
  add_inplace(y, x);
  return y;
}

/// Residual pooling sub-block: each token moves by (token mean - token) of the
/// normalized sample.
template <Real T>
Matrix<T> forward_pool_mixer(const PoolMixer<T>& mixer, const Matrix<T>& x, std::size_t tokens_per_sample) {
  detail::check_tokens("forward_pool_mixer", x, tokens_per_sample);
  if (x.cols() != mixer.norm.channels())
    throw DimensionError("forward_pool_mixer: input " + x.shape_str() + " vs norm width " +
                         std::to_string(mixer.norm.channels()));
  const Matrix<T> z = layernorm(x, mixer.norm);
  Matrix<T> y = x;
  const std::size_t n = tokens_per_sample;
  for (std::size_t s = 0; s < x.rows() / n; ++s) {
    const Vec<T> mean = mean_over_rows(slice_rows(z, s * n, (s + 1) * n));
    for (std::size_t t = s * n; t < (s + 1) * n; ++t)
      for (std::size_t c = 0; c < x.cols(); ++c) y(t, c) += mean[c] - z(t, c);
  }
  return y;
}

template <Real T>
Matrix<T> forward_mixer(const TokenMixer<T>& mixer, const Matrix<T>& x, std::size_t tokens_per_sample) {
  if (const auto* a = std::get_if<AttentionBlock<T>>(&mixer)) return forward_mhsa(*a, x, tokens_per_sample);
  return forward_pool_mixer(std::get<PoolMixer<T>>(mixer), x, tokens_per_sample);
}

// ---------------------------------------------------------------------------
// Whole model

/// Stacked token matrix for a batch of images: per sample, row 0 is the
/// class token, rows 1..P are patch embeddings; positional table added.
template <Real T>
Matrix<T> forward_patch_embed(const Model<T>& model, std::span<const Image<T>> images) {
  const ModelConfig& cfg = model.config;
  const std::size_t P = cfg.patch_size, G = cfg.grid(), W = cfg.image_size;
  const std::size_t tokens = cfg.tokens();
  Matrix<T> patches(images.size() * cfg.num_patches(), cfg.patch_dim());
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image<T>& img = images[b];
    if (img.rows() != cfg.in_channels || img.cols() != W * W)
      throw DimensionError("forward_patch_embed: image " + img.shape_str() + " does not match configured " +
                           std::to_string(cfg.in_channels) + "x" + std::to_string(W) + "x" + std::to_string(W));
    for (std::size_t gy = 0; gy < G; ++gy)
      for (std::size_t gx = 0; gx < G; ++gx) {
        auto dst = patches.row(b * cfg.num_patches() + gy * G + gx);
        std::size_t idx = 0;
        for (std::size_t c = 0; c < cfg.in_channels; ++c)
          for (std::size_t py = 0; py < P; ++py)
            for (std::size_t px = 0; px < P; ++px) dst[idx++] = img(c, (gy * P + py) * W + gx * P + px);
      }
  }
  const Matrix<T> emb = model.patch_embed.proj(patches);
  Matrix<T> x(images.size() * tokens, cfg.embed_dim);
  for (std::size_t b = 0; b < images.size(); ++b) {
    for (std::size_t t = 0; t < tokens; ++t) {
      auto dst = x.row(b * tokens + t);
      auto pos = model.patch_embed.pos_embed.row(t);
      auto src = t == 0 ? std::span<const T>(model.patch_embed.cls_token) : emb.row(b * cfg.num_patches() + t - 1);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] = src[c] + pos[c];
    }
  }
  return x;
}

namespace detail {
class Stopwatch {
 public:
  explicit Stopwatch(double* sink) : sink_(sink), start_(sink ? std::chrono::steady_clock::now() : Clock::time_point{}) {}
  ~Stopwatch() {
    if (sink_) *sink_ += std::chrono::duration<double, std::milli>(Clock::now() - start_).count();
  }

 private:
  using Clock = std::chrono::steady_clock;
  double* sink_;
  Clock::time_point start_;
};
}  // namespace detail

/// Class-token rows of a stacked token matrix.
template <Real T>
Matrix<T> class_tokens(const Matrix<T>& x, std::size_t tokens_per_sample) {
  detail::check_tokens("class_tokens", x, tokens_per_sample);
  Matrix<T> out(x.rows() / tokens_per_sample, x.cols());
  for (std::size_t s = 0; s < out.rows(); ++s)
    std::copy(x.row(s * tokens_per_sample).begin(), x.row(s * tokens_per_sample).end(), out.row(s).begin());
  return out;
}

/// Runs blocks, final norm and head on an already-embedded token matrix.
/// Returns one row of logits per sample.
template <Real T>
Matrix<T> forward_tokens(const Model<T>& model, Matrix<T> x, std::size_t tokens_per_sample,
                         ComponentTimings* timings = nullptr) {
  detail::check_tokens("forward_tokens", x, tokens_per_sample);
  for (const Block<T>& block : model.blocks) {
    {
      detail::Stopwatch sw(timings ? &timings->mhsa_ms : nullptr);
      x = forward_mixer(block.mixer, x, tokens_per_sample);
    }
    {
      detail::Stopwatch sw(timings ? &timings->ffn_ms : nullptr);
      x = forward_ffn(block.ffn, x);
    }
  }
  detail::Stopwatch sw(timings ? &timings->other_ms : nullptr);
  return model.head(layernorm(class_tokens(x, tokens_per_sample), model.final_norm));
}

template <Real T>
struct ForwardResult {
  Matrix<T> logits;
  std::optional<ComponentTimings> timings;
};

template <Real T>
ForwardResult<T> forward_model(const Model<T>& model, std::span<const Image<T>> images, bool timing = false) {
  ComponentTimings t;
  ComponentTimings* tp = timing ? &t : nullptr;
  Matrix<T> x;
  {
    detail::Stopwatch sw(tp ? &tp->patch_embed_ms : nullptr);
    x = forward_patch_embed(model, images);
  }
  ForwardResult<T> r{forward_tokens(model, std::move(x), model.config.tokens(), tp), std::nullopt};
  if (timing) r.timings = t;
  return r;
}

template <Real T>
ForwardResult<T> forward_model(const Model<T>& model, const Image<T>& image, bool timing = false) {
  return forward_model(model, std::span<const Image<T>>(&image, 1), timing);
}

// ---------------------------------------------------------------------------
// Allocation and tensor enumeration

/// A model of the configured shape with zero weights, unit norm scales and
/// identity batch-norm statistics.
template <Real T>
Model<T> allocate_model(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t C = cfg.embed_dim, H = cfg.hidden_dim(), A = cfg.active_dim();
  Model<T> m;
  m.config = cfg;
  m.patch_embed = {{Matrix<T>(cfg.patch_dim(), C), Vec<T>(C)}, Matrix<T>(cfg.tokens(), C), Vec<T>(C)};
  m.blocks.reserve(cfg.depth);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    Block<T> b;
    if (cfg.mixer == MixerKind::self_attention)
      b.mixer = AttentionBlock<T>{LayerNormParams<T>::identity(C), {Matrix<T>(C, 3 * C), Vec<T>(3 * C)},
                                  {Matrix<T>(C, C), Vec<T>(C)}, cfg.heads};
    else
      b.mixer = PoolMixer<T>{LayerNormParams<T>::identity(C)};
    switch (cfg.ffn_form) {
      case FfnForm::vanilla_ln:
        b.ffn = VanillaFfn<T>{LayerNormParams<T>::identity(C), {Matrix<T>(C, H), Vec<T>(H)}, {Matrix<T>(H, C), Vec<T>(C)}};
        break;
      case FfnForm::idle_train:
        b.ffn = IdleFfnTrain<T>{BatchNormParams<T>::identity(C), Matrix<T>(C, H), Vec<T>(H),
                                BatchNormParams<T>::identity(H), Matrix<T>(H, C), Vec<T>(C), A};
        break;
      case FfnForm::idle_infer:
        b.ffn = IdleFfnInfer<T>{Matrix<T>(C, A), Vec<T>(A), Matrix<T>(A, C), Matrix<T>::identity(C), Vec<T>(C)};
        break;
    }
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = LayerNormParams<T>::identity(C);
  m.head = {Matrix<T>(C, cfg.num_classes), Vec<T>(cfg.num_classes)};
  return m;
}

/// What a stored tensor is. Only parameters count toward parameter totals.
enum class TensorRole { parameter, buffer, scalar };

/// Model component a tensor belongs to, for accounting.
enum class Component { patch_embed, mhsa, ffn, head, norms_other };

inline const char* component_name(Component c) {
  switch (c) {
    case Component::patch_embed: return "patch_embed";
    case Component::mhsa: return "mhsa";
    case Component::ffn: return "ffn";
    case Component::head: return "head";
    case Component::norms_other: return "norms_other";
  }
  return "?";
}

template <class V>
struct TensorRef {
  std::string name;
  TensorRole role;
  Component component;
  std::vector<std::uint64_t> dims;
  std::span<V> data;
};

namespace detail {
template <class ModelT, class Visitor, class FlagVisitor>
void walk_model(ModelT& m, Visitor&& visit, FlagVisitor&& visit_flag) {
  using T = typename decltype(m.head.weight)::value_type;
  using V = std::conditional_t<std::is_const_v<ModelT>, const T, T>;
  auto mat = [&](const std::string& name, Component comp, auto& M) {
    visit(TensorRef<V>{name, TensorRole::parameter, comp, {M.rows(), M.cols()}, M.values()});
  };
  auto vec = [&](const std::string& name, Component comp, auto& v, TensorRole role = TensorRole::parameter) {
    visit(TensorRef<V>{name, role, comp, {v.size()}, std::span<V>(v)});
  };
  auto scalar = [&](const std::string& name, Component comp, auto& s) {
    visit(TensorRef<V>{name, TensorRole::scalar, comp, {}, std::span<V>(&s, 1)});
  };
  auto ln = [&](const std::string& p, Component comp, auto& n) {
    vec(p + ".gamma", comp, n.gamma);
    vec(p + ".beta", comp, n.beta);
    scalar(p + ".eps", comp, n.eps);
  };
  auto bn = [&](const std::string& p, Component comp, auto& n) {
    vec(p + ".gamma", comp, n.gamma);
    vec(p + ".beta", comp, n.beta);
    vec(p + ".running_mean", comp, n.running_mean, TensorRole::buffer);
    vec(p + ".running_var", comp, n.running_var, TensorRole::buffer);
    scalar(p + ".eps", comp, n.eps);
    visit_flag(p + ".frozen", n.frozen);
  };

  mat("patch_embed.weight", Component::patch_embed, m.patch_embed.proj.weight);
  vec("patch_embed.bias", Component::patch_embed, m.patch_embed.proj.bias);
  mat("pos_embed", Component::patch_embed, m.patch_embed.pos_embed);
  vec("cls_token", Component::patch_embed, m.patch_embed.cls_token);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    auto& blk = m.blocks[i];
    if (auto* a = std::get_if<AttentionBlock<T>>(&blk.mixer)) {
      ln(p + "attn.norm", Component::mhsa, a->norm);
      mat(p + "attn.qkv.weight", Component::mhsa, a->qkv.weight);
      vec(p + "attn.qkv.bias", Component::mhsa, a->qkv.bias);
      mat(p + "attn.proj.weight", Component::mhsa, a->proj.weight);
      vec(p + "attn.proj.bias", Component::mhsa, a->proj.bias);
    } else {
      ln(p + "pool.norm", Component::mhsa, std::get<PoolMixer<T>>(blk.mixer).norm);
    }
    std::visit(
        [&](auto& f) {
          using F = std::remove_const_t<std::remove_reference_t<decltype(f)>>;
          const std::string q = p + "ffn.";
          if constexpr (std::is_same_v<F, VanillaFfn<T>>) {
            ln(q + "norm", Component::ffn, f.norm);
            mat(q + "fc_in.weight", Component::ffn, f.fc_in.weight);
            vec(q + "fc_in.bias", Component::ffn, f.fc_in.bias);
            mat(q + "fc_out.weight", Component::ffn, f.fc_out.weight);
            vec(q + "fc_out.bias", Component::ffn, f.fc_out.bias);
          } else if constexpr (std::is_same_v<F, IdleFfnTrain<T>>) {
            bn(q + "bn1", Component::ffn, f.bn1);
            mat(q + "w_in", Component::ffn, f.w_in);
            vec(q + "b_in", Component::ffn, f.b_in);
            bn(q + "bn2", Component::ffn, f.bn2);
            mat(q + "w_out", Component::ffn, f.w_out);
            vec(q + "b_out", Component::ffn, f.b_out);
          } else {
            mat(q + "w_act_in", Component::ffn, f.w_act_in);
            vec(q + "b_act_in", Component::ffn, f.b_act_in);
            mat(q + "w_act_out", Component::ffn, f.w_act_out);
            mat(q + "w_merged", Component::ffn, f.w_merged);
            vec(q + "b_merged", Component::ffn, f.b_merged);
          }
        },
        blk.ffn);
  }
  ln("norm", Component::norms_other, m.final_norm);
  mat("head.weight", Component::head, m.head.weight);
  vec("head.bias", Component::head, m.head.bias);
}
}  // namespace detail

/// Calls visit(TensorRef) for every stored tensor in a fixed order, and
/// visit_flag(name, bool&) for every batch-norm frozen flag.
template <Real T, class Visitor, class FlagVisitor>
void visit_tensors(Model<T>& m, Visitor&& visit, FlagVisitor&& visit_flag) {
  detail::walk_model(m, visit, visit_flag);
}

template <Real T, class Visitor, class FlagVisitor>
void visit_tensors(const Model<T>& m, Visitor&& visit, FlagVisitor&& visit_flag) {
  detail::walk_model(m, visit, visit_flag);
}

template <Real T, class Visitor>
void visit_tensors(const Model<T>& m, Visitor&& visit) {
  detail::walk_model(m, visit, [](const std::string&, const bool&) {});
}

/// Freezes every batch norm in the model (running statistics become constants).
template <Real T>
void freeze_batchnorms(Model<T>& m) {
  for (auto& b : m.blocks)
    if (auto* f = std::get_if<IdleFfnTrain<T>>(&b.ffn)) {
      f->bn1.frozen = true;
      f->bn2.frozen = true;
    }
}

}  // namespace repavit
