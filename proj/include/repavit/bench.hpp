#pragma once

// Drivers behind the command-line tool: latency profiling of the pre- and
// post-rewrite forms, whole-model equivalence checks, accounting and file
// rewriting.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "repavit/accounting.hpp"
#include "repavit/build.hpp"
#include "repavit/io.hpp"
#include "repavit/reparam.hpp"
#include "repavit/training.hpp"

namespace repavit {

// ---------------------------------------------------------------------------
// Random inputs and statistics

/// Deterministic N(0, 1) images for a config.
template <Real T>
std::vector<Image<T>> random_images(const ModelConfig& cfg, std::size_t count, std::uint64_t seed) {
  const CounterRng rng(seed, "bench.images");
  const std::size_t per = cfg.in_channels * cfg.image_size * cfg.image_size;
  std::vector<Image<T>> out;
  out.reserve(count);
  for (std::size_t b = 0; b < count; ++b) {
    Image<T> img(cfg.in_channels, cfg.image_size * cfg.image_size);
    auto v = img.values();
    for (std::size_t i = 0; i < per; ++i) v[i] = static_cast<T>(rng.normal(b * per + i));
    out.push_back(std::move(img));
  }
  return out;
}

struct StatRanges {
  double gamma_lo = 0.5, gamma_hi = 1.5;
  double beta_std = 0.1;
  double mean_std = 0.1;
  double var_lo = 0.5, var_hi = 2.0;
  double bias_std = 0.02;
};

/// Replaces every idle-train FFN's batch-norm affine terms, running
/// statistics and biases with seeded random values. Freezing is untouched.
template <Real T>
void randomize_ffn_statistics(Model<T>& m, std::uint64_t seed, const StatRanges& r = {}) {
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto* f = std::get_if<IdleFfnTrain<T>>(&m.blocks[i].ffn);
    if (!f) continue;
    const std::string p = "blocks." + std::to_string(i) + ".ffn.";
    auto bn = [&](BatchNormParams<T>& n, const std::string& name) {
      const CounterRng g(seed, p + name + ".gamma"), b(seed, p + name + ".beta"), mu(seed, p + name + ".mean"),
          var(seed, p + name + ".var");
      for (std::size_t c = 0; c < n.channels(); ++c) {
        n.gamma[c] = static_cast<T>(r.gamma_lo + (r.gamma_hi - r.gamma_lo) * g.uniform(c));
        n.beta[c] = static_cast<T>(r.beta_std * b.normal(c));
        n.running_mean[c] = static_cast<T>(r.mean_std * mu.normal(c));
        n.running_var[c] = static_cast<T>(r.var_lo + (r.var_hi - r.var_lo) * var.uniform(c));
      }
    };
    bn(f->bn1, "bn1");
    bn(f->bn2, "bn2");
    const CounterRng bi(seed, p + "b_in"), bo(seed, p + "b_out");
    for (std::size_t c = 0; c < f->b_in.size(); ++c) f->b_in[c] = static_cast<T>(r.bias_std * bi.normal(c));
    for (std::size_t c = 0; c < f->b_out.size(); ++c) f->b_out[c] = static_cast<T>(r.bias_std * bo.normal(c));
  }
}

// ---------------------------------------------------------------------------
// Profiling

struct BenchOptions {
  ModelConfig config;  // idle_ratio is theta; ffn_form is the pre-rewrite form
  std::size_t batch = 32;
  DType dtype = DType::f32;
  std::size_t warmup_iters = 10;
  std::size_t measure_iters = 50;
  unsigned threads = 1;
  std::uint64_t input_seed = 1;
  bool run_post = true;
};

struct BenchReport {
  std::string preset;
  double theta = 0;
  std::size_t batch_size = 0;
  std::string dtype;
  std::size_t warmup_iters = 0;
  std::size_t measure_iters = 0;
  ComponentTimings per_component_ms;       // pre-rewrite form
  ComponentTimings per_component_ms_post;  // condensed form
  double total_ms_pre = 0;
  double total_ms_post = 0;
  double images_per_second_pre = 0;
  double images_per_second_post = 0;
  double speedup_percent = 0;
  std::string environment_note;

  double ffn_fraction_pre() const { return total_ms_pre > 0 ? per_component_ms.ffn_ms / total_ms_pre : 0; }
};

namespace detail {

struct Sample {
  ComponentTimings parts;
  double wall_ms = 0;
};

/// The iteration with the median wall time. Its components sum to at most
/// its wall time, which a per-component median would not guarantee.
inline Sample median_sample(std::vector<Sample> s) {
  std::nth_element(s.begin(), s.begin() + s.size() / 2, s.end(),
                   [](const Sample& a, const Sample& b) { return a.wall_ms < b.wall_ms; });
  return s[s.size() / 2];
}

template <Real T>
Sample timed_forward(const Model<T>& m, std::span<const Image<T>> images) {
  const auto t0 = std::chrono::steady_clock::now();
  const ForwardResult<T> r = forward_model(m, images, true);
  const double wall = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return {*r.timings, wall};
}

class ThreadScope {
 public:
  explicit ThreadScope(unsigned n) : saved_(matmul_threads()) { set_matmul_threads(n); }
  ~ThreadScope() { set_matmul_threads(saved_); }
  ThreadScope(const ThreadScope&) = delete;
  ThreadScope& operator=(const ThreadScope&) = delete;

 private:
  unsigned saved_;
};

inline std::string environment_note(unsigned threads) {
  std::ostringstream os;
  os << "CPU wall clock, " << threads << " matmul thread(s), " << std::thread::hardware_concurrency()
     << " hardware thread(s), compiler " << __VERSION__ << "; absolute numbers are machine-specific";
  return os.str();
}

template <Real T>
BenchReport run_profile_typed(const BenchOptions& o) {
  if (o.measure_iters < 10) throw ValidationError("profile: measure iterations must be >= 10");
  if (o.batch == 0) throw ValidationError("profile: batch must be >= 1");
  if (o.config.ffn_form == FfnForm::idle_infer)
    throw ValidationError("profile: the pre-rewrite form must be vanilla-ln or idle-train");
  o.config.validate();

  Model<T> pre = build_model<T>(o.config);
  freeze_batchnorms(pre);
  Model<T> post;
  if (o.run_post) {
    ModelConfig pc = o.config;
    pc.ffn_form = FfnForm::idle_infer;
    post = build_model<T>(pc);
  }
  const std::vector<Image<T>> images = random_images<T>(o.config, o.batch, o.input_seed);
  const std::span<const Image<T>> batch(images);

  ThreadScope threads(o.threads);
  for (std::size_t i = 0; i < o.warmup_iters; ++i) {
    timed_forward(pre, batch);
    if (o.run_post) timed_forward(post, batch);
  }
  // Interleaved so that slow drift in machine state hits both forms alike.
  std::vector<Sample> a, b;
  for (std::size_t i = 0; i < o.measure_iters; ++i) {
    a.push_back(timed_forward(pre, batch));
    if (o.run_post) b.push_back(timed_forward(post, batch));
  }

  BenchReport r;
  r.preset = o.config.preset.value_or("custom");
  r.theta = o.config.idle_ratio;
  r.batch_size = o.batch;
  r.dtype = dtype_name(dtype_of<T>());
  r.warmup_iters = o.warmup_iters;
  r.measure_iters = o.measure_iters;
  const Sample ma = median_sample(a);
  r.per_component_ms = ma.parts;
  r.total_ms_pre = ma.wall_ms;
  r.images_per_second_pre = 1000.0 * static_cast<double>(o.batch) / ma.wall_ms;
  if (o.run_post) {
    const Sample mb = median_sample(b);
    r.per_component_ms_post = mb.parts;
    r.total_ms_post = mb.wall_ms;
    r.images_per_second_post = 1000.0 * static_cast<double>(o.batch) / mb.wall_ms;
    r.speedup_percent = 100.0 * (r.images_per_second_post / r.images_per_second_pre - 1.0);
  }
  r.environment_note = environment_note(o.threads);
  return r;
}

}  // namespace detail

inline BenchReport run_profile(const BenchOptions& o) {
  return o.dtype == DType::f64 ? detail::run_profile_typed<double>(o) : detail::run_profile_typed<float>(o);
}

/// Preset convenience overload: idle-train pre form at the given theta.
inline BenchReport run_profile(const std::string& preset, double theta, std::size_t batch, std::size_t iters) {
  BenchOptions o;
  o.config = make_config(preset, theta, FfnForm::idle_train);
  o.batch = batch;
  o.measure_iters = iters;
  return run_profile(o);
}

inline nlohmann::json timings_json(const ComponentTimings& t) {
  return {{"patch_embed", t.patch_embed_ms}, {"mhsa", t.mhsa_ms}, {"ffn", t.ffn_ms}, {"other", t.other_ms}};
}

inline nlohmann::json to_json(const BenchReport& r) {
  return {{"preset", r.preset},
          {"theta", r.theta},
          {"batch_size", r.batch_size},
          {"dtype", r.dtype},
          {"warmup_iters", r.warmup_iters},
          {"measure_iters", r.measure_iters},
          {"per_component_ms", timings_json(r.per_component_ms)},
          {"images_per_second_pre", r.images_per_second_pre},
          {"images_per_second_post", r.images_per_second_post},
          {"speedup_percent", r.speedup_percent},
          {"environment_note", r.environment_note}};
}

inline std::string to_csv(const BenchReport& r) {
  std::ostringstream os;
  os << "component,pre_ms,post_ms\n";
  auto row = [&](const char* n, double a, double b) { os << n << "," << a << "," << b << "\n"; };
  row("patch_embed", r.per_component_ms.patch_embed_ms, r.per_component_ms_post.patch_embed_ms);
  row("mhsa", r.per_component_ms.mhsa_ms, r.per_component_ms_post.mhsa_ms);
  row("ffn", r.per_component_ms.ffn_ms, r.per_component_ms_post.ffn_ms);
  row("other", r.per_component_ms.other_ms, r.per_component_ms_post.other_ms);
  return os.str();
}

inline std::string to_text(const BenchReport& r) {
  std::ostringstream os;
  os << "preset " << r.preset << ", theta " << r.theta << ", batch " << r.batch_size << ", " << r.dtype << ", "
     << r.warmup_iters << " warmup + " << r.measure_iters << " measured (median)\n";
  os << std::left << std::setw(13) << "component" << std::right << std::setw(12) << "pre ms" << std::setw(12)
     << "post ms" << "\n"
     << std::fixed << std::setprecision(3);
  auto row = [&](const char* n, double a, double b) {
    os << std::left << std::setw(13) << n << std::right << std::setw(12) << a << std::setw(12) << b << "\n";
  };
  row("patch_embed", r.per_component_ms.patch_embed_ms, r.per_component_ms_post.patch_embed_ms);
  row("mhsa", r.per_component_ms.mhsa_ms, r.per_component_ms_post.mhsa_ms);
  row("ffn", r.per_component_ms.ffn_ms, r.per_component_ms_post.ffn_ms);
  row("other", r.per_component_ms.other_ms, r.per_component_ms_post.other_ms);
  row("wall", r.total_ms_pre, r.total_ms_post);
  os << std::setprecision(2) << "FFN share (pre): " << 100.0 * r.ffn_fraction_pre() << "%\n"
     << "images/s: " << r.images_per_second_pre << " -> " << r.images_per_second_post << " (" << std::showpos
     << r.speedup_percent << std::noshowpos << "%)\n"
     << r.environment_note << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Verification

struct VerifyOptions {
  ModelConfig config;  // idle_ratio is theta
  std::size_t probes = 20;
  DType dtype = DType::f32;
  std::uint64_t input_seed = 2;
  /// Negative control: added to w_merged(0, 0) of the first block after the rewrite.
  double corrupt_merged = 0;
};

struct VerifyReport {
  double max_rel_diff = 0;
  bool predictions_match = true;
  bool pass = false;
  double tolerance = 0;
  std::size_t probes = 0;
};

template <Real T>
constexpr double verify_tolerance() {
  return std::is_same_v<T, double> ? 1e-10 : 1e-4;
}

inline nlohmann::json to_json(const VerifyReport& v) {
  return {{"max_rel_diff", v.max_rel_diff},
          {"pass", v.pass},
          {"predictions_match", v.predictions_match},
          {"tolerance", v.tolerance},
          {"probes", v.probes}};
}

/// Compares a frozen idle-train model with its rewrite on random images.
/// Pass requires the relative logit difference within tolerance and equal
/// argmax predictions.
template <Real T>
VerifyReport verify_models(const Model<T>& reference, const Model<T>& rewritten, std::size_t probes,
                           std::uint64_t input_seed) {
  if (probes == 0) throw ValidationError("verify: probes must be >= 1");
  const std::vector<Image<T>> images = random_images<T>(reference.config, probes, input_seed);
  const VerifyResult c = compare_logits(forward_model(rewritten, std::span<const Image<T>>(images)).logits,
                                        forward_model(reference, std::span<const Image<T>>(images)).logits);
  VerifyReport v{c.max_rel_diff, c.predictions_match, false, verify_tolerance<T>(), probes};
  v.pass = c.predictions_match && c.max_rel_diff <= v.tolerance;
  return v;
}

namespace detail {
template <Real T>
VerifyReport run_verify_typed(const VerifyOptions& o) {
  ModelConfig cfg = o.config;
  cfg.ffn_form = FfnForm::idle_train;
  Model<T> m = build_model<T>(cfg);
  randomize_ffn_statistics(m, cfg.seed);
  freeze_batchnorms(m);
  ReparamOptions ro;
  ro.spotcheck_rows = 0;
  Model<T> r = reparameterize_model(m, ro).model;
  if (o.corrupt_merged != 0)
    std::get<IdleFfnInfer<T>>(r.blocks.at(0).ffn).w_merged(0, 0) += static_cast<T>(o.corrupt_merged);
  return verify_models(m, r, o.probes, o.input_seed);
}
}  // namespace detail

inline VerifyReport run_verify(const VerifyOptions& o) {
  return o.dtype == DType::f64 ? detail::run_verify_typed<double>(o) : detail::run_verify_typed<float>(o);
}

inline VerifyReport run_verify(const std::string& preset, double theta, std::size_t probes, DType dtype,
                               std::uint64_t seed = 0) {
  VerifyOptions o;
  o.config = make_config(preset, theta, FfnForm::idle_train, seed);
  o.probes = probes;
  o.dtype = dtype;
  return run_verify(o);
}

// ---------------------------------------------------------------------------
// Accounting and file rewriting

/// Counts by formula from the config; `tokens` 0 selects the config's own.
inline AccountingReport run_account(const ModelConfig& cfg, MacMode mode, std::uint64_t tokens = 0) {
  return count_macs(cfg, tokens == 0 ? cfg.tokens() : tokens, mode);
}

inline AccountingReport run_account(const std::string& preset, double theta, MacMode mode,
                                    FfnForm form = FfnForm::idle_infer) {
  return run_account(make_config(preset, theta, form), mode);
}

inline nlohmann::json to_json(const ReparamReport& r) {
  return {{"layer_index", r.layer_index},
          {"params_before", r.params_before},
          {"params_after", r.params_after},
          {"weight_params_before", r.weight_params_before},
          {"weight_params_after", r.weight_params_after},
          {"reduction_ratio_measured", r.reduction_ratio_measured},
          {"reduces", r.reduces},
          {"max_abs_diff_spotcheck", r.max_abs_diff_spotcheck},
          {"spotcheck_passed", r.spotcheck_passed}};
}

inline nlohmann::json to_json(const std::vector<ReparamReport>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : v) a.push_back(to_json(r));
  return a;
}

/// Loads an idle-train weight file, optionally freezes its batch norms,
/// rewrites it and saves the condensed model in the same dtype.
inline std::vector<ReparamReport> run_reparam(const std::filesystem::path& in, const std::filesystem::path& out,
                                              bool freeze = false) {
  return std::visit(
      [&](auto&& m) {
        if (freeze) freeze_batchnorms(m);
        auto r = reparameterize_model(m);
        save_model(r.model, out);
        return r.reports;
      },
      load_any_model(in));
}

}  // namespace repavit
