#pragma once

// Exact parameter and multiply-accumulate counts per model component.
//
// Two MAC conventions:
//   linear-only  projection matmuls and the patch embedding only (what the
//                usual FLOP counters report for ViTs);
//   full         additionally the two N^2 C attention products per block.
// Normalization, activations, softmax and additions are never counted.

#include <array>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "repavit/config.hpp"
#include "repavit/model.hpp"

namespace repavit {

enum class MacMode { linear_only, full };

inline std::string to_string(MacMode m) { return m == MacMode::linear_only ? "linear-only" : "full"; }

inline MacMode parse_mac_mode(const std::string& s) {
  if (s == "linear-only") return MacMode::linear_only;
  if (s == "full") return MacMode::full;
  throw ValidationError("unknown counting mode '" + s + "' (expected linear-only or full)");
}

struct ComponentCount {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;

  friend bool operator==(const ComponentCount&, const ComponentCount&) = default;
};

inline constexpr std::array<Component, 5> kComponents = {Component::patch_embed, Component::mhsa, Component::ffn,
                                                         Component::head, Component::norms_other};

struct AccountingReport {
  std::array<ComponentCount, 5> per_component{};  // indexed by Component
  ModelConfig config_echo;
  MacMode counting_mode = MacMode::linear_only;
  std::uint64_t tokens = 0;

  ComponentCount& operator[](Component c) { return per_component[static_cast<std::size_t>(c)]; }
  const ComponentCount& operator[](Component c) const { return per_component[static_cast<std::size_t>(c)]; }

  ComponentCount totals() const {
    ComponentCount t;
    for (const auto& c : per_component) {
      t.params += c.params;
      t.macs += c.macs;
    }
    return t;
  }
};

/// Fraction of FFN parameters (or MACs) left after reparameterization,
/// weights only: ((2 mu + 1) C^2) / (2 rho C^2) = 1 - theta + 1 / (2 rho).
inline double reduction_ratio(double theta, double rho) {
  if (!(theta >= 0.0 && theta <= 1.0)) throw ValidationError("reduction_ratio: theta must lie in [0, 1]");
  if (!(rho >= 1.0)) throw ValidationError("reduction_ratio: rho must be >= 1");
  return 1.0 - theta + 1.0 / (2.0 * rho);
}

// ---------------------------------------------------------------------------
// Counting from a materialized model

/// Element counts of every parameter tensor (weights, biases, norm affine
/// terms, positional table, class token). Batch-norm running statistics and
/// eps scalars are buffers and not counted.
template <Real T>
AccountingReport count_params(const Model<T>& model) {
  AccountingReport r;
  r.config_echo = model.config;
  visit_tensors(model, [&](const auto& t) {
    if (t.role == TensorRole::parameter) r[t.component].params += t.data.size();
  });
  return r;
}

/// Parameter and MAC counts for `tokens` tokens per image (class token
/// included), read off the model's actual tensor shapes.
template <Real T>
AccountingReport count_macs(const Model<T>& model, std::uint64_t tokens, MacMode mode) {
  if (tokens == 0) throw ValidationError("count_macs: tokens must be >= 1");
  AccountingReport r = count_params(model);
  r.counting_mode = mode;
  r.tokens = tokens;
  const std::uint64_t N = tokens;
  const auto& pe = model.patch_embed.proj.weight;
  r[Component::patch_embed].macs = (N - 1) * pe.rows() * pe.cols();
  for (const auto& b : model.blocks) {
    if (const auto* a = std::get_if<AttentionBlock<T>>(&b.mixer)) {
      const std::uint64_t C = a->proj.weight.rows();
      r[Component::mhsa].macs += N * a->qkv.weight.size() + N * a->proj.weight.size();
      if (mode == MacMode::full) r[Component::mhsa].macs += 2 * N * N * C;
    }
    std::visit(
        [&](const auto& f) {
          using F = std::decay_t<decltype(f)>;
          std::uint64_t m = 0;
          if constexpr (std::is_same_v<F, VanillaFfn<T>>) m = N * (f.fc_in.weight.size() + f.fc_out.weight.size());
          else if constexpr (std::is_same_v<F, IdleFfnTrain<T>>) m = N * (f.w_in.size() + f.w_out.size());
          else m = N * (f.w_act_in.size() + f.w_act_out.size() + f.w_merged.size());
          r[Component::ffn].macs += m;
        },
        b.ffn);
  }
  r[Component::head].macs = model.head.weight.size();
  return r;
}

// ---------------------------------------------------------------------------
// Counting from a config alone (no weights allocated), by formula

inline AccountingReport count_params(const ModelConfig& cfg) {
  cfg.validate();
  AccountingReport r;
  r.config_echo = cfg;
  const std::uint64_t C = cfg.embed_dim, H = cfg.hidden_dim(), A = cfg.active_dim(), D = cfg.depth;
  r[Component::patch_embed].params = cfg.patch_dim() * C + C + cfg.tokens() * C + C;
  const std::uint64_t mixer = cfg.mixer == MixerKind::self_attention ? 2 * C + 3 * C * C + 3 * C + C * C + C : 2 * C;
  r[Component::mhsa].params = D * mixer;
  std::uint64_t ffn = 0;
  switch (cfg.ffn_form) {
    case FfnForm::vanilla_ln: ffn = 2 * C + 2 * C * H + H + C; break;
    case FfnForm::idle_train: ffn = 2 * C + 2 * H + 2 * C * H + H + C; break;
    case FfnForm::idle_infer: ffn = (2 * A + C) * C + A + C; break;
  }
  r[Component::ffn].params = D * ffn;
  r[Component::head].params = C * cfg.num_classes + cfg.num_classes;
  r[Component::norms_other].params = 2 * C;
  return r;
}

inline AccountingReport count_macs(const ModelConfig& cfg, std::uint64_t tokens, MacMode mode) {
  if (tokens == 0) throw ValidationError("count_macs: tokens must be >= 1");
  AccountingReport r = count_params(cfg);
  r.counting_mode = mode;
  r.tokens = tokens;
  const std::uint64_t N = tokens, C = cfg.embed_dim, H = cfg.hidden_dim(), A = cfg.active_dim(), D = cfg.depth;
  r[Component::patch_embed].macs = (N - 1) * cfg.patch_dim() * C;
  if (cfg.mixer == MixerKind::self_attention)
    r[Component::mhsa].macs = D * (4 * N * C * C + (mode == MacMode::full ? 2 * N * N * C : 0));
  const std::uint64_t ffn = cfg.ffn_form == FfnForm::idle_infer ? N * (2 * A + C) * C : 2 * N * C * H;
  r[Component::ffn].macs = D * ffn;
  r[Component::head].macs = C * cfg.num_classes;
  return r;
}

/// FFN share of total MACs.
inline double ffn_fraction(const AccountingReport& r) {
  const auto total = r.totals().macs;
  if (total == 0) throw ValidationError("ffn_fraction: report has no MACs");
  return static_cast<double>(r[Component::ffn].macs) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const AccountingReport& r) {
  nlohmann::json comps = nlohmann::json::object();
  for (Component c : kComponents) comps[component_name(c)] = {{"params", r[c].params}, {"macs", r[c].macs}};
  const ComponentCount t = r.totals();
  return {{"per_component", comps},
          {"totals", {{"params", t.params}, {"macs", t.macs}}},
          {"config_echo", to_json(r.config_echo)},
          {"counting_mode", to_string(r.counting_mode)},
          {"tokens", r.tokens}};
}

inline std::string to_text(const AccountingReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "component" << std::right << std::setw(16) << "params" << std::setw(12)
     << "MParam" << std::setw(18) << "macs" << std::setw(10) << "GMACs" << "\n";
  auto line = [&](const std::string& name, const ComponentCount& c) {
    os << std::left << std::setw(14) << name << std::right << std::setw(16) << c.params << std::setw(12) << std::fixed
       << std::setprecision(3) << c.params / 1e6 << std::setw(18) << c.macs << std::setw(10) << c.macs / 1e9 << "\n";
  };
  for (Component c : kComponents) line(component_name(c), r[c]);
  line("total", r.totals());
  os << "mode: " << to_string(r.counting_mode) << ", tokens: " << r.tokens << "\n";
  return os.str();
}

inline std::string to_csv(const AccountingReport& r) {
  std::ostringstream os;
  os << "component,params,macs\n";
  for (Component c : kComponents) os << component_name(c) << "," << r[c].params << "," << r[c].macs << "\n";
  const ComponentCount t = r.totals();
  os << "total," << t.params << "," << t.macs << "\n";
  return os.str();
}

}  // namespace repavit
