#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "repavit/errors.hpp"

namespace repavit {

enum class MixerKind { self_attention, average_pool };
enum class FfnForm { vanilla_ln, idle_train, idle_infer };

inline std::string to_string(MixerKind m) { return m == MixerKind::self_attention ? "self-attention" : "average-pool"; }

inline std::string to_string(FfnForm f) {
  switch (f) {
    case FfnForm::vanilla_ln: return "vanilla-ln";
    case FfnForm::idle_train: return "idle-train";
    case FfnForm::idle_infer: return "idle-infer";
  }
  return "?";
}

inline MixerKind parse_mixer(const std::string& s) {
  if (s == "self-attention") return MixerKind::self_attention;
  if (s == "average-pool") return MixerKind::average_pool;
  throw ValidationError("unknown mixer '" + s + "' (expected self-attention or average-pool)");
}

inline FfnForm parse_ffn_form(const std::string& s) {
  if (s == "vanilla-ln") return FfnForm::vanilla_ln;
  if (s == "idle-train") return FfnForm::idle_train;
  if (s == "idle-infer") return FfnForm::idle_infer;
  throw ValidationError("unknown ffn_form '" + s + "' (expected vanilla-ln, idle-train or idle-infer)");
}

struct ModelConfig {
  std::optional<std::string> preset;
  std::size_t depth = 12;
  std::size_t embed_dim = 192;
  std::size_t heads = 3;
  double expand_ratio = 4.0;
  double idle_ratio = 0.75;
  std::size_t patch_size = 16;
  std::size_t image_size = 224;
  std::size_t in_channels = 3;
  std::size_t num_classes = 1000;
  MixerKind mixer = MixerKind::self_attention;
  FfnForm ffn_form = FfnForm::idle_train;
  std::uint64_t seed = 0;

  /// rho * C, the FFN hidden width.
  std::size_t hidden_dim() const { return static_cast<std::size_t>(std::llround(expand_ratio * embed_dim)); }

  /// mu * C = round((1 - theta) * rho * C), the activated hidden channels.
  std::size_t active_dim() const {
    return static_cast<std::size_t>(std::llround((1.0 - idle_ratio) * static_cast<double>(hidden_dim())));
  }

  std::size_t idle_dim() const { return hidden_dim() - active_dim(); }
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  /// Patches plus the class token.
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return patch_size * patch_size * in_channels; }

  void validate() const {
    auto fail = [](const std::string& why) { throw ValidationError("invalid model config: " + why); };
    if (depth == 0) fail("depth must be >= 1");
    if (embed_dim == 0) fail("embed_dim must be >= 1");
    if (heads == 0) fail("heads must be >= 1");
    if (embed_dim % heads != 0) fail("embed_dim (" + std::to_string(embed_dim) + ") not divisible by heads (" +
                                     std::to_string(heads) + ")");
    if (!(expand_ratio >= 1.0)) fail("expand_ratio must be >= 1");
    if (std::abs(expand_ratio * embed_dim - static_cast<double>(hidden_dim())) > 1e-9)
      fail("expand_ratio * embed_dim must be an integer");
    if (!(idle_ratio >= 0.0 && idle_ratio <= 1.0)) fail("idle_ratio must lie in [0, 1]");
    if (patch_size == 0 || image_size == 0) fail("patch_size and image_size must be >= 1");
    if (image_size % patch_size != 0) fail("image_size (" + std::to_string(image_size) +
                                           ") not divisible by patch_size (" + std::to_string(patch_size) + ")");
    if (in_channels == 0) fail("in_channels must be >= 1");
    if (num_classes == 0) fail("num_classes must be >= 1");
    if (active_dim() > hidden_dim()) fail("active channel count exceeds hidden width");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"deit-tiny", "deit-small", "deit-base",
                                                 "vit-large", "vit-huge",   "pool-tiny"};
  return names;
}

/// Architecture of a named preset. idle_ratio, ffn_form and seed keep their
/// defaults and are set by the caller.
inline ModelConfig preset_config(const std::string& name) {
  ModelConfig c;
  c.preset = name;
  auto vit = [&](std::size_t dim, std::size_t depth, std::size_t heads, std::size_t patch) {
    c.embed_dim = dim;
    c.depth = depth;
    c.heads = heads;
    c.patch_size = patch;
  };
  if (name == "deit-tiny") vit(192, 12, 3, 16);
  else if (name == "deit-small") vit(384, 12, 6, 16);
  else if (name == "deit-base") vit(768, 12, 12, 16);
  else if (name == "vit-large") vit(1024, 24, 16, 16);
  else if (name == "vit-huge") vit(1280, 32, 16, 14);
  else if (name == "pool-tiny") {
    vit(32, 2, 1, 8);
    c.image_size = 32;
    c.num_classes = 4;
    c.mixer = MixerKind::average_pool;
  } else {
    std::string known;
    for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ValidationError("unknown preset '" + name + "' (known: " + known + ")");
  }
  return c;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j = {{"depth", c.depth},
                      {"embed_dim", c.embed_dim},
                      {"heads", c.heads},
                      {"expand_ratio", c.expand_ratio},
                      {"idle_ratio", c.idle_ratio},
                      {"patch_size", c.patch_size},
                      {"image_size", c.image_size},
                      {"in_channels", c.in_channels},
                      {"num_classes", c.num_classes},
                      {"mixer", to_string(c.mixer)},
                      {"ffn_form", to_string(c.ffn_form)},
                      {"seed", c.seed}};
  if (c.preset) j["preset"] = *c.preset;
  return j;
}

/// Parses a config object. A "preset" key expands to that preset's fields
/// first; explicit keys then override them. Unknown keys are rejected.
inline ModelConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("model config must be a JSON object");
  static const std::vector<std::string> known = {"preset",     "depth",       "embed_dim",  "heads",
                                                 "expand_ratio", "idle_ratio", "patch_size", "image_size",
                                                 "in_channels", "num_classes", "mixer",      "ffn_form",
                                                 "seed"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ValidationError("unknown model config key '" + key + "'");

  ModelConfig c;
  try {
    if (j.contains("preset")) c = preset_config(j.at("preset").get<std::string>());
    auto take = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    take("depth", c.depth);
    take("embed_dim", c.embed_dim);
    take("heads", c.heads);
    take("expand_ratio", c.expand_ratio);
    take("idle_ratio", c.idle_ratio);
    take("patch_size", c.patch_size);
    take("image_size", c.image_size);
    take("in_channels", c.in_channels);
    take("num_classes", c.num_classes);
    take("seed", c.seed);
    if (j.contains("mixer")) c.mixer = parse_mixer(j.at("mixer").get<std::string>());
    if (j.contains("ffn_form")) c.ffn_form = parse_ffn_form(j.at("ffn_form").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace repavit
