#pragma once

#include <string>

#include "repavit/init.hpp"
#include "repavit/model.hpp"
#include "repavit/reparam.hpp"

namespace repavit {

/// Builds a model from its config with deterministic weights: every weight
/// matrix, the positional table and the class token are truncated-normal
/// (std 0.02, clipped at 2 std) keyed by (seed, tensor name); biases are
/// zero, norm scales one, batch-norm statistics at identity.
///
/// An idle-infer config is built as the idle-train model of the same seed,
/// frozen and reparameterized.
template <Real T>
Model<T> build_model(const ModelConfig& cfg) {
  cfg.validate();
  if (cfg.ffn_form == FfnForm::idle_infer) {
    ModelConfig train_cfg = cfg;
    train_cfg.ffn_form = FfnForm::idle_train;
    Model<T> train = build_model<T>(train_cfg);
    freeze_batchnorms(train);
    ReparamOptions opts;
    opts.spotcheck_rows = 0;
    Model<T> m = reparameterize_model(train, opts).model;
    m.config = cfg;
    return m;
  }

  Model<T> m = allocate_model<T>(cfg);
  const std::uint64_t seed = cfg.seed;
  auto fill = [seed](Matrix<T>& w, const std::string& name) { w = init_weights<T>(w.rows(), w.cols(), seed, name); };

  fill(m.patch_embed.proj.weight, "patch_embed.weight");
  fill(m.patch_embed.pos_embed, "pos_embed");
  m.patch_embed.cls_token = init_vector<T>(cfg.embed_dim, seed, "cls_token");
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    if (auto* a = std::get_if<AttentionBlock<T>>(&m.blocks[i].mixer)) {
      fill(a->qkv.weight, p + "attn.qkv.weight");
      fill(a->proj.weight, p + "attn.proj.weight");
    }
    if (auto* f = std::get_if<VanillaFfn<T>>(&m.blocks[i].ffn)) {
      fill(f->fc_in.weight, p + "ffn.fc_in.weight");
      fill(f->fc_out.weight, p + "ffn.fc_out.weight");
    } else if (auto* g = std::get_if<IdleFfnTrain<T>>(&m.blocks[i].ffn)) {
      fill(g->w_in, p + "ffn.w_in");
      fill(g->w_out, p + "ffn.w_out");
    }
  }
  fill(m.head.weight, "head.weight");
  return m;
}

/// Config of a named preset with the given idle ratio, FFN form and seed.
inline ModelConfig make_config(const std::string& preset, double idle_ratio, FfnForm form, std::uint64_t seed = 0) {
  ModelConfig c = preset_config(preset);
  c.idle_ratio = idle_ratio;
  c.ffn_form = form;
  c.seed = seed;
  c.validate();
  return c;
}

}  // namespace repavit
