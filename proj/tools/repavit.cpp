// repavit: profile, verify, account, reparam, train-toy and init subcommands.
//
// Exit codes: 0 success, 1 verification failure or runtime error,
// 2 usage error (bad flags or invalid configuration).

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "repavit/repavit.hpp"

namespace {

using namespace repavit;
using nlohmann::json;

constexpr int kOk = 0;
constexpr int kFail = 1;
constexpr int kUsage = 2;

struct ConfigFlags {
  std::string preset = "deit-tiny";
  std::string config_file;
  std::optional<double> theta;
  std::optional<double> rho;
  std::optional<std::size_t> depth;
  std::optional<std::size_t> image;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--preset", preset, "Model preset")->check(CLI::IsMember(preset_names()));
    app->add_option("--config", config_file, "Model config JSON file (overrides --preset)");
    app->add_option("--theta", theta, "Idle ratio in [0, 1]");
    app->add_option("--rho", rho, "FFN expansion ratio");
    app->add_option("--depth", depth, "Override the number of blocks");
    app->add_option("--image", image, "Override the image size");
    app->add_option("--seed", seed, "Weight seed");
  }

  ModelConfig make(FfnForm form) const {
    ModelConfig c;
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw ValidationError("cannot read config file '" + config_file + "'");
      try {
        c = config_from_json(json::parse(in));
      } catch (const json::exception& e) {
        throw ValidationError(std::string("config file: ") + e.what());
      }
    } else {
      c = preset_config(preset);
    }
    if (theta) c.idle_ratio = *theta;
    if (rho) c.expand_ratio = *rho;
    if (depth) c.depth = *depth;
    if (image) c.image_size = *image;
    c.ffn_form = form;
    c.seed = seed;
    c.validate();
    return c;
  }
};

FfnForm parse_form_flag(const std::string& s) {
  if (s == "vanilla" || s == "vanilla-ln") return FfnForm::vanilla_ln;
  if (s == "train" || s == "idle-train") return FfnForm::idle_train;
  if (s == "infer" || s == "idle-infer") return FfnForm::idle_infer;
  throw ValidationError("unknown form '" + s + "' (expected vanilla, train or infer)");
}

DType parse_dtype(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw ValidationError("unknown dtype '" + s + "'");
}

const std::vector<std::string> kFormats = {"json", "csv", "text"};
const std::vector<std::string> kForms = {"vanilla", "vanilla-ln", "train", "idle-train", "infer", "idle-infer"};

void emit(const std::string& text, const std::string& out) {
  if (out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot open '" + out + "' for writing");
  f << text;
  if (!f) throw std::runtime_error("write to '" + out + "' failed");
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------

template <Real T>
VerifyReport verify_file(const Model<T>& m, const std::string& ref_path, std::size_t probes, std::uint64_t seed) {
  if (m.config.ffn_form == FfnForm::idle_train) {
    Model<T> frozen = m;
    freeze_batchnorms(frozen);
    ReparamOptions o;
    o.spotcheck_rows = 0;
    return verify_models(frozen, reparameterize_model(frozen, o).model, probes, seed);
  }
  if (m.config.ffn_form == FfnForm::vanilla_ln) throw ValidationError("verify: vanilla-ln models have no rewrite");
  if (!ref_path.empty()) {
    Model<T> ref = load_model<T>(ref_path);
    freeze_batchnorms(ref);
    return verify_models(ref, m, probes, seed);
  }
  // No reference: only check that the condensed model produces finite logits.
  const auto images = random_images<T>(m.config, probes, seed);
  VerifyReport v;
  v.probes = probes;
  v.tolerance = verify_tolerance<T>();
  v.pass = all_finite(forward_model(m, std::span<const Image<T>>(images)).logits);
  v.max_rel_diff = v.pass ? 0.0 : std::numeric_limits<double>::infinity();
  return v;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Channel-idle FFN reparameterization toolkit"};
  app.require_subcommand(1);

  // profile
  ConfigFlags pf;
  std::string p_form = "train", p_dtype = "f32", p_out, p_format = "json";
  std::size_t p_batch = 32, p_iters = 50, p_warmup = 10;
  unsigned p_threads = 1;
  auto* profile = app.add_subcommand("profile", "Per-component latency before and after the rewrite");
  pf.add(profile);
  profile->add_option("--form", p_form, "Pre-rewrite form (vanilla or train)")->check(CLI::IsMember(kForms));
  profile->add_option("--batch", p_batch, "Images per forward pass");
  profile->add_option("--dtype", p_dtype)->check(CLI::IsMember({"f32", "f64"}));
  profile->add_option("--iters", p_iters, "Measured iterations (>= 10)");
  profile->add_option("--warmup", p_warmup, "Warmup iterations");
  profile->add_option("--threads", p_threads, "Matmul threads for both forms");
  profile->add_option("--out", p_out, "Report path (default stdout)");
  profile->add_option("--format", p_format)->check(CLI::IsMember(kFormats));

  // verify
  ConfigFlags vf;
  std::string v_dtype = "f32", v_in, v_ref, v_out, v_format = "json";
  std::size_t v_probes = 20;
  double v_corrupt = 0;
  auto* verify = app.add_subcommand("verify", "Check that the rewrite preserves model outputs");
  vf.add(verify);
  verify->add_option("--dtype", v_dtype)->check(CLI::IsMember({"f32", "f64"}));
  verify->add_option("--probes,--iters", v_probes, "Random probe images");
  verify->add_option("--in", v_in, "Weight file to verify instead of a random model");
  verify->add_option("--ref", v_ref, "Idle-train reference for an idle-infer --in file");
  verify->add_option("--corrupt", v_corrupt, "Add this to one merged weight (negative control)");
  verify->add_option("--out", v_out);
  verify->add_option("--format", v_format)->check(CLI::IsMember({"json", "text"}));

  // account
  ConfigFlags af;
  std::string a_form = "train", a_mode = "full", a_in, a_out, a_format = "text";
  std::uint64_t a_tokens = 0;
  auto* account = app.add_subcommand("account", "Parameter and MAC counts per component");
  af.add(account);
  account->add_option("--form", a_form)->check(CLI::IsMember(kForms));
  account->add_option("--mode", a_mode)->check(CLI::IsMember({"linear-only", "full"}));
  account->add_option("--tokens", a_tokens, "Tokens per image (default from the config)");
  account->add_option("--in", a_in, "Count a weight file instead of a preset");
  account->add_option("--out", a_out);
  account->add_option("--format", a_format)->check(CLI::IsMember(kFormats));

  // reparam
  std::string r_in, r_out, r_report;
  bool r_freeze = false;
  auto* reparam = app.add_subcommand("reparam", "Rewrite an idle-train weight file into idle-infer form");
  reparam->add_option("--in", r_in, "Idle-train weight file")->required();
  reparam->add_option("--out", r_out, "Output weight file")->required();
  reparam->add_flag("--freeze", r_freeze, "Freeze batch norms before rewriting");
  reparam->add_option("--report", r_report, "Per-layer report path (default stdout)");

  // train-toy
  ConfigFlags tf;
  tf.preset = "pool-tiny";
  std::string t_form = "train", t_dtype = "f32", t_out, t_save, t_format = "json";
  std::size_t t_steps = 200, t_samples = 2000;
  double t_lr = 0.1, t_noise = 1.0;
  std::uint64_t t_data_seed = 7;
  auto* train = app.add_subcommand("train-toy", "Gradient descent on the synthetic prototype task");
  tf.add(train);
  train->add_option("--form", t_form, "train (two projections) or infer (condensed)")->check(CLI::IsMember(kForms));
  train->add_option("--dtype", t_dtype)->check(CLI::IsMember({"f32", "f64"}));
  train->add_option("--steps,--iters", t_steps);
  train->add_option("--lr", t_lr);
  train->add_option("--samples", t_samples);
  train->add_option("--noise", t_noise);
  train->add_option("--data-seed", t_data_seed);
  train->add_option("--save", t_save, "Write the trained model to this weight file");
  train->add_option("--out", t_out);
  train->add_option("--format", t_format)->check(CLI::IsMember({"json", "text"}));

  // init
  ConfigFlags inf;
  std::string i_form = "train", i_dtype = "f32", i_out;
  bool i_random = false, i_freeze = false;
  auto* init = app.add_subcommand("init", "Write a freshly initialized model to a weight file");
  inf.add(init);
  init->add_option("--form", i_form)->check(CLI::IsMember(kForms));
  init->add_option("--dtype", i_dtype)->check(CLI::IsMember({"f32", "f64"}));
  init->add_flag("--random-stats", i_random, "Randomize batch-norm statistics and FFN biases");
  init->add_flag("--freeze", i_freeze, "Freeze batch norms");
  init->add_option("--out", i_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kUsage;
  }

  try {
    if (*profile) {
      BenchOptions o;
      o.config = pf.make(parse_form_flag(p_form));
      if (o.config.ffn_form == FfnForm::idle_infer) throw ValidationError("profile: --form must be vanilla or train");
      o.batch = p_batch;
      o.dtype = parse_dtype(p_dtype);
      o.measure_iters = p_iters;
      o.warmup_iters = p_warmup;
      o.threads = p_threads;
      const BenchReport r = run_profile(o);
      emit(p_format == "json" ? dump(to_json(r)) : p_format == "csv" ? to_csv(r) : to_text(r), p_out);
      return kOk;
    }
    if (*verify) {
      VerifyReport r;
      if (!v_in.empty()) {
        r = std::visit([&](const auto& m) { return verify_file(m, v_ref, v_probes, vf.seed + 2); }, load_any_model(v_in));
      } else {
        VerifyOptions o;
        o.config = vf.make(FfnForm::idle_train);
        o.probes = v_probes;
        o.dtype = parse_dtype(v_dtype);
        o.corrupt_merged = v_corrupt;
        r = run_verify(o);
      }
      if (v_format == "json") emit(dump(to_json(r)), v_out);
      else
        emit(std::string(r.pass ? "PASS" : "FAIL") + " max_rel_diff=" + std::to_string(r.max_rel_diff) +
                 " tolerance=" + std::to_string(r.tolerance) +
                 " predictions_match=" + (r.predictions_match ? "true" : "false") + "\n",
             v_out);
      return r.pass ? kOk : kFail;
    }
    if (*account) {
      const MacMode mode = parse_mac_mode(a_mode);
      AccountingReport r;
      if (!a_in.empty()) {
        r = std::visit(
            [&](const auto& m) { return count_macs(m, a_tokens ? a_tokens : m.config.tokens(), mode); },
            load_any_model(a_in));
      } else {
        r = run_account(af.make(parse_form_flag(a_form)), mode, a_tokens);
      }
      emit(a_format == "json" ? dump(to_json(r)) : a_format == "csv" ? to_csv(r) : to_text(r), a_out);
      return kOk;
    }
    if (*reparam) {
      const auto reports = run_reparam(r_in, r_out, r_freeze);
      emit(dump(to_json(reports)), r_report);
      for (const auto& r : reports)
        if (!r.spotcheck_passed) return kFail;
      return kOk;
    }
    if (*train) {
      const FfnForm form = parse_form_flag(t_form);
      if (form == FfnForm::vanilla_ln) throw ValidationError("train-toy: --form must be train or infer");
      ModelConfig cfg = tf.make(FfnForm::idle_train);
      ToyTask task;
      task.seed = t_data_seed;
      task.samples = t_samples;
      task.embed_dim = cfg.embed_dim;
      task.classes = cfg.num_classes;
      task.noise = t_noise;
      const TrainForm tform = form == FfnForm::idle_train ? TrainForm::idle_train : TrainForm::idle_infer;
      auto go = [&]<Real T>(T) {
        auto r = train_toy<T>(cfg, task, t_steps, static_cast<T>(t_lr), tform);
        if (!t_save.empty()) save_model(r.model, t_save);
        return r.summary;
      };
      const TrainSummary s = parse_dtype(t_dtype) == DType::f64 ? go(0.0) : go(0.0f);
      if (t_format == "json") emit(dump(to_json(s)), t_out);
      else
        emit("steps " + std::to_string(s.loss_curve.size()) + ", loss " + std::to_string(s.loss_curve.front()) +
                 " -> " + std::to_string(s.loss_curve.back()) + ", accuracy " + std::to_string(s.final_accuracy) +
                 "\n",
             t_out);
      return kOk;
    }
    if (*init) {
      const ModelConfig cfg = inf.make(parse_form_flag(i_form));
      auto go = [&]<Real T>(T) {
        ModelConfig build_cfg = cfg;
        if (cfg.ffn_form == FfnForm::idle_infer && i_random) build_cfg.ffn_form = FfnForm::idle_train;
        Model<T> m = build_model<T>(build_cfg);
        if (i_random) randomize_ffn_statistics(m, cfg.seed);
        if (cfg.ffn_form == FfnForm::idle_infer && i_random) {
          freeze_batchnorms(m);
          m = reparameterize_model(m).model;
        } else if (i_freeze) {
          freeze_batchnorms(m);
        }
        save_model(m, i_out);
      };
      if (parse_dtype(i_dtype) == DType::f64) go(0.0);
      else go(0.0f);
      return kOk;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFail;
  }
  return kUsage;
}

}  // namespace

int main(int argc, char** argv) { return run_cli(argc, argv); }
