#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "gradcheck.hpp"

using namespace repavit;

namespace {

using namespace gradcheck;

void expect_gradients_match(const TrainFfn& f, const Matrix<double>& x, const Matrix<double>& up, NormMode mode) {
  std::string which;
  EXPECT_LE(worst_error(all_checks(f, x, up, mode), &which), 1e-5) << which;
}

}  // namespace

// ---------------------------------------------------------------- finite differences

TEST(FiniteDiff, QuadraticGivesParameter) {
  std::mt19937_64 g(1);
  const auto p = oracle::random_matrix<double>(3, 4, g);
  const auto grad = finite_diff_grad([](const Matrix<double>& q) { return 0.5 * dot(q, q); }, p, 1e-5);
  EXPECT_LE(max_abs_diff(grad, p), 1e-9);
}

TEST(FiniteDiff, GeluSumGivesGeluGrad) {
  std::mt19937_64 g(2);
  const auto p = oracle::random_matrix<double>(2, 10, g, -3, 3);
  const auto grad = finite_diff_grad(
      [](const Matrix<double>& q) {
        const Matrix<double> y = gelu(q);
        double s = 0;
        for (double v : y.values()) s += v;
        return s;
      },
      p, 1e-5);
  EXPECT_LE(max_abs_diff(grad, gelu_grad(p)), 1e-6);
}

TEST(FiniteDiff, ConstantGivesZeroAndStepValidated) {
  const Matrix<double> p(2, 2, 1.0);
  EXPECT_EQ(finite_diff_grad([](const Matrix<double>&) { return 3.0; }, p, 1e-5), Matrix<double>(2, 2));
  EXPECT_THROW(finite_diff_grad([](const Matrix<double>&) { return 3.0; }, p, 0.0), ValidationError);
}

// ---------------------------------------------------------------- ffn_backward

TEST(FfnBackward, ZeroUpstreamGivesZeroBundle) {
  std::mt19937_64 g(3);
  const auto f = oracle::random_ffn<double>({}, g);
  const auto x = oracle::random_matrix<double>(5, 8, g);
  const auto b = ffn_backward(f, x, Matrix<double>(5, 8), NormMode::eval);
  for (const auto* m : {&b.d_w_in, &b.d_w_out, &b.d_x})
    for (double v : m->values()) EXPECT_EQ(v, 0.0);
  for (const auto* v : {&b.d_b_in, &b.d_b_out, &b.d_gamma1, &b.d_beta1, &b.d_gamma2, &b.d_beta2})
    for (double e : *v) EXPECT_EQ(e, 0.0);
}

TEST(FfnBackward, ShapesMirrorParameters) {
  std::mt19937_64 g(4);
  oracle::FfnSpec s;
  s.frozen = false;
  const auto f = oracle::random_ffn<double>(s, g);
  const auto x = oracle::random_matrix<double>(5, 8, g);
  const auto b = ffn_backward(f, x, x, NormMode::train);
  EXPECT_EQ(b.d_w_in.rows(), f.w_in.rows());
  EXPECT_EQ(b.d_w_in.cols(), f.w_in.cols());
  EXPECT_EQ(b.d_w_out.rows(), f.w_out.rows());
  EXPECT_EQ(b.d_b_in.size(), f.b_in.size());
  EXPECT_EQ(b.d_gamma2.size(), f.bn2.gamma.size());
  EXPECT_EQ(b.d_x.rows(), 5u);
  EXPECT_TRUE(all_finite(b.d_w_in) && all_finite(b.d_x));
}

TEST(FfnBackward, AllIdleInputGradientIsMergedMatrixTransposed) {
  std::mt19937_64 g(5);
  oracle::FfnSpec s;
  s.theta = 1.0;
  const auto f = oracle::random_ffn<double>(s, g);
  const auto x = oracle::random_matrix<double>(5, 8, g);
  const auto up = oracle::random_matrix<double>(5, 8, g);
  const auto merged = reparameterize_ffn(f).ffn.w_merged;
  EXPECT_LE(oracle::rel_diff(ffn_backward(f, x, up, NormMode::eval).d_x, matmul(up, transpose(merged))), 1e-12);
  const auto fd = finite_diff_grad([&](const Matrix<double>& q) { return loss(f, q, up, NormMode::eval); }, x, 1e-5);
  EXPECT_LE(oracle::rel_diff(ffn_backward(f, x, up, NormMode::eval).d_x, fd), 1e-7);
}

TEST(FfnBackward, SmallInstanceEvalMode) {
  std::mt19937_64 g(6);
  oracle::FfnSpec s;
  s.C = 6;
  s.rho = 3;
  s.theta = 1.0 - 2.0 / 18.0;  // two active channels
  const auto f = oracle::random_ffn<double>(s, g);
  ASSERT_EQ(f.active, 2u);
  expect_gradients_match(f, oracle::random_matrix<double>(5, 6, g), oracle::random_matrix<double>(5, 6, g),
                         NormMode::eval);
}

TEST(FfnBackward, SmallInstanceTrainMode) {
  std::mt19937_64 g(7);
  oracle::FfnSpec s;
  s.C = 6;
  s.rho = 3;
  s.theta = 1.0 - 2.0 / 18.0;
  s.frozen = false;
  const auto f = oracle::random_ffn<double>(s, g);
  expect_gradients_match(f, oracle::random_matrix<double>(5, 6, g), oracle::random_matrix<double>(5, 6, g),
                         NormMode::train);
}

TEST(FfnBackward, RandomInstancesBothModes) {
  std::mt19937_64 g(8);
  std::uniform_int_distribution<std::size_t> cdist(2, 6), ndist(3, 7), rdist(1, 3);
  const double thetas[] = {0.0, 0.25, 0.5, 0.75, 1.0};
  for (int t = 0; t < 20; ++t) {
    oracle::FfnSpec s;
    s.C = cdist(g);
    s.rho = rdist(g);
    s.theta = thetas[t % 5];
    s.frozen = false;
    const auto f = oracle::random_ffn<double>(s, g);
    const std::size_t n = ndist(g);
    const auto x = oracle::random_matrix<double>(n, s.C, g);
    const auto up = oracle::random_matrix<double>(n, s.C, g);
    SCOPED_TRACE("instance " + std::to_string(t));
    expect_gradients_match(f, x, up, NormMode::eval);
    expect_gradients_match(f, x, up, NormMode::train);
  }
}

TEST(FfnBackward, IdleColumnsReceiveGradient) {
  std::mt19937_64 g(9);
  for (double theta : {0.25, 0.5, 0.75}) {
    oracle::FfnSpec s;
    s.theta = theta;
    s.frozen = false;
    const auto f = oracle::random_ffn<double>(s, g);
    const auto x = oracle::random_matrix<double>(6, 8, g);
    for (NormMode mode : {NormMode::eval, NormMode::train}) {
      const auto b = ffn_backward(f, x, oracle::random_matrix<double>(6, 8, g), mode);
      const auto idle = slice_cols(b.d_w_in, f.active, f.hidden());
      EXPECT_GT(frobenius_norm(idle), 0.0) << theta;
    }
  }
}

TEST(FfnBackward, Errors) {
  std::mt19937_64 g(10);
  auto f = oracle::random_ffn<double>({}, g);
  const auto x = oracle::random_matrix<double>(4, 8, g);
  EXPECT_THROW(ffn_backward(f, x, Matrix<double>(3, 8), NormMode::eval), DimensionError);
  EXPECT_THROW(ffn_backward(f, Matrix<double>(4, 5), Matrix<double>(4, 5), NormMode::eval), DimensionError);
  EXPECT_THROW(ffn_backward(f, x, x, NormMode::train), StateError);  // frozen
  f.bn1.frozen = f.bn2.frozen = false;
  EXPECT_THROW(ffn_backward(f, slice_rows(x, 0, 1), slice_rows(x, 0, 1), NormMode::train), DegenerateBatchError);
}

TEST(InferBackward, MatchesFiniteDifferences) {
  std::mt19937_64 g(11);
  const auto inf = reparameterize_ffn(oracle::random_ffn<double>({}, g)).ffn;
  const auto x = oracle::random_matrix<double>(5, 8, g);
  const auto up = oracle::random_matrix<double>(5, 8, g);
  const auto b = ffn_infer_backward(inf, x, up);
  auto L = [&](const IdleFfnInfer<double>& f, const Matrix<double>& in) { return dot(forward_ffn_idle_infer(f, in), up); };
  auto fd = [&](auto set, const Matrix<double>& p) {
    return finite_diff_grad(
        [&](const Matrix<double>& q) {
          auto c = inf;
          set(c, q);
          return L(c, x);
        },
        p, 1e-5);
  };
  EXPECT_LE(oracle::rel_diff(b.d_w_act_in, fd([](auto& c, const auto& q) { c.w_act_in = q; }, inf.w_act_in)), 1e-6);
  EXPECT_LE(oracle::rel_diff(b.d_w_act_out, fd([](auto& c, const auto& q) { c.w_act_out = q; }, inf.w_act_out)), 1e-6);
  EXPECT_LE(oracle::rel_diff(b.d_w_merged, fd([](auto& c, const auto& q) { c.w_merged = q; }, inf.w_merged)), 1e-6);
  EXPECT_LE(oracle::rel_diff(as_row(b.d_b_act_in),
                             fd([](auto& c, const auto& q) { c.b_act_in = q.storage(); }, as_row(inf.b_act_in))),
            1e-6);
  EXPECT_LE(oracle::rel_diff(b.d_x, finite_diff_grad([&](const Matrix<double>& q) { return L(inf, q); }, x, 1e-5)), 1e-6);
}

// ---------------------------------------------------------------- toy task and trainer

TEST(ToyTask, DeterministicAndValidated) {
  ToyTask t;
  t.samples = 40;
  const auto a = make_toy_data<double>(t), b = make_toy_data<double>(t);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.tokens.rows(), 40u * t.token_count);
  t.seed++;
  EXPECT_NE(make_toy_data<double>(t).tokens, a.tokens);
  t.classes = 1;
  EXPECT_THROW(t.validate(), ValidationError);
}

namespace {
ToyTask small_task() {
  ToyTask t;
  t.samples = 200;
  return t;
}
ModelConfig pool_cfg(double theta = 0.5) { return make_config("pool-tiny", theta, FfnForm::idle_train); }
}  // namespace

TEST(TrainToy, ZeroLearningRateKeepsLossConstant) {
  const auto r = train_toy<double>(pool_cfg(), small_task(), 5, 0.0, TrainForm::idle_train);
  ASSERT_EQ(r.summary.loss_curve.size(), 5u);
  for (double l : r.summary.loss_curve) EXPECT_EQ(l, r.summary.loss_curve.front());
}

TEST(TrainToy, SameSeedsSameCurve) {
  const auto a = train_toy<float>(pool_cfg(), small_task(), 8, 0.1f, TrainForm::idle_train);
  const auto b = train_toy<float>(pool_cfg(), small_task(), 8, 0.1f, TrainForm::idle_train);
  EXPECT_EQ(a.summary.loss_curve, b.summary.loss_curve);
  EXPECT_EQ(a.summary.final_accuracy, b.summary.final_accuracy);
}

TEST(TrainToy, LossFallsInBothForms) {
  for (TrainForm form : {TrainForm::idle_train, TrainForm::idle_infer}) {
    const auto r = train_toy<float>(pool_cfg(), small_task(), 40, 0.1f, form);
    EXPECT_LE(r.summary.loss_curve.back(), 0.5 * r.summary.loss_curve.front()) << to_string(form);
    EXPECT_GT(r.summary.final_accuracy, 0.5);
  }
}

TEST(TrainToy, UpdatesRunningStatistics) {
  const auto r = train_toy<double>(pool_cfg(), small_task(), 3, 0.05, TrainForm::idle_train);
  const auto& f = std::get<IdleFfnTrain<double>>(r.model.blocks[0].ffn);
  EXPECT_NE(f.bn1.running_mean, Vec<double>(32, 0.0));
  EXPECT_FALSE(f.bn1.frozen);
}

TEST(TrainToy, Errors) {
  ModelConfig attn = pool_cfg();
  attn.mixer = MixerKind::self_attention;
  EXPECT_THROW(train_toy<double>(attn, small_task(), 1, 0.1, TrainForm::idle_train), UnsupportedError);
  EXPECT_THROW(train_toy<double>(pool_cfg(), small_task(), 0, 0.1, TrainForm::idle_train), ValidationError);
  ToyTask wrong = small_task();
  wrong.embed_dim = 16;
  EXPECT_THROW(train_toy<double>(pool_cfg(), wrong, 1, 0.1, TrainForm::idle_train), ValidationError);
}

TEST(FreezeThenVerify, UntrainedModel) {
  const auto m = build_model<double>(pool_cfg(0.75));
  const auto probe = make_toy_data<double>(small_task());
  const auto v = freeze_then_verify(m, probe.tokens, probe.tokens_per_sample);
  EXPECT_LE(v.max_rel_diff, 1e-10);
  EXPECT_TRUE(v.predictions_match);
}

TEST(FreezeThenVerify, AfterTrainingFloatAndDouble) {
  ToyTask probe_task = small_task();
  probe_task.seed = 1234;
  {
    const auto r = train_toy<double>(pool_cfg(), small_task(), 15, 0.1, TrainForm::idle_train);
    const auto probe = make_toy_data<double>(probe_task);
    const auto v = freeze_then_verify(r.model, probe.tokens, probe.tokens_per_sample);
    EXPECT_LE(v.max_rel_diff, 1e-10);
    EXPECT_TRUE(v.predictions_match);
  }
  {
    const auto r = train_toy<float>(pool_cfg(), small_task(), 15, 0.1f, TrainForm::idle_train);
    const auto probe = make_toy_data<float>(probe_task);
    const auto v = freeze_then_verify(r.model, probe.tokens, probe.tokens_per_sample);
    EXPECT_LE(v.max_rel_diff, 1e-4);
    EXPECT_TRUE(v.predictions_match);
  }
}
