#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"

using namespace repavit;

template <class T>
class TypedCore : public ::testing::Test {};
using Dtypes = ::testing::Types<float, double>;
TYPED_TEST_SUITE(TypedCore, Dtypes);

// ---------------------------------------------------------------- matmul

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  std::mt19937_64 g(1);
  const auto m = oracle::random_matrix<double>(3, 5, g);
  EXPECT_EQ(matmul(Matrix<double>::identity(3), m), m);
}

TEST(Matmul, HandCheckedTwoByTwo) {
  const Matrix<double> a{{1, 2}, {3, 4}};
  const Matrix<double> b{{0}, {1}};
  const Matrix<double> want{{2}, {4}};
  EXPECT_EQ(matmul(a, b), want);
}

TYPED_TEST(TypedCore, MatmulMatchesTripleLoopBitForBit) {
  std::mt19937_64 g(2);
  const auto a = oracle::random_matrix<TypeParam>(5, 7, g);
  const auto b = oracle::random_matrix<TypeParam>(7, 3, g);
  EXPECT_EQ(matmul(a, b), oracle::naive_matmul(a, b));
}

TYPED_TEST(TypedCore, MatmulMatchesTripleLoopAcrossKernelEdges) {
  std::mt19937_64 g(3);
  for (auto [m, k, n] : std::vector<std::array<std::size_t, 3>>{
           {1, 1, 1}, {6, 16, 32}, {7, 17, 33}, {13, 64, 5}, {70, 9, 130}, {1, 300, 1}, {200, 3, 47}}) {
    const auto a = oracle::random_matrix<TypeParam>(m, k, g);
    const auto b = oracle::random_matrix<TypeParam>(k, n, g);
    EXPECT_EQ(matmul(a, b), oracle::naive_matmul(a, b)) << m << "x" << k << "x" << n;
  }
}

TEST(Matmul, EmptyInnerDimensionGivesZeros) {
  const Matrix<double> a(3, 0), b(0, 4);
  EXPECT_EQ(matmul(a, b), Matrix<double>(3, 4));
}

TEST(Matmul, ThreadCountDoesNotChangeResult) {
  std::mt19937_64 g(4);
  const auto a = oracle::random_matrix<float>(300, 70, g);
  const auto b = oracle::random_matrix<float>(70, 90, g);
  const unsigned saved = matmul_threads();
  set_matmul_threads(1);
  const auto one = matmul(a, b);
  set_matmul_threads(4);
  const auto four = matmul(a, b);
  set_matmul_threads(saved);
  EXPECT_EQ(one, four);
}

TEST(Matmul, RepeatedCallsAreReproducible) {
  std::mt19937_64 g(5);
  const auto a = oracle::random_matrix<float>(33, 65, g);
  const auto b = oracle::random_matrix<float>(65, 31, g);
  EXPECT_EQ(matmul(a, b), matmul(a, b));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  const Matrix<double> a(2, 3), b(4, 5);
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4x5"), std::string::npos) << msg;
  }
}

TYPED_TEST(TypedCore, MatmulAssociativeWithinTolerance) {
  std::mt19937_64 g(6);
  const double tol = std::is_same_v<TypeParam, float> ? 1e-5 : 1e-12;
  for (int t = 0; t < 20; ++t) {
    const auto a = oracle::random_matrix<TypeParam>(8, 8, g);
    const auto b = oracle::random_matrix<TypeParam>(8, 8, g);
    const auto c = oracle::random_matrix<TypeParam>(8, 8, g);
    EXPECT_LE(oracle::rel_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), tol);
  }
}

TEST(Transpose, MatchesElementwiseDefinition) {
  std::mt19937_64 g(7);
  const auto a = oracle::random_matrix<double>(70, 19, g);
  const auto t = transpose(a);
  ASSERT_EQ(t.rows(), 19u);
  ASSERT_EQ(t.cols(), 70u);
  for (std::size_t i = 0; i < 70; ++i)
    for (std::size_t j = 0; j < 19; ++j) EXPECT_EQ(t(j, i), a(i, j));
}

// ---------------------------------------------------------------- activations

TEST(Gelu, ReferenceValues) {
  const Matrix<double> x{{0.0, 1.0, -10.0}};
  const auto y = gelu(x);
  EXPECT_EQ(y(0, 0), 0.0);
  EXPECT_NEAR(y(0, 1), 0.8413447460685429, 1e-12);
  EXPECT_LT(std::abs(y(0, 2)), 1e-8);
}

TEST(Gelu, UsesExactErfForm) {
  std::mt19937_64 g(8);
  const auto x = oracle::random_matrix<double>(1, 50, g, -6, 6);
  const auto y = gelu(x);
  for (std::size_t i = 0; i < 50; ++i)
    EXPECT_NEAR(y(0, i), static_cast<double>(oracle::gelu(x(0, i))), 1e-14);
}

TEST(GeluGrad, ReferenceValues) {
  const Matrix<double> x{{0.0, 1.0}};
  const auto d = gelu_grad(x);
  EXPECT_DOUBLE_EQ(d(0, 0), 0.5);
  EXPECT_NEAR(d(0, 1), 1.0833154705876864, 1e-12);
}

TEST(GeluGrad, MatchesCentralDifferences) {
  std::mt19937_64 g(9);
  std::uniform_real_distribution<double> u(-4, 4);
  const double h = 1e-5;
  for (int i = 0; i < 20; ++i) {
    const double x = u(g);
    const double fd = (static_cast<double>(oracle::gelu(x + h)) - static_cast<double>(oracle::gelu(x - h))) / (2 * h);
    const double an = gelu_grad(Matrix<double>{{x}})(0, 0);
    EXPECT_LE(std::abs(an - fd) / std::max(std::abs(fd), 1e-3), 1e-6) << "x=" << x;
  }
}

// ---------------------------------------------------------------- batch norm

TEST(BatchNormEval, IdentityParametersWithZeroEps) {
  std::mt19937_64 g(10);
  const auto x = oracle::random_matrix<double>(5, 3, g);
  auto bn = BatchNormParams<double>::identity(3, 0.0);
  EXPECT_EQ(batchnorm_eval(x, bn), x);
}

TEST(BatchNormEval, HandEvaluatedSingleChannel) {
  BatchNormParams<double> bn{{2}, {1}, {3}, {4}, 0.0, false};
  EXPECT_DOUBLE_EQ(batchnorm_eval(Matrix<double>{{5}}, bn)(0, 0), 3.0);
}

TEST(BatchNormEval, EqualsAffineForm) {
  std::mt19937_64 g(11);
  auto f = oracle::random_ffn<double>({}, g);
  const auto& bn = f.bn1;
  const auto x = oracle::random_matrix<double>(10, bn.channels(), g, -3, 3);
  const auto y = batchnorm_eval(x, bn);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double s = bn.gamma[c] / std::sqrt(bn.running_var[c] + bn.eps);
      EXPECT_NEAR(y(i, c), s * x(i, c) + (bn.beta[c] - s * bn.running_mean[c]), 1e-12);
    }
}

TYPED_TEST(TypedCore, BatchNormEvalIsAffine) {
  std::mt19937_64 g(12);
  oracle::FfnSpec spec;
  auto bn = oracle::random_ffn<TypeParam>(spec, g).bn1;
  const auto x = oracle::random_matrix<TypeParam>(6, bn.channels(), g);
  const auto y = oracle::random_matrix<TypeParam>(6, bn.channels(), g);
  const Matrix<TypeParam> zero(6, bn.channels());
  const auto lhs = add(sub(batchnorm_eval(add(x, y), bn), batchnorm_eval(x, bn)),
                       sub(batchnorm_eval(zero, bn), batchnorm_eval(y, bn)));
  const double tol = std::is_same_v<TypeParam, float> ? 1e-5 : 1e-13;
  for (TypeParam v : lhs.values()) EXPECT_NEAR(v, 0, tol);
}

TEST(BatchNormEval, ChannelMismatchIsDimensionError) {
  auto bn = BatchNormParams<double>::identity(3);
  EXPECT_THROW(batchnorm_eval(Matrix<double>(2, 4), bn), DimensionError);
}

TEST(BatchNormTrain, ConstantColumnMapsToBeta) {
  BatchNormParams<double> bn = BatchNormParams<double>::identity(2);
  bn.gamma = {2.0, 3.0};
  bn.beta = {0.5, -1.0};
  const Matrix<double> x{{4, 1}, {4, 2}, {4, 3}};
  const auto y = batchnorm_train_step(x, bn, 0.1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(y(i, 0), 0.5);
}

TEST(BatchNormTrain, NormalizesWithBatchStatistics) {
  std::mt19937_64 g(13);
  const auto x = oracle::random_matrix<double>(50, 4, g, -5, 5);
  auto bn = BatchNormParams<double>::identity(4, 0.0);
  const auto y = batchnorm_train_step(x, bn, 0.1);
  for (std::size_t c = 0; c < 4; ++c) {
    long double m = 0, v = 0;
    for (std::size_t i = 0; i < 50; ++i) m += y(i, c);
    m /= 50;
    for (std::size_t i = 0; i < 50; ++i) v += (y(i, c) - m) * (y(i, c) - m);
    EXPECT_NEAR(static_cast<double>(m), 0.0, 1e-12);
    EXPECT_NEAR(static_cast<double>(v / 50), 1.0, 1e-12);
  }
}

TEST(BatchNormTrain, MomentumOneCopiesLastBatchStatistics) {
  const Matrix<double> x{{1, 10}, {3, 10}, {8, 13}};
  auto bn = BatchNormParams<double>::identity(2);
  batchnorm_train_step(x, bn, 1.0);
  EXPECT_DOUBLE_EQ(bn.running_mean[0], 4.0);
  EXPECT_DOUBLE_EQ(bn.running_mean[1], 11.0);
  // Running variance uses the unbiased estimate: sum of squares / (n - 1).
  EXPECT_DOUBLE_EQ(bn.running_var[0], (9.0 + 1.0 + 16.0) / 2.0);
  EXPECT_DOUBLE_EQ(bn.running_var[1], (1.0 + 1.0 + 4.0) / 2.0);
}

TEST(BatchNormTrain, RunningStatisticsConverge) {
  std::mt19937_64 g(14);
  std::normal_distribution<double> d(2.0, 3.0);
  auto bn = BatchNormParams<double>::identity(1);
  for (int step = 0; step < 1000; ++step) {
    Matrix<double> x(32, 1);
    for (auto& v : x.values()) v = d(g);
    batchnorm_train_step(x, bn, 0.1);
  }
  EXPECT_NEAR(bn.running_mean[0], 2.0, 0.05 * 2.0);
  EXPECT_NEAR(bn.running_var[0], 9.0, 0.05 * 9.0);
}

TEST(BatchNormTrain, RejectsFrozenSingleRowAndBadMomentum) {
  auto bn = BatchNormParams<double>::identity(2);
  EXPECT_THROW(batchnorm_train_step(Matrix<double>(1, 2), bn, 0.1), DegenerateBatchError);
  EXPECT_THROW(batchnorm_train_step(Matrix<double>(4, 2), bn, 0.0), ValidationError);
  EXPECT_THROW(batchnorm_train_step(Matrix<double>(4, 2), bn, 1.5), ValidationError);
  bn.frozen = true;
  EXPECT_THROW(batchnorm_train_step(Matrix<double>(4, 2), bn, 0.1), StateError);
}

// ---------------------------------------------------------------- layer norm

TEST(LayerNorm, ConstantRowMapsToZeros) {
  const auto y = layernorm(Matrix<double>{{1, 1, 1}}, {1, 1, 1}, {0, 0, 0}, 1e-6);
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementRowWithoutEps) {
  const auto y = layernorm(Matrix<double>{{0, 2}}, {1, 1}, {0, 0}, 0.0);
  EXPECT_DOUBLE_EQ(y(0, 0), -1.0);
  EXPECT_DOUBLE_EQ(y(0, 1), 1.0);
}

TEST(LayerNorm, RowsHaveZeroMeanUnitVariance) {
  std::mt19937_64 g(15);
  const auto x = oracle::random_matrix<double>(20, 16, g, -4, 9);
  const auto y = layernorm(x, Vec<double>(16, 1.0), Vec<double>(16, 0.0), 0.0);
  for (std::size_t i = 0; i < 20; ++i) {
    long double m = 0, v = 0;
    for (double e : y.row(i)) m += e;
    m /= 16;
    for (double e : y.row(i)) v += (e - m) * (e - m);
    EXPECT_NEAR(static_cast<double>(m), 0.0, 1e-12);
    EXPECT_NEAR(static_cast<double>(v / 16), 1.0, 1e-12);
  }
}

TEST(LayerNorm, LengthMismatchIsDimensionError) {
  EXPECT_THROW(layernorm(Matrix<double>(2, 3), {1, 1}, {0, 0, 0}, 1e-6), DimensionError);
}

TEST(LayerNorm, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 g(16);
  const auto x = oracle::random_matrix<double>(3, 6, g);
  LayerNormParams<double> ln{oracle::random_vector<double>(6, g, 0.5, 1.5), oracle::random_vector<double>(6, g), 1e-6};
  const auto up = oracle::random_matrix<double>(3, 6, g);
  auto loss = [&](const Matrix<double>& p) {
    const auto y = layernorm(p, ln);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y.values()[i] * up.values()[i];
    return s;
  };
  const auto fd = finite_diff_grad(loss, x, 1e-5);
  EXPECT_LE(oracle::rel_diff(layernorm_backward_input(x, ln, up), fd), 1e-7);
}

// ---------------------------------------------------------------- slicing and friends

TYPED_TEST(TypedCore, SliceConcatRoundTripIsExact) {
  std::mt19937_64 g(17);
  const auto x = oracle::random_matrix<TypeParam>(4, 9, g);
  for (std::size_t k = 0; k <= 9; ++k) EXPECT_EQ(concat_cols(slice_cols(x, 0, k), slice_cols(x, k, 9)), x);
  EXPECT_EQ(concat_rows(slice_rows(x, 0, 1), slice_rows(x, 1, 4)), x);
}

TEST(Slice, OutOfRangeIsBoundsError) {
  const Matrix<double> x(2, 3);
  EXPECT_THROW(slice_cols(x, 2, 4), BoundsError);
  EXPECT_THROW(slice_cols(x, 2, 1), BoundsError);
  EXPECT_THROW(slice_rows(x, 0, 3), BoundsError);
}

TEST(Concat, RowCountMismatchIsDimensionError) {
  EXPECT_THROW(concat_cols(Matrix<double>(2, 1), Matrix<double>(3, 1)), DimensionError);
}

TEST(Softmax, ConstantRowIsUniform) {
  const auto y = softmax_rows(Matrix<double>{{3, 3, 3, 3}});
  for (double v : y.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, RowsSumToOneEvenForLargeLogits) {
  std::mt19937_64 g(18);
  const auto y = softmax_rows(oracle::random_matrix<float>(10, 30, g, -80, 80));
  for (std::size_t i = 0; i < 10; ++i) {
    double s = 0;
    for (float v : y.row(i)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(AddBias, BroadcastsOverRows) {
  const auto y = add_bias(Matrix<double>(3, 2), Vec<double>{1.5, -2});
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(y(i, 0), 1.5);
    EXPECT_EQ(y(i, 1), -2);
  }
  EXPECT_THROW(add_bias(Matrix<double>(3, 2), Vec<double>{1, 2, 3}), DimensionError);
}

TEST(Reductions, MeanAndSumOverRows) {
  const Matrix<double> x{{1, 2}, {3, 6}};
  EXPECT_EQ(sum_over_rows(x), (Vec<double>{4, 8}));
  EXPECT_EQ(mean_over_rows(x), (Vec<double>{2, 4}));
}

TYPED_TEST(TypedCore, OutputsStayFiniteForFiniteInputs) {
  std::mt19937_64 g(19);
  const auto x = oracle::random_matrix<TypeParam>(16, 16, g, -50, 50);
  EXPECT_TRUE(all_finite(gelu(x)));
  EXPECT_TRUE(all_finite(gelu_grad(x)));
  EXPECT_TRUE(all_finite(softmax_rows(x)));
  EXPECT_TRUE(all_finite(layernorm(x, Vec<TypeParam>(16, 1), Vec<TypeParam>(16, 0), TypeParam(1e-6))));
  EXPECT_TRUE(all_finite(matmul(x, x)));
}
