#include <gtest/gtest.h>

#include <cmath>

#include "epibench/gradcheck.hpp"
#include "epibench/nn.hpp"

using namespace epibench;

namespace {

MlpArchitecture arch_of(std::vector<std::size_t> sizes, Activation a = Activation::relu) {
  MlpArchitecture arch;
  arch.layer_sizes = std::move(sizes);
  arch.activation = a;
  return arch;
}

}  // namespace

TEST(Nn, ParamCountAndFiniteInit) {
  const auto arch = arch_of({1, 10, 10, 1});
  EXPECT_EQ(arch.param_count(), 141u);
  Rng rng(0);
  const ParamVector p = init_params(arch, rng);
  EXPECT_EQ(p.size(), 141);
  EXPECT_TRUE(p.allFinite());
}

TEST(Nn, InitIsDeterministic) {
  const auto arch = arch_of({2, 10, 10, 2});
  Rng a(0), b(0);
  EXPECT_EQ(init_params(arch, a), init_params(arch, b));
}

TEST(Nn, InitRespectsFanInBound) {
  const auto arch = arch_of({1, 10, 10, 1});
  double worst_first = 0.0;
  Rng rng(3);
  // First layer: 10 weights and 10 biases with fan_in 1.
  for (int draw = 0; draw < 1000; ++draw) {
    const ParamVector p = init_params(arch, rng);
    worst_first = std::max(worst_first, p.head(20).cwiseAbs().maxCoeff());
    EXPECT_LE(p.segment(20, 110).cwiseAbs().maxCoeff(), 1.0 / std::sqrt(10.0));
  }
  EXPECT_LE(worst_first, 1.0);
  EXPECT_GT(worst_first, 0.99);
}

TEST(Nn, ZeroParamsGiveZeroOutput) {
  const auto arch = arch_of({3, 5, 2});
  const ParamVector p = ParamVector::Zero(static_cast<Eigen::Index>(arch.param_count()));
  Matrix x(3, 4);
  x.setRandom();
  EXPECT_TRUE(forward(arch, p, x, ForwardMode::deterministic).first.isZero(0.0));
}

TEST(Nn, HandSetAffineChain) {
  // [1,1,1] with positive pre-activations: y = w2 * (w1 x + b1) + b2.
  const auto arch = arch_of({1, 1, 1});
  ParamVector p(4);
  p << 2.0, 0.5, 3.0, -1.0;  // w1, b1, w2, b2
  Vector x(1);
  x << 1.0;
  EXPECT_DOUBLE_EQ(forward(arch, p, x, ForwardMode::deterministic).first[0], 3.0 * (2.0 * 1.0 + 0.5) - 1.0);
}

TEST(Nn, DropoutMaskReproducibleWithSeed) {
  auto arch = arch_of({1, 8, 8, 1});
  arch.dropout = DropoutSpec{0, 0.5};
  Rng init(1);
  const ParamVector p = init_params(arch, init);
  Matrix x = Matrix::Constant(1, 6, 0.3);
  Rng a(9), b(9);
  const auto ra = forward(arch, p, x, ForwardMode::train, &a);
  const auto rb = forward(arch, p, x, ForwardMode::train, &b);
  EXPECT_EQ(ra.first, rb.first);
  ASSERT_TRUE(ra.second.mask.has_value());
  EXPECT_EQ(*ra.second.mask, *rb.second.mask);
}

TEST(Nn, DeterministicForwardIsPure) {
  const auto arch = arch_of({2, 7, 3}, Activation::tanh);
  Rng rng(2);
  const ParamVector p = init_params(arch, rng);
  Matrix x(2, 5);
  x.setRandom();
  EXPECT_EQ(forward(arch, p, x, ForwardMode::deterministic).first, forward(arch, p, x, ForwardMode::deterministic).first);
}

TEST(Nn, ZeroDropoutTrainEqualsDeterministic) {
  auto arch = arch_of({1, 6, 6, 1});
  arch.dropout = DropoutSpec{0, 0.0};
  Rng rng(4);
  const ParamVector p = init_params(arch, rng);
  Matrix x(1, 9);
  x.setRandom();
  Rng r(5);
  EXPECT_EQ(forward(arch, p, x, ForwardMode::train, &r).first, forward(arch, p, x, ForwardMode::deterministic).first);
}

TEST(Nn, InvertedDropoutExpectation) {
  // Mean train-mode activation of the dropped layer over 1e5 masks equals the
  // deterministic activation within 3 Monte Carlo standard errors.
  auto arch = arch_of({1, 5, 1});
  arch.dropout = DropoutSpec{0, 0.3};
  Rng init(6);
  const ParamVector p = init_params(arch, init);
  const Matrix x = Matrix::Constant(1, 1, 0.7);
  const Vector det = forward(arch, p, x, ForwardMode::deterministic).second.act[1].col(0);
  const int n = 100000;
  Vector sum = Vector::Zero(5), sum2 = Vector::Zero(5);
  Rng rng(7);
  for (int i = 0; i < n; ++i) {
    const Vector a = forward(arch, p, x, ForwardMode::train, &rng).second.act[1].col(0);
    sum += a;
    sum2 += a.cwiseProduct(a);
  }
  for (Eigen::Index k = 0; k < 5; ++k) {
    const double mean = sum[k] / n;
    const double var = sum2[k] / n - mean * mean;
    const double se = std::sqrt(std::max(var, 0.0) / n);
    EXPECT_LE(std::abs(mean - det[k]), 3.0 * se + 1e-12) << "unit " << k;
  }
}

TEST(Nn, ZeroOutputGradGivesZeroGrad) {
  const auto arch = arch_of({2, 4, 3});
  Rng rng(8);
  const ParamVector p = init_params(arch, rng);
  Matrix x(2, 3);
  x.setRandom();
  const auto [out, trace] = forward(arch, p, x, ForwardMode::deterministic);
  EXPECT_TRUE(backward(arch, p, trace, Matrix::Zero(3, 3)).isZero(0.0));
}

TEST(Nn, StackedLinearChainRule) {
  // Positive weights and inputs keep the ReLU in its identity region, so the
  // network is W2 W1 x and dL/dW1 = W2^T g x^T.
  const auto arch = arch_of({2, 3, 2});
  Matrix w1(3, 2), w2(2, 3);
  w1 << 0.1, 0.2, 0.3, 0.4, 0.5, 0.6;
  w2 << 0.7, 0.8, 0.9, 1.0, 1.1, 1.2;
  ParamVector p = ParamVector::Zero(static_cast<Eigen::Index>(arch.param_count()));
  Eigen::Map<Matrix>(p.data(), 3, 2) = w1;
  Eigen::Map<Matrix>(p.data() + 9, 2, 3) = w2;
  Vector x(2), g(2);
  x << 1.0, 2.0;
  g << 0.5, -1.5;
  const auto [out, trace] = forward(arch, p, Matrix(x), ForwardMode::deterministic);
  EXPECT_TRUE(out.col(0).isApprox(w2 * w1 * x, 1e-14));
  const ParamVector grad = backward(arch, p, trace, Matrix(g));
  const Matrix expected = w2.transpose() * g * x.transpose();
  EXPECT_TRUE(Eigen::Map<const Matrix>(grad.data(), 3, 2).isApprox(expected, 1e-14));
}

TEST(Nn, BackwardMatchesFiniteDifferencesProperty) {
  GradcheckOptions opt;
  opt.seed = 11;
  const auto suite = gradcheck_network(opt);
  EXPECT_EQ(suite.instances, 100u);
  EXPECT_LT(suite.worst_relative_error, 1e-4);
}

TEST(Nn, BackwardWithDropoutMaskMatchesFiniteDifferences) {
  auto arch = arch_of({2, 6, 5, 1}, Activation::tanh);
  arch.dropout = DropoutSpec{0, 0.4};
  Rng rng(12);
  const ParamVector p = init_params(arch, rng);
  Matrix x(2, 4);
  x.setRandom();
  Rng mask_rng(13);
  const auto [out, trace] = forward(arch, p, x, ForwardMode::train, &mask_rng);
  const Matrix g = Matrix::Ones(1, 4);
  auto loss = [&](const ParamVector& t) {
    Rng again(13);
    return forward(arch, t, x, ForwardMode::train, &again).first.sum();
  };
  EXPECT_LT(max_relative_error(backward(arch, p, trace, g), finite_diff_grad(loss, p)), 1e-4);
}

TEST(Nn, FiniteDiffGradExamples) {
  ParamVector t(2);
  t << 1.0, 2.0;
  const ParamVector g = finite_diff_grad([](const ParamVector& v) { return v.squaredNorm(); }, t);
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 4.0, 1e-8);
  EXPECT_TRUE(finite_diff_grad([](const ParamVector&) { return 3.0; }, t).isZero(0.0));
  ParamVector z = ParamVector::Zero(1);
  EXPECT_NEAR(finite_diff_grad([](const ParamVector& v) { return std::sin(v[0]); }, z)[0], 1.0, 1e-9);
}

TEST(Nn, RejectsMismatchedShapes) {
  const auto arch = arch_of({2, 3, 1});
  const ParamVector short_p = ParamVector::Zero(3), full_p = ParamVector::Zero(13);
  const Matrix x2 = Matrix::Zero(2, 1), x3 = Matrix::Zero(3, 1);
  EXPECT_THROW(forward(arch, short_p, x2, ForwardMode::deterministic), std::invalid_argument);
  EXPECT_THROW(forward(arch, full_p, x3, ForwardMode::deterministic), std::invalid_argument);
  auto drop = arch;
  drop.dropout = DropoutSpec{0, 0.5};
  EXPECT_THROW(forward(drop, full_p, x2, ForwardMode::train), std::invalid_argument);
}
