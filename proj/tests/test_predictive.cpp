#include <gtest/gtest.h>

#include <cmath>

#include "epibench/metrics.hpp"
#include "epibench/predictive.hpp"

using namespace epibench;

namespace {

MlpArchitecture arch_of(std::vector<std::size_t> sizes) {
  MlpArchitecture a;
  a.layer_sizes = std::move(sizes);
  return a;
}

/// [1,1,1] heads with zero weights output their last bias everywhere.
ParamVector constant_regression(double mu, double log_s2) {
  ParamVector t = ParamVector::Zero(8);
  t[3] = mu;
  t[7] = log_s2;
  return t;
}

std::vector<GaussianPrediction> random_mixture(Rng& rng, std::size_t m) {
  std::vector<GaussianPrediction> c(m);
  for (auto& g : c) g = {rng.uniform(-3, 3), rng.uniform(-2, 1)};
  return c;
}

}  // namespace

TEST(Collapse, Examples) {
  const std::vector<GaussianPrediction> same(5, {2.0, 0.0});
  const auto a = collapse_gaussian_mixture(same);
  EXPECT_EQ(a.mu_hat, 2.0);
  EXPECT_EQ(a.sigma2_hat, 1.0);
  const std::vector<GaussianPrediction> two{{0.0, 0.0}, {2.0, 0.0}};
  const auto b = collapse_gaussian_mixture(two);
  EXPECT_EQ(b.mu_hat, 1.0);
  EXPECT_EQ(b.sigma2_hat, 2.0);
  EXPECT_THROW(collapse_gaussian_mixture(std::vector<GaussianPrediction>{}), std::invalid_argument);
}

TEST(Collapse, IdenticalComponentsCollapseToComponent) {
  Rng rng(1);
  for (std::size_t m : {1, 2, 7, 64}) {
    const GaussianPrediction g{rng.normal(), rng.uniform(-2, 2)};
    const auto p = collapse_gaussian_mixture(std::vector<GaussianPrediction>(m, g));
    EXPECT_NEAR(p.mu_hat, g.mu, 1e-14);
    EXPECT_NEAR(p.sigma2_hat, g.sigma2(), 1e-14 * g.sigma2());
  }
}

TEST(Collapse, VarianceAtLeastMeanAleatoric) {
  Rng rng(2);
  for (int i = 0; i < 200; ++i) {
    const auto c = random_mixture(rng, 1 + rng.index(10));
    double aleatoric = 0.0;
    for (const auto& g : c) aleatoric += g.sigma2();
    aleatoric /= static_cast<double>(c.size());
    EXPECT_GE(collapse_gaussian_mixture(c).sigma2_hat, aleatoric * (1.0 - 1e-14));
  }
}

TEST(Collapse, MatchesMonteCarloMixtureMoments) {
  // Sample 1e6 draws from each uniform mixture; mean and variance must agree
  // within 3 standard errors.
  Rng rng(3);
  const std::size_t draws = 1000000;
  for (int t = 0; t < 20; ++t) {
    const auto c = random_mixture(rng, 2 + rng.index(6));
    const auto p = collapse_gaussian_mixture(c);
    double s1 = 0.0, s2 = 0.0, s4 = 0.0;
    for (std::size_t i = 0; i < draws; ++i) {
      const auto& g = c[rng.index(c.size())];
      const double x = g.mu + std::sqrt(g.sigma2()) * rng.normal();
      s1 += x;
      s2 += x * x;
    }
    const double n = static_cast<double>(draws);
    const double mean = s1 / n;
    const double var = s2 / n - mean * mean;
    // Second pass for the fourth central moment, needed by the variance SE.
    Rng again(derive_seed(99, {static_cast<std::uint64_t>(t)}));
    for (std::size_t i = 0; i < draws; ++i) {
      const auto& g = c[again.index(c.size())];
      const double d = g.mu + std::sqrt(g.sigma2()) * again.normal() - mean;
      s4 += d * d * d * d;
    }
    const double m4 = s4 / n;
    EXPECT_LE(std::abs(mean - p.mu_hat), 3.0 * std::sqrt(var / n)) << "mixture " << t;
    EXPECT_LE(std::abs(var - p.sigma2_hat), 3.0 * std::sqrt((m4 - var * var) / n)) << "mixture " << t;
  }
}

TEST(Categorical, AveragingExamples) {
  CategoricalPrediction a{Vector(2)}, b{Vector(2)};
  a.probs << 1.0, 0.0;
  b.probs << 0.0, 1.0;
  const auto p = average_categorical(std::vector<CategoricalPrediction>{a, b});
  EXPECT_EQ(p.probs[0], 0.5);
  EXPECT_EQ(p.probs[1], 0.5);
  const auto same = average_categorical(std::vector<CategoricalPrediction>(4, a));
  EXPECT_EQ(same.probs, a.probs);
}

TEST(Categorical, AveragePreservesSimplex) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    std::vector<CategoricalPrediction> c(1 + rng.index(20));
    for (auto& q : c) {
      q.probs = Vector(3);
      for (int k = 0; k < 3; ++k) q.probs[k] = rng.uniform(0.0, 1.0);
      q.probs /= q.probs.sum();
    }
    const auto p = average_categorical(c);
    EXPECT_NEAR(p.probs.sum(), 1.0, 1e-12);
    EXPECT_GE(p.probs.minCoeff(), 0.0);
  }
}

TEST(PosteriorPredict, HandSetConstantModels) {
  const RegressionFamily fam(arch_of({1, 1, 1}), arch_of({1, 1, 1}));
  PosteriorSampleSet set;
  set.samples = {constant_regression(0.0, 0.0), constant_regression(2.0, 0.0)};
  const Matrix grid = regression_grid(11);
  const auto pred = posterior_predict(fam, set, grid);
  ASSERT_EQ(pred.size(), 11u);
  for (const auto& p : pred) {
    EXPECT_DOUBLE_EQ(p.mu_hat, 1.0);
    EXPECT_DOUBLE_EQ(p.sigma2_hat, 2.0);
  }
}

TEST(PosteriorPredict, CategoricalConstantModels) {
  const ClassificationFamily fam(arch_of({2, 2}));
  PosteriorSampleSet set;
  ParamVector a = ParamVector::Zero(6), b = ParamVector::Zero(6);
  a[4] = std::log(3.0);  // probs (3/4, 1/4)
  b[5] = std::log(3.0);  // probs (1/4, 3/4)
  set.samples = {a, b, a};
  const auto pred = posterior_predict(fam, set, classification_grid(5));
  ASSERT_EQ(pred.size(), 25u);
  for (const auto& p : pred) {
    EXPECT_NEAR(p.probs[0], (0.75 + 0.25 + 0.75) / 3.0, 1e-15);
    EXPECT_NEAR(p.probs.sum(), 1.0, 1e-15);
  }
}

TEST(PosteriorPredict, GridPermutationPermutesOutput) {
  const RegressionFamily fam(arch_of({1, 6, 1}), arch_of({1, 6, 1}));
  Rng rng(5);
  PosteriorSampleSet set;
  for (int i = 0; i < 4; ++i) set.samples.push_back(fam.init_params(rng));
  const Matrix grid = regression_grid(30);
  const Matrix reversed = grid.rowwise().reverse();
  const auto a = posterior_predict(fam, set, grid);
  const auto b = posterior_predict(fam, set, reversed);
  for (std::size_t j = 0; j < 30; ++j) {
    EXPECT_EQ(a[j].mu_hat, b[29 - j].mu_hat);
    EXPECT_EQ(a[j].sigma2_hat, b[29 - j].sigma2_hat);
  }
}

TEST(PosteriorPredict, SubsetAggregationMatchesFullSet) {
  const ClassificationFamily fam(arch_of({2, 5, 2}));
  Rng rng(6);
  PosteriorSampleSet set;
  for (int i = 0; i < 6; ++i) set.samples.push_back(fam.init_params(rng));
  const Matrix grid = classification_grid(7);
  const auto outputs = sample_outputs(fam, set, grid);
  const auto idx = all_indices(6);
  const auto sub = aggregate<ClassificationFamily>(outputs, idx);
  const auto full = posterior_predict(fam, set, grid);
  for (std::size_t j = 0; j < full.size(); ++j) EXPECT_TRUE(sub[j].probs.isApprox(full[j].probs, 1e-14));
}

TEST(PosteriorPredict, RejectsEmptySampleSet) {
  const RegressionFamily fam(arch_of({1, 1, 1}), arch_of({1, 1, 1}));
  EXPECT_THROW(posterior_predict(fam, PosteriorSampleSet{}, regression_grid(3)), std::invalid_argument);
}

TEST(PosteriorPredict, CurveCsvHeader) {
  const std::string path = ::testing::TempDir() + "/pred.csv";
  save_predictive_csv(path, regression_grid(2), std::vector<PredictiveGaussian>(2));
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "x,mu_hat,sigma2_hat");
}
