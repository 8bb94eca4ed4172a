#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "epibench/data.hpp"
#include "epibench/samplers.hpp"
#include "mcmc_stats.hpp"

using namespace epibench;

namespace {

struct Moments {
  double mean;
  double var;
};

Moments moments(const PosteriorSampleSet& s, Eigen::Index coord = 0) {
  double m = 0.0;
  for (const auto& v : s.samples) m += v[coord];
  m /= static_cast<double>(s.size());
  double q = 0.0;
  for (const auto& v : s.samples) q += (v[coord] - m) * (v[coord] - m);
  return {m, q / static_cast<double>(s.size() - 1)};
}

std::vector<double> coordinate(const PosteriorSampleSet& s, Eigen::Index k = 0) {
  std::vector<double> out;
  for (const auto& v : s.samples) out.push_back(v[k]);
  return out;
}

PotentialFn standard_normal() {
  return [](const ParamVector& t) { return LossGrad{0.5 * t.squaredNorm(), t}; };
}

/// One-parameter linear model y = w x for exercising train_map against a
/// closed form.
class LinearFamily {
 public:
  using Target = double;
  using Prediction = GaussianPrediction;
  std::size_t param_count() const { return 1; }
  ParamVector init_params(Rng& rng) const { return ParamVector::Constant(1, rng.uniform(-1.0, 1.0)); }
  Matrix predict(const ParamVector& theta, const Matrix& x, ForwardMode = ForwardMode::deterministic,
                 Rng* = nullptr) const {
    return theta[0] * x;
  }
  bool has_dropout() const { return false; }
  LossGrad map_loss(const ParamVector& theta, const Matrix& x, std::span<const double> y, std::size_t n_total,
                    ForwardMode = ForwardMode::deterministic, Rng* = nullptr) const {
    const double n = static_cast<double>(y.size());
    LossGrad out{0.0, ParamVector::Zero(1)};
    for (std::size_t j = 0; j < y.size(); ++j) {
      const double r = y[j] - theta[0] * x(0, static_cast<Eigen::Index>(j));
      out.value += r * r / n;
      out.grad[0] -= 2.0 * r * x(0, static_cast<Eigen::Index>(j)) / n;
    }
    out.value += theta[0] * theta[0] / static_cast<double>(n_total);
    out.grad[0] += 2.0 * theta[0] / static_cast<double>(n_total);
    return out;
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// HMC

TEST(Hmc, StandardNormalMoments) {
  HmcConfig c;
  c.num_samples = 5000;
  c.warmup_steps = 1000;
  c.leapfrog_steps = 10;
  c.step_size = 0.1;
  Rng rng(1);
  const auto m = chain_stats::chain_moments(coordinate(hmc_run(standard_normal(), ParamVector::Zero(1), c, rng)));
  EXPECT_LT(std::abs(m.mean), 3.0 * m.se_mean);
  EXPECT_LT(std::abs(m.var - 1.0), 3.0 * m.se_var);
}

TEST(Hmc, ConjugateGaussianPosterior) {
  // Prior N(0, 1), likelihood y_i ~ N(theta, s2) with 20 points.
  Rng data_rng(2);
  const double s2 = 0.5;
  std::vector<double> y(20);
  for (auto& v : y) v = 1.3 + std::sqrt(s2) * data_rng.normal();
  const double sum = std::accumulate(y.begin(), y.end(), 0.0);
  const double post_prec = 1.0 + 20.0 / s2;
  const double post_mean = (sum / s2) / post_prec;
  const double post_var = 1.0 / post_prec;

  PotentialFn u = [&](const ParamVector& t) {
    double v = 0.5 * t[0] * t[0], g = t[0];
    for (double yi : y) {
      v += 0.5 * (yi - t[0]) * (yi - t[0]) / s2;
      g -= (yi - t[0]) / s2;
    }
    return LossGrad{v, ParamVector::Constant(1, g)};
  };
  HmcConfig c;
  c.num_samples = 5000;
  c.leapfrog_steps = 10;
  c.step_size = 0.05;
  Rng rng(3);
  const auto m = chain_stats::chain_moments(coordinate(hmc_run(u, ParamVector::Zero(1), c, rng)));
  EXPECT_LT(std::abs(m.mean - post_mean), 3.0 * m.se_mean);
  EXPECT_LT(std::abs(m.var - post_var), 3.0 * m.se_var);
}

TEST(Hmc, ZeroLeapfrogStepsRejected) {
  HmcConfig c;
  c.leapfrog_steps = 0;
  Rng rng(4);
  EXPECT_THROW(hmc_run(standard_normal(), ParamVector::Zero(1), c, rng), std::invalid_argument);
}

TEST(Hmc, SmallStepConservesHamiltonian) {
  Vector p(2);
  p << 0.7, -1.1;
  ParamVector theta(2);
  theta << 1.5, 0.3;
  const auto u = standard_normal();
  const LossGrad start = u(theta);
  const double h0 = start.value + 0.5 * p.squaredNorm();
  auto [end, end_u] = leapfrog(u, theta, p, start, 1e-3, 1000);
  EXPECT_LT(std::abs(end_u.value + 0.5 * p.squaredNorm() - h0), 1e-4);
}

TEST(Hmc, AcceptanceIsOneWhenEnergyDrops) {
  HmcConfig c;
  c.num_samples = 300;
  c.warmup_steps = 200;
  c.leapfrog_steps = 5;
  std::vector<HmcProposal> log;
  Rng rng(5);
  hmc_run(standard_normal(), ParamVector::Constant(3, 2.0), c, rng, &log);
  ASSERT_EQ(log.size(), 500u);
  std::size_t negative = 0;
  for (const auto& p : log) {
    if (!p.divergent && p.delta_h <= 0.0) {
      ++negative;
      EXPECT_EQ(p.accept_prob, 1.0);
      EXPECT_TRUE(p.accepted);
    }
  }
  EXPECT_GT(negative, 0u);
}

TEST(Hmc, DivergentProposalsAreRejectedAndLogged) {
  HmcConfig c;
  c.num_samples = 50;
  c.warmup_steps = 0;
  c.adapt_step_size = false;
  c.step_size = 5.0;  // unstable for the quadratic well
  c.leapfrog_steps = 20;
  std::vector<HmcProposal> log;
  Rng rng(6);
  const auto s = hmc_run(standard_normal(), ParamVector::Zero(1), c, rng, &log);
  std::size_t divergent = 0;
  for (const auto& p : log) {
    if (p.divergent) {
      ++divergent;
      EXPECT_FALSE(p.accepted);
    }
  }
  EXPECT_GT(divergent, 0u);
  EXPECT_EQ(s.config["divergences"].get<std::size_t>(), divergent);
}

TEST(Hmc, DeterministicGivenSeed) {
  HmcConfig c;
  c.num_samples = 50;
  c.warmup_steps = 50;
  c.leapfrog_steps = 5;
  Rng a(7), b(7);
  EXPECT_EQ(hmc_run(standard_normal(), ParamVector::Zero(2), c, a).samples,
            hmc_run(standard_normal(), ParamVector::Zero(2), c, b).samples);
}

// ---------------------------------------------------------------------------
// SG-MCMC

TEST(SgMcmc, StepsizeSchedule) {
  EXPECT_EQ(sgmcmc_stepsize(0.01, 100, 100), 0.0);
  EXPECT_NEAR(sgmcmc_stepsize(0.01, 50, 100), 0.01 * std::pow(0.5, 0.9), 1e-17);
}

TEST(SgMcmc, ExtractionScheduleExamples) {
  EXPECT_EQ(extraction_schedule(100, 2), (std::vector<std::size_t>{75, 100}));
  EXPECT_EQ(extraction_schedule(100, 6), (std::vector<std::size_t>{75, 80, 85, 90, 95, 100}));
  EXPECT_EQ(extraction_schedule(4, 1), (std::vector<std::size_t>{4}));
  EXPECT_THROW(extraction_schedule(10, 5), std::invalid_argument);
}

TEST(SgMcmc, ExtractionScheduleProperty) {
  Rng rng(8);
  for (int i = 0; i < 500; ++i) {
    const std::size_t t = 2 + rng.index(5000);
    const std::size_t room = t - static_cast<std::size_t>(0.75 * static_cast<double>(t)) + 1;
    const std::size_t m = 1 + rng.index(room);
    const auto s = extraction_schedule(t, m);
    ASSERT_EQ(s.size(), m);
    EXPECT_GE(s.front(), static_cast<std::size_t>(0.75 * static_cast<double>(t)));
    EXPECT_EQ(s.back(), t);
    for (std::size_t k = 1; k < s.size(); ++k) EXPECT_LT(s[k - 1], s[k]);
  }
}

TEST(SgMcmc, VanishingStepKeepsInitialPoint) {
  SgMcmcConfig c;
  c.alpha0 = 1e-20;
  c.total_steps = 1000;
  c.num_samples = 1;
  ParamVector init(2);
  init << 0.3, -0.8;
  StochasticGradFn g = [](const ParamVector& t, Rng&) { return ParamVector(t); };
  Rng a(9), b(9);
  EXPECT_LT((sgld_run(g, init, c, a).samples.back() - init).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((sghmc_run(g, init, c, b).samples.back() - init).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(SgMcmc, SgldWithoutNoiseIsSgd) {
  // Constant alpha via decay 0; the noiseless trajectory must equal plain SGD bit for bit.
  SgMcmcConfig c;
  c.alpha0 = 0.05;
  c.decay_exponent = 0.0;
  c.total_steps = 50;
  c.num_samples = 1;
  c.inject_noise = false;
  ParamVector init(2);
  init << 1.0, -2.0;
  StochasticGradFn g = [](const ParamVector& t, Rng&) { return ParamVector(3.0 * t); };
  Rng rng(10);
  const auto s = sgld_run(g, init, c, rng);
  ParamVector theta = init;
  for (int t = 0; t < 50; ++t) theta -= 0.05 * (3.0 * theta);
  EXPECT_EQ(s.samples.back(), theta);
}

TEST(SgMcmc, SghmcUnitFrictionWithoutNoiseIsSgd) {
  // eta = 1 leaves no memory in r: theta_{t+1} = theta_t - alpha g(theta_{t-1}).
  SgMcmcConfig c;
  c.alpha0 = 0.05;
  c.decay_exponent = 0.0;
  c.eta = 1.0;
  c.total_steps = 40;
  c.num_samples = 1;
  c.inject_noise = false;
  ParamVector init = ParamVector::Constant(1, 2.0);
  StochasticGradFn g = [](const ParamVector& t, Rng&) { return ParamVector(t); };
  Rng rng(11);
  const auto s = sghmc_run(g, init, c, rng);
  double prev = 2.0, theta = 2.0;  // r starts at zero, so the first step does not move theta
  for (int t = 1; t < 40; ++t) {
    const double next = theta - 0.05 * prev;
    prev = theta;
    theta = next;
  }
  EXPECT_NEAR(s.samples.back()[0], theta, 1e-14);
}

TEST(SgMcmc, SghmcConstantWithoutGradientOrNoise) {
  SgMcmcConfig c;
  c.total_steps = 100;
  c.num_samples = 5;
  c.inject_noise = false;
  const ParamVector init = ParamVector::Constant(3, 0.4);
  StochasticGradFn g = [](const ParamVector& t, Rng&) { return ParamVector(ParamVector::Zero(t.size())); };
  Rng rng(12);
  for (const auto& v : sghmc_run(g, init, c, rng).samples) EXPECT_EQ(v, init);
}

TEST(SgMcmc, HandSteppedUpdates) {
  ParamVector theta = ParamVector::Constant(1, 1.0);
  const ParamVector grad = ParamVector::Constant(1, 0.5);
  const Vector noise = Vector::Constant(1, 2.0);
  sgld_step(theta, grad, 0.02, noise);
  EXPECT_DOUBLE_EQ(theta[0], 1.0 - 0.02 * 0.5 + std::sqrt(0.04) * 2.0);

  ParamVector th = ParamVector::Constant(1, 1.0);
  Vector r = Vector::Constant(1, 0.3);
  sghmc_step(th, r, grad, 0.02, 0.1, noise);
  EXPECT_DOUBLE_EQ(th[0], 1.3);
  EXPECT_DOUBLE_EQ(r[0], 0.9 * 0.3 - 0.02 * 0.5 + std::sqrt(2 * 0.1 * 0.02) * 2.0);
}

TEST(SgMcmc, SgldStandardNormalVariance) {
  SgMcmcConfig c;
  c.alpha0 = 0.1;
  c.total_steps = 1000000;
  c.num_samples = 1000;
  StochasticGradFn g = [](const ParamVector& t, Rng&) { return ParamVector(t); };
  Rng rng(13);
  const auto m = moments(sgld_run(g, ParamVector::Zero(1), c, rng));
  EXPECT_GE(m.var, 0.7);
  EXPECT_LE(m.var, 1.3);
}

TEST(SgMcmc, SghmcStandardNormalVariance) {
  SgMcmcConfig c;
  c.alpha0 = 0.01;
  c.eta = 0.1;
  c.total_steps = 1000000;
  c.num_samples = 1000;
  StochasticGradFn g = [](const ParamVector& t, Rng&) { return ParamVector(t); };
  Rng rng(14);
  const auto m = moments(sghmc_run(g, ParamVector::Zero(1), c, rng));
  EXPECT_GE(m.var, 0.7);
  EXPECT_LE(m.var, 1.3);
}

TEST(SgMcmc, DeterministicGivenSeedAndData) {
  Rng drng(15);
  const auto data = gen_toy_regression(64, drng);
  MlpArchitecture a;
  a.layer_sizes = {1, 4, 1};
  const RegressionFamily fam(a, a);
  SgMcmcConfig c;
  c.alpha0 = 1e-4;
  c.total_steps = 200;
  c.num_samples = 4;
  Rng r1(16), r2(16);
  EXPECT_EQ(sgld_run(fam, data, c, r1).samples, sgld_run(fam, data, c, r2).samples);
}

TEST(SgMcmc, BatchSamplerCoversEachEpoch) {
  BatchSampler b(10, 4);
  Rng rng(17);
  EXPECT_EQ(b.batches_per_epoch(), 3u);
  std::vector<int> seen(10, 0);
  for (int k = 0; k < 3; ++k)
    for (auto i : b.next(rng)) ++seen[i];
  for (int v : seen) EXPECT_EQ(v, 1);
}

// ---------------------------------------------------------------------------
// Sample sets

TEST(SampleSet, TextRoundTrip) {
  PosteriorSampleSet s;
  s.method = SamplerMethod::sghmc;
  s.seed = 123456789012345ULL;
  s.config = {{"alpha0", 0.001}, {"T", 10}};
  Rng rng(18);
  for (int k = 0; k < 3; ++k) {
    ParamVector v(4);
    for (Eigen::Index i = 0; i < 4; ++i) v[i] = rng.normal() * 1e-3;
    s.samples.push_back(v);
  }
  std::stringstream io;
  write_samples(io, s);
  const auto back = read_samples(io);
  EXPECT_EQ(back.method, s.method);
  EXPECT_EQ(back.seed, s.seed);
  EXPECT_EQ(back.config, s.config);
  EXPECT_EQ(back.samples, s.samples);
}

TEST(SampleSet, ValidationRejectsBadSets) {
  PosteriorSampleSet s;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s.samples = {ParamVector::Zero(2), ParamVector::Zero(3)};
  EXPECT_THROW(s.validate(), std::invalid_argument);
  std::stringstream bad("not a sample file\n");
  EXPECT_THROW(read_samples(bad), std::runtime_error);
}

// ---------------------------------------------------------------------------
// MAP training, ensembles, MC-dropout

TEST(Training, ToyRegressionLossDecreases) {
  Rng drng(19);
  const auto data = gen_toy_regression(1000, drng);
  MlpArchitecture a;
  a.layer_sizes = {1, 10, 10, 1};
  const RegressionFamily fam(a, a);
  Rng rng(20);
  const ParamVector init = fam.init_params(rng);
  const ParamVector theta = train_map(fam, data, TrainConfig{}, rng, init);
  EXPECT_LT(full_map_loss(fam, data, theta), full_map_loss(fam, data, init));
}

TEST(Training, LinearModelMatchesRidgeClosedForm) {
  Dataset d;
  d.inputs.resize(1, 50);
  for (int j = 0; j < 50; ++j) {
    d.inputs(0, j) = -1.0 + 2.0 * j / 49.0;
    d.targets.push_back(2.0 * d.inputs(0, j));
  }
  // argmin (1/N) sum (y - w x)^2 + (1/N) w^2 = sum xy / (sum x^2 + 1)
  const double sxx = d.inputs.squaredNorm();
  const double expected = 2.0 * sxx / (sxx + 1.0);
  TrainConfig c;
  c.epochs = 400;
  c.batch_size = 50;
  c.lr = 0.01;
  Rng rng(21);
  const ParamVector w = train_map(LinearFamily{}, d, c, rng);
  EXPECT_NEAR(w[0], expected, 1e-2);
  Rng again(21);
  EXPECT_EQ(train_map(LinearFamily{}, d, c, again), w);
}

TEST(Ensemble, SingleMemberEqualsTrainMapWithSubSeed) {
  Rng drng(22);
  const auto data = gen_toy_regression(100, drng);
  MlpArchitecture a;
  a.layer_sizes = {1, 5, 1};
  const RegressionFamily fam(a, a);
  EnsembleConfig c;
  c.train.epochs = 3;
  const auto e = train_ensemble(fam, data, c, 77);
  Rng rng(ensemble_member_seed(77, 0));
  EXPECT_EQ(e.samples.front(), train_map(fam, data, c.train, rng));
}

TEST(Ensemble, MembersAreDistinctAndJobCountInvariant) {
  Rng drng(23);
  const auto data = gen_toy_regression(100, drng);
  MlpArchitecture a;
  a.layer_sizes = {1, 5, 1};
  const RegressionFamily fam(a, a);
  EnsembleConfig c;
  c.members = 4;
  c.train.epochs = 2;
  const auto serial = train_ensemble(fam, data, c, 5, 1);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) EXPECT_GT((serial.samples[i] - serial.samples[j]).norm(), 0.0);
  EXPECT_EQ(train_ensemble(fam, data, c, 5, 3).samples, serial.samples);
}

TEST(McDropout, ZeroRateGivesIdenticalPasses) {
  MlpArchitecture a;
  a.layer_sizes = {1, 6, 6, 1};
  a.dropout = DropoutSpec{0, 0.0};
  const RegressionFamily fam(a, a);
  Rng rng(24);
  const ParamVector theta = fam.init_params(rng);
  Matrix x(1, 5);
  x.setRandom();
  const auto passes = mc_dropout_posterior(fam, theta, x, 4, rng);
  for (const auto& p : passes) EXPECT_EQ(p, passes.front());
}

TEST(McDropout, ReproducibleWithSeed) {
  MlpArchitecture a;
  a.layer_sizes = {2, 6, 6, 2};
  a.dropout = DropoutSpec{0, 0.3};
  const ClassificationFamily fam(a);
  Rng init(25);
  const ParamVector theta = fam.init_params(init);
  Matrix x(2, 7);
  x.setRandom();
  Rng r1(26), r2(26);
  EXPECT_EQ(mc_dropout_posterior(fam, theta, x, 5, r1), mc_dropout_posterior(fam, theta, x, 5, r2));
  EXPECT_THROW(mc_dropout_posterior(ClassificationFamily([] {
                                      MlpArchitecture b;
                                      b.layer_sizes = {2, 3, 2};
                                      return b;
                                    }()),
                                    ParamVector::Zero(17), x, 2, r1),
               std::invalid_argument);
}

TEST(McDropout, MeanHiddenMatchesDeterministic) {
  // Hidden units after the dropout layer feed a linear output, so the mean
  // output over 1e4 passes matches the deterministic output within 3 SE.
  MlpArchitecture a;
  a.layer_sizes = {1, 8, 1};
  a.dropout = DropoutSpec{0, 0.2};
  a.activation = Activation::tanh;
  const RegressionFamily fam(a, a);
  Rng init(27);
  const ParamVector theta = fam.init_params(init);
  const Matrix x = Matrix::Constant(1, 1, 0.6);
  const double det = fam.predict(theta, x)(0, 0);
  Rng rng(28);
  const auto passes = mc_dropout_posterior(fam, theta, x, 10000, rng);
  double mean = 0.0, sq = 0.0;
  for (const auto& p : passes) {
    mean += p(0, 0);
    sq += p(0, 0) * p(0, 0);
  }
  mean /= 1e4;
  const double se = std::sqrt((sq / 1e4 - mean * mean) / 1e4);
  EXPECT_LT(std::abs(mean - det), 3.0 * se);
}
