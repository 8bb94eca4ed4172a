#pragma once

// Predictive distributions from posterior samples: categorical averaging and
// the moment-matched single Gaussian for uniform Gaussian mixtures.

#include <cstddef>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "epibench/csv.hpp"
#include "epibench/models.hpp"
#include "epibench/samplers.hpp"

namespace epibench {

struct PredictiveGaussian {
  double mu_hat = 0.0;
  double sigma2_hat = 1.0;
};

struct PredictiveCategorical {
  Vector probs;
};

/// mu = mean(mu_i); sigma2 = mean((mu_i - mu)^2 + sigma2_i)
inline PredictiveGaussian collapse_gaussian_mixture(std::span<const GaussianPrediction> components) {
  if (components.empty()) throw std::invalid_argument("cannot collapse an empty mixture");
  const double m = static_cast<double>(components.size());
  double mu = 0.0;
  for (const auto& c : components) mu += c.mu;
  mu /= m;
  double var = 0.0;
  for (const auto& c : components) var += (c.mu - mu) * (c.mu - mu) + c.sigma2();
  return {mu, var / m};
}

inline PredictiveCategorical average_categorical(std::span<const CategoricalPrediction> components) {
  if (components.empty()) throw std::invalid_argument("cannot average an empty set of predictions");
  Vector sum = Vector::Zero(components.front().probs.size());
  for (const auto& c : components) {
    if (c.probs.size() != sum.size()) throw std::invalid_argument("class counts differ between predictions");
    sum += c.probs;
  }
  return {sum / static_cast<double>(components.size())};
}

// ---------------------------------------------------------------------------
// Aggregation over cached per-sample head outputs. Each element of `outputs`
// holds one sample's predictions on the whole grid (heads x n): for
// regression rows (mu, log sigma^2), for classification the C probabilities.

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

inline std::vector<PredictiveGaussian> aggregate_gaussian(const std::vector<Matrix>& outputs,
                                                          std::span<const std::size_t> subset) {
  if (subset.empty()) throw std::invalid_argument("cannot aggregate zero samples");
  const auto n = outputs[subset.front()].cols();
  std::vector<PredictiveGaussian> out(static_cast<std::size_t>(n));
  std::vector<GaussianPrediction> comps(subset.size());
  for (Eigen::Index j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < subset.size(); ++k) comps[k] = {outputs[subset[k]](0, j), outputs[subset[k]](1, j)};
    out[static_cast<std::size_t>(j)] = collapse_gaussian_mixture(comps);
  }
  return out;
}

inline std::vector<PredictiveCategorical> aggregate_categorical(const std::vector<Matrix>& outputs,
                                                                std::span<const std::size_t> subset) {
  if (subset.empty()) throw std::invalid_argument("cannot aggregate zero samples");
  Matrix sum = Matrix::Zero(outputs[subset.front()].rows(), outputs[subset.front()].cols());
  for (auto k : subset) sum += outputs[k];
  sum /= static_cast<double>(subset.size());
  std::vector<PredictiveCategorical> out(static_cast<std::size_t>(sum.cols()));
  for (Eigen::Index j = 0; j < sum.cols(); ++j) out[static_cast<std::size_t>(j)].probs = sum.col(j);
  return out;
}

template <ModelFamily F>
using PredictiveOf = std::conditional_t<std::is_same_v<typename F::Prediction, GaussianPrediction>, PredictiveGaussian,
                                        PredictiveCategorical>;

template <ModelFamily F>
std::vector<PredictiveOf<F>> aggregate(const std::vector<Matrix>& outputs, std::span<const std::size_t> subset) {
  if constexpr (std::is_same_v<PredictiveOf<F>, PredictiveGaussian>)
    return aggregate_gaussian(outputs, subset);
  else
    return aggregate_categorical(outputs, subset);
}

/// Deterministic head outputs of every sample on the grid.
template <ModelFamily F>
std::vector<Matrix> sample_outputs(const F& family, const PosteriorSampleSet& set, const Matrix& grid) {
  set.validate();
  std::vector<Matrix> outputs;
  outputs.reserve(set.size());
  for (const auto& theta : set.samples) outputs.push_back(family.predict(theta, grid));
  return outputs;
}

/// Per-grid-point predictive distribution of a sample set.
template <ModelFamily F>
std::vector<PredictiveOf<F>> posterior_predict(const F& family, const PosteriorSampleSet& set, const Matrix& grid) {
  if constexpr (std::is_same_v<PredictiveOf<F>, PredictiveCategorical>) {
    // Running sum: large sample sets on 2D grids would not fit as cached outputs.
    set.validate();
    std::vector<Matrix> sum{family.predict(set.samples.front(), grid)};
    for (std::size_t i = 1; i < set.size(); ++i) sum.front() += family.predict(set.samples[i], grid);
    sum.front() /= static_cast<double>(set.size());
    const std::size_t only[] = {0};
    return aggregate_categorical(sum, only);
  } else {
    const auto outputs = sample_outputs(family, set, grid);
    const auto idx = all_indices(outputs.size());
    return aggregate<F>(outputs, idx);
  }
}

/// Per-grid-point predictive distribution of an MC-dropout model with M passes.
template <ModelFamily F>
std::vector<PredictiveOf<F>> posterior_predict_mc_dropout(const F& family, const ParamVector& theta,
                                                          const Matrix& grid, std::size_t passes, Rng& rng) {
  const auto outputs = mc_dropout_posterior(family, theta, grid, passes, rng);
  const auto idx = all_indices(outputs.size());
  return aggregate<F>(outputs, idx);
}

/// Curve CSV: `x,mu_hat,sigma2_hat` for 1D regression grids.
inline void save_predictive_csv(const std::string& path, const Matrix& grid,
                                const std::vector<PredictiveGaussian>& pred) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "x,mu_hat,sigma2_hat\n";
  for (std::size_t j = 0; j < pred.size(); ++j)
    out << csv::format_double(grid(0, static_cast<Eigen::Index>(j))) << ',' << csv::format_double(pred[j].mu_hat)
        << ',' << csv::format_double(pred[j].sigma2_hat) << '\n';
}

/// Curve CSV: `x1,x2,p_0,...` for 2D classification grids.
inline void save_predictive_csv(const std::string& path, const Matrix& grid,
                                const std::vector<PredictiveCategorical>& pred) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "x1,x2";
  const auto c = pred.empty() ? 0 : pred.front().probs.size();
  for (Eigen::Index k = 0; k < c; ++k) out << ",p_" << k;
  out << '\n';
  for (std::size_t j = 0; j < pred.size(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    out << csv::format_double(grid(0, jj)) << ',' << csv::format_double(grid(1, jj));
    for (Eigen::Index k = 0; k < c; ++k) out << ',' << csv::format_double(pred[j].probs[k]);
    out << '\n';
  }
}

}  // namespace epibench
