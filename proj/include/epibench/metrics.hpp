#pragma once

// Uncertainty evaluation metrics: KL to a reference predictive, sparsification
// error (AUSE), regression calibration error (AUCE), expected calibration
// error (ECE), RMSE, Brier score and predictive entropy.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "epibench/csv.hpp"
#include "epibench/predictive.hpp"

namespace epibench {

// ---------------------------------------------------------------------------
// Evaluation grids

inline constexpr double kRegressionGridLo = -7.0;
inline constexpr double kRegressionGridHi = 7.0;
inline constexpr double kClassificationGridLo = -6.0;
inline constexpr double kClassificationGridHi = 6.0;

inline std::vector<double> linspace(double lo, double hi, std::size_t n) {
  if (n < 2) throw std::invalid_argument("grid resolution must be >= 2");
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i)
    v[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  v.back() = hi;
  return v;
}

/// Uniform 1D grid on [-7, 7], endpoints included (1 x n).
inline Matrix regression_grid(std::size_t resolution) {
  const auto xs = linspace(kRegressionGridLo, kRegressionGridHi, resolution);
  Matrix g(1, static_cast<Eigen::Index>(resolution));
  for (std::size_t i = 0; i < resolution; ++i) g(0, static_cast<Eigen::Index>(i)) = xs[i];
  return g;
}

/// Uniform 2D grid on [-6, 6]^2 with `resolution` points per axis (2 x n^2),
/// x1 varying fastest.
inline Matrix classification_grid(std::size_t resolution) {
  const auto xs = linspace(kClassificationGridLo, kClassificationGridHi, resolution);
  Matrix g(2, static_cast<Eigen::Index>(resolution * resolution));
  Eigen::Index k = 0;
  for (double x2 : xs)
    for (double x1 : xs) {
      g(0, k) = x1;
      g(1, k) = x2;
      ++k;
    }
  return g;
}

// ---------------------------------------------------------------------------
// KL divergences

/// KL(N(mu1, var1) || N(mu2, var2)).
inline double kl_gaussian(double mu1, double var1, double mu2, double var2) {
  if (!(var1 > 0.0) || !(var2 > 0.0)) throw std::invalid_argument("kl_gaussian: variances must be > 0");
  return 0.5 * std::log(var2 / var1) + (var1 + (mu1 - mu2) * (mu1 - mu2)) / (2.0 * var2) - 0.5;
}

inline double kl_gaussian(const PredictiveGaussian& p1, const PredictiveGaussian& p2) {
  return kl_gaussian(p1.mu_hat, p1.sigma2_hat, p2.mu_hat, p2.sigma2_hat);
}

/// sum_k q1_k log(q1_k / q2_k) with 0 log 0 = 0.
inline double kl_categorical(std::span<const double> q1, std::span<const double> q2) {
  if (q1.size() != q2.size()) throw std::invalid_argument("kl_categorical: class counts differ");
  double kl = 0.0;
  for (std::size_t k = 0; k < q1.size(); ++k) {
    if (q1[k] <= 0.0) continue;
    if (q2[k] <= 0.0) throw std::invalid_argument("kl_categorical: q2 has no mass where q1 does");
    kl += q1[k] * std::log(q1[k] / q2[k]);
  }
  return std::max(kl, 0.0);
}

inline double kl_categorical(const PredictiveCategorical& q1, const PredictiveCategorical& q2) {
  return kl_categorical(std::span<const double>(q1.probs.data(), static_cast<std::size_t>(q1.probs.size())),
                        std::span<const double>(q2.probs.data(), static_cast<std::size_t>(q2.probs.size())));
}

/// Unweighted mean over grid points of KL(candidate || reference).
template <typename P>
double mean_kl_to_reference(const std::vector<P>& candidate, const std::vector<P>& reference) {
  if (candidate.size() != reference.size() || candidate.empty())
    throw std::invalid_argument("mean_kl_to_reference: predictive curves must be non-empty and aligned");
  double sum = 0.0;
  for (std::size_t j = 0; j < candidate.size(); ++j) {
    if constexpr (std::is_same_v<P, PredictiveGaussian>)
      sum += kl_gaussian(candidate[j], reference[j]);
    else
      sum += kl_categorical(candidate[j], reference[j]);
  }
  return sum / static_cast<double>(candidate.size());
}

/// Function form: evaluates both predictive functions on every grid column.
template <typename P>
double mean_kl_to_reference(const std::function<P(const Vector&)>& candidate,
                            const std::function<P(const Vector&)>& reference, const Matrix& grid) {
  std::vector<P> c, r;
  c.reserve(static_cast<std::size_t>(grid.cols()));
  r.reserve(static_cast<std::size_t>(grid.cols()));
  for (Eigen::Index j = 0; j < grid.cols(); ++j) {
    c.push_back(candidate(grid.col(j)));
    r.push_back(reference(grid.col(j)));
  }
  return mean_kl_to_reference(c, r);
}

// ---------------------------------------------------------------------------
// Standard normal

inline double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double std_normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

/// Inverse standard normal CDF: Acklam's rational approximation (relative
/// error ~1e-9) refined by one Newton step on Phi. Evaluated on the lower
/// tail and mirrored, so the Newton residual keeps full precision.
inline double std_normal_quantile(double q) {
  if (!(q > 0.0 && q < 1.0)) throw std::domain_error("std_normal_quantile: q must lie in (0, 1)");
  if (q > 0.5) return -std_normal_quantile(1.0 - q);
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x;
  if (q < p_low) {
    const double r = std::sqrt(-2.0 * std::log(q));
    x = (((((c[0] * r + c[1]) * r + c[2]) * r + c[3]) * r + c[4]) * r + c[5]) /
        ((((d[0] * r + d[1]) * r + d[2]) * r + d[3]) * r + 1.0);
  } else {
    const double r = q - 0.5;
    const double s = r * r;
    x = (((((a[0] * s + a[1]) * s + a[2]) * s + a[3]) * s + a[4]) * s + a[5]) * r /
        (((((b[0] * s + b[1]) * s + b[2]) * s + b[3]) * s + b[4]) * s + 1.0);
  }
  const double pdf = std_normal_pdf(x);
  if (pdf > 0.0) x -= (std_normal_cdf(x) - q) / pdf;
  return x;
}

// ---------------------------------------------------------------------------
// Point metrics

inline double rmse(std::span<const double> predicted, std::span<const double> targets) {
  if (predicted.empty() || predicted.size() != targets.size())
    throw std::invalid_argument("rmse: inputs must be non-empty and equally long");
  double s = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) s += (predicted[i] - targets[i]) * (predicted[i] - targets[i]);
  return std::sqrt(s / static_cast<double>(predicted.size()));
}

struct BrierEntropy {
  double brier;
  double entropy;
};

inline BrierEntropy brier_and_entropy(const Vector& probs, int label) {
  BrierEntropy out{0.0, 0.0};
  for (Eigen::Index k = 0; k < probs.size(); ++k) {
    const double target = k == label ? 1.0 : 0.0;
    out.brier += (probs[k] - target) * (probs[k] - target);
    if (probs[k] > 0.0) out.entropy -= probs[k] * std::log(probs[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sparsification (AUSE)

enum class SparsificationAggregate { rmse, brier_mean };

struct SparsificationCurve {
  std::vector<double> fractions_removed;
  std::vector<double> metric_values;  // removal by decreasing uncertainty
  std::vector<double> oracle_values;  // removal by decreasing error

  double error_at(std::size_t k) const { return metric_values[k] - oracle_values[k]; }
};

struct AuseResult {
  double value;
  SparsificationCurve curve;
};

namespace detail {

/// rank[i] = position of sample i in the removal order given by `before`.
template <typename Less>
std::vector<std::size_t> removal_rank(std::size_t n, Less before) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), before);
  std::vector<std::size_t> rank(n);
  for (std::size_t p = 0; p < n; ++p) rank[order[p]] = p;
  return rank;
}

/// Aggregate over samples whose removal rank is >= removed, summed in index order.
inline double kept_aggregate(std::span<const double> error, const std::vector<std::size_t>& rank, std::size_t removed,
                             SparsificationAggregate agg) {
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < error.size(); ++i) {
    if (rank[i] < removed) continue;
    sum += agg == SparsificationAggregate::rmse ? error[i] * error[i] : error[i];
    ++count;
  }
  if (count == 0) return 0.0;
  const double mean = sum / static_cast<double>(count);
  return agg == SparsificationAggregate::rmse ? std::sqrt(mean) : mean;
}

}  // namespace detail

/// Number of samples removed at fraction k / steps: ceil(k n / steps).
inline std::size_t removed_count(std::size_t k, std::size_t steps, std::size_t n) {
  return (k * n + steps - 1) / steps;
}

/// Area under the sparsification error curve. `error` holds per-sample errors
/// (absolute or signed residuals for rmse, Brier scores for brier_mean).
/// Ties in uncertainty remove the smaller error first, then the lower index.
inline AuseResult ause(std::span<const double> error, std::span<const double> uncertainty,
                       SparsificationAggregate aggregate, std::size_t steps = 100) {
  const std::size_t n = error.size();
  if (n != uncertainty.size()) throw std::invalid_argument("ause: error and uncertainty lengths differ");
  if (n < 2) throw std::invalid_argument("ause: need at least 2 samples");
  if (steps < 1) throw std::invalid_argument("ause: need at least one step");

  auto magnitude = [&](std::size_t i) { return std::abs(error[i]); };
  const auto by_uncertainty = detail::removal_rank(n, [&](std::size_t a, std::size_t b) {
    if (uncertainty[a] != uncertainty[b]) return uncertainty[a] > uncertainty[b];
    if (magnitude(a) != magnitude(b)) return magnitude(a) < magnitude(b);
    return a < b;
  });
  const auto by_error = detail::removal_rank(n, [&](std::size_t a, std::size_t b) {
    if (magnitude(a) != magnitude(b)) return magnitude(a) > magnitude(b);
    return a < b;
  });

  AuseResult out{0.0, {}};
  auto& c = out.curve;
  const double base = detail::kept_aggregate(error, by_error, 0, aggregate);
  for (std::size_t k = 0; k <= steps; ++k) {
    const std::size_t removed = removed_count(k, steps, n);
    c.fractions_removed.push_back(static_cast<double>(k) / static_cast<double>(steps));
    if (base > 0.0) {
      c.metric_values.push_back(detail::kept_aggregate(error, by_uncertainty, removed, aggregate) / base);
      c.oracle_values.push_back(detail::kept_aggregate(error, by_error, removed, aggregate) / base);
    } else {
      c.metric_values.push_back(0.0);
      c.oracle_values.push_back(0.0);
    }
  }
  if (base > 0.0) {
    const double h = 1.0 / static_cast<double>(steps);
    for (std::size_t k = 0; k < steps; ++k) out.value += 0.5 * h * (c.error_at(k) + c.error_at(k + 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Regression calibration (AUCE)

inline constexpr std::size_t kCalibrationLevels = 100;

/// Confidence levels p_k = (k - 1/2) / 100, k = 1..100.
inline std::vector<double> calibration_levels(std::size_t count = kCalibrationLevels) {
  std::vector<double> p(count);
  for (std::size_t k = 0; k < count; ++k) p[k] = (static_cast<double>(k) + 0.5) / static_cast<double>(count);
  return p;
}

struct CalibrationCurve {
  std::vector<double> confidence_levels;
  std::vector<double> empirical_coverage;
};

struct AuceResult {
  double value;
  CalibrationCurve curve;
};

/// Mean over levels p of |p - coverage(p)|, where coverage(p) is the fraction
/// of targets inside mu +- Phi^{-1}((p+1)/2) sigma.
inline AuceResult auce(std::span<const PredictiveGaussian> predictions, std::span<const double> targets) {
  if (predictions.empty()) throw std::invalid_argument("auce: empty input");
  if (predictions.size() != targets.size()) throw std::invalid_argument("auce: prediction and target counts differ");
  AuceResult out{0.0, {calibration_levels(), {}}};
  // Coverage at level p depends only on z_i = |y_i - mu_i| / sigma_i, so sort once.
  std::vector<double> z(predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (!(predictions[i].sigma2_hat >= 0.0)) throw std::invalid_argument("auce: negative variance");
    const double dev = std::abs(targets[i] - predictions[i].mu_hat);
    const double sigma = std::sqrt(predictions[i].sigma2_hat);
    z[i] = sigma > 0.0 ? dev / sigma : (dev == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
  }
  std::sort(z.begin(), z.end());
  const double n = static_cast<double>(z.size());
  for (double p : out.curve.confidence_levels) {
    const double half_width = std_normal_quantile(0.5 * (p + 1.0));
    const auto inside = std::upper_bound(z.begin(), z.end(), half_width) - z.begin();
    const double coverage = static_cast<double>(inside) / n;
    out.curve.empirical_coverage.push_back(coverage);
    out.value += std::abs(p - coverage);
  }
  out.value /= static_cast<double>(out.curve.confidence_levels.size());
  return out;
}

// ---------------------------------------------------------------------------
// Classification calibration (ECE)

struct ReliabilityBins {
  std::vector<double> edges;  // L+1 edges over [1/C, 1]
  std::vector<std::size_t> count;
  std::vector<double> mean_confidence;
  std::vector<double> accuracy;
};

struct EceResult {
  double value;
  ReliabilityBins bins;
};

/// Equal-width bins over (1/C, 1] on the max-probability confidence; the
/// predicted class is the first argmax. Empty bins contribute nothing.
inline EceResult ece(std::span<const PredictiveCategorical> predictions, std::span<const int> labels,
                     std::size_t num_bins = 10) {
  if (predictions.empty()) throw std::invalid_argument("ece: empty input");
  if (predictions.size() != labels.size()) throw std::invalid_argument("ece: prediction and label counts differ");
  if (num_bins < 1) throw std::invalid_argument("ece: need at least one bin");
  const auto classes = predictions.front().probs.size();
  const double lo = 1.0 / static_cast<double>(classes);
  const double width = (1.0 - lo) / static_cast<double>(num_bins);

  EceResult out{0.0, {}};
  auto& b = out.bins;
  for (std::size_t k = 0; k <= num_bins; ++k) b.edges.push_back(k == num_bins ? 1.0 : lo + width * static_cast<double>(k));
  b.count.assign(num_bins, 0);
  std::vector<double> conf_sum(num_bins, 0.0), correct(num_bins, 0.0);

  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& probs = predictions[i].probs;
    if (probs.size() != classes) throw std::invalid_argument("ece: class counts differ");
    if (labels[i] < 0 || labels[i] >= classes) throw std::invalid_argument("ece: label out of range");
    Eigen::Index arg = 0;
    const double conf = probs.maxCoeff(&arg);
    auto bin = static_cast<long>(std::ceil((conf - lo) / width)) - 1;
    bin = std::clamp<long>(bin, 0, static_cast<long>(num_bins) - 1);
    const auto ub = static_cast<std::size_t>(bin);
    ++b.count[ub];
    conf_sum[ub] += conf;
    correct[ub] += arg == labels[i] ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(predictions.size());
  for (std::size_t k = 0; k < num_bins; ++k) {
    if (b.count[k] == 0) {
      b.mean_confidence.push_back(0.0);
      b.accuracy.push_back(0.0);
      continue;
    }
    const double cnt = static_cast<double>(b.count[k]);
    b.mean_confidence.push_back(conf_sum[k] / cnt);
    b.accuracy.push_back(correct[k] / cnt);
    out.value += cnt / n * std::abs(b.accuracy.back() - b.mean_confidence.back());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Repeat statistics

struct RepeatStats {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single repeat
  std::size_t repeats = 0;
};

inline RepeatStats aggregate_repeats(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("aggregate_repeats: no values");
  RepeatStats s;
  s.repeats = values.size();
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Curve CSV export

inline void save_sparsification_csv(const std::string& path, const SparsificationCurve& c) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "fraction,value,oracle\n";
  for (std::size_t k = 0; k < c.fractions_removed.size(); ++k)
    out << csv::format_double(c.fractions_removed[k]) << ',' << csv::format_double(c.metric_values[k]) << ','
        << csv::format_double(c.oracle_values[k]) << '\n';
}

inline void save_calibration_csv(const std::string& path, const CalibrationCurve& c) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "p,p_hat\n";
  for (std::size_t k = 0; k < c.confidence_levels.size(); ++k)
    out << csv::format_double(c.confidence_levels[k]) << ',' << csv::format_double(c.empirical_coverage[k]) << '\n';
}

inline void save_reliability_csv(const std::string& path, const ReliabilityBins& b) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "bin,count,conf,acc\n";
  for (std::size_t k = 0; k < b.count.size(); ++k)
    out << k << ',' << b.count[k] << ',' << csv::format_double(b.mean_confidence[k]) << ','
        << csv::format_double(b.accuracy[k]) << '\n';
}

}  // namespace epibench
