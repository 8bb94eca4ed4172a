#pragma once

// Finite-difference verification of every analytic gradient in the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "epibench/models.hpp"
#include "epibench/rng.hpp"

namespace epibench {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t instances = 100;  // per suite
  double step = 1e-5;
  double tolerance = 1e-4;
  bool flip_sign = false;       // negative-control hook: negates analytic gradients
};

struct GradcheckSuite {
  std::string name;
  std::size_t instances = 0;
  double worst_relative_error = 0.0;
  double tolerance = 1e-4;

  bool passed() const { return worst_relative_error < tolerance; }
};

struct GradcheckReport {
  std::vector<GradcheckSuite> suites;

  bool passed() const {
    return std::all_of(suites.begin(), suites.end(), [](const auto& s) { return s.passed(); });
  }
  double worst() const {
    double w = 0.0;
    for (const auto& s : suites) w = std::max(w, s.worst_relative_error);
    return w;
  }
};

namespace detail {

inline MlpArchitecture random_architecture(Rng& rng, std::size_t in, std::size_t out) {
  MlpArchitecture a;
  a.layer_sizes.push_back(in);
  const std::size_t hidden = 1 + rng.index(3);
  for (std::size_t h = 0; h < hidden; ++h) a.layer_sizes.push_back(1 + rng.index(8));
  a.layer_sizes.push_back(out);
  a.activation = rng.bernoulli(0.5) ? Activation::relu : Activation::tanh;
  return a;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = scale * rng.normal();
  return m;
}

inline ParamVector random_params(std::size_t p, Rng& rng) {
  ParamVector v(static_cast<Eigen::Index>(p));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = 0.7 * rng.normal();
  return v;
}

/// Coordinate-wise relative error with a floor scaled to the loss magnitude,
/// below which round-off in the difference quotient dominates.
inline double compare(const ParamVector& analytic, const ParamVector& numeric, double loss) {
  return max_relative_error(analytic, numeric, 1e-6 * std::max(1.0, std::abs(loss)));
}

}  // namespace detail

/// Backward pass of random networks against central differences of
/// <output_grad, forward(theta)>.
inline GradcheckSuite gradcheck_network(const GradcheckOptions& opt) {
  GradcheckSuite suite{"network-backward", opt.instances, 0.0, opt.tolerance};
  Rng rng = Rng(opt.seed).split("network");
  for (std::size_t i = 0; i < opt.instances; ++i) {
    const auto arch = detail::random_architecture(rng, 1 + rng.index(3), 1 + rng.index(3));
    const ParamVector theta = detail::random_params(arch.param_count(), rng);
    const Matrix x = detail::random_matrix(static_cast<Eigen::Index>(arch.input_dim()), 1 + rng.index(3), rng);
    const Matrix g = detail::random_matrix(static_cast<Eigen::Index>(arch.output_dim()), x.cols(), rng);
    auto loss = [&](const ParamVector& t) {
      return forward(arch, t, x, ForwardMode::deterministic).first.cwiseProduct(g).sum();
    };
    const auto [out, trace] = forward(arch, theta, x, ForwardMode::deterministic);
    ParamVector analytic = backward(arch, theta, trace, g);
    if (opt.flip_sign) analytic = -analytic;
    const ParamVector numeric = finite_diff_grad(loss, theta, opt.step);
    suite.worst_relative_error = std::max(suite.worst_relative_error, detail::compare(analytic, numeric, loss(theta)));
  }
  return suite;
}

/// MAP loss and potential energy of the regression family on random 5-point datasets.
inline GradcheckSuite gradcheck_regression(const GradcheckOptions& opt) {
  GradcheckSuite suite{"regression-loss", opt.instances, 0.0, opt.tolerance};
  Rng rng = Rng(opt.seed).split("regression");
  for (std::size_t i = 0; i < opt.instances; ++i) {
    const std::size_t d = 1 + rng.index(2);
    const RegressionFamily family(detail::random_architecture(rng, d, 1), detail::random_architecture(rng, d, 1));
    const ParamVector theta = detail::random_params(family.param_count(), rng);
    const Matrix x = detail::random_matrix(static_cast<Eigen::Index>(d), 5, rng);
    std::vector<double> y(5);
    for (auto& v : y) v = rng.normal();
    const std::size_t n_total = 5 + rng.index(20);

    auto map = [&](const ParamVector& t) { return family.map_loss(t, x, y, n_total).value; };
    auto pot = [&](const ParamVector& t) { return potential_energy(family, x, std::span<const double>(y), t).value; };
    ParamVector g1 = family.map_loss(theta, x, y, n_total).grad;
    ParamVector g2 = potential_energy(family, x, std::span<const double>(y), theta).grad;
    if (opt.flip_sign) {
      g1 = -g1;
      g2 = -g2;
    }
    suite.worst_relative_error = std::max(
        {suite.worst_relative_error, detail::compare(g1, finite_diff_grad(map, theta, opt.step), map(theta)),
         detail::compare(g2, finite_diff_grad(pot, theta, opt.step), pot(theta))});
  }
  return suite;
}

/// MAP loss and potential energy of the classification family.
inline GradcheckSuite gradcheck_classification(const GradcheckOptions& opt) {
  GradcheckSuite suite{"classification-loss", opt.instances, 0.0, opt.tolerance};
  Rng rng = Rng(opt.seed).split("classification");
  for (std::size_t i = 0; i < opt.instances; ++i) {
    const std::size_t d = 1 + rng.index(3);
    const std::size_t c = 2 + rng.index(3);
    const ClassificationFamily family(detail::random_architecture(rng, d, c));
    const ParamVector theta = detail::random_params(family.param_count(), rng);
    const Matrix x = detail::random_matrix(static_cast<Eigen::Index>(d), 5, rng);
    std::vector<int> labels(5);
    for (auto& l : labels) l = static_cast<int>(rng.index(c));
    const std::size_t n_total = 5 + rng.index(20);

    auto map = [&](const ParamVector& t) { return family.map_loss(t, x, labels, n_total).value; };
    auto pot = [&](const ParamVector& t) { return potential_energy(family, x, std::span<const int>(labels), t).value; };
    ParamVector g1 = family.map_loss(theta, x, labels, n_total).grad;
    ParamVector g2 = potential_energy(family, x, std::span<const int>(labels), theta).grad;
    if (opt.flip_sign) {
      g1 = -g1;
      g2 = -g2;
    }
    suite.worst_relative_error = std::max(
        {suite.worst_relative_error, detail::compare(g1, finite_diff_grad(map, theta, opt.step), map(theta)),
         detail::compare(g2, finite_diff_grad(pot, theta, opt.step), pot(theta))});
  }
  return suite;
}

inline GradcheckReport run_gradcheck(const GradcheckOptions& opt) {
  return {{gradcheck_network(opt), gradcheck_regression(opt), gradcheck_classification(opt)}};
}

inline void print_gradcheck(std::ostream& out, const GradcheckReport& report) {
  char buf[160];
  for (const auto& s : report.suites) {
    std::snprintf(buf, sizeof(buf), "%-22s instances=%-4zu worst_rel_error=%.3e  %s\n", s.name.c_str(), s.instances,
                  s.worst_relative_error, s.passed() ? "PASS" : "FAIL");
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "gradcheck: %s (worst relative error %.3e)\n", report.passed() ? "PASS" : "FAIL",
                report.worst());
  out << buf;
}

}  // namespace epibench
