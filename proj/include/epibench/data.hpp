#pragma once

// Toy data generators and prediction fixtures.
//
// Regression: x ~ U(-3, 3), y ~ N(sin x, (0.15 * sigmoid(x))^2).
// Classification: x ~ U([0,3] x [-3,3]), label 1 iff x2 >= 1.5 sin(pi x1 / 3).
// The classification boundary is a fixed stand-in rule; it is not meant to
// match any particular published figure.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "epibench/csv.hpp"
#include "epibench/nn.hpp"
#include "epibench/rng.hpp"

namespace epibench {

struct Dataset {
  Matrix inputs;                // d x n
  std::vector<double> targets;  // regression targets (empty for classification)
  std::vector<int> labels;      // class indices (empty for regression)
  std::uint64_t seed = 0;
  std::string generator;

  std::size_t size() const { return static_cast<std::size_t>(inputs.cols()); }
};

template <typename Target>
const std::vector<Target>& targets_of(const Dataset& d) {
  if constexpr (std::is_same_v<Target, int>)
    return d.labels;
  else
    return d.targets;
}

inline double toy_regression_mean(double x) { return std::sin(x); }
inline double toy_regression_std(double x) { return 0.15 / (1.0 + std::exp(-x)); }

struct ToyRegressionDensity {
  double mu;
  double sigma2;
};

/// Exact generating density of the toy regression problem at x.
inline ToyRegressionDensity toy_regression_density(double x) {
  const double s = toy_regression_std(x);
  return {toy_regression_mean(x), s * s};
}

inline int toy_classification_label(double x1, double x2) {
  return x2 >= 1.5 * std::sin(std::numbers::pi * x1 / 3.0) ? 1 : 0;
}

/// Label probabilities (p0, p1) of the deterministic classification rule.
inline std::pair<double, double> toy_classification_probs(double x1, double x2) {
  return toy_classification_label(x1, x2) == 1 ? std::pair{0.0, 1.0} : std::pair{1.0, 0.0};
}

inline Dataset gen_toy_regression(std::size_t n, Rng& rng, double x_lo = -3.0, double x_hi = 3.0) {
  if (n < 1) throw std::invalid_argument("toy regression needs n >= 1");
  Dataset d;
  d.inputs.resize(1, static_cast<Eigen::Index>(n));
  d.targets.resize(n);
  d.seed = rng.seed();
  d.generator = "toy-regression";
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform(x_lo, x_hi);
    d.inputs(0, static_cast<Eigen::Index>(i)) = x;
    d.targets[i] = toy_regression_mean(x) + toy_regression_std(x) * rng.normal();
  }
  return d;
}

/// Rejection-samples the training region until each class holds exactly
/// n_per_class points.
inline Dataset gen_toy_classification(std::size_t n_per_class, Rng& rng) {
  if (n_per_class < 1) throw std::invalid_argument("toy classification needs n_per_class >= 1");
  Dataset d;
  d.seed = rng.seed();
  d.generator = "toy-classification";
  std::vector<double> xs1, xs2;
  std::size_t count[2] = {0, 0};
  while (count[0] < n_per_class || count[1] < n_per_class) {
    const double x1 = rng.uniform(0.0, 3.0);
    const double x2 = rng.uniform(-3.0, 3.0);
    const int label = toy_classification_label(x1, x2);
    if (count[label] == n_per_class) continue;
    ++count[label];
    xs1.push_back(x1);
    xs2.push_back(x2);
    d.labels.push_back(label);
  }
  d.inputs.resize(2, static_cast<Eigen::Index>(xs1.size()));
  for (std::size_t i = 0; i < xs1.size(); ++i) {
    d.inputs(0, static_cast<Eigen::Index>(i)) = xs1[i];
    d.inputs(1, static_cast<Eigen::Index>(i)) = xs2[i];
  }
  return d;
}

/// Dataset CSV: header `x_0[,x_1],y`.
inline void save_dataset_csv(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (Eigen::Index r = 0; r < d.inputs.rows(); ++r) out << "x_" << r << ',';
  out << "y\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (Eigen::Index r = 0; r < d.inputs.rows(); ++r)
      out << csv::format_double(d.inputs(r, static_cast<Eigen::Index>(i))) << ',';
    if (d.labels.empty())
      out << csv::format_double(d.targets[i]) << '\n';
    else
      out << d.labels[i] << '\n';
  }
}

// ---------------------------------------------------------------------------
// Prediction fixtures for metric-only workflows.
//
//   regression:     mu,sigma2,target
//   classification: p_0,...,p_{C-1},label

struct RegressionRecord {
  double mu;
  double sigma2;
  double target;
};

struct ClassificationRecord {
  std::vector<double> probs;
  int label;
};

struct PredictionFixture {
  enum class Kind { regression, classification };
  Kind kind = Kind::regression;
  std::vector<RegressionRecord> regression;
  std::vector<ClassificationRecord> classification;

  std::size_t size() const { return kind == Kind::regression ? regression.size() : classification.size(); }
};

class FixtureError : public std::runtime_error {
 public:
  FixtureError(const std::string& msg, std::size_t line, std::string field = {})
      : std::runtime_error(msg), line_(line), field_(std::move(field)) {}
  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

inline constexpr double kSimplexTolerance = 1e-9;

inline void write_fixture(std::ostream& out, const PredictionFixture& f) {
  if (f.kind == PredictionFixture::Kind::regression) {
    out << "mu,sigma2,target\n";
    for (const auto& r : f.regression)
      out << csv::format_double(r.mu) << ',' << csv::format_double(r.sigma2) << ',' << csv::format_double(r.target)
          << '\n';
    return;
  }
  const std::size_t c = f.classification.empty() ? 2 : f.classification.front().probs.size();
  for (std::size_t k = 0; k < c; ++k) out << "p_" << k << ',';
  out << "label\n";
  for (const auto& r : f.classification) {
    for (double p : r.probs) out << csv::format_double(p) << ',';
    out << r.label << '\n';
  }
}

inline void save_fixture(const PredictionFixture& f, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_fixture(out, f);
}

inline PredictionFixture read_fixture(std::istream& in) {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) throw FixtureError("line 1: empty fixture (missing header)", 1);
  const auto header = csv::split(csv::trim_eol(line));
  PredictionFixture f;
  std::size_t classes = 0;
  if (header.size() == 3 && header[0] == "mu" && header[1] == "sigma2" && header[2] == "target") {
    f.kind = PredictionFixture::Kind::regression;
  } else {
    f.kind = PredictionFixture::Kind::classification;
    if (header.size() < 3 || header.back() != "label")
      throw FixtureError("line 1: unrecognized fixture header", 1);
    classes = header.size() - 1;
    for (std::size_t k = 0; k < classes; ++k)
      if (header[k] != "p_" + std::to_string(k)) throw FixtureError("line 1: expected column p_" + std::to_string(k), 1);
  }

  while (std::getline(in, line)) {
    ++lineno;
    const auto body = csv::trim_eol(line);
    if (body.empty()) continue;
    const auto cells = csv::split(body);
    const std::string where = "line " + std::to_string(lineno) + ": ";
    auto number = [&](std::size_t i, const std::string& field) {
      auto v = csv::parse_double(cells[i]);
      if (!v) throw FixtureError(where + "cannot parse field '" + field + "'", lineno, field);
      if (!std::isfinite(*v)) throw FixtureError(where + "field '" + field + "' is not finite", lineno, field);
      return *v;
    };
    if (f.kind == PredictionFixture::Kind::regression) {
      if (cells.size() != 3) throw FixtureError(where + "expected 3 fields", lineno);
      RegressionRecord r{number(0, "mu"), number(1, "sigma2"), number(2, "target")};
      if (!(r.sigma2 > 0.0)) throw FixtureError(where + "field 'sigma2' must be > 0", lineno, "sigma2");
      f.regression.push_back(r);
    } else {
      if (cells.size() != classes + 1)
        throw FixtureError(where + "expected " + std::to_string(classes + 1) + " fields", lineno);
      ClassificationRecord r{std::vector<double>(classes), 0};
      double sum = 0.0;
      for (std::size_t k = 0; k < classes; ++k) {
        const std::string field = "p_" + std::to_string(k);
        r.probs[k] = number(k, field);
        if (r.probs[k] < 0.0) throw FixtureError(where + "field '" + field + "' is negative", lineno, field);
        sum += r.probs[k];
      }
      if (std::abs(sum - 1.0) > kSimplexTolerance)
        throw FixtureError(where + "probabilities do not sum to 1", lineno, "p_*");
      const double lab = number(classes, "label");
      if (lab != std::floor(lab) || lab < 0 || lab >= static_cast<double>(classes))
        throw FixtureError(where + "field 'label' out of range", lineno, "label");
      r.label = static_cast<int>(lab);
      f.classification.push_back(std::move(r));
    }
  }
  return f;
}

inline PredictionFixture load_fixture(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open fixture " + path);
  return read_fixture(in);
}

}  // namespace epibench
