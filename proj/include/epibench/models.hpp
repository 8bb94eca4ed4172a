#pragma once

// Probabilistic output heads and the losses used to fit them.
//
// Regression uses two independent networks for the mean and the log-variance;
// classification uses one network followed by a softmax. Both are exposed
// twice: as plain model structs (GaussianModel / CategoricalModel) and as
// "families" that work on a single concatenated parameter vector, which is
// what the optimizers and samplers operate on.

#include <cmath>
#include <concepts>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "epibench/nn.hpp"

namespace epibench {

struct GaussianPrediction {
  double mu = 0.0;
  double log_sigma2 = 0.0;

  double sigma2() const { return std::exp(log_sigma2); }
};

struct CategoricalPrediction {
  Vector probs;
};

struct GaussianModel {
  MlpArchitecture arch_mu;
  MlpArchitecture arch_sigma;
  ParamVector params_mu;
  ParamVector params_sigma;

  void validate() const {
    arch_mu.validate();
    arch_sigma.validate();
    if (arch_mu.input_dim() != arch_sigma.input_dim())
      throw std::invalid_argument("mean and variance networks must share the input dimension");
    if (arch_mu.output_dim() != 1 || arch_sigma.output_dim() != 1)
      throw std::invalid_argument("mean and variance networks must have scalar output");
  }
};

struct CategoricalModel {
  MlpArchitecture arch;
  ParamVector params;
  std::size_t classes = 2;

  void validate() const {
    arch.validate();
    if (classes < 2 || arch.output_dim() != classes)
      throw std::invalid_argument("categorical network output must equal the class count (>= 2)");
  }
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loss value with the gradient over the concatenated parameter vector.
struct LossGrad {
  double value = 0.0;
  ParamVector grad;
};

/// Column-wise softmax with the max logit subtracted first.
inline Matrix softmax_columns(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const double m = logits.col(j).maxCoeff();
    Vector e = (logits.col(j).array() - m).exp().matrix();
    out.col(j) = e / e.sum();
  }
  return out;
}

inline Vector softmax(const Vector& logits) { return softmax_columns(Matrix(logits)).col(0); }

/// log softmax per column, stable for large logits.
inline Matrix log_softmax_columns(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const double m = logits.col(j).maxCoeff();
    const double lse = m + std::log((logits.col(j).array() - m).exp().sum());
    out.col(j) = logits.col(j).array() - lse;
  }
  return out;
}

inline GaussianPrediction predict_gaussian(const GaussianModel& model, const Vector& x, ForwardMode mode,
                                           Rng* rng = nullptr) {
  model.validate();
  const auto [mu, t1] = forward(model.arch_mu, model.params_mu, x, mode, rng);
  const auto [s, t2] = forward(model.arch_sigma, model.params_sigma, x, mode, rng);
  return {mu[0], s[0]};
}

inline CategoricalPrediction predict_categorical(const CategoricalModel& model, const Vector& x, ForwardMode mode,
                                                 Rng* rng = nullptr) {
  model.validate();
  const auto [logits, trace] = forward(model.arch, model.params, x, mode, rng);
  return {softmax(logits)};
}

struct RegressionLoss {
  double loss = 0.0;
  ParamVector grad_mu;
  ParamVector grad_sigma;
};

/// MAP regression loss on a mini-batch:
///   (1/n) sum_i [(y_i - mu_i)^2 / sigma_i^2 + log sigma_i^2] + (1/N) theta^T theta
/// where theta spans both networks. With the full dataset as the batch this is
/// exactly the full-data objective.
inline RegressionLoss map_loss_regression(const GaussianModel& model, const Matrix& inputs,
                                          std::span<const double> targets, std::size_t dataset_size,
                                          ForwardMode mode = ForwardMode::deterministic, Rng* rng = nullptr) {
  model.validate();
  const auto n = inputs.cols();
  if (n < 1 || static_cast<std::size_t>(n) != targets.size())
    throw std::invalid_argument("regression batch must be non-empty with one target per input");
  if (dataset_size < static_cast<std::size_t>(n)) throw std::invalid_argument("dataset size must be >= batch size");

  const auto [mu, tmu] = forward(model.arch_mu, model.params_mu, inputs, mode, rng);
  const auto [s, ts] = forward(model.arch_sigma, model.params_sigma, inputs, mode, rng);
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_big_n = 1.0 / static_cast<double>(dataset_size);

  Matrix dmu(1, n), ds(1, n);
  double data = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double r = targets[static_cast<std::size_t>(j)] - mu(0, j);
    const double inv_var = std::exp(-s(0, j));
    data += r * r * inv_var + s(0, j);
    dmu(0, j) = -2.0 * r * inv_var * inv_n;
    ds(0, j) = (1.0 - r * r * inv_var) * inv_n;
  }
  const double prior = model.params_mu.squaredNorm() + model.params_sigma.squaredNorm();
  RegressionLoss out;
  out.loss = data * inv_n + prior * inv_big_n;
  if (!std::isfinite(out.loss)) throw NonFiniteError("non-finite regression loss");
  out.grad_mu = backward(model.arch_mu, model.params_mu, tmu, dmu) + 2.0 * inv_big_n * model.params_mu;
  out.grad_sigma = backward(model.arch_sigma, model.params_sigma, ts, ds) + 2.0 * inv_big_n * model.params_sigma;
  return out;
}

/// MAP classification loss on a mini-batch:
///   -(1/n) sum_i log s(x_i)_{label_i} + (1/(2N)) theta^T theta
inline LossGrad map_loss_classification(const CategoricalModel& model, const Matrix& inputs,
                                        std::span<const int> labels, std::size_t dataset_size,
                                        ForwardMode mode = ForwardMode::deterministic, Rng* rng = nullptr) {
  model.validate();
  const auto n = inputs.cols();
  if (n < 1 || static_cast<std::size_t>(n) != labels.size())
    throw std::invalid_argument("classification batch must be non-empty with one label per input");
  if (dataset_size < static_cast<std::size_t>(n)) throw std::invalid_argument("dataset size must be >= batch size");

  const auto [logits, trace] = forward(model.arch, model.params, inputs, mode, rng);
  const Matrix logp = log_softmax_columns(logits);
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_big_n = 1.0 / static_cast<double>(dataset_size);

  Matrix dlogits = logp.array().exp().matrix();
  double data = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const int label = labels[static_cast<std::size_t>(j)];
    if (label < 0 || static_cast<std::size_t>(label) >= model.classes)
      throw std::invalid_argument("label " + std::to_string(label) + " out of range");
    data -= logp(label, j);
    dlogits(label, j) -= 1.0;
  }
  dlogits *= inv_n;
  LossGrad out;
  out.value = data * inv_n + 0.5 * inv_big_n * model.params.squaredNorm();
  if (!std::isfinite(out.value)) throw NonFiniteError("non-finite classification loss");
  out.grad = backward(model.arch, model.params, trace, dlogits) + inv_big_n * model.params;
  return out;
}

/// Standard-normal prior energy theta^T theta / 2 and its gradient.
inline LossGrad prior_energy(const ParamVector& theta) { return {0.5 * theta.squaredNorm(), theta}; }

// ---------------------------------------------------------------------------
// Model families: a fixed architecture plus loss/potential evaluation over one
// flattened parameter vector.

/// Column subset of a dataset used as a mini-batch.
template <typename Target>
struct Batch {
  Matrix inputs;
  std::vector<Target> targets;
};

template <typename Target>
Batch<Target> gather(const Matrix& inputs, const std::vector<Target>& targets, std::span<const std::size_t> idx) {
  Batch<Target> b{Matrix(inputs.rows(), static_cast<Eigen::Index>(idx.size())), {}};
  b.targets.reserve(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    b.inputs.col(static_cast<Eigen::Index>(k)) = inputs.col(static_cast<Eigen::Index>(idx[k]));
    b.targets.push_back(targets[idx[k]]);
  }
  return b;
}

/// Gaussian regression family; theta = [theta_mu; theta_sigma].
class RegressionFamily {
 public:
  using Target = double;
  using Prediction = GaussianPrediction;

  RegressionFamily(MlpArchitecture arch_mu, MlpArchitecture arch_sigma)
      : arch_mu_(std::move(arch_mu)), arch_sigma_(std::move(arch_sigma)) {
    GaussianModel{arch_mu_, arch_sigma_, {}, {}}.validate();
  }

  const MlpArchitecture& arch_mu() const { return arch_mu_; }
  const MlpArchitecture& arch_sigma() const { return arch_sigma_; }
  std::size_t input_dim() const { return arch_mu_.input_dim(); }
  std::size_t param_count() const { return arch_mu_.param_count() + arch_sigma_.param_count(); }
  bool has_dropout() const { return arch_mu_.dropout.has_value() || arch_sigma_.dropout.has_value(); }

  ParamVector init_params(Rng& rng) const {
    ParamVector theta(static_cast<Eigen::Index>(param_count()));
    theta << epibench::init_params(arch_mu_, rng), epibench::init_params(arch_sigma_, rng);
    return theta;
  }

  GaussianModel bind(const ParamVector& theta) const {
    check(theta);
    const auto pm = static_cast<Eigen::Index>(arch_mu_.param_count());
    return {arch_mu_, arch_sigma_, theta.head(pm), theta.tail(theta.size() - pm)};
  }

  ParamVector concat(const ParamVector& a, const ParamVector& b) const {
    ParamVector theta(a.size() + b.size());
    theta << a, b;
    return theta;
  }

  LossGrad map_loss(const ParamVector& theta, const Matrix& inputs, std::span<const double> targets, std::size_t n_total,
                    ForwardMode mode = ForwardMode::deterministic, Rng* rng = nullptr) const {
    const auto r = map_loss_regression(bind(theta), inputs, targets, n_total, mode, rng);
    return {r.loss, concat(r.grad_mu, r.grad_sigma)};
  }

  /// Summed Gaussian negative log-likelihood over the columns and its gradient.
  LossGrad nll_sum(const ParamVector& theta, const Matrix& inputs, std::span<const double> targets) const {
    const auto m = bind(theta);
    const auto n = inputs.cols();
    if (static_cast<std::size_t>(n) != targets.size()) throw std::invalid_argument("one target per input required");
    LossGrad out{0.0, ParamVector::Zero(theta.size())};
    if (n == 0) return out;
    const auto [mu, tmu] = forward(arch_mu_, m.params_mu, inputs, ForwardMode::deterministic);
    const auto [s, ts] = forward(arch_sigma_, m.params_sigma, inputs, ForwardMode::deterministic);
    Matrix dmu(1, n), ds(1, n);
    constexpr double half_log_2pi = 0.91893853320467274178;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double r = targets[static_cast<std::size_t>(j)] - mu(0, j);
      const double inv_var = std::exp(-s(0, j));
      out.value += 0.5 * (r * r * inv_var + s(0, j)) + half_log_2pi;
      dmu(0, j) = -r * inv_var;
      ds(0, j) = 0.5 * (1.0 - r * r * inv_var);
    }
    out.grad = concat(backward(arch_mu_, m.params_mu, tmu, dmu), backward(arch_sigma_, m.params_sigma, ts, ds));
    return out;
  }

  /// Per-column head outputs: row 0 = mu, row 1 = log sigma^2.
  Matrix predict(const ParamVector& theta, const Matrix& inputs, ForwardMode mode = ForwardMode::deterministic,
                 Rng* rng = nullptr) const {
    const auto m = bind(theta);
    Matrix out(2, inputs.cols());
    out.row(0) = forward(arch_mu_, m.params_mu, inputs, mode, rng).first;
    out.row(1) = forward(arch_sigma_, m.params_sigma, inputs, mode, rng).first;
    return out;
  }

 private:
  void check(const ParamVector& theta) const {
    if (static_cast<std::size_t>(theta.size()) != param_count())
      throw std::invalid_argument("parameter vector length does not match regression family");
  }

  MlpArchitecture arch_mu_;
  MlpArchitecture arch_sigma_;
};

/// Categorical classification family.
class ClassificationFamily {
 public:
  using Target = int;
  using Prediction = CategoricalPrediction;

  explicit ClassificationFamily(MlpArchitecture arch) : arch_(std::move(arch)) {
    CategoricalModel{arch_, {}, arch_.output_dim()}.validate();
  }

  const MlpArchitecture& arch() const { return arch_; }
  std::size_t classes() const { return arch_.output_dim(); }
  std::size_t input_dim() const { return arch_.input_dim(); }
  std::size_t param_count() const { return arch_.param_count(); }
  bool has_dropout() const { return arch_.dropout.has_value(); }

  ParamVector init_params(Rng& rng) const { return epibench::init_params(arch_, rng); }

  CategoricalModel bind(const ParamVector& theta) const { return {arch_, theta, classes()}; }

  LossGrad map_loss(const ParamVector& theta, const Matrix& inputs, std::span<const int> labels, std::size_t n_total,
                    ForwardMode mode = ForwardMode::deterministic, Rng* rng = nullptr) const {
    return map_loss_classification(bind(theta), inputs, labels, n_total, mode, rng);
  }

  /// Summed cross-entropy over the columns and its gradient.
  LossGrad nll_sum(const ParamVector& theta, const Matrix& inputs, std::span<const int> labels) const {
    const auto n = inputs.cols();
    if (static_cast<std::size_t>(n) != labels.size()) throw std::invalid_argument("one label per input required");
    LossGrad out{0.0, ParamVector::Zero(theta.size())};
    if (n == 0) return out;
    const auto [logits, trace] = forward(arch_, theta, inputs, ForwardMode::deterministic);
    const Matrix logp = log_softmax_columns(logits);
    Matrix dlogits = logp.array().exp().matrix();
    for (Eigen::Index j = 0; j < n; ++j) {
      const int label = labels[static_cast<std::size_t>(j)];
      if (label < 0 || static_cast<std::size_t>(label) >= classes())
        throw std::invalid_argument("label " + std::to_string(label) + " out of range");
      out.value -= logp(label, j);
      dlogits(label, j) -= 1.0;
    }
    out.grad = backward(arch_, theta, trace, dlogits);
    return out;
  }

  /// Per-column class probabilities (C x n).
  Matrix predict(const ParamVector& theta, const Matrix& inputs, ForwardMode mode = ForwardMode::deterministic,
                 Rng* rng = nullptr) const {
    return softmax_columns(forward(arch_, theta, inputs, mode, rng).first);
  }

 private:
  MlpArchitecture arch_;
};

template <typename F>
concept ModelFamily = requires(const F& f, const ParamVector& theta, const Matrix& x, Rng& rng) {
  typename F::Target;
  typename F::Prediction;
  { f.param_count() } -> std::convertible_to<std::size_t>;
  { f.init_params(rng) } -> std::same_as<ParamVector>;
  { f.predict(theta, x) } -> std::same_as<Matrix>;
  { f.has_dropout() } -> std::convertible_to<bool>;
};

/// Potential energy U(theta) = sum_i NLL(y_i | x_i, theta) + theta^T theta / 2
/// under the N(0, I) prior.
template <ModelFamily F>
LossGrad potential_energy(const F& family, const Matrix& inputs, std::span<const typename F::Target> targets,
                          const ParamVector& theta) {
  LossGrad out = family.nll_sum(theta, inputs, targets);
  out.value += 0.5 * theta.squaredNorm();
  out.grad += theta;
  if (!std::isfinite(out.value)) throw NonFiniteError("non-finite potential energy");
  return out;
}

/// Stochastic potential: likelihood over a mini-batch scaled by N / n plus the
/// full prior term. Unbiased for potential_energy under uniform batches.
template <ModelFamily F>
LossGrad stochastic_potential(const F& family, const Matrix& inputs, std::span<const typename F::Target> targets,
                              std::size_t n_total, const ParamVector& theta) {
  LossGrad out = family.nll_sum(theta, inputs, targets);
  const double scale = static_cast<double>(n_total) / static_cast<double>(inputs.cols());
  out.value = scale * out.value + 0.5 * theta.squaredNorm();
  out.grad = scale * out.grad + theta;
  return out;
}

}  // namespace epibench
