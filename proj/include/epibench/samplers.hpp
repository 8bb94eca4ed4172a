#pragma once

// Approximate posterior inference: HMC reference sampler, SGLD, SGHMC,
// ensembles of MAP estimates and MC-dropout.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "epibench/csv.hpp"
#include "epibench/data.hpp"
#include "epibench/models.hpp"
#include "epibench/optimizers.hpp"
#include "epibench/parallel.hpp"
#include "epibench/rng.hpp"

namespace epibench {

enum class SamplerMethod { hmc, sgld, sghmc, ensembling, mc_dropout };

inline const char* to_string(SamplerMethod m) {
  switch (m) {
    case SamplerMethod::hmc: return "hmc";
    case SamplerMethod::sgld: return "sgld";
    case SamplerMethod::sghmc: return "sghmc";
    case SamplerMethod::ensembling: return "ensembling";
    case SamplerMethod::mc_dropout: return "mc-dropout";
  }
  return "?";
}

inline SamplerMethod method_from_string(const std::string& s) {
  for (auto m : {SamplerMethod::hmc, SamplerMethod::sgld, SamplerMethod::sghmc, SamplerMethod::ensembling,
                 SamplerMethod::mc_dropout})
    if (s == to_string(m)) return m;
  throw std::invalid_argument("unknown method '" + s + "'");
}

class SamplerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// M parameter vectors plus provenance. For the regression family each
/// sample is the concatenation [theta_mu; theta_sigma].
struct PosteriorSampleSet {
  std::vector<ParamVector> samples;
  SamplerMethod method = SamplerMethod::hmc;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;

  std::size_t size() const { return samples.size(); }

  void validate() const {
    if (samples.empty()) throw std::invalid_argument("sample set must hold at least one sample");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].size() != samples.front().size()) throw std::invalid_argument("sample dimensions differ");
      if (!samples[i].allFinite()) throw std::invalid_argument("sample " + std::to_string(i) + " is not finite");
    }
  }
};

// Text format, one record per line:
//   # epibench-samples v1
//   method <name>
//   seed <u64>
//   config <single-line JSON>
//   count <M>
//   dim <P>
//   <P space-separated numbers>      (M lines)
inline void write_samples(std::ostream& out, const PosteriorSampleSet& s) {
  s.validate();
  out << "# epibench-samples v1\n";
  out << "method " << to_string(s.method) << '\n';
  out << "seed " << s.seed << '\n';
  out << "config " << s.config.dump() << '\n';
  out << "count " << s.samples.size() << '\n';
  out << "dim " << s.samples.front().size() << '\n';
  for (const auto& v : s.samples) {
    for (Eigen::Index i = 0; i < v.size(); ++i) out << (i ? " " : "") << csv::format_double(v[i]);
    out << '\n';
  }
}

inline PosteriorSampleSet read_samples(std::istream& in) {
  auto expect = [&](const std::string& key) {
    std::string line;
    if (!std::getline(in, line) || line.rfind(key + " ", 0) != 0)
      throw std::runtime_error("sample file: expected '" + key + "' record");
    return line.substr(key.size() + 1);
  };
  std::string magic;
  std::getline(in, magic);
  if (csv::trim_eol(magic) != "# epibench-samples v1") throw std::runtime_error("sample file: bad magic line");
  PosteriorSampleSet s;
  s.method = method_from_string(std::string(csv::trim_eol(expect("method"))));
  s.seed = std::stoull(expect("seed"));
  s.config = nlohmann::json::parse(expect("config"));
  const auto count = std::stoul(expect("count"));
  const auto dim = std::stol(expect("dim"));
  for (std::size_t k = 0; k < count; ++k) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("sample file: truncated");
    const auto cells = csv::split(csv::trim_eol(line), ' ');
    if (static_cast<long>(cells.size()) != dim) throw std::runtime_error("sample file: wrong record length");
    ParamVector v(dim);
    for (long i = 0; i < dim; ++i) {
      auto x = csv::parse_double(cells[static_cast<std::size_t>(i)]);
      if (!x) throw std::runtime_error("sample file: bad number in record " + std::to_string(k));
      v[i] = *x;
    }
    s.samples.push_back(std::move(v));
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Hamiltonian Monte Carlo with identity mass matrix and a fixed number of
// leapfrog steps. The step size is tuned during warmup by dual averaging
// toward a target acceptance rate, then frozen.

struct HmcConfig {
  std::size_t num_samples = 1000;
  std::size_t warmup_steps = 1000;
  std::size_t leapfrog_steps = 50;
  double step_size = 1e-3;  // initial value when adaptation is on
  double target_accept = 0.8;
  bool adapt_step_size = true;

  void validate() const {
    if (num_samples < 1) throw std::invalid_argument("hmc num_samples must be >= 1");
    if (leapfrog_steps < 1) throw std::invalid_argument("hmc leapfrog_steps must be >= 1");
    if (!(step_size > 0.0)) throw std::invalid_argument("hmc step_size must be > 0");
    if (!(target_accept > 0.0 && target_accept < 1.0)) throw std::invalid_argument("hmc target_accept must be in (0,1)");
  }
};

struct HmcProposal {
  double delta_h;          // H_new - H_old
  double accept_prob;
  bool accepted;
  bool divergent;
  bool warmup;
};

inline constexpr double kDivergenceThreshold = 1e3;

using PotentialFn = std::function<LossGrad(const ParamVector&)>;

/// Plain leapfrog integration; returns the end point and its potential.
/// A trajectory that leaves the finite region stops with an infinite potential.
inline std::pair<ParamVector, LossGrad> leapfrog(const PotentialFn& potential, ParamVector theta, Vector& momentum,
                                                 LossGrad current, double eps, std::size_t steps) {
  momentum -= 0.5 * eps * current.grad;
  for (std::size_t l = 0; l < steps; ++l) {
    theta += eps * momentum;
    try {
      current = potential(theta);
    } catch (const NonFiniteError&) {
      current.value = std::numeric_limits<double>::infinity();
      break;
    }
    if (!std::isfinite(current.value) || !current.grad.allFinite()) break;
    if (l + 1 < steps) momentum -= eps * current.grad;
  }
  momentum -= 0.5 * eps * current.grad;
  return {std::move(theta), std::move(current)};
}

/// Dual-averaging step-size adaptation (Hoffman & Gelman, gamma = 0.05,
/// t0 = 10, kappa = 0.75).
class DualAveraging {
 public:
  DualAveraging(double initial_step, double target) : mu_(std::log(10.0 * initial_step)), target_(target) {}

  double update(double accept_prob) {
    ++m_;
    const double m = static_cast<double>(m_);
    const double w = 1.0 / (m + kT0);
    h_bar_ = (1.0 - w) * h_bar_ + w * (target_ - accept_prob);
    const double log_eps = mu_ - std::sqrt(m) / kGamma * h_bar_;
    const double eta = std::pow(m, -kKappa);
    log_eps_bar_ = eta * log_eps + (1.0 - eta) * log_eps_bar_;
    return std::exp(log_eps);
  }

  double final_step() const { return std::exp(log_eps_bar_); }

 private:
  static constexpr double kGamma = 0.05;
  static constexpr double kT0 = 10.0;
  static constexpr double kKappa = 0.75;
  double mu_;
  double target_;
  double h_bar_ = 0.0;
  double log_eps_bar_ = 0.0;
  long m_ = 0;
};

inline PosteriorSampleSet hmc_run(const PotentialFn& potential, const ParamVector& init, const HmcConfig& config,
                                  Rng& rng, std::vector<HmcProposal>* log = nullptr) {
  config.validate();
  PosteriorSampleSet out;
  out.method = SamplerMethod::hmc;
  out.seed = rng.seed();

  ParamVector theta = init;
  LossGrad current = potential(theta);
  if (!std::isfinite(current.value)) throw SamplerError("hmc: non-finite potential at the initial point");

  DualAveraging adapt(config.step_size, config.target_accept);
  double eps = config.step_size;
  std::size_t accepted = 0, divergent = 0;
  const std::size_t total = config.warmup_steps + config.num_samples;
  out.samples.reserve(config.num_samples);

  for (std::size_t it = 0; it < total; ++it) {
    const bool warmup = it < config.warmup_steps;
    Vector momentum(theta.size());
    for (Eigen::Index i = 0; i < momentum.size(); ++i) momentum[i] = rng.normal();
    const double h_old = current.value + 0.5 * momentum.squaredNorm();

    auto [proposal, proposal_u] = leapfrog(potential, theta, momentum, current, eps, config.leapfrog_steps);
    const double h_new = proposal_u.value + 0.5 * momentum.squaredNorm();
    double delta = h_new - h_old;
    const bool is_divergent = !std::isfinite(delta) || std::abs(delta) > kDivergenceThreshold ||
                              !proposal.allFinite() || !proposal_u.grad.allFinite();
    double accept_prob = 0.0;
    if (!is_divergent) accept_prob = delta <= 0.0 ? 1.0 : std::exp(-delta);
    if (!std::isfinite(delta)) delta = std::numeric_limits<double>::infinity();

    const bool accept = !is_divergent && rng.uniform() < accept_prob;
    if (accept) {
      theta = std::move(proposal);
      current = std::move(proposal_u);
    }
    if (log) log->push_back({delta, accept_prob, accept, is_divergent, warmup});
    if (is_divergent) ++divergent;

    if (warmup) {
      if (config.adapt_step_size) {
        eps = adapt.update(accept_prob);
        if (it + 1 == config.warmup_steps) eps = adapt.final_step();
      }
    } else {
      if (accept) ++accepted;
      out.samples.push_back(theta);
    }
  }

  out.config = {{"num_samples", config.num_samples},
                {"warmup_steps", config.warmup_steps},
                {"leapfrog_steps", config.leapfrog_steps},
                {"initial_step_size", config.step_size},
                {"target_accept", config.target_accept},
                {"adapted_step_size", eps},
                {"accept_rate", static_cast<double>(accepted) / static_cast<double>(config.num_samples)},
                {"divergences", divergent}};
  return out;
}

// ---------------------------------------------------------------------------
// Stochastic-gradient MCMC.

struct SgMcmcConfig {
  double alpha0 = 0.01;
  std::size_t total_steps = 1000;  // T
  std::size_t batch_size = 32;
  std::size_t num_samples = 1;     // M, used when extract_at is empty
  double eta = 0.1;                // SGHMC friction
  double decay_exponent = 0.9;
  std::vector<std::size_t> extract_at;  // explicit extraction steps (overrides M)
  bool inject_noise = true;             // test hook: false drops the Gaussian noise term

  void validate(bool needs_eta) const {
    if (!(alpha0 > 0.0)) throw std::invalid_argument("alpha0 must be > 0");
    if (total_steps < 1 || num_samples < 1 || total_steps < num_samples)
      throw std::invalid_argument("need T >= M >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (needs_eta && !(eta > 0.0 && eta <= 1.0)) throw std::invalid_argument("eta must be in (0, 1]");
  }
};

/// alpha_t = alpha0 (1 - t/T)^decay
inline double sgmcmc_stepsize(double alpha0, std::size_t t, std::size_t total, double decay = 0.9) {
  const double frac = 1.0 - static_cast<double>(t) / static_cast<double>(total);
  return alpha0 * std::pow(std::max(frac, 0.0), decay);
}

/// M step indices from int(0.75 T) to T, evenly spread and rounded.
inline std::vector<std::size_t> extraction_schedule(std::size_t total, std::size_t m) {
  if (m < 1) throw std::invalid_argument("extraction schedule needs M >= 1");
  if (total < 2) throw std::invalid_argument("extraction schedule needs T >= 2");
  const std::size_t first = static_cast<std::size_t>(0.75 * static_cast<double>(total));
  if (m == 1) return {total};
  if (m > total - first + 1)
    throw std::invalid_argument("M = " + std::to_string(m) + " too large for distinct steps in [" +
                                std::to_string(first) + ", " + std::to_string(total) + "]");
  std::vector<std::size_t> out(m);
  const double span = static_cast<double>(total - first);
  for (std::size_t k = 0; k < m; ++k)
    out[k] = first + static_cast<std::size_t>(std::llround(span * static_cast<double>(k) / static_cast<double>(m - 1)));
  for (std::size_t k = 1; k < m; ++k)
    if (out[k] <= out[k - 1]) throw std::invalid_argument("extraction schedule indices not distinct");
  return out;
}

/// theta <- theta - alpha g + sqrt(2 alpha) noise
inline void sgld_step(ParamVector& theta, const ParamVector& grad, double alpha, const Vector& noise) {
  theta -= alpha * grad;
  theta += std::sqrt(2.0 * alpha) * noise;
}

/// theta <- theta + r;  r <- (1 - eta) r - alpha g + sqrt(2 eta alpha) noise
/// with g evaluated at the pre-update theta.
inline void sghmc_step(ParamVector& theta, Vector& r, const ParamVector& grad, double alpha, double eta,
                       const Vector& noise) {
  theta += r;
  r = (1.0 - eta) * r - alpha * grad + std::sqrt(2.0 * eta * alpha) * noise;
}

/// Stochastic gradient of U at theta; may draw a mini-batch from rng.
using StochasticGradFn = std::function<ParamVector(const ParamVector&, Rng&)>;

namespace detail {

inline Vector noise_vector(Eigen::Index n, Rng& rng, bool enabled) {
  Vector v = Vector::Zero(n);
  if (enabled)
    for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

inline std::vector<std::size_t> resolved_schedule(const SgMcmcConfig& c) {
  if (c.extract_at.empty()) return extraction_schedule(c.total_steps, c.num_samples);
  auto s = c.extract_at;
  std::sort(s.begin(), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  if (s.front() < 1 || s.back() > c.total_steps) throw std::invalid_argument("extraction steps must lie in [1, T]");
  return s;
}

template <bool Hamiltonian>
PosteriorSampleSet sgmcmc_run(const StochasticGradFn& grad_fn, const ParamVector& init, const SgMcmcConfig& config,
                              Rng& rng) {
  config.validate(Hamiltonian);
  const auto schedule = resolved_schedule(config);
  PosteriorSampleSet out;
  out.method = Hamiltonian ? SamplerMethod::sghmc : SamplerMethod::sgld;
  out.seed = rng.seed();
  out.config = {{"alpha0", config.alpha0},
                {"T", config.total_steps},
                {"batch_size", config.batch_size},
                {"decay_exponent", config.decay_exponent},
                {"extract_at", schedule}};
  if (Hamiltonian) out.config["eta"] = config.eta;

  ParamVector theta = init;
  Vector r = Vector::Zero(theta.size());
  std::size_t next = 0;
  for (std::size_t t = 1; t <= config.total_steps && next < schedule.size(); ++t) {
    const double alpha = sgmcmc_stepsize(config.alpha0, t, config.total_steps, config.decay_exponent);
    const ParamVector g = grad_fn(theta, rng);
    const Vector noise = noise_vector(theta.size(), rng, config.inject_noise);
    if constexpr (Hamiltonian)
      sghmc_step(theta, r, g, alpha, config.eta, noise);
    else
      sgld_step(theta, g, alpha, noise);
    if (!theta.allFinite())
      throw SamplerError(std::string(to_string(out.method)) + ": non-finite parameters at step " + std::to_string(t) +
                         " (alpha_t = " + std::to_string(alpha) + ", |grad| = " + std::to_string(g.norm()) +
                         ", seed " + std::to_string(out.seed) + ")");
    if (t == schedule[next]) {
      out.samples.push_back(theta);
      ++next;
    }
  }
  return out;
}

}  // namespace detail

inline PosteriorSampleSet sgld_run(const StochasticGradFn& grad_fn, const ParamVector& init,
                                   const SgMcmcConfig& config, Rng& rng) {
  return detail::sgmcmc_run<false>(grad_fn, init, config, rng);
}

inline PosteriorSampleSet sghmc_run(const StochasticGradFn& grad_fn, const ParamVector& init,
                                    const SgMcmcConfig& config, Rng& rng) {
  return detail::sgmcmc_run<true>(grad_fn, init, config, rng);
}

/// Shuffled passes over [0, n) served in chunks of batch_size; the last chunk
/// of a pass may be shorter.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size) : order_(n), batch_(batch_size), pos_(n) {
    if (n == 0 || batch_size == 0) throw std::invalid_argument("batch sampler needs n >= 1 and batch_size >= 1");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  std::span<const std::size_t> next(Rng& rng) {
    if (pos_ >= order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng.engine());
      pos_ = 0;
    }
    const std::size_t len = std::min(batch_, order_.size() - pos_);
    std::span<const std::size_t> out(order_.data() + pos_, len);
    pos_ += len;
    return out;
  }

  std::size_t batches_per_epoch() const { return (order_.size() + batch_ - 1) / batch_; }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_;
};

/// Mini-batch gradient of U for a model family: likelihood scaled by N / n.
template <ModelFamily F>
StochasticGradFn minibatch_gradient(const F& family, const Dataset& data, std::size_t batch_size) {
  using T = typename F::Target;
  auto sampler = std::make_shared<BatchSampler>(data.size(), batch_size);
  return [&family, &data, sampler](const ParamVector& theta, Rng& rng) {
    const auto b = gather(data.inputs, targets_of<T>(data), sampler->next(rng));
    return stochastic_potential(family, b.inputs, std::span<const T>(b.targets), data.size(), theta).grad;
  };
}

template <ModelFamily F>
PosteriorSampleSet sgld_run(const F& family, const Dataset& data, const SgMcmcConfig& config, Rng& rng) {
  const ParamVector init = family.init_params(rng);
  return sgld_run(minibatch_gradient(family, data, config.batch_size), init, config, rng);
}

template <ModelFamily F>
PosteriorSampleSet sghmc_run(const F& family, const Dataset& data, const SgMcmcConfig& config, Rng& rng) {
  const ParamVector init = family.init_params(rng);
  return sghmc_run(minibatch_gradient(family, data, config.batch_size), init, config, rng);
}

// ---------------------------------------------------------------------------
// MAP training, ensembles and MC-dropout.

struct TrainConfig {
  OptimizerConfig optimizer;
  double lr = 1e-3;
  std::size_t epochs = 150;
  std::size_t batch_size = 32;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"optimizer", to_string(c.optimizer.kind)}, {"lr", c.lr}, {"epochs", c.epochs}, {"batch_size", c.batch_size}};
}

/// Full-data MAP loss in deterministic mode.
template <ModelFamily F>
double full_map_loss(const F& family, const Dataset& data, const ParamVector& theta) {
  using T = typename F::Target;
  return family.map_loss(theta, data.inputs, std::span<const T>(targets_of<T>(data)), data.size()).value;
}

/// Minimizes the MAP loss over `epochs` shuffled passes. Dropout (if the
/// architecture has it) is active in train mode.
template <ModelFamily F>
ParamVector train_map(const F& family, const Dataset& data, const TrainConfig& config, Rng& rng,
                      std::optional<ParamVector> init = std::nullopt) {
  using T = typename F::Target;
  if (data.size() == 0) throw std::invalid_argument("train_map: empty dataset");
  ParamVector theta = init ? *init : family.init_params(rng);
  OptimizerState state(config.optimizer, theta.size());
  BatchSampler batches(data.size(), config.batch_size);
  const auto& targets = targets_of<T>(data);
  const std::size_t per_epoch = batches.batches_per_epoch();
  for (std::size_t e = 0; e < config.epochs; ++e) {
    for (std::size_t k = 0; k < per_epoch; ++k) {
      const auto b = gather(data.inputs, targets, batches.next(rng));
      LossGrad lg;
      try {
        lg = family.map_loss(theta, b.inputs, std::span<const T>(b.targets), data.size(), ForwardMode::train, &rng);
      } catch (const NonFiniteError& err) {
        throw SamplerError(std::string("train_map: ") + err.what() + " at epoch " + std::to_string(e) + ", batch " +
                           std::to_string(k) + " (seed " + std::to_string(rng.seed()) + ")");
      }
      step(state, theta, lg.grad, config.lr);
    }
  }
  return theta;
}

struct EnsembleConfig {
  std::size_t members = 1;  // M
  TrainConfig train;
};

/// Seed of ensemble member m under master seed `seed`.
inline std::uint64_t ensemble_member_seed(std::uint64_t seed, std::size_t member) {
  return derive_seed(seed, {label_hash("ensemble-member"), member});
}

/// M independent MAP runs, each from its own random initialization.
template <ModelFamily F>
PosteriorSampleSet train_ensemble(const F& family, const Dataset& data, const EnsembleConfig& config,
                                  std::uint64_t seed, std::size_t jobs = 1) {
  if (config.members < 1) throw std::invalid_argument("ensemble needs M >= 1");
  PosteriorSampleSet out;
  out.method = SamplerMethod::ensembling;
  out.seed = seed;
  out.samples.resize(config.members);
  parallel_for(config.members, jobs, [&](std::size_t m) {
    Rng rng(ensemble_member_seed(seed, m));
    out.samples[m] = train_map(family, data, config.train, rng);
  });
  out.config = to_json(config.train);
  out.config["members"] = config.members;
  return out;
}

struct McDropoutConfig {
  TrainConfig train{OptimizerConfig{}, 1e-3, 300, 32};
  std::size_t passes = 1;  // M stochastic forward passes at prediction time
};

/// M stochastic forward passes over the inputs. Element m is the family's head
/// output matrix (heads x n) for pass m; every pass and column draws an
/// independent mask.
template <ModelFamily F>
std::vector<Matrix> mc_dropout_posterior(const F& family, const ParamVector& theta, const Matrix& inputs,
                                         std::size_t passes, Rng& rng) {
  if (!family.has_dropout()) throw std::invalid_argument("mc-dropout requires an architecture with dropout");
  if (passes < 1) throw std::invalid_argument("mc-dropout needs M >= 1");
  std::vector<Matrix> out;
  out.reserve(passes);
  for (std::size_t m = 0; m < passes; ++m) out.push_back(family.predict(theta, inputs, ForwardMode::mc_dropout, &rng));
  return out;
}

}  // namespace epibench
