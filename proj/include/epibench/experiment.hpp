#pragma once

// Declarative experiment runner: one task, an HMC reference predictive, and
// for each method / M / repeat the mean KL of the method's predictive to the
// reference over the evaluation grid.
//
// Output directory layout:
//   report.csv        task,method,M,metric,mean,std,repeats
//   runs.csv          task,method,M,repeat,seed,kl
//   dataset.csv       training data
//   reference_<task>_seed<seed>.csv/.json   cached HMC predictive and its provenance
//   curves/*.csv      predictive curves
//   manifest.json     resolved config, per-run seeds, artifacts, timings

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"

#include "epibench/csv.hpp"
#include "epibench/data.hpp"
#include "epibench/metrics.hpp"
#include "epibench/models.hpp"
#include "epibench/parallel.hpp"
#include "epibench/predictive.hpp"
#include "epibench/samplers.hpp"

namespace epibench {

enum class Task { regression, classification };

inline const char* to_string(Task t) { return t == Task::regression ? "toy-regression" : "toy-classification"; }

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& field, const std::string& msg)
      : std::invalid_argument("config field '" + field + "': " + msg), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct MethodSettings {
  SamplerMethod method = SamplerMethod::ensembling;
  std::size_t repeats = 1;  // pool size for ensembling
  TrainConfig train;        // ensembling and mc-dropout
  double dropout_p = 0.2;   // mc-dropout
  double alpha0 = 0.01;     // SG-MCMC initial step on the per-datapoint potential U / N
  double eta = 0.1;         // SGHMC
  std::size_t batch_size = 32;
  double epochs = 256.0 * 150.0;  // SG-MCMC trajectory length before scale_factor
};

struct ReferenceSettings {
  HmcConfig hmc;
  TrainConfig init{OptimizerConfig{}, 1e-3, 150, 32};  // MAP run used as the chain's starting point
};

struct ExperimentConfig {
  int schema_version = 1;
  Task task = Task::regression;
  std::uint64_t seed = 0;
  std::vector<std::size_t> m_values{8, 16, 32, 64};
  double scale_factor = 64.0;
  std::size_t grid_resolution = 1000;
  std::size_t dataset_size = 1000;  // points (regression) or points per class (classification)
  std::vector<std::size_t> hidden{10, 10};
  Activation activation = Activation::relu;
  ReferenceSettings reference;
  std::vector<MethodSettings> methods;
  std::string curves = "first";  // first | all | none
};

inline MethodSettings default_method(Task task, SamplerMethod m) {
  const bool reg = task == Task::regression;
  MethodSettings s;
  s.method = m;
  switch (m) {
    case SamplerMethod::ensembling:
      s.repeats = 64;
      s.train = {OptimizerConfig{}, 1e-3, 150, 32};
      break;
    case SamplerMethod::mc_dropout:
      s.repeats = 5;
      s.train = {OptimizerConfig{}, 1e-3, 300, 32};
      s.dropout_p = reg ? 0.2 : 0.1;
      break;
    case SamplerMethod::sgld:
      s.repeats = 6;
      s.alpha0 = reg ? 0.01 : 0.05;
      break;
    case SamplerMethod::sghmc:
      s.repeats = 6;
      s.alpha0 = reg ? 0.001 : 0.01;
      s.eta = 0.1;
      break;
    case SamplerMethod::hmc:
      throw ConfigError("methods", "hmc is the reference, not a compared method");
  }
  return s;
}

inline ExperimentConfig default_config(Task task) {
  ExperimentConfig c;
  c.task = task;
  c.grid_resolution = task == Task::regression ? 1000 : 200;
  c.dataset_size = task == Task::regression ? 1000 : 520;
  // Unbounded ReLU features let the log-variance head grow linearly outside
  // the training range of the regression task.
  c.activation = task == Task::regression ? Activation::tanh : Activation::relu;
  for (auto m : {SamplerMethod::ensembling, SamplerMethod::mc_dropout, SamplerMethod::sgld, SamplerMethod::sghmc})
    c.methods.push_back(default_method(task, m));
  return c;
}

/// Number of SG-MCMC steps: epochs * ceil(N / batch) / scale_factor (>= 2).
inline std::size_t sgmcmc_total_steps(const ExperimentConfig& c, const MethodSettings& m, std::size_t n_train) {
  const double batches = std::ceil(static_cast<double>(n_train) / static_cast<double>(m.batch_size));
  return std::max<std::size_t>(2, static_cast<std::size_t>(std::llround(m.epochs * batches / c.scale_factor)));
}

inline std::size_t training_set_size(const ExperimentConfig& c) {
  return c.task == Task::regression ? c.dataset_size : 2 * c.dataset_size;
}

inline void validate(const ExperimentConfig& c) {
  if (c.schema_version != 1) throw ConfigError("schema_version", "only version 1 is supported");
  if (c.m_values.empty()) throw ConfigError("M_values", "must not be empty");
  for (std::size_t i = 0; i < c.m_values.size(); ++i) {
    if (c.m_values[i] < 1) throw ConfigError("M_values", "entries must be >= 1");
    if (i > 0 && c.m_values[i] <= c.m_values[i - 1]) throw ConfigError("M_values", "must be sorted strictly ascending");
  }
  if (!(c.scale_factor >= 1.0)) throw ConfigError("scale_factor", "must be >= 1");
  if (c.grid_resolution < 2) throw ConfigError("grid_resolution", "must be >= 2");
  if (c.dataset_size < 1) throw ConfigError("dataset_size", "must be >= 1");
  if (c.curves != "first" && c.curves != "all" && c.curves != "none")
    throw ConfigError("curves", "must be one of first, all, none");
  try {
    c.reference.hmc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("reference", e.what());
  }
  if (c.methods.empty()) throw ConfigError("methods", "must list at least one method");
  std::set<SamplerMethod> seen;
  const std::size_t m_max = c.m_values.back();
  for (const auto& m : c.methods) {
    const std::string name = std::string("methods.") + to_string(m.method);
    if (!seen.insert(m.method).second) throw ConfigError(name, "listed twice");
    if (m.repeats < 1) throw ConfigError(name + ".repeats", "must be >= 1");
    if (m.method == SamplerMethod::ensembling && m_max > m.repeats)
      throw ConfigError(name + ".pool_size", "M = " + std::to_string(m_max) + " exceeds the trained model pool (" +
                                                 std::to_string(m.repeats) + "); need pool_size >= max(M_values)");
    if (m.method == SamplerMethod::ensembling || m.method == SamplerMethod::mc_dropout) {
      if (m.train.epochs < 1) throw ConfigError(name + ".epochs", "must be >= 1");
      if (m.train.batch_size < 1) throw ConfigError(name + ".batch_size", "must be >= 1");
      if (!(m.train.lr > 0.0)) throw ConfigError(name + ".lr", "must be > 0");
    }
    if (m.method == SamplerMethod::mc_dropout && !(m.dropout_p > 0.0 && m.dropout_p < 1.0))
      throw ConfigError(name + ".p", "must be in (0, 1)");
    if (m.method == SamplerMethod::sgld || m.method == SamplerMethod::sghmc) {
      if (!(m.alpha0 > 0.0)) throw ConfigError(name + ".alpha0", "must be > 0");
      if (m.batch_size < 1) throw ConfigError(name + ".batch_size", "must be >= 1");
      if (!(m.epochs > 0.0)) throw ConfigError(name + ".epochs", "must be > 0");
      if (m.method == SamplerMethod::sghmc && !(m.eta > 0.0 && m.eta <= 1.0))
        throw ConfigError(name + ".eta", "must be in (0, 1]");
      const std::size_t t = sgmcmc_total_steps(c, m, training_set_size(c));
      const std::size_t room = t - static_cast<std::size_t>(0.75 * static_cast<double>(t)) + 1;
      if (m_max > room)
        throw ConfigError(name + ".epochs", "trajectory of " + std::to_string(t) + " steps cannot yield M = " +
                                                std::to_string(m_max) + " distinct samples");
    }
  }
}

namespace detail {

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& path) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(path + key, "has the wrong type");
  }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& path) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (auto k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError(path + it.key(), "unknown field");
  }
}

inline void read_train(const nlohmann::json& j, TrainConfig& t, const std::string& path) {
  std::string opt = to_string(t.optimizer.kind);
  read_field(j, "optimizer", opt, path);
  try {
    t.optimizer.kind = optimizer_from_string(opt);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path + "optimizer", e.what());
  }
  read_field(j, "lr", t.lr, path);
  read_field(j, "epochs", t.epochs, path);
  read_field(j, "batch_size", t.batch_size, path);
  read_field(j, "momentum", t.optimizer.momentum, path);
}

}  // namespace detail

/// Parses a version-1 config document; absent fields take task defaults.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  detail::reject_unknown(j, {"schema_version", "task", "seed", "M_values", "scale_factor", "grid_resolution",
                             "dataset_size", "hidden", "activation", "reference", "methods", "curves"},
                         "");
  if (!j.contains("task")) throw ConfigError("task", "is required");
  std::string task;
  detail::read_field(j, "task", task, "");
  if (task != "toy-regression" && task != "toy-classification")
    throw ConfigError("task", "must be toy-regression or toy-classification");
  ExperimentConfig c = default_config(task == "toy-regression" ? Task::regression : Task::classification);
  detail::read_field(j, "schema_version", c.schema_version, "");
  detail::read_field(j, "seed", c.seed, "");
  detail::read_field(j, "M_values", c.m_values, "");
  detail::read_field(j, "scale_factor", c.scale_factor, "");
  detail::read_field(j, "grid_resolution", c.grid_resolution, "");
  detail::read_field(j, "dataset_size", c.dataset_size, "");
  detail::read_field(j, "hidden", c.hidden, "");
  detail::read_field(j, "curves", c.curves, "");
  if (j.contains("activation")) {
    std::string a;
    detail::read_field(j, "activation", a, "");
    try {
      c.activation = activation_from_string(a);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("activation", e.what());
    }
  }
  if (j.contains("reference")) {
    const auto& r = j.at("reference");
    if (!r.is_object()) throw ConfigError("reference", "must be an object");
    detail::reject_unknown(r, {"num_samples", "warmup_steps", "leapfrog_steps", "step_size", "target_accept",
                               "init_epochs", "init_lr", "init_batch_size"},
                           "reference.");
    auto& h = c.reference.hmc;
    detail::read_field(r, "num_samples", h.num_samples, "reference.");
    detail::read_field(r, "warmup_steps", h.warmup_steps, "reference.");
    detail::read_field(r, "leapfrog_steps", h.leapfrog_steps, "reference.");
    detail::read_field(r, "step_size", h.step_size, "reference.");
    detail::read_field(r, "target_accept", h.target_accept, "reference.");
    detail::read_field(r, "init_epochs", c.reference.init.epochs, "reference.");
    detail::read_field(r, "init_lr", c.reference.init.lr, "reference.");
    detail::read_field(r, "init_batch_size", c.reference.init.batch_size, "reference.");
  }
  if (j.contains("methods")) {
    const auto& ms = j.at("methods");
    if (!ms.is_array()) throw ConfigError("methods", "must be an array");
    c.methods.clear();
    for (const auto& mj : ms) {
      if (!mj.is_object() || !mj.contains("name")) throw ConfigError("methods", "each entry needs a 'name'");
      std::string name;
      detail::read_field(mj, "name", name, "methods.");
      SamplerMethod kind;
      try {
        kind = method_from_string(name);
      } catch (const std::invalid_argument&) {
        throw ConfigError("methods.name", "unknown method '" + name + "'");
      }
      MethodSettings m = default_method(c.task, kind);
      const std::string path = "methods." + name + ".";
      switch (kind) {
        case SamplerMethod::ensembling:
          detail::reject_unknown(mj, {"name", "pool_size", "optimizer", "lr", "epochs", "batch_size", "momentum"}, path);
          detail::read_field(mj, "pool_size", m.repeats, path);
          detail::read_train(mj, m.train, path);
          break;
        case SamplerMethod::mc_dropout:
          detail::reject_unknown(mj, {"name", "repeats", "optimizer", "lr", "epochs", "batch_size", "momentum", "p"},
                                 path);
          detail::read_field(mj, "repeats", m.repeats, path);
          detail::read_field(mj, "p", m.dropout_p, path);
          detail::read_train(mj, m.train, path);
          break;
        default:
          detail::reject_unknown(mj, {"name", "repeats", "alpha0", "eta", "batch_size", "epochs"}, path);
          detail::read_field(mj, "repeats", m.repeats, path);
          detail::read_field(mj, "alpha0", m.alpha0, path);
          detail::read_field(mj, "eta", m.eta, path);
          detail::read_field(mj, "batch_size", m.batch_size, path);
          detail::read_field(mj, "epochs", m.epochs, path);
          break;
      }
      c.methods.push_back(m);
    }
  }
  validate(c);
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& m : c.methods) {
    nlohmann::json mj{{"name", to_string(m.method)}};
    switch (m.method) {
      case SamplerMethod::ensembling:
        mj["pool_size"] = m.repeats;
        mj.update(epibench::to_json(m.train));
        break;
      case SamplerMethod::mc_dropout:
        mj["repeats"] = m.repeats;
        mj["p"] = m.dropout_p;
        mj.update(epibench::to_json(m.train));
        break;
      default:
        mj["repeats"] = m.repeats;
        mj["alpha0"] = m.alpha0;
        if (m.method == SamplerMethod::sghmc) mj["eta"] = m.eta;
        mj["batch_size"] = m.batch_size;
        mj["epochs"] = m.epochs;
        break;
    }
    methods.push_back(mj);
  }
  const auto& h = c.reference.hmc;
  return {{"schema_version", c.schema_version},
          {"task", to_string(c.task)},
          {"seed", c.seed},
          {"M_values", c.m_values},
          {"scale_factor", c.scale_factor},
          {"grid_resolution", c.grid_resolution},
          {"dataset_size", c.dataset_size},
          {"hidden", c.hidden},
          {"activation", to_string(c.activation)},
          {"reference",
           {{"num_samples", h.num_samples},
            {"warmup_steps", h.warmup_steps},
            {"leapfrog_steps", h.leapfrog_steps},
            {"step_size", h.step_size},
            {"target_accept", h.target_accept},
            {"init_epochs", c.reference.init.epochs},
            {"init_lr", c.reference.init.lr},
            {"init_batch_size", c.reference.init.batch_size}}},
          {"methods", methods},
          {"curves", c.curves}};
}

/// Full-size protocol: 1024-model ensemble pool, 10 MC-dropout models,
/// 6 SG-MCMC chains, full-length trajectories.
inline void apply_full_scale(ExperimentConfig& c) {
  c.scale_factor = 1.0;
  for (auto& m : c.methods) {
    if (m.method == SamplerMethod::ensembling) m.repeats = 1024;
    if (m.method == SamplerMethod::mc_dropout) m.repeats = 10;
    if (m.method == SamplerMethod::sgld || m.method == SamplerMethod::sghmc) m.repeats = 6;
  }
}

// ---------------------------------------------------------------------------
// Ensemble subset protocol

/// Shuffles the pool and cuts it into `draws` disjoint sets of size M
/// (draws defaults to floor(K / M)).
inline std::vector<std::vector<std::size_t>> ensemble_partition(std::size_t pool, std::size_t m, Rng& rng,
                                                                std::optional<std::size_t> draws = std::nullopt) {
  if (m < 1 || pool < m)
    throw std::invalid_argument("ensemble pool of " + std::to_string(pool) + " models is too small for M = " +
                                std::to_string(m));
  const std::size_t max_draws = pool / m;
  const std::size_t count = draws.value_or(max_draws);
  if (count < 1 || count > max_draws)
    throw std::invalid_argument("requested " + std::to_string(count) + " disjoint sets but the pool holds at most " +
                                std::to_string(max_draws));
  std::vector<std::size_t> order(pool);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<std::vector<std::size_t>> sets(count);
  for (std::size_t s = 0; s < count; ++s) sets[s].assign(order.begin() + s * m, order.begin() + (s + 1) * m);
  return sets;
}

/// Evaluates `metric` on each disjoint M-subset of the pool.
inline std::vector<double> ensemble_subset_aggregation(
    std::size_t pool, std::size_t m, Rng& rng, const std::function<double(std::span<const std::size_t>)>& metric,
    std::optional<std::size_t> draws = std::nullopt) {
  std::vector<double> values;
  for (const auto& set : ensemble_partition(pool, m, rng, draws)) values.push_back(metric(set));
  return values;
}

// ---------------------------------------------------------------------------
// Runner

struct RunRecord {
  SamplerMethod method = SamplerMethod::ensembling;
  std::size_t m = 1;
  std::size_t repeat = 0;
  std::uint64_t seed = 0;                   // chain / training seed
  std::vector<std::uint64_t> member_seeds;  // ensembling only
  double kl = 0.0;
  std::string curve_file;
};

struct ReportRow {
  SamplerMethod method;
  std::size_t m;
  RepeatStats stats;
};

struct ExperimentResult {
  std::vector<ReportRow> rows;
  std::vector<RunRecord> runs;
  nlohmann::json manifest;

  const ReportRow* find(SamplerMethod method, std::size_t m) const {
    for (const auto& r : rows)
      if (r.method == method && r.m == m) return &r;
    return nullptr;
  }
};

inline std::uint64_t stream_seed(std::uint64_t master, std::string_view label, std::uint64_t index = 0) {
  return derive_seed(master, {label_hash(label), index});
}

namespace detail {

inline MlpArchitecture task_architecture(const ExperimentConfig& c, std::size_t in, std::size_t out,
                                         std::optional<double> dropout) {
  MlpArchitecture a;
  a.layer_sizes.push_back(in);
  for (auto h : c.hidden) a.layer_sizes.push_back(h);
  a.layer_sizes.push_back(out);
  a.activation = c.activation;
  if (dropout) a.dropout = DropoutSpec{0, *dropout};
  return a;
}

inline RegressionFamily make_family(const ExperimentConfig& c, std::optional<double> dropout, RegressionFamily*) {
  const auto a = task_architecture(c, 1, 1, dropout);
  return RegressionFamily(a, a);
}

inline ClassificationFamily make_family(const ExperimentConfig& c, std::optional<double> dropout,
                                        ClassificationFamily*) {
  return ClassificationFamily(task_architecture(c, 2, 2, dropout));
}

template <typename P>
std::vector<P> load_reference_csv(const std::string& path, std::size_t expected_rows);

template <>
inline std::vector<PredictiveGaussian> load_reference_csv(const std::string& path, std::size_t expected_rows) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  std::vector<PredictiveGaussian> out;
  while (std::getline(in, line)) {
    const auto cells = csv::split(csv::trim_eol(line));
    if (cells.size() != 3) throw std::runtime_error("malformed reference cache " + path);
    out.push_back({*csv::parse_double(cells[1]), *csv::parse_double(cells[2])});
  }
  if (out.size() != expected_rows) throw std::runtime_error("reference cache " + path + " has the wrong size");
  return out;
}

template <>
inline std::vector<PredictiveCategorical> load_reference_csv(const std::string& path, std::size_t expected_rows) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  std::vector<PredictiveCategorical> out;
  while (std::getline(in, line)) {
    const auto cells = csv::split(csv::trim_eol(line));
    if (cells.size() < 4) throw std::runtime_error("malformed reference cache " + path);
    Vector p(static_cast<Eigen::Index>(cells.size() - 2));
    for (std::size_t k = 2; k < cells.size(); ++k) p[static_cast<Eigen::Index>(k - 2)] = *csv::parse_double(cells[k]);
    out.push_back({p});
  }
  if (out.size() != expected_rows) throw std::runtime_error("reference cache " + path + " has the wrong size");
  return out;
}

template <ModelFamily F>
class TaskRunner {
 public:
  using Pred = PredictiveOf<F>;
  using Target = typename F::Target;

  TaskRunner(const ExperimentConfig& config, std::filesystem::path out_dir, std::size_t jobs, std::ostream* log)
      : config_(config),
        out_dir_(std::move(out_dir)),
        jobs_(jobs),
        log_(log),
        family_(make_family(config, std::nullopt, static_cast<F*>(nullptr))) {
    Rng rng(stream_seed(config_.seed, "data"));
    data_ = config_.task == Task::regression ? gen_toy_regression(config_.dataset_size, rng)
                                              : gen_toy_classification(config_.dataset_size, rng);
    grid_ = config_.task == Task::regression ? regression_grid(config_.grid_resolution)
                                             : classification_grid(config_.grid_resolution);
  }

  const Dataset& dataset() const { return data_; }
  const Matrix& grid() const { return grid_; }
  const F& family() const { return family_; }

  std::string reference_stem() const {
    return std::string("reference_") + to_string(config_.task) + "_seed" + std::to_string(config_.seed);
  }

  nlohmann::json reference_key() const {
    auto j = to_json(config_);
    return {{"task", j["task"]},           {"seed", j["seed"]},
            {"dataset_size", j["dataset_size"]}, {"grid_resolution", j["grid_resolution"]},
            {"hidden", j["hidden"]},       {"activation", j["activation"]},
            {"reference", j["reference"]}, {"format", 1}};
  }

  /// HMC reference predictive on the grid, loaded from the cache when its
  /// provenance matches.
  const std::vector<Pred>& reference() {
    if (reference_) return *reference_;
    const auto csv_path = out_dir_ / (reference_stem() + ".csv");
    const auto meta_path = out_dir_ / (reference_stem() + ".json");
    if (std::filesystem::exists(csv_path) && std::filesystem::exists(meta_path)) {
      std::ifstream in(meta_path);
      const auto meta = nlohmann::json::parse(in, nullptr, false);
      if (!meta.is_discarded() && meta.contains("key") && meta["key"] == reference_key()) {
        reference_ = load_reference_csv<Pred>(csv_path.string(), static_cast<std::size_t>(grid_.cols()));
        reference_meta_ = meta;
        reference_meta_["cached"] = true;
        note("reference: loaded cached " + csv_path.filename().string());
        return *reference_;
      }
    }
    note("reference: running HMC");
    const auto t0 = std::chrono::steady_clock::now();
    Rng init_rng(stream_seed(config_.seed, "hmc-init"));
    const ParamVector init = train_map(family_, data_, config_.reference.init, init_rng);
    const auto& targets = targets_of<Target>(data_);
    PotentialFn potential = [&](const ParamVector& theta) {
      return potential_energy(family_, data_.inputs, std::span<const Target>(targets), theta);
    };
    Rng rng(stream_seed(config_.seed, "hmc"));
    const auto samples = hmc_run(potential, init, config_.reference.hmc, rng);
    reference_ = posterior_predict(family_, samples, grid_);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    reference_meta_ = {{"key", reference_key()}, {"hmc", samples.config}, {"seed", rng.seed()}, {"seconds", secs}};
    save_predictive_csv(csv_path.string(), grid_, *reference_);
    std::ofstream(meta_path) << reference_meta_.dump(2) << '\n';
    reference_meta_["cached"] = false;
    note("reference: done in " + std::to_string(secs) + " s, accept rate " +
         std::to_string(samples.config["accept_rate"].get<double>()));
    return *reference_;
  }

  const nlohmann::json& reference_meta() const { return reference_meta_; }

  std::vector<RunRecord> run_all(nlohmann::json& timings) {
    reference();
    std::vector<std::function<void()>> work;
    std::vector<std::vector<RunRecord>> per_method(config_.methods.size());

    // Ensemble pools are trained as independent work items; subsets are
    // evaluated afterwards.
    std::vector<std::vector<Matrix>> pools(config_.methods.size());
    std::vector<std::vector<std::uint64_t>> pool_seeds(config_.methods.size());
    std::vector<std::vector<std::vector<RunRecord>>> repeat_records(config_.methods.size());

    for (std::size_t mi = 0; mi < config_.methods.size(); ++mi) {
      const auto& ms = config_.methods[mi];
      if (ms.method == SamplerMethod::ensembling) {
        pools[mi].resize(ms.repeats);
        for (std::size_t k = 0; k < ms.repeats; ++k) {
          pool_seeds[mi].push_back(ensemble_member_seed(stream_seed(config_.seed, "ensembling"), k));
          work.push_back([this, mi, k, &ms, &pools, &pool_seeds] {
            with_seed(ms.method, pool_seeds[mi][k], [&] { pools[mi][k] = ensemble_member_outputs(ms, pool_seeds[mi][k]); });
          });
        }
      } else {
        repeat_records[mi].resize(ms.repeats);
        for (std::size_t r = 0; r < ms.repeats; ++r)
          work.push_back([this, mi, r, &ms, &repeat_records] {
            with_seed(ms.method, stream_seed(config_.seed, to_string(ms.method), r),
                      [&] { repeat_records[mi][r] = run_repeat(ms, r); });
          });
      }
    }

    const auto t0 = std::chrono::steady_clock::now();
    note("running " + std::to_string(work.size()) + " work items on " + std::to_string(jobs_) + " job(s)");
    parallel_for(work.size(), jobs_, [&](std::size_t i) { work[i](); });
    timings["methods_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::vector<RunRecord> runs;
    for (std::size_t mi = 0; mi < config_.methods.size(); ++mi) {
      const auto& ms = config_.methods[mi];
      if (ms.method == SamplerMethod::ensembling) {
        for (auto m : config_.m_values) {
          Rng prng(stream_seed(config_.seed, "ensembling-partition", m));
          const auto sets = ensemble_partition(ms.repeats, m, prng);
          for (std::size_t r = 0; r < sets.size(); ++r) {
            RunRecord rec{ms.method, m, r, 0, {}, 0.0, {}};
            for (auto k : sets[r]) rec.member_seeds.push_back(pool_seeds[mi][k]);
            const auto pred = aggregate<F>(pools[mi], sets[r]);
            rec.kl = mean_kl_to_reference(pred, *reference_);
            rec.curve_file = maybe_write_curve(ms.method, m, r, pred);
            runs.push_back(std::move(rec));
          }
        }
      } else {
        for (std::size_t mv = 0; mv < config_.m_values.size(); ++mv)
          for (auto& rr : repeat_records[mi]) runs.push_back(rr[mv]);
      }
    }
    return runs;
  }

  /// Recomputes one run's KL from its recorded seeds alone.
  double reproduce(const RunRecord& rec) {
    reference();
    const MethodSettings& ms = settings(rec.method);
    if (rec.method == SamplerMethod::ensembling) {
      std::vector<Matrix> outputs;
      for (auto s : rec.member_seeds) outputs.push_back(ensemble_member_outputs(ms, s));
      return mean_kl_to_reference(aggregate<F>(outputs, all_indices(outputs.size())), *reference_);
    }
    if (rec.method == SamplerMethod::mc_dropout) {
      const auto fam = make_family(config_, ms.dropout_p, static_cast<F*>(nullptr));
      Rng rng(rec.seed);
      const ParamVector theta = train_map(fam, data_, ms.train, rng);
      Rng prng(stream_seed(rec.seed, "predict", rec.m));
      return mean_kl_to_reference(posterior_predict_mc_dropout(fam, theta, grid_, rec.m, prng), *reference_);
    }
    const auto set = run_chain(ms, rec.seed, extraction_schedule(chain_length(ms), rec.m));
    return mean_kl_to_reference(posterior_predict(family_, set, grid_), *reference_);
  }

 private:
  void note(const std::string& msg) const {
    if (log_) *log_ << "[" << to_string(config_.task) << "] " << msg << '\n' << std::flush;
  }

  /// Re-raises failures of a work item with its seed attached.
  template <typename Fn>
  static void with_seed(SamplerMethod method, std::uint64_t seed, Fn&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string(to_string(method)) + " run with seed " + std::to_string(seed) +
                               " failed: " + e.what());
    }
  }

  const MethodSettings& settings(SamplerMethod m) const {
    for (const auto& s : config_.methods)
      if (s.method == m) return s;
    throw std::invalid_argument(std::string("method not configured: ") + to_string(m));
  }

  Matrix ensemble_member_outputs(const MethodSettings& ms, std::uint64_t seed) const {
    Rng rng(seed);
    const ParamVector theta = train_map(family_, data_, ms.train, rng);
    return family_.predict(theta, grid_);
  }

  std::size_t chain_length(const MethodSettings& ms) const { return sgmcmc_total_steps(config_, ms, data_.size()); }

  PosteriorSampleSet run_chain(const MethodSettings& ms, std::uint64_t seed, std::vector<std::size_t> extract) const {
    SgMcmcConfig sc;
    sc.alpha0 = ms.alpha0 / static_cast<double>(data_.size());
    sc.total_steps = chain_length(ms);
    sc.batch_size = ms.batch_size;
    sc.eta = ms.eta;
    sc.num_samples = extract.size();
    sc.extract_at = std::move(extract);
    Rng rng(seed);
    return ms.method == SamplerMethod::sgld ? sgld_run(family_, data_, sc, rng) : sghmc_run(family_, data_, sc, rng);
  }

  /// One repeat of a non-ensemble method, evaluated at every M.
  std::vector<RunRecord> run_repeat(const MethodSettings& ms, std::size_t r) {
    const std::uint64_t seed = stream_seed(config_.seed, to_string(ms.method), r);
    std::vector<RunRecord> out;
    if (ms.method == SamplerMethod::mc_dropout) {
      const auto fam = make_family(config_, ms.dropout_p, static_cast<F*>(nullptr));
      Rng rng(seed);
      const ParamVector theta = train_map(fam, data_, ms.train, rng);
      for (auto m : config_.m_values) {
        Rng prng(stream_seed(seed, "predict", m));
        const auto pred = posterior_predict_mc_dropout(fam, theta, grid_, m, prng);
        out.push_back({ms.method, m, r, seed, {}, mean_kl_to_reference(pred, *reference_),
                       maybe_write_curve(ms.method, m, r, pred)});
      }
      return out;
    }
    const std::size_t total = chain_length(ms);
    std::vector<std::size_t> all_steps;
    for (auto m : config_.m_values) {
      const auto s = extraction_schedule(total, m);
      all_steps.insert(all_steps.end(), s.begin(), s.end());
    }
    std::sort(all_steps.begin(), all_steps.end());
    all_steps.erase(std::unique(all_steps.begin(), all_steps.end()), all_steps.end());
    const auto set = run_chain(ms, seed, all_steps);
    const auto outputs = sample_outputs(family_, set, grid_);
    for (auto m : config_.m_values) {
      std::vector<std::size_t> subset;
      for (auto step : extraction_schedule(total, m))
        subset.push_back(static_cast<std::size_t>(std::lower_bound(all_steps.begin(), all_steps.end(), step) -
                                                  all_steps.begin()));
      const auto pred = aggregate<F>(outputs, subset);
      out.push_back({ms.method, m, r, seed, {}, mean_kl_to_reference(pred, *reference_),
                     maybe_write_curve(ms.method, m, r, pred)});
    }
    return out;
  }

  std::string maybe_write_curve(SamplerMethod method, std::size_t m, std::size_t r, const std::vector<Pred>& pred) const {
    if (config_.curves == "none" || (config_.curves == "first" && r != 0)) return {};
    std::string name = std::string("curves/") + to_string(method) + "_M" + std::to_string(m);
    if (config_.curves == "all") name += "_r" + std::to_string(r);
    name += ".csv";
    save_predictive_csv((out_dir_ / name).string(), grid_, pred);
    return name;
  }

  ExperimentConfig config_;
  std::filesystem::path out_dir_;
  std::size_t jobs_;
  std::ostream* log_;
  F family_;
  Dataset data_;
  Matrix grid_;
  std::optional<std::vector<Pred>> reference_;
  nlohmann::json reference_meta_;
};

}  // namespace detail

inline void write_report_csv(std::ostream& out, Task task, const std::vector<ReportRow>& rows) {
  out << "task,method,M,metric,mean,std,repeats\n";
  for (const auto& r : rows)
    out << to_string(task) << ',' << to_string(r.method) << ',' << r.m << ",kl," << csv::format_double(r.stats.mean)
        << ',' << csv::format_double(r.stats.std) << ',' << r.stats.repeats << '\n';
}

inline void write_runs_csv(std::ostream& out, Task task, const std::vector<RunRecord>& runs) {
  out << "task,method,M,repeat,seed,kl\n";
  for (const auto& r : runs)
    out << to_string(task) << ',' << to_string(r.method) << ',' << r.m << ',' << r.repeat << ',' << r.seed << ','
        << csv::format_double(r.kl) << '\n';
}

/// Groups run records into report rows, in config method order then M.
inline std::vector<ReportRow> summarize(const ExperimentConfig& c, const std::vector<RunRecord>& runs) {
  std::vector<ReportRow> rows;
  for (const auto& ms : c.methods)
    for (auto m : c.m_values) {
      std::vector<double> values;
      for (const auto& r : runs)
        if (r.method == ms.method && r.m == m) values.push_back(r.kl);
      rows.push_back({ms.method, m, aggregate_repeats(values)});
    }
  return rows;
}

class ExperimentRunner {
 public:
  ExperimentRunner(ExperimentConfig config, std::filesystem::path out_dir, std::size_t jobs = 1,
                   std::ostream* log = nullptr)
      : config_(std::move(config)), out_dir_(std::move(out_dir)) {
    validate(config_);
    std::filesystem::create_directories(out_dir_ / "curves");
    if (config_.task == Task::regression)
      impl_.template emplace<detail::TaskRunner<RegressionFamily>>(config_, out_dir_, jobs, log);
    else
      impl_.template emplace<detail::TaskRunner<ClassificationFamily>>(config_, out_dir_, jobs, log);
  }

  const ExperimentConfig& config() const { return config_; }

  ExperimentResult run() {
    ExperimentResult result;
    nlohmann::json timings = nlohmann::json::object();
    const auto t0 = std::chrono::steady_clock::now();
    std::visit(
        [&](auto& r) {
          if constexpr (!std::is_same_v<std::decay_t<decltype(r)>, std::monostate>) {
            save_dataset_csv(r.dataset(), (out_dir_ / "dataset.csv").string());
            const auto tr = std::chrono::steady_clock::now();
            r.reference();
            timings["reference_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - tr).count();
            result.runs = r.run_all(timings);
            result.manifest["reference"] = r.reference_meta();
            result.manifest["reference"]["file"] = r.reference_stem() + ".csv";
            result.manifest["dataset"] = {{"file", "dataset.csv"}, {"seed", r.dataset().seed},
                                          {"generator", r.dataset().generator}, {"size", r.dataset().size()}};
          }
        },
        impl_);
    result.rows = summarize(config_, result.runs);

    std::ofstream(out_dir_ / "report.csv") << [&] {
      std::ostringstream s;
      write_report_csv(s, config_.task, result.rows);
      return s.str();
    }();
    std::ofstream(out_dir_ / "runs.csv") << [&] {
      std::ostringstream s;
      write_runs_csv(s, config_.task, result.runs);
      return s.str();
    }();

    timings["total_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    auto& man = result.manifest;
    man["schema_version"] = 1;
    man["config"] = to_json(config_);
    man["runs"] = nlohmann::json::array();
    std::set<std::string> artifacts{"report.csv", "runs.csv", "dataset.csv", "manifest.json"};
    const auto ref_stem = man["reference"]["file"].get<std::string>().substr(0, man["reference"]["file"].get<std::string>().size() - 4);
    artifacts.insert(ref_stem + ".csv");
    artifacts.insert(ref_stem + ".json");
    for (const auto& r : result.runs) {
      nlohmann::json rj{{"method", to_string(r.method)}, {"M", r.m}, {"repeat", r.repeat}, {"kl", r.kl}};
      if (r.method == SamplerMethod::ensembling)
        rj["member_seeds"] = r.member_seeds;
      else
        rj["seed"] = r.seed;
      if (!r.curve_file.empty()) {
        rj["curve"] = r.curve_file;
        artifacts.insert(r.curve_file);
      }
      man["runs"].push_back(rj);
    }
    man["artifacts"] = artifacts;
    man["timings"] = timings;
    std::ofstream(out_dir_ / "manifest.json") << man.dump(2) << '\n';
    return result;
  }

  /// Recomputes the KL of a single recorded run from its seeds.
  double reproduce(const RunRecord& rec) {
    return std::visit(
        [&](auto& r) -> double {
          if constexpr (std::is_same_v<std::decay_t<decltype(r)>, std::monostate>)
            return 0.0;
          else
            return r.reproduce(rec);
        },
        impl_);
  }

 private:
  ExperimentConfig config_;
  std::filesystem::path out_dir_;
  std::variant<std::monostate, detail::TaskRunner<RegressionFamily>, detail::TaskRunner<ClassificationFamily>> impl_;
};

}  // namespace epibench
