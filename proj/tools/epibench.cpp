// epibench command-line interface: run | metrics | gradcheck
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "epibench/csv.hpp"
#include "epibench/data.hpp"
#include "epibench/experiment.hpp"
#include "epibench/gradcheck.hpp"
#include "epibench/metrics.hpp"

namespace fs = std::filesystem;
using namespace epibench;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int cmd_run(const std::string& config_path, const std::string& out_dir, std::size_t jobs, bool full_scale) {
  std::ifstream in(config_path);
  if (!in) throw ValidationError("cannot open config " + config_path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig config;
  try {
    config = parse_config(doc);
    if (full_scale) {
      apply_full_scale(config);
      validate(config);
    }
  } catch (const ConfigError& e) {
    throw ValidationError(e.what());
  }

  ExperimentRunner runner(config, out_dir, jobs == 0 ? 1 : jobs, &std::cerr);
  const auto result = runner.run();
  write_report_csv(std::cout, config.task, result.rows);
  std::cout.flush();
  std::cerr << "wrote " << (fs::path(out_dir) / "report.csv").string() << '\n';
  return kOk;
}

void print_metric(std::ostream& out, const std::string& name, double value) {
  out << name << ',' << csv::format_double(value) << '\n';
}

int cmd_metrics(const std::string& fixture_path, bool want_ause, bool want_auce, std::optional<std::size_t> ece_bins,
                bool want_rmse, std::string out_dir) {
  PredictionFixture f;
  try {
    f = load_fixture(fixture_path);
  } catch (const FixtureError& e) {
    throw ValidationError(fixture_path + ": " + e.what());
  }
  if (f.size() < 2) throw ValidationError(fixture_path + ": need at least 2 records");
  const bool reg = f.kind == PredictionFixture::Kind::regression;
  if (!want_ause && !want_auce && !ece_bins && !want_rmse) {
    want_ause = true;
    if (reg) {
      want_auce = want_rmse = true;
    } else {
      ece_bins = 10;
    }
  }
  if (reg && ece_bins) throw ValidationError("--ece applies to classification fixtures only");
  if (!reg && (want_auce || want_rmse)) throw ValidationError("--auce and --rmse apply to regression fixtures only");
  if (ece_bins && *ece_bins < 1) throw ValidationError("--ece needs at least one bin");

  if (out_dir.empty()) out_dir = (fs::path(fixture_path).parent_path() / (fs::path(fixture_path).stem().string() + "_metrics")).string();
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);

  std::ostringstream table;
  table << "metric,value\n";
  if (reg) {
    std::vector<double> mu, target, residual, sigma2;
    std::vector<PredictiveGaussian> pred;
    for (const auto& r : f.regression) {
      mu.push_back(r.mu);
      target.push_back(r.target);
      residual.push_back(r.target - r.mu);
      sigma2.push_back(r.sigma2);
      pred.push_back({r.mu, r.sigma2});
    }
    if (want_rmse) print_metric(table, "rmse", rmse(mu, target));
    if (want_ause) {
      const auto res = ause(residual, sigma2, SparsificationAggregate::rmse);
      print_metric(table, "ause_rmse", res.value);
      save_sparsification_csv((dir / "sparsification.csv").string(), res.curve);
    }
    if (want_auce) {
      const auto res = auce(pred, target);
      print_metric(table, "auce", res.value);
      save_calibration_csv((dir / "calibration.csv").string(), res.curve);
    }
  } else {
    std::vector<double> brier, entropy;
    std::vector<PredictiveCategorical> pred;
    std::vector<int> labels;
    for (const auto& r : f.classification) {
      Vector p = Eigen::Map<const Vector>(r.probs.data(), static_cast<Eigen::Index>(r.probs.size()));
      const auto be = brier_and_entropy(p, r.label);
      brier.push_back(be.brier);
      entropy.push_back(be.entropy);
      pred.push_back({p});
      labels.push_back(r.label);
    }
    if (want_ause) {
      const auto res = ause(brier, entropy, SparsificationAggregate::brier_mean);
      print_metric(table, "ause_brier", res.value);
      save_sparsification_csv((dir / "sparsification.csv").string(), res.curve);
    }
    if (ece_bins) {
      const auto res = ece(pred, labels, *ece_bins);
      print_metric(table, "ece", res.value);
      save_reliability_csv((dir / "reliability.csv").string(), res.bins);
    }
  }
  std::cout << table.str();
  std::ofstream(dir / "metrics.csv") << table.str();
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed, bool flip) {
  GradcheckOptions opt;
  opt.seed = seed;
  opt.flip_sign = flip;
  const auto report = run_gradcheck(opt);
  print_gradcheck(std::cout, report);
  return report.passed() ? kOk : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Epistemic uncertainty benchmark: HMC-referenced comparison of approximate posteriors"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out";
  std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  bool full_scale = false;
  auto* run = app.add_subcommand("run", "Run an experiment config and write report.csv, curves and a manifest");
  run->add_option("config", config_path, "Experiment config (JSON, schema_version 1)")->required();
  run->add_option("--out", out_dir, "Output directory")->capture_default_str();
  run->add_option("--jobs", jobs, "Parallel work items")->capture_default_str();
  run->add_flag("--paper-scale", full_scale, "Use full-size pools, repeats and trajectories");

  std::string fixture, metrics_out;
  bool m_ause = false, m_auce = false, m_rmse = false;
  std::optional<std::size_t> m_ece;
  auto* metrics = app.add_subcommand("metrics", "Compute uncertainty metrics on a prediction fixture CSV");
  metrics->add_option("fixture", fixture, "Fixture CSV (mu,sigma2,target or p_0..p_{C-1},label)")->required();
  metrics->add_flag("--ause", m_ause, "Area under the sparsification error curve");
  metrics->add_flag("--auce", m_auce, "Area under the calibration error curve (regression)");
  metrics->add_option("--ece", m_ece, "Expected calibration error with L bins (classification)");
  metrics->add_flag("--rmse", m_rmse, "Root mean squared error (regression)");
  metrics->add_option("--out", metrics_out, "Directory for metrics.csv and curve CSVs");

  std::uint64_t seed = 0;
  bool flip = false;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of all analytic gradients");
  grad->add_option("--seed", seed, "Seed for the random instances")->capture_default_str();
  grad->add_flag("--inject-sign-flip", flip, "Negate analytic gradients (negative control)")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (*run) return cmd_run(config_path, out_dir, jobs, full_scale);
    if (*metrics) return cmd_metrics(fixture, m_ause, m_auce, m_ece, m_rmse, metrics_out);
    if (*grad) return cmd_gradcheck(seed, flip);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << '\n';
    return kRuntime;
  }
  return kValidation;
}
