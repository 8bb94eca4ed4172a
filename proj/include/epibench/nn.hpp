#pragma once

// Small dense feed-forward networks with hand-written reverse-mode
// differentiation. Inputs are batched column-wise: a d x n matrix holds n
// samples of dimension d.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "epibench/rng.hpp"

namespace epibench {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Flattened network parameters. Layer l contributes its weight matrix
/// (fan_out x fan_in, column-major) followed by its bias vector.
using ParamVector = Eigen::VectorXd;

enum class Activation { relu, tanh };

inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

struct DropoutSpec {
  std::size_t hidden_layer = 0;  // applied to the output of this hidden layer (0-based)
  double p = 0.0;                // drop probability in [0, 1)
};

struct MlpArchitecture {
  std::vector<std::size_t> layer_sizes;
  Activation activation = Activation::relu;
  std::optional<DropoutSpec> dropout;

  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t output_dim() const { return layer_sizes.back(); }
  std::size_t num_layers() const { return layer_sizes.size() - 1; }  // affine maps
  std::size_t num_hidden() const { return layer_sizes.size() - 2; }

  std::size_t param_count() const {
    std::size_t total = 0;
    for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) total += (layer_sizes[l] + 1) * layer_sizes[l + 1];
    return total;
  }

  void validate() const {
    if (layer_sizes.size() < 2) throw std::invalid_argument("architecture needs at least input and output layers");
    for (auto s : layer_sizes)
      if (s == 0) throw std::invalid_argument("architecture layer sizes must be >= 1");
    if (dropout) {
      if (dropout->hidden_layer >= num_hidden())
        throw std::invalid_argument("dropout layer index does not address a hidden layer");
      if (!(dropout->p >= 0.0 && dropout->p < 1.0)) throw std::invalid_argument("dropout probability must be in [0, 1)");
    }
  }
};

/// `train` and `mc_dropout` both sample fresh inverted-dropout masks; they are
/// kept distinct so call sites say which regime they are in.
enum class ForwardMode { deterministic, train, mc_dropout };

struct ForwardTrace {
  std::vector<Matrix> pre;  // pre-activations, one per affine map
  std::vector<Matrix> act;  // act[0] = input; act[l+1] = output of map l (after nonlinearity/dropout)
  std::optional<Matrix> mask;  // scaled keep-mask applied to hidden layer `mask_layer`
  std::size_t mask_layer = 0;
};

namespace detail {

struct LayerView {
  Eigen::Map<const Matrix> w;
  Eigen::Map<const Vector> b;
};

inline LayerView layer(const MlpArchitecture& arch, const ParamVector& params, std::size_t l, std::size_t& offset) {
  const auto in = static_cast<Eigen::Index>(arch.layer_sizes[l]);
  const auto out = static_cast<Eigen::Index>(arch.layer_sizes[l + 1]);
  LayerView v{Eigen::Map<const Matrix>(params.data() + offset, out, in),
              Eigen::Map<const Vector>(params.data() + offset + out * in, out)};
  offset += static_cast<std::size_t>(out * (in + 1));
  return v;
}

inline void check_params(const MlpArchitecture& arch, const ParamVector& params) {
  if (static_cast<std::size_t>(params.size()) != arch.param_count())
    throw std::invalid_argument("parameter vector length " + std::to_string(params.size()) +
                                " does not match architecture (" + std::to_string(arch.param_count()) + ")");
}

}  // namespace detail

/// Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer.
inline ParamVector init_params(const MlpArchitecture& arch, Rng& rng) {
  arch.validate();
  ParamVector params(static_cast<Eigen::Index>(arch.param_count()));
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(arch.layer_sizes[l]));
    const std::size_t count = (arch.layer_sizes[l] + 1) * arch.layer_sizes[l + 1];
    for (std::size_t i = 0; i < count; ++i) params[k++] = rng.uniform(-bound, bound);
  }
  return params;
}

/// Batched forward pass. `rng` is required when the mode samples dropout
/// masks and the architecture carries a dropout spec.
inline std::pair<Matrix, ForwardTrace> forward(const MlpArchitecture& arch, const ParamVector& params,
                                               const Matrix& inputs, ForwardMode mode, Rng* rng = nullptr) {
  detail::check_params(arch, params);
  if (static_cast<std::size_t>(inputs.rows()) != arch.input_dim())
    throw std::invalid_argument("input dimension " + std::to_string(inputs.rows()) + " does not match architecture (" +
                                std::to_string(arch.input_dim()) + ")");
  const bool sample_masks = mode != ForwardMode::deterministic && arch.dropout.has_value();
  if (sample_masks && rng == nullptr) throw std::invalid_argument("dropout forward mode requires a random stream");

  ForwardTrace trace;
  trace.pre.reserve(arch.num_layers());
  trace.act.reserve(arch.num_layers() + 1);
  trace.act.push_back(inputs);

  std::size_t offset = 0;
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    const auto lv = detail::layer(arch, params, l, offset);
    Matrix z = lv.w * trace.act.back();
    z.colwise() += lv.b;
    trace.pre.push_back(z);
    if (l + 1 == arch.num_layers()) {
      trace.act.push_back(std::move(z));
      break;
    }
    Matrix a = arch.activation == Activation::relu ? Matrix(z.cwiseMax(0.0)) : Matrix(z.array().tanh().matrix());
    if (sample_masks && arch.dropout->hidden_layer == l) {
      const double keep = 1.0 - arch.dropout->p;
      Matrix mask(a.rows(), a.cols());
      for (Eigen::Index j = 0; j < mask.cols(); ++j)
        for (Eigen::Index i = 0; i < mask.rows(); ++i) mask(i, j) = rng->bernoulli(keep) ? 1.0 / keep : 0.0;
      a = a.cwiseProduct(mask);
      trace.mask = std::move(mask);
      trace.mask_layer = l;
    }
    trace.act.push_back(std::move(a));
  }
  return {trace.act.back(), std::move(trace)};
}

inline std::pair<Vector, ForwardTrace> forward(const MlpArchitecture& arch, const ParamVector& params, const Vector& x,
                                               ForwardMode mode, Rng* rng = nullptr) {
  auto [out, trace] = forward(arch, params, Matrix(x), mode, rng);
  return {Vector(out.col(0)), std::move(trace)};
}

/// Gradient of sum_j <output_grad.col(j), output.col(j)> with respect to the
/// parameters, reusing the masks recorded in the trace.
inline ParamVector backward(const MlpArchitecture& arch, const ParamVector& params, const ForwardTrace& trace,
                            const Matrix& output_grad) {
  detail::check_params(arch, params);
  if (trace.pre.size() != arch.num_layers() || trace.act.size() != arch.num_layers() + 1)
    throw std::invalid_argument("forward trace does not match architecture");
  if (static_cast<std::size_t>(output_grad.rows()) != arch.output_dim() || output_grad.cols() != trace.act[0].cols())
    throw std::invalid_argument("output gradient shape does not match forward trace");

  std::vector<std::size_t> offsets(arch.num_layers());
  std::size_t offset = 0;
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    offsets[l] = offset;
    offset += (arch.layer_sizes[l] + 1) * arch.layer_sizes[l + 1];
  }

  ParamVector grad = ParamVector::Zero(params.size());
  Matrix delta = output_grad;  // d/d(pre-activation of the current layer)
  for (std::size_t l = arch.num_layers(); l-- > 0;) {
    const auto in = static_cast<Eigen::Index>(arch.layer_sizes[l]);
    const auto out = static_cast<Eigen::Index>(arch.layer_sizes[l + 1]);
    const auto off = static_cast<Eigen::Index>(offsets[l]);
    Eigen::Map<Matrix>(grad.data() + off, out, in).noalias() = delta * trace.act[l].transpose();
    grad.segment(off + out * in, out) = delta.rowwise().sum();
    if (l == 0) break;

    Eigen::Map<const Matrix> w(params.data() + off, out, in);
    Matrix upstream = w.transpose() * delta;  // d/d(act[l])
    const std::size_t hidden = l - 1;
    if (trace.mask && trace.mask_layer == hidden) upstream = upstream.cwiseProduct(*trace.mask);
    const Matrix& z = trace.pre[hidden];
    if (arch.activation == Activation::relu)
      delta = upstream.cwiseProduct((z.array() > 0.0).cast<double>().matrix());
    else
      delta = upstream.cwiseProduct((1.0 - z.array().tanh().square()).matrix());
  }
  return grad;
}

/// Central-difference gradient estimate of `loss` at `params`.
inline ParamVector finite_diff_grad(const std::function<double(const ParamVector&)>& loss, const ParamVector& params,
                                    double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
  ParamVector grad(params.size());
  ParamVector probe = params;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    probe[i] = params[i] + h;
    const double up = loss(probe);
    probe[i] = params[i] - h;
    const double down = loss(probe);
    probe[i] = params[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

/// Worst coordinate-wise relative error, with magnitudes below `floor`
/// treated as absolute.
inline double max_relative_error(const ParamVector& a, const ParamVector& b, double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace epibench
