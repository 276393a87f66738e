#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "sifg/types.hpp"

/// Dense networks with hand-written forward and reverse passes.
///
/// Batches are d x B matrices (one sample per column). Every batched routine
/// splits the batch into fixed-size chunks, evaluates chunks independently
/// (possibly in parallel) and sums chunk gradients in chunk order, so results
/// do not depend on the number of worker threads.
namespace sifg::nn {

inline constexpr Eigen::Index kChunkSize = 128;

enum class ActivationKind { tanh, leaky_relu };

struct Activation {
  ActivationKind kind = ActivationKind::tanh;
  double slope = 0.01;  // leaky_relu only

  static Activation make_tanh() { return {ActivationKind::tanh, 0.0}; }
  static Activation make_leaky_relu(double slope) { return {ActivationKind::leaky_relu, slope}; }

  Matrix value(const Matrix& a) const;
  /// First derivative. leaky_relu uses the positive branch at exactly 0.
  Matrix derivative(const Matrix& a) const;
  Matrix second_derivative(const Matrix& a) const;
};

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

/// Parameters of a network, or anything shaped like them (gradients,
/// optimizer accumulators).
struct ParamStore {
  std::vector<DenseLayer> layers;

  std::size_t parameter_count() const;
  ParamStore zeros_like() const;
  void set_zero();
  bool all_finite() const;
  /// Flat view in layer order, weights (column-major) then bias per layer.
  Vector flatten() const;
  void assign_flat(const Vector& flat);
  ParamStore& operator+=(const ParamStore& other);
};

/// Fully connected network f: R^d -> R^d with a linear output layer.
struct ScoreNet {
  ParamStore params;
  Activation activation;

  std::vector<int> layer_dims() const;
  int input_dim() const;
  int output_dim() const;
  std::size_t parameter_count() const { return params.parameter_count(); }
};

/// Throws ConfigError unless dims has >= 2 entries, all positive, with
/// first == last.
void validate_layer_dims(std::span<const int> layer_dims);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
ScoreNet net_init(std::span<const int> layer_dims, Activation activation, std::uint64_t seed);

Vector net_forward(const ScoreNet& net, const Vector& x);
Matrix net_forward_batch(const ScoreNet& net, const Matrix& x);

/// Per-sample divergence (trace of the input Jacobian) of a batch.
Vector net_divergence(const ScoreNet& net, const Matrix& x);

/// Sign of the regression target in denoising score matching.
/// `derivation`: f(x) ~ -(x - z)/sigma^2 (the score of the Gaussian kernel).
/// `literal`: f(x) ~ +(x - z)/sigma^2.
enum class DsmSign { derivation, literal };

struct LossAndGrad {
  double loss = 0.0;
  ParamStore grads;
};

/// Mean over the batch of ||f(x_i) + s (x_i - z_i)/sigma^2||^2 with s = +1
/// for DsmSign::derivation, and its exact parameter gradient.
LossAndGrad dsm_loss_and_grad(const ScoreNet& net, const Matrix& x, const Matrix& z, double sigma,
                              DsmSign sign = DsmSign::derivation);

/// Empirical quadratic-regularized functional gradient objective
///   mean_i [ -<s_i, v(x_i)> - div v(x_i) + 0.5 ||v(x_i)||^2 ]
/// with s_i the target score at x_i, and its exact parameter gradient. The
/// divergence is exact (one tangent per input coordinate).
LossAndGrad stein_loss_and_grad(const ScoreNet& net, const Matrix& x, const Matrix& target_score);

enum class OptimizerKind { sgd, sgd_momentum, adam };

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::sgd;
  double momentum = 0.9;
  bool nesterov = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct OptimizerState {
  OptimizerSpec spec;
  ParamStore first;   // momentum buffer / Adam first moment
  ParamStore second;  // Adam second moment
  std::uint64_t step_count = 0;
};

OptimizerState optimizer_init(const OptimizerSpec& spec, const ScoreNet& net);

/// In-place update; throws UsageError on shape mismatch and NumericalError if
/// any parameter becomes non-finite.
void apply_optimizer_step(ScoreNet& net, const ParamStore& grads, OptimizerState& state, double lr);

/// Value-semantics wrapper around apply_optimizer_step.
std::pair<ScoreNet, OptimizerState> optimizer_step(ScoreNet net, const ParamStore& grads,
                                                   OptimizerState state, double lr);

}  // namespace sifg::nn
