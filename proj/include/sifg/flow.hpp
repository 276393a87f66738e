#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sifg/nn.hpp"
#include "sifg/targets.hpp"
#include "sifg/types.hpp"

namespace sifg::flow {

struct ParticleEnsemble {
  Matrix particles;  // d x n

  Eigen::Index dim() const { return particles.rows(); }
  Eigen::Index count() const { return particles.cols(); }
};

enum class Method { sifg, adasifg, svgd, l2gf };

std::string to_string(Method m);
Method method_from_string(const std::string& name);

/// How SIFG obtains the score of the smoothed particle distribution.
enum class ScoreMode {
  network,          // DSM-trained ScoreNet
  gaussian_oracle,  // closed form, treating the ensemble as N(mean, var I)
};

/// How L2-GF moves particles along the learned velocity.
enum class ParticleUpdate {
  euler,  // z += h v
  adam,   // per-coordinate Adam on -v, with h as the learning rate
};

struct NetSpec {
  std::vector<int> hidden{32, 32};
  nn::Activation activation = nn::Activation::make_tanh();
};

struct SamplerConfig {
  Method method = Method::sifg;
  double h = 0.0;              // particle step size
  double eta = 0.0;            // network learning rate
  double eta_sigma = 0.0;      // sigma learning rate (Ada-SIFG)
  std::uint64_t outer_iterations = 0;
  std::uint64_t inner_iterations = 0;
  double sigma0 = 0.1;
  double lb = 1e-3;
  double ub = 0.5;
  std::uint64_t seed = 0;
  nn::DsmSign dsm_sign = nn::DsmSign::derivation;
  bool warm_start = true;
  std::size_t batch_size = 0;  // inner-loop minibatch; 0 means all particles
  NetSpec net;
  nn::OptimizerSpec optimizer;
  ScoreMode score_mode = ScoreMode::network;
  bool svgd_median_bandwidth = true;
  double svgd_fixed_bandwidth = 1.0;
  ParticleUpdate particle_update = ParticleUpdate::euler;
  std::size_t max_consecutive_failures = 10;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Largest particle dimension accepted by L2-GF (its divergence costs d passes).
inline constexpr Eigen::Index kMaxL2gfDim = 64;

/// Sampler state. For SIFG/Ada-SIFG `net` is the score network; for L2-GF it is
/// the velocity network; SVGD leaves it empty.
struct SamplerState {
  ParticleEnsemble ensemble;
  nn::ScoreNet net;
  nn::OptimizerState opt;
  double sigma = 0.0;
  std::uint64_t iteration = 0;

  Matrix last_x;         // perturbed points of the most recent step (SIFG)
  Matrix last_velocity;  // velocity applied in the most recent step
  double last_loss = 0.0;
  double last_sigma_grad = 0.0;
  std::uint64_t failed_steps = 0;
  std::uint64_t consecutive_failures = 0;

  // Adam moments for ParticleUpdate::adam (empty otherwise)
  Matrix particle_m;
  Matrix particle_v;
  std::uint64_t particle_steps = 0;
};
using SifgState = SamplerState;

/// Thrown when a run exceeds cfg.max_consecutive_failures rejected steps.
class StepAbort : public std::runtime_error {
 public:
  StepAbort(std::uint64_t iteration, const std::string& what)
      : std::runtime_error(what), iteration_(iteration) {}
  std::uint64_t iteration() const { return iteration_; }

 private:
  std::uint64_t iteration_;
};

std::vector<int> net_layer_dims(const NetSpec& spec, int d);

SamplerState init_state(ParticleEnsemble ensemble, const SamplerConfig& cfg);

/// Draws the iteration-k perturbations: column i is N(0, sigma^2 I) from
/// stream (seed, perturbation, k, i).
Matrix perturbations(std::uint64_t seed, std::uint64_t iteration, Eigen::Index d, Eigen::Index n, double sigma);

/// One SIFG outer iteration: perturb, train the score net for N' steps on DSM,
/// move particles by h (grad log pi(x) - f(x)).
SamplerState sifg_step(SamplerState state, targets::Target& target, const SamplerConfig& cfg);

/// SIFG plus the noise update sigma <- clip(sigma + eta_sigma * g, lb, ub),
/// g = mean_i <grad log pi(x_i) - f(x_i), eps_i>, applied after training and
/// before the particle move (which keeps the already drawn x_i).
SamplerState adasifg_step(SamplerState state, targets::Target& target, const SamplerConfig& cfg);

/// Median-heuristic bandwidth: median pairwise squared distance / log(n + 1).
double median_bandwidth(const Matrix& particles);

/// SVGD velocity with kernel exp(-||x - y||^2 / bandwidth).
Matrix svgd_velocity(const Matrix& particles, const Matrix& scores, double bandwidth);

ParticleEnsemble svgd_step(ParticleEnsemble ensemble, targets::Target& target, const SamplerConfig& cfg);

/// L2-GF: fit a velocity net by minimizing the quadratic-regularized Stein
/// objective for N' steps, then move particles by h v(z).
SamplerState l2gf_step(SamplerState state, targets::Target& target, const SamplerConfig& cfg);

/// Dispatches on cfg.method. A step whose target evaluation fails leaves
/// particles, network and sigma untouched, advances the iteration counter and
/// counts a failure; too many consecutive failures throws StepAbort.
SamplerState step(SamplerState state, targets::Target& target, const SamplerConfig& cfg);

/// z + eps with eps ~ N(0, sigma^2 I) for SIFG/Ada-SIFG, raw particles otherwise.
Matrix final_samples(const SamplerState& state, const SamplerConfig& cfg);

/// (1/n) sum_i ||grad log pi(x_i) - f(x_i)||^2 at the cached x of the last
/// step (SIFG), or mean squared velocity of the last step (SVGD, L2-GF).
double velocity_diag(const SamplerState& state, const targets::Target& target, const SamplerConfig& cfg);

/// Score of the smoothed particle distribution at x as used by the sampler.
Matrix smoothed_score(const SamplerState& state, const SamplerConfig& cfg, const Matrix& x);

// Checkpoints: one JSON header line, then raw little-endian f64 blocks in the
// order listed under "blocks" in the header.
void save_checkpoint(const std::filesystem::path& path, const SamplerState& state, const SamplerConfig& cfg);
SamplerState load_checkpoint(const std::filesystem::path& path);

}  // namespace sifg::flow
