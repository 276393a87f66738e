#include "sifg/flow.hpp"

#include <algorithm>
#include <cmath>

#include "sifg/rng.hpp"

namespace sifg::flow {

std::string to_string(Method m) {
  switch (m) {
    case Method::sifg: return "sifg";
    case Method::adasifg: return "adasifg";
    case Method::svgd: return "svgd";
    case Method::l2gf: return "l2gf";
  }
  return "unknown";
}

Method method_from_string(const std::string& name) {
  if (name == "sifg") return Method::sifg;
  if (name == "adasifg") return Method::adasifg;
  if (name == "svgd") return Method::svgd;
  if (name == "l2gf") return Method::l2gf;
  throw ConfigError("unknown sampler method '" + name + "'");
}

void SamplerConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(h >= 0.0 && std::isfinite(h), "sampler.h must be >= 0");
  const bool uses_net = method == Method::l2gf ||
                        ((method == Method::sifg || method == Method::adasifg) && score_mode == ScoreMode::network);
  if (uses_net) require(eta > 0.0 && std::isfinite(eta), "sampler.eta must be > 0");
  if (method == Method::sifg || method == Method::adasifg) {
    require(sigma0 > 0.0, "sampler.sigma0 must be > 0");
  }
  if (method == Method::adasifg) {
    require(eta_sigma >= 0.0, "sampler.eta_sigma must be >= 0");
    require(lb > 0.0, "lb must be > 0");
    require(ub < 1.0, "ub must be < 1");
    require(lb <= sigma0 && sigma0 <= ub, "sampler.sigma0 must lie in [lb, ub]");
  }
  if (method == Method::svgd && !svgd_median_bandwidth) {
    require(svgd_fixed_bandwidth > 0.0, "sampler.svgd_bandwidth must be > 0");
  }
  for (int w : net.hidden) require(w > 0, "sampler.net.hidden widths must be positive");
  if (net.activation.kind == nn::ActivationKind::leaky_relu) {
    require(net.activation.slope >= 0.0, "sampler.net.leaky_slope must be >= 0");
  }
}

std::vector<int> net_layer_dims(const NetSpec& spec, int d) {
  std::vector<int> dims{d};
  dims.insert(dims.end(), spec.hidden.begin(), spec.hidden.end());
  dims.push_back(d);
  return dims;
}

namespace {

bool uses_network(const SamplerConfig& cfg) {
  switch (cfg.method) {
    case Method::sifg:
    case Method::adasifg: return cfg.score_mode == ScoreMode::network;
    case Method::l2gf: return true;
    case Method::svgd: return false;
  }
  return false;
}

std::uint64_t cold_start_seed(std::uint64_t seed, std::uint64_t iteration) {
  return rng::splitmix64(seed ^ rng::splitmix64(iteration + 1));
}

void reset_network(SamplerState& state, const SamplerConfig& cfg, std::uint64_t net_seed) {
  const auto dims = net_layer_dims(cfg.net, static_cast<int>(state.ensemble.dim()));
  state.net = nn::net_init(dims, cfg.net.activation, net_seed);
  state.opt = nn::optimizer_init(cfg.optimizer, state.net);
}

// Columns used by inner step t of iteration k.
std::vector<Eigen::Index> inner_batch(const SamplerConfig& cfg, std::uint64_t k, std::uint64_t t, Eigen::Index n) {
  const auto b = static_cast<Eigen::Index>(cfg.batch_size);
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  if (b == 0 || b >= n) return idx;
  rng::Stream s(cfg.seed, rng::Purpose::minibatch, k, t + 1);
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto j = i + static_cast<Eigen::Index>(s.below(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(b));
  return idx;
}

bool full_batch(const SamplerConfig& cfg, Eigen::Index n) {
  return cfg.batch_size == 0 || static_cast<Eigen::Index>(cfg.batch_size) >= n;
}

void train_score_net(SamplerState& state, const SamplerConfig& cfg, const Matrix& x, const Matrix& z) {
  const Eigen::Index n = x.cols();
  for (std::uint64_t t = 0; t < cfg.inner_iterations; ++t) {
    nn::LossAndGrad lg;
    if (full_batch(cfg, n)) {
      lg = nn::dsm_loss_and_grad(state.net, x, z, state.sigma, cfg.dsm_sign);
    } else {
      const auto idx = inner_batch(cfg, state.iteration, t, n);
      lg = nn::dsm_loss_and_grad(state.net, x(Eigen::all, idx), z(Eigen::all, idx), state.sigma, cfg.dsm_sign);
    }
    nn::apply_optimizer_step(state.net, lg.grads, state.opt, cfg.eta);
    state.last_loss = lg.loss;
  }
}

void train_velocity_net(SamplerState& state, const SamplerConfig& cfg, const Matrix& z, const Matrix& scores) {
  const Eigen::Index n = z.cols();
  for (std::uint64_t t = 0; t < cfg.inner_iterations; ++t) {
    nn::LossAndGrad lg;
    if (full_batch(cfg, n)) {
      lg = nn::stein_loss_and_grad(state.net, z, scores);
    } else {
      const auto idx = inner_batch(cfg, state.iteration, t, n);
      lg = nn::stein_loss_and_grad(state.net, z(Eigen::all, idx), scores(Eigen::all, idx));
    }
    nn::apply_optimizer_step(state.net, lg.grads, state.opt, cfg.eta);
    state.last_loss = lg.loss;
  }
}

// Failure bookkeeping for a rejected step: everything but the counters stays
// as it was before the step.
SamplerState reject(SamplerState original, const SamplerConfig& cfg, const std::string& why) {
  const std::uint64_t k = original.iteration;
  ++original.failed_steps;
  ++original.consecutive_failures;
  original.iteration = k + 1;
  if (original.consecutive_failures > cfg.max_consecutive_failures) {
    throw StepAbort(k, "aborting after " + std::to_string(original.consecutive_failures) +
                           " consecutive failed steps: " + why);
  }
  return original;
}

SamplerState semi_implicit_step(const SamplerState& state, targets::Target& target, const SamplerConfig& cfg,
                                bool adaptive) {
  const std::uint64_t k = state.iteration;
  const Matrix& z = state.ensemble.particles;
  SamplerState next = state;
  try {
    target.begin_iteration(k);
    const Matrix eps = perturbations(cfg.seed, k, z.rows(), z.cols(), state.sigma);
    const Matrix x = z + eps;
    const Matrix target_score = target.score_batch(x);

    if (cfg.score_mode == ScoreMode::network) {
      if (!cfg.warm_start) reset_network(next, cfg, cold_start_seed(cfg.seed, k));
      train_score_net(next, cfg, x, z);
    }
    Matrix velocity = target_score - smoothed_score(next, cfg, x);

    const double g = velocity.cwiseProduct(eps).sum() / static_cast<double>(z.cols());
    next.last_sigma_grad = g;
    if (adaptive && cfg.eta_sigma != 0.0) {
      next.sigma = std::clamp(state.sigma + cfg.eta_sigma * g, cfg.lb, cfg.ub);
    }

    next.ensemble.particles += cfg.h * velocity;
    if (!next.ensemble.particles.allFinite() || !std::isfinite(next.sigma)) {
      throw NumericalError("non-finite particles");
    }
    next.last_x = x;
    next.last_velocity = std::move(velocity);
  } catch (const NumericalError& e) {
    return reject(state, cfg, e.what());
  }
  next.consecutive_failures = 0;
  next.iteration = k + 1;
  return next;
}

}  // namespace

SamplerState init_state(ParticleEnsemble ensemble, const SamplerConfig& cfg) {
  cfg.validate();
  if (ensemble.count() < 1) throw ConfigError("ensemble needs at least one particle");
  if (!ensemble.particles.allFinite()) throw ConfigError("initial particles must be finite");
  if (cfg.method == Method::l2gf && ensemble.dim() > kMaxL2gfDim) {
    throw ConfigError("l2gf computes exact divergences and supports d <= 64; use sifg for d = " +
                      std::to_string(ensemble.dim()));
  }
  SamplerState state;
  state.ensemble = std::move(ensemble);
  state.sigma = (cfg.method == Method::sifg || cfg.method == Method::adasifg) ? cfg.sigma0 : 0.0;
  if (uses_network(cfg)) reset_network(state, cfg, cfg.seed);
  return state;
}

Matrix perturbations(std::uint64_t seed, std::uint64_t iteration, Eigen::Index d, Eigen::Index n, double sigma) {
  return rng::gaussian_columns(seed, rng::Purpose::perturbation, iteration, d, n, sigma);
}

Matrix smoothed_score(const SamplerState& state, const SamplerConfig& cfg, const Matrix& x) {
  if (cfg.score_mode == ScoreMode::network) return nn::net_forward_batch(state.net, x);
  const Matrix& z = state.ensemble.particles;
  const Vector mean = z.rowwise().mean();
  const double var = (z.colwise() - mean).squaredNorm() / static_cast<double>(z.size());
  return -(x.colwise() - mean) / (var + state.sigma * state.sigma);
}

SamplerState sifg_step(SamplerState state, targets::Target& target, const SamplerConfig& cfg) {
  return semi_implicit_step(state, target, cfg, false);
}

SamplerState adasifg_step(SamplerState state, targets::Target& target, const SamplerConfig& cfg) {
  return semi_implicit_step(state, target, cfg, true);
}

double median_bandwidth(const Matrix& particles) {
  constexpr Eigen::Index kMaxExact = 4096;
  const Eigen::Index n = particles.cols();
  if (n < 2) return 1.0;
  // Above kMaxExact particles the median is taken over an evenly strided subset.
  const Eigen::Index m = std::min(n, kMaxExact);
  std::vector<double> sq;
  sq.reserve(static_cast<std::size_t>(m * (m - 1) / 2));
  for (Eigen::Index a = 0; a < m; ++a) {
    const Eigen::Index i = a * n / m;
    for (Eigen::Index b = a + 1; b < m; ++b) {
      sq.push_back((particles.col(i) - particles.col(b * n / m)).squaredNorm());
    }
  }
  const std::size_t mid = sq.size() / 2;
  std::nth_element(sq.begin(), sq.begin() + static_cast<std::ptrdiff_t>(mid), sq.end());
  double median = sq[mid];
  if (sq.size() % 2 == 0) {
    const double lower = *std::max_element(sq.begin(), sq.begin() + static_cast<std::ptrdiff_t>(mid));
    median = 0.5 * (median + lower);
  }
  const double bw = median / std::log(static_cast<double>(n) + 1.0);
  return bw > 0.0 ? bw : 1.0;
}

Matrix svgd_velocity(const Matrix& particles, const Matrix& scores, double bandwidth) {
  constexpr Eigen::Index kBlock = 256;
  const Eigen::Index n = particles.cols();
  const Vector sq_norms = particles.colwise().squaredNorm().transpose();
  Matrix v(particles.rows(), n);
  const Eigen::Index blocks = (n + kBlock - 1) / kBlock;
#pragma omp parallel for schedule(static)
  for (Eigen::Index blk = 0; blk < blocks; ++blk) {
    const Eigen::Index begin = blk * kBlock;
    const Eigen::Index count = std::min(kBlock, n - begin);
    const auto zi = particles.middleCols(begin, count);
    // kernel(j, i) = k(z_j, z_i) for all j and the block's i
    Matrix kernel = -2.0 * particles.transpose() * zi;
    kernel.colwise() += sq_norms;
    kernel.rowwise() += sq_norms.segment(begin, count).transpose();
    kernel = (-kernel.cwiseMax(0.0) / bandwidth).array().exp().matrix();
    const Vector mass = kernel.colwise().sum().transpose();
    Matrix block = scores * kernel;
    block += (2.0 / bandwidth) * (zi * mass.asDiagonal() - particles * kernel);
    v.middleCols(begin, count) = block / static_cast<double>(n);
  }
  return v;
}

ParticleEnsemble svgd_step(ParticleEnsemble ensemble, targets::Target& target, const SamplerConfig& cfg) {
  const Matrix scores = target.score_batch(ensemble.particles);
  const double bw = cfg.svgd_median_bandwidth ? median_bandwidth(ensemble.particles) : cfg.svgd_fixed_bandwidth;
  ensemble.particles += cfg.h * svgd_velocity(ensemble.particles, scores, bw);
  return ensemble;
}

namespace {

SamplerState svgd_state_step(const SamplerState& state, targets::Target& target, const SamplerConfig& cfg) {
  const std::uint64_t k = state.iteration;
  SamplerState next = state;
  try {
    target.begin_iteration(k);
    const Matrix& z = state.ensemble.particles;
    const Matrix scores = target.score_batch(z);
    const double bw = cfg.svgd_median_bandwidth ? median_bandwidth(z) : cfg.svgd_fixed_bandwidth;
    Matrix velocity = svgd_velocity(z, scores, bw);
    next.ensemble.particles += cfg.h * velocity;
    if (!next.ensemble.particles.allFinite()) throw NumericalError("non-finite particles");
    next.last_velocity = std::move(velocity);
  } catch (const NumericalError& e) {
    return reject(state, cfg, e.what());
  }
  next.consecutive_failures = 0;
  next.iteration = k + 1;
  return next;
}

}  // namespace

SamplerState l2gf_step(SamplerState state, targets::Target& target, const SamplerConfig& cfg) {
  if (state.ensemble.dim() > kMaxL2gfDim) {
    throw ConfigError("l2gf supports d <= 64; use sifg for higher dimensions");
  }
  const std::uint64_t k = state.iteration;
  SamplerState next = state;
  try {
    target.begin_iteration(k);
    const Matrix& z = state.ensemble.particles;
    const Matrix scores = target.score_batch(z);
    if (!cfg.warm_start) reset_network(next, cfg, cold_start_seed(cfg.seed, k));
    train_velocity_net(next, cfg, z, scores);
    Matrix velocity = nn::net_forward_batch(next.net, z);
    if (cfg.particle_update == ParticleUpdate::adam) {
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      if (next.particle_m.size() != velocity.size()) {
        next.particle_m = Matrix::Zero(velocity.rows(), velocity.cols());
        next.particle_v = Matrix::Zero(velocity.rows(), velocity.cols());
        next.particle_steps = 0;
      }
      ++next.particle_steps;
      next.particle_m = b1 * next.particle_m + (1.0 - b1) * velocity;
      next.particle_v = b2 * next.particle_v + (1.0 - b2) * velocity.cwiseAbs2();
      const double t = static_cast<double>(next.particle_steps);
      const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
      next.ensemble.particles.array() +=
          cfg.h * (next.particle_m.array() / c1) / ((next.particle_v.array() / c2).sqrt() + eps);
    } else {
      next.ensemble.particles += cfg.h * velocity;
    }
    if (!next.ensemble.particles.allFinite()) throw NumericalError("non-finite particles");
    next.last_velocity = std::move(velocity);
  } catch (const NumericalError& e) {
    return reject(std::move(state), cfg, e.what());
  }
  next.consecutive_failures = 0;
  next.iteration = k + 1;
  return next;
}

SamplerState step(SamplerState state, targets::Target& target, const SamplerConfig& cfg) {
  switch (cfg.method) {
    case Method::sifg: return sifg_step(std::move(state), target, cfg);
    case Method::adasifg: return adasifg_step(std::move(state), target, cfg);
    case Method::svgd: return svgd_state_step(state, target, cfg);
    case Method::l2gf: return l2gf_step(std::move(state), target, cfg);
  }
  throw ConfigError("unknown sampler method");
}

Matrix final_samples(const SamplerState& state, const SamplerConfig& cfg) {
  const Matrix& z = state.ensemble.particles;
  if (cfg.method != Method::sifg && cfg.method != Method::adasifg) return z;
  return z + rng::gaussian_columns(cfg.seed, rng::Purpose::final_perturbation, state.iteration, z.rows(), z.cols(),
                                   state.sigma);
}

double velocity_diag(const SamplerState& state, const targets::Target& target, const SamplerConfig& cfg) {
  const bool semi_implicit = cfg.method == Method::sifg || cfg.method == Method::adasifg;
  if (semi_implicit && cfg.score_mode == ScoreMode::network && state.last_x.size() > 0) {
    const Matrix v = target.score_batch(state.last_x) - nn::net_forward_batch(state.net, state.last_x);
    return v.squaredNorm() / static_cast<double>(v.cols());
  }
  if (state.last_velocity.size() == 0) return 0.0;
  return state.last_velocity.squaredNorm() / static_cast<double>(state.last_velocity.cols());
}

}  // namespace sifg::flow
