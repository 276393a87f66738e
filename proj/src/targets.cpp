#include "sifg/targets.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <numeric>

#include "sifg/rng.hpp"

namespace sifg::targets {

Matrix Target::score_batch(const Matrix& x) const {
  Matrix out(x.rows(), x.cols());
  std::atomic<bool> failed{false};
#pragma omp parallel for schedule(static)
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    if (failed.load(std::memory_order_relaxed)) continue;
    try {
      out.col(i) = logp_score(x.col(i)).score;
    } catch (const NumericalError&) {
      failed.store(true);
    }
  }
  if (failed.load() || !out.allFinite()) throw NumericalError(kind() + ": score evaluation failed");
  return out;
}

// ---------------------------------------------------------------------------

void GaussianMixture::validate() const {
  const Eigen::Index m = means.cols();
  if (m == 0 || means.rows() == 0) throw ConfigError("mixture needs at least one component");
  if (weights.size() != m || stds.size() != m) throw ConfigError("mixture weights/stds must have one entry per mean");
  if ((weights.array() < 0.0).any()) throw ConfigError("mixture weights must be nonnegative");
  if (std::abs(weights.sum() - 1.0) > 1e-12) throw ConfigError("mixture weights must sum to 1");
  if (!(stds.array() > 0.0).all()) throw ConfigError("mixture stds must be > 0");
  if (!means.allFinite()) throw ConfigError("mixture means must be finite");
}

GaussianMixture make_random_mixture(std::size_t d, std::span<const double> stds, std::uint64_t seed) {
  const auto m = static_cast<Eigen::Index>(stds.size());
  GaussianMixture gm;
  gm.weights = Vector::Constant(m, 1.0 / static_cast<double>(m));
  gm.stds = Eigen::Map<const Vector>(stds.data(), m);
  gm.means = rng::gaussian_columns(seed, rng::Purpose::target_setup, 0, static_cast<Eigen::Index>(d), m);
  gm.validate();
  return gm;
}

LogpScore gmm_logp_score(const GaussianMixture& gm, const Vector& x) {
  const Eigen::Index m = gm.means.cols();
  const double d = static_cast<double>(x.size());
  Vector log_terms(m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const double var = gm.stds[j] * gm.stds[j];
    log_terms[j] = std::log(gm.weights[j]) - 0.5 * d * std::log(2.0 * std::numbers::pi * var) -
                   0.5 * (x - gm.means.col(j)).squaredNorm() / var;
  }
  const double top = log_terms.maxCoeff();
  const double logp = top + std::log((log_terms.array() - top).exp().sum());
  LogpScore out{logp, Vector::Zero(x.size())};
  for (Eigen::Index j = 0; j < m; ++j) {
    const double resp = std::exp(log_terms[j] - logp);
    out.score += resp * (gm.means.col(j) - x) / (gm.stds[j] * gm.stds[j]);
  }
  return out;
}

Matrix gmm_sample(const GaussianMixture& gm, std::size_t n, std::uint64_t seed) {
  const Eigen::Index d = gm.means.rows();
  Vector cumulative(gm.weights.size());
  std::partial_sum(gm.weights.begin(), gm.weights.end(), cumulative.begin());
  Matrix out(d, static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < out.cols(); ++i) {
    rng::Stream s(seed, rng::Purpose::ground_truth, 0, static_cast<std::uint64_t>(i));
    const double u = s.uniform() * cumulative[cumulative.size() - 1];
    Eigen::Index j = 0;
    while (j + 1 < cumulative.size() && u > cumulative[j]) ++j;
    for (Eigen::Index k = 0; k < d; ++k) out(k, i) = gm.means(k, j) + gm.stds[j] * s.normal();
  }
  return out;
}

GaussianMixtureTarget::GaussianMixtureTarget(GaussianMixture gm) : mixture_(std::move(gm)) {
  mixture_.validate();
}

// ---------------------------------------------------------------------------

LogpScore monomial_gamma_logp_score(const Vector& x) {
  LogpScore out{0.0, Vector(x.size())};
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double a = std::abs(x[i]);
    out.logp -= kMonomialScale * std::pow(a, kMonomialPower);
    if (x[i] == 0.0) {
      out.score[i] = 0.0;
    } else {
      const double clamped = std::max(a, kMonomialClamp);
      out.score[i] = -kMonomialScale * kMonomialPower * std::copysign(1.0, x[i]) *
                     std::pow(clamped, kMonomialPower - 1.0);
    }
  }
  return out;
}

LogpScore MonomialGammaTarget::logp_score(const Vector& x) const { return monomial_gamma_logp_score(x); }

MonomialGammaMarginal::MonomialGammaMarginal() {
  // Substituting t = u^10 makes the integrand 10 u^9 exp(-0.3 u^9) smooth at 0.
  constexpr int kNodes = 200001;
  const double u_max = std::pow(60.0 / kMonomialScale, 1.0 / 9.0);
  const double du = u_max / (kNodes - 1);
  auto integrand = [](double u) { return 10.0 * std::pow(u, 9) * std::exp(-kMonomialScale * std::pow(u, 9)); };
  grid_.resize(kNodes);
  tail_.resize(kNodes);
  grid_[0] = 0.0;
  tail_[0] = 0.0;
  double prev = integrand(0.0);
  for (int k = 1; k < kNodes; ++k) {
    const double u = k * du;
    const double cur = integrand(u);
    grid_[k] = std::pow(u, 10);
    tail_[k] = tail_[k - 1] + 0.5 * du * (prev + cur);
    prev = cur;
  }
  const double half_mass = tail_.back();
  for (double& v : tail_) v /= half_mass;
  log_normalizer_ = std::log(2.0 * half_mass);
}

double MonomialGammaMarginal::cdf(double x) const {
  const double a = std::abs(x);
  double inner = 1.0;
  if (a < grid_.back()) {
    const auto it = std::upper_bound(grid_.begin(), grid_.end(), a);
    const auto k = static_cast<std::size_t>(it - grid_.begin());
    const double w = (a - grid_[k - 1]) / (grid_[k] - grid_[k - 1]);
    inner = tail_[k - 1] + w * (tail_[k] - tail_[k - 1]);
  }
  return 0.5 + 0.5 * std::copysign(inner, x);
}

double MonomialGammaMarginal::quantile(double u) const {
  if (!(u > 0.0 && u < 1.0)) throw UsageError("quantile level must lie in (0, 1)");
  const double p = std::abs(2.0 * u - 1.0);
  const auto it = std::lower_bound(tail_.begin(), tail_.end(), p);
  double a;
  if (it == tail_.end()) {
    a = grid_.back();
  } else if (it == tail_.begin()) {
    a = 0.0;
  } else {
    const auto k = static_cast<std::size_t>(it - tail_.begin());
    const double w = (p - tail_[k - 1]) / (tail_[k] - tail_[k - 1]);
    a = grid_[k - 1] + w * (grid_[k] - grid_[k - 1]);
  }
  return u < 0.5 ? -a : a;
}

const MonomialGammaMarginal& monomial_gamma_marginal() {
  static const MonomialGammaMarginal marginal;
  return marginal;
}

Matrix monomial_gamma_sample(std::size_t d, std::size_t n, std::uint64_t seed) {
  const auto& marginal = monomial_gamma_marginal();
  Matrix out(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < out.cols(); ++i) {
    rng::Stream s(seed, rng::Purpose::ground_truth, 0, static_cast<std::uint64_t>(i));
    for (Eigen::Index k = 0; k < out.rows(); ++k) out(k, i) = marginal.quantile(s.uniform());
  }
  return out;
}

// ---------------------------------------------------------------------------

double log_cosh(double s) {
  const double a = std::abs(s);
  return a + std::log1p(std::exp(-2.0 * a)) - std::numbers::ln2;
}

IcaLogpScore ica_logp_score(const IcaModel& model, const Matrix& w, std::span<const std::size_t> batch) {
  const auto d = static_cast<Eigen::Index>(model.d());
  if (w.rows() != d || w.cols() != d) throw UsageError("unmixing matrix has the wrong shape");
  if (!(model.prior_var > 0.0)) throw ConfigError("prior_var must be > 0");

  IcaLogpScore out;
  out.logp = -0.5 * w.squaredNorm() / model.prior_var;
  out.score = -w / model.prior_var;
  if (model.n_obs() == 0) return out;
  if (batch.empty()) throw UsageError("ICA batch must be nonempty");

  const Eigen::PartialPivLU<Matrix> lu(w);
  const double det = lu.determinant();
  if (!std::isfinite(det) || !(std::abs(det) > 1e-300)) throw NumericalError("unmixing matrix is singular");
  const Matrix inv_t = lu.inverse().transpose();
  const double log_abs_det = std::log(std::abs(det));

  double loglik = 0.0;
  Matrix grad = Matrix::Zero(d, d);
  for (const std::size_t n : batch) {
    if (n >= model.n_obs()) throw UsageError("ICA batch index out of range");
    const auto x = model.observations.col(static_cast<Eigen::Index>(n));
    const Vector s = w * x;
    loglik += log_abs_det;
    for (Eigen::Index i = 0; i < d; ++i) loglik -= log_cosh(s[i]);
    grad += inv_t - s.array().tanh().matrix() * x.transpose();
  }
  const double rescale = static_cast<double>(model.n_obs()) / static_cast<double>(batch.size());
  out.logp += rescale * loglik;
  out.score += rescale * grad;
  if (!std::isfinite(out.logp) || !out.score.allFinite()) throw NumericalError("non-finite ICA posterior");
  return out;
}

double sech_quantile(double u) { return std::log(std::tan(0.5 * std::numbers::pi * u)); }

namespace {

Matrix random_orthogonal(rng::Stream& s, Eigen::Index d) {
  Matrix g(d, d);
  for (Eigen::Index k = 0; k < g.size(); ++k) g.data()[k] = s.normal();
  const Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < d; ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  return q;
}

}  // namespace

IcaDataset ica_synthesize(std::size_t d, std::size_t n_obs, std::uint64_t seed) {
  if (d < 1 || n_obs < 1) throw ConfigError("ica_synthesize needs d >= 1 and n_obs >= 1");
  const auto dd = static_cast<Eigen::Index>(d);
  rng::Stream s(seed, rng::Purpose::dataset);
  const Matrix u = random_orthogonal(s, dd);
  const Matrix v = random_orthogonal(s, dd);
  Vector singular(dd);
  for (Eigen::Index i = 0; i < dd; ++i) singular[i] = 0.5 + 1.5 * s.uniform();

  IcaDataset out;
  out.w_true = u * singular.asDiagonal() * v.transpose();
  Matrix sources(dd, static_cast<Eigen::Index>(n_obs));
  for (Eigen::Index n = 0; n < sources.cols(); ++n) {
    rng::Stream src(seed, rng::Purpose::dataset, 1, static_cast<std::uint64_t>(n));
    for (Eigen::Index i = 0; i < dd; ++i) sources(i, n) = sech_quantile(src.uniform());
  }
  out.model.observations = out.w_true.partialPivLu().solve(sources);
  return out;
}

IcaPosteriorTarget::IcaPosteriorTarget(IcaModel model, std::uint64_t seed)
    : model_(std::move(model)), seed_(seed) {
  if (model_.d() < 1) throw ConfigError("ICA model needs d >= 1");
  if (!model_.observations.allFinite()) throw ConfigError("ICA observations must be finite");
  if (model_.minibatch_size > model_.n_obs()) throw ConfigError("ICA minibatch larger than the dataset");
  batch_.resize(model_.n_obs());
  std::iota(batch_.begin(), batch_.end(), std::size_t{0});
}

void IcaPosteriorTarget::begin_iteration(std::uint64_t iteration) {
  const std::size_t n = model_.n_obs();
  const std::size_t b = model_.minibatch_size;
  if (b == 0 || b >= n) return;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng::Stream s(seed_, rng::Purpose::minibatch, iteration);
  for (std::size_t i = 0; i < b; ++i) {
    std::swap(order[i], order[i + s.below(n - i)]);
  }
  batch_.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(b));
}

LogpScore IcaPosteriorTarget::logp_score(const Vector& x) const {
  const auto d = static_cast<Eigen::Index>(model_.d());
  const Matrix w = x.reshaped(d, d);
  IcaLogpScore r = ica_logp_score(model_, w, batch_);
  return {r.logp, r.score.reshaped()};
}

// ---------------------------------------------------------------------------

GaussianTarget::GaussianTarget(Vector mean, double var) : mean_(std::move(mean)), var_(var) {
  if (!(var_ > 0.0)) throw ConfigError("Gaussian target variance must be > 0");
}

LogpScore GaussianTarget::logp_score(const Vector& x) const {
  const double d = static_cast<double>(x.size());
  return {-0.5 * (x - mean_).squaredNorm() / var_ - 0.5 * d * std::log(2.0 * std::numbers::pi * var_),
          -(x - mean_) / var_};
}

Matrix GaussianTarget::score_batch(const Matrix& x) const { return -(x.colwise() - mean_) / var_; }

Vector analytic_smoothed_gaussian_score(const Vector& m, double s2, double sigma, const Vector& x) {
  if (!(s2 > 0.0) || !(sigma > 0.0)) throw ConfigError("s2 and sigma must be > 0");
  return -(x - m) / (s2 + sigma * sigma);
}

}  // namespace sifg::targets
