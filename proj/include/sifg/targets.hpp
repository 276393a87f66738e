#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sifg/types.hpp"

namespace sifg::targets {

struct LogpScore {
  double logp = 0.0;
  Vector score;
};

/// Log-density and score provider for a sampling target.
///
/// logp may be unnormalized. score_batch must be safe to call concurrently;
/// begin_iteration is the only mutating hook and is called by the samplers
/// once per outer step (the ICA posterior uses it to pick a minibatch).
class Target {
 public:
  virtual ~Target() = default;

  virtual std::size_t dim() const = 0;
  virtual std::string kind() const = 0;
  virtual LogpScore logp_score(const Vector& x) const = 0;
  /// Scores of every column of x. Throws NumericalError if any evaluation fails.
  virtual Matrix score_batch(const Matrix& x) const;
  virtual void begin_iteration(std::uint64_t /*iteration*/) {}
  virtual std::unique_ptr<Target> clone() const = 0;
};

// ---------------------------------------------------------------------------
// Gaussian mixtures

struct GaussianMixture {
  Vector weights;  // m, sums to 1
  Matrix means;    // d x m
  Vector stds;     // m, isotropic per component

  std::size_t dim() const { return static_cast<std::size_t>(means.rows()); }
  std::size_t components() const { return static_cast<std::size_t>(means.cols()); }
  /// Throws ConfigError on a malformed mixture.
  void validate() const;
};

/// Equal-weight mixture with means drawn from N(0, I_d).
GaussianMixture make_random_mixture(std::size_t d, std::span<const double> stds, std::uint64_t seed);

LogpScore gmm_logp_score(const GaussianMixture& gm, const Vector& x);

/// n exact draws (d x n).
Matrix gmm_sample(const GaussianMixture& gm, std::size_t n, std::uint64_t seed);

class GaussianMixtureTarget final : public Target {
 public:
  explicit GaussianMixtureTarget(GaussianMixture gm);
  std::size_t dim() const override { return mixture_.dim(); }
  std::string kind() const override { return "gaussian_mixture"; }
  LogpScore logp_score(const Vector& x) const override { return gmm_logp_score(mixture_, x); }
  std::unique_ptr<Target> clone() const override { return std::make_unique<GaussianMixtureTarget>(*this); }
  const GaussianMixture& mixture() const { return mixture_; }

 private:
  GaussianMixture mixture_;
};

// ---------------------------------------------------------------------------
// Monomial gamma: pi(x) ∝ exp(-0.3 * sum_i |x_i|^0.9)

inline constexpr double kMonomialScale = 0.3;
inline constexpr double kMonomialPower = 0.9;
/// |x_i| is clamped from below to this value when evaluating the score.
inline constexpr double kMonomialClamp = 1e-8;

/// Unnormalized; score_i(0) is defined as 0.
LogpScore monomial_gamma_logp_score(const Vector& x);

/// One coordinate of the monomial gamma law, tabulated by quadrature.
class MonomialGammaMarginal {
 public:
  MonomialGammaMarginal();
  /// log of ∫ exp(-0.3|t|^0.9) dt over R.
  double log_normalizer() const { return log_normalizer_; }
  double cdf(double x) const;
  double quantile(double u) const;

 private:
  std::vector<double> grid_;  // |x| nodes
  std::vector<double> tail_;  // P(|X| <= grid_[k])
  double log_normalizer_ = 0.0;
};

const MonomialGammaMarginal& monomial_gamma_marginal();

/// n exact draws by per-coordinate inverse CDF.
Matrix monomial_gamma_sample(std::size_t d, std::size_t n, std::uint64_t seed);

class MonomialGammaTarget final : public Target {
 public:
  explicit MonomialGammaTarget(std::size_t d) : dim_(d) {}
  std::size_t dim() const override { return dim_; }
  std::string kind() const override { return "monomial_gamma"; }
  LogpScore logp_score(const Vector& x) const override;
  std::unique_ptr<Target> clone() const override { return std::make_unique<MonomialGammaTarget>(*this); }

 private:
  std::size_t dim_;
};

// ---------------------------------------------------------------------------
// Bayesian ICA with a sech source prior and N(0, prior_var) prior on W.

struct IcaModel {
  Matrix observations;  // d x n_obs
  double prior_var = 100.0;
  std::size_t minibatch_size = 0;  // 0 means full batch

  std::size_t d() const { return static_cast<std::size_t>(observations.rows()); }
  std::size_t n_obs() const { return static_cast<std::size_t>(observations.cols()); }
};

/// log cosh without overflow.
double log_cosh(double s);

/// Log-posterior (up to a constant) and its gradient w.r.t. W, with the
/// likelihood over `batch` rescaled by n_obs/|batch|. Throws NumericalError
/// when |det W| <= 1e-300.
struct IcaLogpScore {
  double logp = 0.0;
  Matrix score;
};
IcaLogpScore ica_logp_score(const IcaModel& model, const Matrix& w, std::span<const std::size_t> batch);

struct IcaDataset {
  IcaModel model;
  Matrix w_true;
};

/// Sources i.i.d. from the sech density, W_true with condition number <= 4,
/// observations W_true^{-1} s.
IcaDataset ica_synthesize(std::size_t d, std::size_t n_obs, std::uint64_t seed);

/// Draw from p(s) = sech(s)/pi via s = log tan(pi u / 2).
double sech_quantile(double u);

/// Posterior over vec(W) (column-major) as a flat d^2-dimensional target.
class IcaPosteriorTarget final : public Target {
 public:
  IcaPosteriorTarget(IcaModel model, std::uint64_t seed);
  std::size_t dim() const override { return model_.d() * model_.d(); }
  std::string kind() const override { return "bayesian_ica"; }
  LogpScore logp_score(const Vector& x) const override;
  void begin_iteration(std::uint64_t iteration) override;
  std::unique_ptr<Target> clone() const override { return std::make_unique<IcaPosteriorTarget>(*this); }
  const IcaModel& model() const { return model_; }

 private:
  IcaModel model_;
  std::uint64_t seed_;
  std::vector<std::size_t> batch_;
};

// ---------------------------------------------------------------------------
// Isotropic Gaussian N(mean, var I), used for analytic checks.

class GaussianTarget final : public Target {
 public:
  GaussianTarget(Vector mean, double var);
  std::size_t dim() const override { return static_cast<std::size_t>(mean_.size()); }
  std::string kind() const override { return "analytic_gaussian"; }
  LogpScore logp_score(const Vector& x) const override;
  Matrix score_batch(const Matrix& x) const override;
  std::unique_ptr<Target> clone() const override { return std::make_unique<GaussianTarget>(*this); }
  const Vector& mean() const { return mean_; }
  double var() const { return var_; }

 private:
  Vector mean_;
  double var_;
};

/// Score of N(m, (s2 + sigma^2) I): the Gaussian-smoothed score of N(m, s2 I).
Vector analytic_smoothed_gaussian_score(const Vector& m, double s2, double sigma, const Vector& x);

}  // namespace sifg::targets
