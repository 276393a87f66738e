#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "sifg/types.hpp"

namespace sifg::metrics {

/// k-nearest-neighbour estimate of KL(p || q) from samples (columns):
///   (d/n) sum_i log(nu_k(i) / rho_k(i)) + log(m / (n - 1))
/// rho_k is the k-th neighbour distance within p (excluding the point itself),
/// nu_k the k-th neighbour distance into q. Radii are floored at 1e-12.
/// May be negative for finite samples.
double knn_kl(const Matrix& samples_p, const Matrix& samples_q, int k = 5);

/// Amari index of P = W_est W_true^{-1}, normalized by 1/(2d). Zero iff P is a
/// scaled permutation.
double amari_distance(const Matrix& w_est, const Matrix& w_true);

/// (1/n) sum_i ||z_i||^alpha.
double moment(const Matrix& particles, double alpha);

/// Fraction of samples within radius_mult * stds[j] of means.col(j), per mode.
Vector mode_coverage(const Matrix& samples, const Matrix& means, const Vector& stds, double radius_mult);

struct MetricsRecord {
  std::uint64_t iteration = 0;
  std::optional<double> kl_estimate;
  std::optional<double> amari;
  std::map<int, double> moments;  // alpha -> value, alpha in {2, 4, 5}
  std::optional<double> grad_norm_diag;
  std::optional<double> sigma;
  std::optional<Vector> mode_coverage;
  double wall_clock_ms = 0.0;
};

}  // namespace sifg::metrics
