#include "sifg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace sifg::metrics {

namespace {

constexpr double kRadiusFloor = 1e-12;

// k-th smallest squared distance from `query` to the columns of `pool`,
// skipping column `skip` (pass -1 to keep all).
double kth_sq_distance(const Matrix& pool, const Eigen::Ref<const Vector>& query, int k, Eigen::Index skip,
                       std::vector<double>& scratch) {
  scratch.clear();
  for (Eigen::Index j = 0; j < pool.cols(); ++j) {
    if (j == skip) continue;
    scratch.push_back((pool.col(j) - query).squaredNorm());
  }
  std::nth_element(scratch.begin(), scratch.begin() + (k - 1), scratch.end());
  return scratch[static_cast<std::size_t>(k - 1)];
}

}  // namespace

double knn_kl(const Matrix& samples_p, const Matrix& samples_q, int k) {
  const Eigen::Index n = samples_p.cols();
  const Eigen::Index m = samples_q.cols();
  if (k < 1) throw UsageError("knn_kl: k must be >= 1");
  if (samples_p.rows() < 1 || samples_p.rows() != samples_q.rows()) throw UsageError("knn_kl: dimension mismatch");
  // rho_k needs k neighbours besides the point itself
  if (n <= k || m <= k) throw UsageError("knn_kl: need more than k samples from each distribution");

  const double d = static_cast<double>(samples_p.rows());
  std::vector<double> log_ratio(static_cast<std::size_t>(n));
#pragma omp parallel
  {
    std::vector<double> scratch;
    scratch.reserve(static_cast<std::size_t>(std::max(n, m)));
#pragma omp for schedule(static)
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto x = samples_p.col(i);
      const double rho = std::max(std::sqrt(kth_sq_distance(samples_p, x, k, i, scratch)), kRadiusFloor);
      const double nu = std::max(std::sqrt(kth_sq_distance(samples_q, x, k, -1, scratch)), kRadiusFloor);
      log_ratio[static_cast<std::size_t>(i)] = std::log(nu / rho);
    }
  }
  double sum = 0.0;
  for (double v : log_ratio) sum += v;
  return d * sum / static_cast<double>(n) +
         std::log(static_cast<double>(m) / static_cast<double>(n - 1));
}

double amari_distance(const Matrix& w_est, const Matrix& w_true) {
  const Eigen::Index d = w_true.rows();
  if (w_true.cols() != d || w_est.rows() != d || w_est.cols() != d) throw UsageError("amari_distance: shape mismatch");
  const Eigen::FullPivLU<Matrix> lu(w_true);
  if (!lu.isInvertible()) throw UsageError("amari_distance: W_true is singular");
  const Matrix p = (w_est * lu.inverse()).cwiseAbs();

  double total = 0.0;
  for (Eigen::Index i = 0; i < d; ++i) {
    const double row_max = p.row(i).maxCoeff();
    if (row_max > 0.0) total += p.row(i).sum() / row_max - 1.0;
  }
  for (Eigen::Index j = 0; j < d; ++j) {
    const double col_max = p.col(j).maxCoeff();
    if (col_max > 0.0) total += p.col(j).sum() / col_max - 1.0;
  }
  return total / (2.0 * static_cast<double>(d));
}

double moment(const Matrix& particles, double alpha) {
  if (!(alpha > 0.0)) throw UsageError("moment: alpha must be > 0");
  if (particles.cols() == 0) throw UsageError("moment: empty ensemble");
  const Eigen::ArrayXd norms = particles.colwise().norm().transpose().array();
  return norms.pow(alpha).mean();
}

Vector mode_coverage(const Matrix& samples, const Matrix& means, const Vector& stds, double radius_mult) {
  if (samples.cols() == 0) throw UsageError("mode_coverage: no samples");
  if (!(radius_mult > 0.0)) throw UsageError("mode_coverage: radius_mult must be > 0");
  if (means.cols() != stds.size() || means.rows() != samples.rows()) throw UsageError("mode_coverage: shape mismatch");
  Vector out(means.cols());
  for (Eigen::Index j = 0; j < means.cols(); ++j) {
    const double r = radius_mult * stds[j];
    const auto inside = ((samples.colwise() - means.col(j)).colwise().squaredNorm().array() <= r * r).count();
    out[j] = static_cast<double>(inside) / static_cast<double>(samples.cols());
  }
  return out;
}

}  // namespace sifg::metrics
