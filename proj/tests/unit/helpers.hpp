#pragma once

#include <cmath>
#include <functional>

#include "sifg/nn.hpp"
#include "sifg/rng.hpp"

namespace testing {

inline sifg::Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0) {
  sifg::rng::Stream s(seed, sifg::rng::Purpose::test);
  sifg::Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = scale * s.normal();
  }
  return m;
}

inline sifg::Vector random_vector(Eigen::Index n, std::uint64_t seed, double scale = 1.0) {
  return random_matrix(n, 1, seed, scale).col(0);
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Largest relative error between the analytic gradient and central finite
/// differences of loss over the flat parameter vector.
inline double max_fd_error(const sifg::nn::ScoreNet& net, const sifg::Vector& analytic,
                           const std::function<double(const sifg::nn::ScoreNet&)>& loss, double step = 1e-5) {
  sifg::nn::ScoreNet probe = net;
  const sifg::Vector base = net.params.flatten();
  double worst = 0.0;
  for (Eigen::Index k = 0; k < base.size(); ++k) {
    sifg::Vector p = base;
    p[k] = base[k] + step;
    probe.params.assign_flat(p);
    const double up = loss(probe);
    p[k] = base[k] - step;
    probe.params.assign_flat(p);
    const double down = loss(probe);
    const double fd = (up - down) / (2.0 * step);
    if (std::abs(analytic[k]) > 1e-8) worst = std::max(worst, rel_err(analytic[k], fd));
  }
  return worst;
}

}  // namespace testing
