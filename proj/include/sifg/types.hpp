#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace sifg {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Point sets are stored column-major as d x n: column i is point i, so the raw
// buffer of a Matrix is already particle-contiguous.

/// Invalid hyperparameters, shapes, or config documents.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller violated an operation precondition (empty batch, k >= n, ...).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite or singular intermediate values (e.g. a singular unmixing matrix).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace sifg
