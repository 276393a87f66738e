#pragma once

#include <array>
#include <cstdint>

#include "sifg/types.hpp"

namespace sifg::rng {

/// Philox4x32-10 block function (Salmon et al., SC'11).
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key);

/// What a stream is used for. Each purpose gets an independent key so that
/// adding a new draw site never shifts the values seen by an existing one.
enum class Purpose : std::uint32_t {
  perturbation = 1,
  final_perturbation = 2,
  minibatch = 3,
  net_init = 4,
  particle_init = 5,
  ground_truth = 6,
  target_setup = 7,
  dataset = 8,
  metrics = 9,
  test = 100,
};

std::uint64_t splitmix64(std::uint64_t x);

/// Counter-based stream keyed by (seed, purpose, iteration, index).
///
/// Streams with distinct keys are independent and can be created in any order
/// on any thread; a stream's output depends only on its key.
class Stream {
 public:
  Stream(std::uint64_t seed, Purpose purpose, std::uint64_t iteration = 0,
         std::uint64_t index = 0);

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1).
  double uniform();
  double normal();
  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);

  /// Fills a vector with i.i.d. N(0, 1) draws.
  Vector normal_vector(Eigen::Index n);

 private:
  void refill();

  std::array<std::uint32_t, 2> key_{};
  std::array<std::uint32_t, 4> counter_{};
  std::array<std::uint32_t, 4> block_{};
  int used_ = 4;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// d x n matrix of N(0, scale^2) draws; column i uses stream (seed, purpose,
/// iteration, i), so the result is independent of evaluation order.
Matrix gaussian_columns(std::uint64_t seed, Purpose purpose, std::uint64_t iteration,
                        Eigen::Index d, Eigen::Index n, double scale = 1.0);

}  // namespace sifg::rng
