#pragma once

#include "ragicl/linalg.hpp"

#include <cstdint>
#include <random>

namespace ragicl {

std::uint64_t splitmix64(std::uint64_t x);

// Counter-based stream derivation: the seed for item `index` depends only on
// (master, index), so parallel generation is order independent.
std::uint64_t stream_seed(std::uint64_t master, std::uint64_t index);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  double normal() { return normal_(engine_); }
  double uniform(double lo, double hi);
  std::uint64_t below(std::uint64_t n);

  Mat normal_matrix(Eigen::Index rows, Eigen::Index cols, double sigma = 1.0);
  Mat uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace ragicl
