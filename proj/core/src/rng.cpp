#include "ragicl/rng.hpp"

#include <limits>

namespace ragicl {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(splitmix64(master) ^ (index * 0xd1b54a32d192ed03ULL + 0x8cb92ba72f3d8dd7ULL));
}

double Rng::uniform(double lo, double hi) {
  // 53 random mantissa bits; stable across standard libraries.
  const double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

std::uint64_t Rng::below(std::uint64_t n) {
  // Rejection sampling keeps the draw identical across standard libraries.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % n;
}

Mat Rng::normal_matrix(Eigen::Index rows, Eigen::Index cols, double sigma) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = sigma * normal();
  }
  return m;
}

Mat Rng::uniform_matrix(Eigen::Index rows, Eigen::Index cols, double lo, double hi) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = uniform(lo, hi);
  }
  return m;
}

}  // namespace ragicl
