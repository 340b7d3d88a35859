#pragma once

#include "ragicl/linalg.hpp"
#include "ragicl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace ragicl::testing {

struct ProbeStats {
  int probes = 0;
  double max_rel = 0.0;
};

// Directional derivative along random Gaussian directions: analytic g.v
// against central differences with step h.
inline ProbeStats probe_gradient(const std::function<double(const Vec&, Vec*)>& f, const Vec& theta, int probes,
                                 std::uint64_t seed, double h = 1e-5) {
  Vec grad = Vec::Zero(theta.size());
  f(theta, &grad);
  Rng rng(seed);
  ProbeStats st;
  for (int p = 0; p < probes; ++p) {
    Vec v = rng.normal_matrix(theta.size(), 1);
    v /= v.norm();
    const double analytic = grad.dot(v);
    const double fd = (f(theta + h * v, nullptr) - f(theta - h * v, nullptr)) / (2.0 * h);
    const double scale = std::max({std::abs(analytic), std::abs(fd), 1e-8});
    st.max_rel = std::max(st.max_rel, std::abs(analytic - fd) / scale);
    ++st.probes;
  }
  return st;
}

}  // namespace ragicl::testing
