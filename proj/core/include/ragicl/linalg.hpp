#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>

namespace ragicl {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Neumaier-compensated running sum. Means over 10^4 tasks go through this so
// that reordering the task set changes the result by at most a few ulps.
class CompensatedSum {
 public:
  void add(double v) {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) {
      comp_ += (sum_ - t) + v;
    } else {
      comp_ += (v - t) + sum_;
    }
    sum_ = t;
    ++count_;
  }
  double sum() const { return sum_ + comp_; }
  double mean() const { return count_ == 0 ? 0.0 : sum() / static_cast<double>(count_); }
  std::size_t count() const { return count_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
  std::size_t count_ = 0;
};

inline double frobenius_dot(const Mat& a, const Mat& b) { return (a.array() * b.array()).sum(); }

}  // namespace ragicl
