#include "ragicl/alignment.hpp"
#include "ragicl/gd_equivalence.hpp"
#include "ragicl/rng.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace ragicl;

namespace {

// yhat = W x1 at the query.
class LinearModel : public QueryModel {
 public:
  explicit LinearModel(Mat w) : w_(std::move(w)) {}
  Vec predict(const Task& t) const override { return w_ * t.query.x1; }
  Mat sensitivity(const Task&) const override { return w_; }
  std::string name() const override { return "linear"; }

 private:
  Mat w_;
};

Task query_task(Vec x, Vec y) {
  Task t;
  t.retrieval.kind = InterfaceKind::projection_based;
  t.context.x1 = Mat::Zero(1, x.size());
  t.context.x2 = Mat::Zero(1, 1);
  t.context.y = Mat::Zero(1, y.size());
  t.query.x1 = std::move(x);
  t.query.x2 = Vec::Zero(1);
  t.query.y = std::move(y);
  return t;
}

std::vector<Task> random_tasks(int n, std::uint64_t master) {
  TaskConfig cfg;
  std::vector<Task> out;
  for (int i = 0; i < n; ++i) out.push_back(sample_task(cfg, stream_seed(master, i)));
  return out;
}

}  // namespace

TEST(Alignment, LinearSensitivityIsWeight) {
  Mat w(1, 3);
  w << 1, -2, 0.5;
  const LinearModel m(w);
  Vec x(3);
  x << 0.1, 0.2, 0.3;
  const Task t = query_task(x, Vec::Zero(1));
  EXPECT_EQ(m.sensitivity(t), w);
  EXPECT_LE((finite_difference_sensitivity(m, t) - w).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Alignment, SelfComparison) {
  const GdReference gd(0.3, 1);
  const AlignmentReport r = compare(gd, gd, random_tasks(50, 1));
  EXPECT_EQ(r.pred_diff, 0.0);
  EXPECT_EQ(r.sens_l2, 0.0);
  EXPECT_NEAR(r.sens_cos, 1.0, 1e-15);
  EXPECT_EQ(r.loss_diff, 0.0);
}

TEST(Alignment, HandComputedSingleTask) {
  Mat wa(1, 2), wb(1, 2);
  wa << 1, 0;
  wb << 0, 1;
  Vec x(2);
  x << 1, 2;
  const AlignmentReport r = compare(LinearModel(wa), LinearModel(wb), {query_task(x, Vec::Zero(1))});
  EXPECT_EQ(r.pred_diff, 1.0);
  EXPECT_EQ(r.sens_cos, 0.0);
  EXPECT_NEAR(r.sens_l2, std::sqrt(2.0), 1e-15);
  EXPECT_EQ(r.loss_a, 1.0);
  EXPECT_EQ(r.loss_b, 4.0);
  EXPECT_EQ(r.loss_diff, -3.0);
  EXPECT_NEAR(r.relative_loss_gap(), 0.75, 1e-15);
  EXPECT_EQ(r.model_diff(), r.sens_l2);
}

TEST(Alignment, SymmetryAndAntisymmetry) {
  const GdReference a(0.2, 1), b(0.5, 2);
  const auto tasks = random_tasks(100, 2);
  const AlignmentReport ab = compare(a, b, tasks);
  const AlignmentReport ba = compare(b, a, tasks);
  EXPECT_EQ(ab.pred_diff, ba.pred_diff);
  EXPECT_EQ(ab.sens_l2, ba.sens_l2);
  EXPECT_EQ(ab.sens_cos, ba.sens_cos);
  EXPECT_EQ(ab.loss_diff, -ba.loss_diff);
}

TEST(Alignment, CosineScaleInvariant) {
  Rng rng(3);
  const Mat a = rng.normal_matrix(2, 5);
  const Mat b = rng.normal_matrix(2, 5);
  EXPECT_NEAR(sensitivity_cosine(a, b), sensitivity_cosine(3.5 * a, 0.01 * b), 1e-15);
  EXPECT_NEAR(sensitivity_cosine(a, -b), -sensitivity_cosine(a, b), 1e-15);
  EXPECT_EQ(sensitivity_cosine(Mat::Zero(2, 5), Mat::Zero(2, 5)), 1.0);
  EXPECT_EQ(sensitivity_cosine(a, Mat::Zero(2, 5)), 0.0);
}

TEST(Alignment, PermutationInvariantMeans) {
  const GdReference a(0.2, 1), b(0.6, 1);
  auto tasks = random_tasks(1000, 4);
  const AlignmentReport r1 = compare(a, b, tasks);
  std::mt19937_64 eng(5);
  std::shuffle(tasks.begin(), tasks.end(), eng);
  const AlignmentReport r2 = compare(a, b, tasks, 1);
  EXPECT_NEAR(r1.pred_diff, r2.pred_diff, 1e-12);
  EXPECT_NEAR(r1.sens_cos, r2.sens_cos, 1e-12);
  EXPECT_NEAR(r1.sens_l2, r2.sens_l2, 1e-12);
  EXPECT_NEAR(r1.loss_diff, r2.loss_diff, 1e-12);
}

TEST(Alignment, CompensatedSum) {
  CompensatedSum s;
  s.add(1e16);
  s.add(1.0);
  s.add(-1e16);
  EXPECT_EQ(s.sum(), 1.0);
}

TEST(Alignment, EmptyTaskSetThrows) {
  const GdReference a(0.2, 1);
  EXPECT_THROW(compare(a, a, {}), std::invalid_argument);
}

TEST(Alignment, GdReferenceSensitivityMatchesFiniteDifferences) {
  for (int steps : {1, 3}) {
    const GdReference gd(0.3, steps);
    for (const Task& t : random_tasks(10, 6)) {
      const Mat a = gd.sensitivity(t);
      EXPECT_LE((a - finite_difference_sensitivity(gd, t)).norm(), 1e-6 * std::max(1.0, a.norm()));
    }
  }
}
