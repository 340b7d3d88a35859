#include "ragicl/gd_equivalence.hpp"
#include "ragicl/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ragicl;

namespace {

Context scalar_context() {
  Context c;
  c.x1 = Mat::Constant(1, 1, 1.0);
  c.x2 = Mat::Constant(1, 1, 1.0);
  c.y = Mat::Constant(1, 1, 0.0);
  return c;
}

TaskConfig cfg_for(InterfaceKind kind, int docs = 5) {
  TaskConfig cfg;
  cfg.interface = kind;
  cfg.doc_count = docs;
  if (kind == InterfaceKind::projection_based) cfg.doc_dim = 2;
  return cfg;
}

}  // namespace

TEST(GdEquivalence, LossZeroAtZero) {
  Context c = scalar_context();
  EXPECT_EQ(rag_loss(Mat::Zero(1, 1), Mat::Zero(1, 1), c), 0.0);
}

TEST(GdEquivalence, LossHandExample) {
  EXPECT_EQ(rag_loss(Mat::Constant(1, 1, 2.0), Mat::Constant(1, 1, 1.0), scalar_context()), 4.5);
}

TEST(GdEquivalence, LossRejectsEmptyContext) {
  Context c;
  c.x1 = Mat(0, 1);
  c.x2 = Mat(0, 1);
  c.y = Mat(0, 1);
  EXPECT_THROW(rag_loss(Mat::Zero(1, 1), Mat::Zero(1, 1), c), std::invalid_argument);
}

TEST(GdEquivalence, StepHandExample) {
  const Vec q = Vec::Ones(1);
  const GdStepResult r = gd_step(Mat::Constant(1, 1, 2.0), Mat::Constant(1, 1, 1.0), scalar_context(), 0.1, q, q);
  EXPECT_NEAR(r.dw1(0, 0), -0.3, 1e-15);
  EXPECT_NEAR(r.dw2(0, 0), -0.3, 1e-15);
  EXPECT_NEAR(r.dy_query(0), -0.6, 1e-15);
}

TEST(GdEquivalence, ZeroStepSize) {
  const Task t = sample_task(cfg_for(InterfaceKind::dot_product), 1);
  const GdStepResult r = gd_step(t.teacher.w1 * 0.5, t.teacher.w2, t.context, 0.0, t.query.x1, t.query.x2);
  EXPECT_EQ(r.dw1.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(r.dw2.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(r.dy_query.cwiseAbs().maxCoeff(), 0.0);
}

TEST(GdEquivalence, StepIsMinusEtaGradient) {
  for (auto kind : {InterfaceKind::dot_product, InterfaceKind::projection_based}) {
    const Task t = sample_task(cfg_for(kind), 2);
    Rng rng(3);
    const Mat w1 = rng.normal_matrix(1, t.input_dim());
    const Mat w2 = rng.normal_matrix(1, t.retrieval_dim());
    const double eta = 0.2;
    const GdStepResult r = gd_step(w1, w2, t.context, eta, t.query.x1, t.query.x2);
    const double h = 1e-5;
    auto check = [&](const Mat& w, const Mat& dw, bool first) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) {
        Mat wp = w, wm = w;
        wp(0, j) += h;
        wm(0, j) -= h;
        const double fd = first ? (rag_loss(wp, w2, t.context) - rag_loss(wm, w2, t.context)) / (2 * h)
                                : (rag_loss(w1, wp, t.context) - rag_loss(w1, wm, t.context)) / (2 * h);
        const double analytic = -dw(0, j) / eta;
        EXPECT_LE(std::abs(fd - analytic), 1e-7 * std::max(1.0, std::abs(fd)));
      }
    };
    check(w1, r.dw1, true);
    check(w2, r.dw2, false);
  }
}

TEST(GdEquivalence, ConstructedValueBlock) {
  const TokenLayout layout{2, 2, 1};
  Mat w1(1, 2), w2(1, 2);
  w1 << 0.5, -1.5;
  w2 << 2.0, 3.0;
  const AttentionParams p = construct_lsa(w1, w2, 0.1, 4, layout);
  ASSERT_EQ(p.value.rows(), 5);
  EXPECT_EQ(p.value.topRows(4).cwiseAbs().maxCoeff(), 0.0);
  Vec bottom(5);
  bottom << 0.5, -1.5, 2.0, 3.0, -1.0;
  EXPECT_EQ(p.value.row(4).transpose(), bottom);
  Mat kq = Mat::Identity(5, 5);
  kq(4, 4) = 0.0;
  EXPECT_EQ(p.key, kq);
  EXPECT_EQ(p.query, kq);
  EXPECT_NEAR(p.proj(4, 4), -0.1 / 4, 1e-18);
  EXPECT_EQ(p.proj.topRows(4).cwiseAbs().maxCoeff(), 0.0);
}

TEST(GdEquivalence, ZeroInitZeroTargetsNoUpdate) {
  TaskConfig cfg = cfg_for(InterfaceKind::dot_product);
  cfg.zero_teacher = true;
  const Task t = sample_task(cfg, 4);
  const TokenMatrix in = tokens_of(t);
  const AttentionParams p =
      construct_lsa(Mat::Zero(1, t.input_dim()), Mat::Zero(1, t.retrieval_dim()), 0.3, t.context.size(), in.layout);
  EXPECT_EQ(lsa_forward(p, in).rows, in.rows);
}

TEST(GdEquivalence, ConstructedLayerShiftsQueryByGdStep) {
  double worst = 0.0;
  for (auto kind : {InterfaceKind::dot_product, InterfaceKind::projection_based}) {
    for (int i = 0; i < 100; ++i) {
      const Task t = sample_task(cfg_for(kind, 2 + i % 4), 100 + i);
      Rng rng(200 + i);
      const Mat w1 = rng.normal_matrix(1, t.input_dim(), 0.5);
      const Mat w2 = rng.normal_matrix(1, t.retrieval_dim(), 0.5);
      const double eta = 0.05 + 0.01 * (i % 7);
      const GdStepResult gd = gd_step(w1, w2, t.context, eta, t.query.x1, t.query.x2);
      const TokenMatrix in = tokens_of(t);
      const TokenMatrix out = lsa_forward(construct_lsa(w1, w2, eta, t.context.size(), in.layout), in);
      worst = std::max(worst, (out.query_y() - in.query_y() - gd.dy_query).cwiseAbs().maxCoeff());
      const int y = in.layout.y_offset();
      worst = std::max(worst, (out.rows.leftCols(y) - in.rows.leftCols(y)).cwiseAbs().maxCoeff());
    }
  }
  EXPECT_LE(worst, 1e-12);
}

TEST(GdEquivalence, TrajectoryFirstStepIsGdStep) {
  const Task t = sample_task(cfg_for(InterfaceKind::projection_based), 5);
  Rng rng(6);
  const Mat w1 = rng.normal_matrix(1, t.input_dim());
  const Mat w2 = rng.normal_matrix(1, t.retrieval_dim());
  const GdTrajectory traj = gd_trajectory(w1, w2, t.context, t.query.x1, t.query.x2, 0.1, 1);
  const GdStepResult s = gd_step(w1, w2, t.context, 0.1, t.query.x1, t.query.x2);
  ASSERT_EQ(traj.predictions.size(), 1u);
  const Vec expect = w1 * t.query.x1 + w2 * t.query.x2 + s.dy_query;
  EXPECT_LE((traj.predictions[0] - expect).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LE((traj.w1[1] - (w1 + s.dw1)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GdEquivalence, TrajectoryLossMonotoneBelowCurvatureLimit) {
  const Task t = sample_task(cfg_for(InterfaceKind::projection_based), 7);
  // Loss Hessian on the stacked input z = (x1, x2): Z^T Z / N.
  const int n = t.context.size();
  Mat z(n, t.input_dim() + t.retrieval_dim());
  z << t.context.x1, t.context.x2;
  Eigen::SelfAdjointEigenSolver<Mat> es(z.transpose() * z / n);
  const double l = es.eigenvalues().maxCoeff();
  const double eta = 1.9 / l;
  const GdTrajectory traj = gd_trajectory(Mat::Zero(1, t.input_dim()), Mat::Zero(1, t.retrieval_dim()), t.context,
                                          t.query.x1, t.query.x2, eta, 30);
  double prev = rag_loss(traj.w1[0], traj.w2[0], t.context);
  for (int k = 1; k <= 30; ++k) {
    const double cur = rag_loss(traj.w1[k], traj.w2[k], t.context);
    EXPECT_LE(cur, prev + 1e-12);
    prev = cur;
  }
  // Past 2/L the top mode grows.
  const GdTrajectory bad = gd_trajectory(Mat::Zero(1, t.input_dim()), Mat::Zero(1, t.retrieval_dim()), t.context,
                                         t.query.x1, t.query.x2, 2.5 / l, 60);
  EXPECT_GT(rag_loss(bad.w1[60], bad.w2[60], t.context), rag_loss(bad.w1[0], bad.w2[0], t.context));
}

TEST(GdEquivalence, RefreshedStackTracksTrajectory) {
  for (auto kind : {InterfaceKind::dot_product, InterfaceKind::projection_based}) {
    for (int depth : {2, 5}) {
      double worst = 0.0;
      for (int i = 0; i < 100; ++i) {
        const Task t = sample_task(cfg_for(kind), 300 + i);
        Rng rng(400 + i);
        const Mat w1 = rng.normal_matrix(1, t.input_dim(), 0.5);
        const Mat w2 = rng.normal_matrix(1, t.retrieval_dim(), 0.5);
        const TokenLayout layout = tokens_of(t).layout;
        const auto layers = construct_stack(w1, w2, t.context, 0.1, depth, StackMode::refreshed, layout);
        const auto preds = stack_predictions(layers, t, w1, w2);
        const GdTrajectory traj = gd_trajectory(w1, w2, t.context, t.query.x1, t.query.x2, 0.1, depth);
        ASSERT_EQ(preds.size(), static_cast<std::size_t>(depth));
        for (int k = 0; k < depth; ++k) {
          worst = std::max(worst, (preds[k] - traj.predictions[k]).cwiseAbs().maxCoeff());
        }
      }
      EXPECT_LE(worst, 1e-10) << to_string(kind) << " depth " << depth;
    }
  }
}

TEST(GdEquivalence, FrozenStackOnlyMatchesFirstLayer) {
  const Task t = sample_task(cfg_for(InterfaceKind::dot_product), 8);
  Rng rng(9);
  const Mat w1 = rng.normal_matrix(1, t.input_dim(), 0.5);
  const Mat w2 = rng.normal_matrix(1, t.retrieval_dim(), 0.5);
  const TokenLayout layout = tokens_of(t).layout;
  const auto layers = construct_stack(w1, w2, t.context, 0.3, 3, StackMode::frozen, layout);
  const auto preds = stack_predictions(layers, t, w1, w2);
  const GdTrajectory traj = gd_trajectory(w1, w2, t.context, t.query.x1, t.query.x2, 0.3, 3);
  EXPECT_LE((preds[0] - traj.predictions[0]).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GT((preds[2] - traj.predictions[2]).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(GdEquivalence, LineSearchSingletonGrid) {
  TaskSampler s = [](std::uint64_t i) { return sample_task(cfg_for(InterfaceKind::dot_product), i); };
  const LineSearchResult r = line_search_eta(s, {0.37}, 50);
  EXPECT_EQ(r.eta, 0.37);
  ASSERT_EQ(r.losses.size(), 1u);
}

TEST(GdEquivalence, LineSearchNearClosedFormOptimum) {
  TaskSampler s = [](std::uint64_t i) { return sample_task(cfg_for(InterfaceKind::dot_product), i); };
  const double best = optimal_one_step_eta(s, 500);
  const LineSearchResult r = line_search_eta(s, log_grid(best / 4, best * 4, 41), 500);
  EXPECT_NEAR(std::log(r.eta), std::log(best), std::log(4.0) / 20 + 1e-9);
  for (std::size_t i = 0; i < r.losses.size(); ++i) EXPECT_GE(r.losses[i], r.losses[r.index]);
}

TEST(GdEquivalence, DefaultGrid) {
  const auto g = default_eta_grid();
  ASSERT_EQ(g.size(), 25u);
  EXPECT_NEAR(g.front(), 1e-4, 1e-18);
  EXPECT_NEAR(g.back(), 10.0, 1e-12);
}

TEST(GdEquivalence, ReferenceMatchesOneStep) {
  const Task t = sample_task(cfg_for(InterfaceKind::dot_product), 10);
  const GdReference ref(0.4, 1);
  const Mat z1 = Mat::Zero(1, t.input_dim());
  const Mat z2 = Mat::Zero(1, t.retrieval_dim());
  const GdStepResult s = gd_step(z1, z2, t.context, 0.4, t.query.x1, t.query.x2);
  EXPECT_LE((ref.predict(t) - s.dy_query).cwiseAbs().maxCoeff(), 1e-14);
  // Shared test input: sensitivity = dW1 + dW2.
  EXPECT_LE((ref.sensitivity(t) - (s.dw1 + s.dw2)).cwiseAbs().maxCoeff(), 1e-14);
}
