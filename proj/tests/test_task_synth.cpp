#include "ragicl/rng.hpp"
#include "ragicl/task_synth.hpp"

#include <gtest/gtest.h>

#include <stdexcept>

using namespace ragicl;

namespace {

TaskConfig small_cfg(InterfaceKind kind) {
  TaskConfig cfg;
  cfg.n_context = 10;
  cfg.input_dim = 10;
  cfg.doc_count = 5;
  cfg.interface = kind;
  return cfg;
}

}  // namespace

TEST(TaskSynth, DefaultTaskShapeAndRange) {
  const Task t = sample_task(small_cfg(InterfaceKind::dot_product), 7);
  ASSERT_EQ(t.context.size(), 10);
  EXPECT_EQ(t.input_dim(), 10);
  EXPECT_EQ(t.output_dim(), 1);
  EXPECT_LE(t.context.x1.maxCoeff(), 1.0);
  EXPECT_GE(t.context.x1.minCoeff(), -1.0);
  EXPECT_EQ(t.documents.docs.rows(), 5);
}

TEST(TaskSynth, ZeroTeacherGivesZeroTargets) {
  for (auto kind : {InterfaceKind::dot_product, InterfaceKind::projection_based}) {
    TaskConfig cfg = small_cfg(kind);
    cfg.zero_teacher = true;
    const Task t = sample_task(cfg, 3);
    EXPECT_EQ(t.context.y.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(t.query.y.cwiseAbs().maxCoeff(), 0.0);
  }
}

TEST(TaskSynth, SecondMomentOfSingleDocument) {
  Mat d(1, 2);
  d << 1, 0;
  Mat expect(2, 2);
  expect << 1, 0, 0, 0;
  EXPECT_EQ(second_moment(d), expect);
}

TEST(TaskSynth, SecondMomentIsSymmetricPsd) {
  const Task t = sample_task(small_cfg(InterfaceKind::dot_product), 11);
  const Mat& dm = t.documents.second_moment;
  EXPECT_LE((dm - dm.transpose()).cwiseAbs().maxCoeff(), 0.0);
  Eigen::SelfAdjointEigenSolver<Mat> es(dm);
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-12);
}

TEST(TaskSynth, NullRetrievalChannel) {
  RetrievalInterface ri;
  ri.kind = InterfaceKind::dot_product;
  ri.w_z = Mat::Zero(1, 3);
  ri.m = Mat::Identity(3, 3);
  const DocumentSet docs = make_document_set(Mat::Identity(3, 3));
  const Mat w1 = Mat::Ones(1, 3);
  EXPECT_EQ(effective_retrieval_weight(ri, docs, w1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(TaskSynth, DotProductHandExample) {
  RetrievalInterface ri;
  ri.kind = InterfaceKind::dot_product;
  ri.w_z = Mat::Identity(2, 2);
  ri.m = Mat::Identity(2, 2);
  Mat d(1, 2);
  d << 1, 0;
  const DocumentSet docs = make_document_set(d);
  const Mat w1 = Mat::Zero(2, 2);
  const Mat w2 = effective_retrieval_weight(ri, docs, w1);
  Vec x(2);
  x << 2, 3;
  const Vec y = linear_predict(w1, w2, x, x);
  EXPECT_EQ(y(0), 2.0);
  EXPECT_EQ(y(1), 0.0);
}

TEST(TaskSynth, IdentityProjectionCopiesW1) {
  RetrievalInterface ri;
  ri.kind = InterfaceKind::projection_based;
  ri.w_d = Mat::Identity(4, 4);
  Rng rng(1);
  const Mat w1 = rng.normal_matrix(1, 4);
  EXPECT_EQ(effective_retrieval_weight(ri, make_document_set(Mat::Zero(1, 4)), w1), w1);
}

TEST(TaskSynth, EffectiveWeightsMatchTeacher) {
  for (auto kind : {InterfaceKind::dot_product, InterfaceKind::projection_based}) {
    const Task t = sample_task(small_cfg(kind), 21);
    const EffectiveWeights w = effective_weights(t);
    EXPECT_LE((w.w1 - t.teacher.w1).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_LE((w.w2 - t.teacher.w2).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(TaskSynth, TokenLayoutSingleExample) {
  Task t;
  t.context.x1 = Mat::Constant(1, 1, 1.0);
  t.context.x2 = Mat::Constant(1, 1, 1.0);
  t.context.y = Mat::Constant(1, 1, 2.0);
  t.query.x1 = Vec::Constant(1, 0.25);
  t.query.x2 = Vec::Constant(1, -0.5);
  t.query.y = Vec::Constant(1, 9.0);
  const TokenMatrix tm = tokens_of(t);
  Mat expect(2, 3);
  expect << 1, 1, 2, 0.25, -0.5, 0;
  EXPECT_EQ(tm.rows, expect);
}

TEST(TaskSynth, DotProductTokensShareInputBlocks) {
  const Task t = sample_task(small_cfg(InterfaceKind::dot_product), 5);
  const TokenMatrix tm = tokens_of(t);
  const int d = tm.layout.d1;
  ASSERT_EQ(tm.layout.d2, d);
  EXPECT_EQ(tm.rows.leftCols(d), tm.rows.middleCols(d, d));
}

TEST(TaskSynth, TargetsRecomputedFromTeacher) {
  for (auto kind : {InterfaceKind::dot_product, InterfaceKind::projection_based}) {
    const Task t = sample_task(small_cfg(kind), 9);
    for (int i = 0; i < t.context.size(); ++i) {
      const Vec y = t.teacher.w1 * t.context.x1.row(i).transpose() + t.teacher.w2 * t.context.x2.row(i).transpose();
      EXPECT_NEAR((y - t.context.y.row(i).transpose()).norm(), 0.0, 1e-14);
    }
  }
}

TEST(TaskSynth, SeedDeterminism) {
  const TaskConfig cfg = small_cfg(InterfaceKind::projection_based);
  const Task a = sample_task(cfg, 42);
  const Task b = sample_task(cfg, 42);
  EXPECT_EQ(tokens_of(a).rows, tokens_of(b).rows);
  const Task c = sample_task(cfg, 43);
  EXPECT_NE(tokens_of(a).rows, tokens_of(c).rows);
}

TEST(TaskSynth, QueryAlphaScalesQueryOnly) {
  TaskConfig cfg = small_cfg(InterfaceKind::dot_product);
  cfg.query_alpha = 2.0;
  double qmax = 0.0;
  for (int s = 0; s < 50; ++s) {
    const Task t = sample_task(cfg, s);
    EXPECT_LE(t.context.x1.cwiseAbs().maxCoeff(), 1.0);
    qmax = std::max(qmax, t.query.x1.cwiseAbs().maxCoeff());
  }
  EXPECT_GT(qmax, 1.0);
  EXPECT_LE(qmax, 2.0);
}

TEST(TaskSynth, RejectsBadConfig) {
  TaskConfig cfg;
  cfg.n_context = 0;
  EXPECT_THROW(sample_task(cfg, 0), std::invalid_argument);
  EXPECT_EQ(parse_interface("dot"), InterfaceKind::dot_product);
  EXPECT_EQ(parse_interface("projection"), InterfaceKind::projection_based);
  EXPECT_THROW(parse_interface("bogus"), std::invalid_argument);
}
