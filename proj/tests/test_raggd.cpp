#include "ragicl/autodiff.hpp"
#include "ragicl/raggd.hpp"
#include "ragicl/rng.hpp"

#include "grad_check.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ragicl;
using ragicl::testing::probe_gradient;

namespace {

struct Toy {
  ToyConfig cfg;
  ToyGenerator gen;
  ToyFamily family;
  LowRankUpdate w0;
};

Toy make_toy(std::uint64_t seed) {
  Toy t;
  Rng g(seed), f(seed + 1), w(seed + 2);
  t.gen = ToyGenerator::build(t.cfg, g);
  t.family = ToyFamily::sample(f);
  t.w0 = LowRankUpdate::zeros(t.cfg.depth, t.cfg.width, t.cfg.rank);
  t.w0.set_flat(w.normal_matrix(t.w0.size(), 1, 0.1));
  return t;
}

std::vector<Mat> scaled(const std::vector<Mat>& blocks, double s) {
  std::vector<Mat> out;
  for (const auto& b : blocks) out.push_back(s * b);
  return out;
}

}  // namespace

TEST(Matching, IdenticalIsZero) {
  Rng rng(1);
  const std::vector<Mat> t{rng.normal_matrix(4, 4), rng.normal_matrix(4, 4)};
  EXPECT_NEAR(matching_loss(t, t, 0.1), 0.0, 1e-15);
}

TEST(Matching, DoubledPredictionHandValue) {
  Rng rng(2);
  const std::vector<Mat> t{rng.normal_matrix(3, 5)};
  EXPECT_NEAR(matching_loss(scaled(t, 2.0), t, 0.1), 0.1 * std::log(2.0), 1e-14);
}

TEST(Matching, ZeroTargetBlockPenalty) {
  Rng rng(3);
  const std::vector<Mat> p{rng.normal_matrix(2, 2), rng.normal_matrix(2, 2)};
  std::vector<Mat> t = p;
  t[1].setZero();
  std::vector<Mat> grads;
  EXPECT_NEAR(matching_loss(p, t, 0.1, 0.7, &grads), 0.7, 1e-15);
  EXPECT_EQ(grads[1].cwiseAbs().maxCoeff(), 0.0);
}

TEST(Matching, GradientMatchesCentralDifferences) {
  Rng rng(4);
  const std::vector<Mat> target{rng.normal_matrix(3, 3), rng.normal_matrix(3, 3)};
  const std::vector<Mat> p0{rng.normal_matrix(3, 3), rng.normal_matrix(3, 3)};
  auto f = [&](const Vec& theta, Vec* g) {
    std::vector<Mat> p{theta.head(9).reshaped(3, 3), theta.tail(9).reshaped(3, 3)};
    std::vector<Mat> grads;
    const double l = matching_loss(p, target, 0.1, 1.0, g ? &grads : nullptr);
    if (g) {
      g->head(9) += grads[0].reshaped();
      g->tail(9) += grads[1].reshaped();
    }
    return l;
  };
  Vec theta(18);
  theta << p0[0].reshaped(), p0[1].reshaped();
  EXPECT_LE(probe_gradient(f, theta, 50, 5).max_rel, 1e-5);
}

TEST(LowRank, DenseRankBoundAndFlatRoundTrip) {
  Rng rng(6);
  LowRankUpdate w = LowRankUpdate::zeros(2, 8, 3);
  const Vec f = rng.normal_matrix(w.size(), 1);
  w.set_flat(f);
  EXPECT_EQ(w.flat(), f);
  for (const Mat& d : w.dense()) {
    Eigen::JacobiSVD<Mat> svd(d);
    EXPECT_LE(svd.singularValues()(3), 1e-10 * svd.singularValues()(0));
  }
}

TEST(ToyGenerator, InterfaceGradientMatchesCentralDifferences) {
  Toy t = make_toy(10);
  const ToyContext ctx = t.family.sample_context(t.cfg, false, 4, 11);
  auto f = [&](const Vec& theta, Vec* g) {
    LowRankUpdate w = t.w0;
    w.set_flat(theta);
    return t.gen.loss_grad(ctx.support, w, g);
  };
  EXPECT_LE(probe_gradient(f, t.w0.flat(), 50, 12).max_rel, 1e-5);
}

TEST(ToyGenerator, LossGradAgreesWithMeanLoss) {
  Toy t = make_toy(13);
  const ToyContext ctx = t.family.sample_context(t.cfg, false, 4, 14);
  EXPECT_NEAR(t.gen.loss_grad(ctx.support, t.w0, nullptr), t.gen.mean_loss(ctx.support, t.gen.effective(t.w0)),
              1e-12);
}

TEST(ToyGenerator, BackboneFrozen) {
  Toy t = make_toy(15);
  const auto before = t.gen.backbone_hash();
  const ToyContext ctx = t.family.sample_context(t.cfg, false, 4, 16);
  gd_targets(t.gen, ctx.support, t.w0, 0.01, {1, 5});
  Rng rng(17);
  Predictor p(t.cfg, rng);
  deploy(t.gen, t.w0, p, ctx.support, ctx.queries);
  EXPECT_EQ(t.gen.backbone_hash(), before);
}

TEST(GdTarget, ZeroStepsZeroUpdate) {
  Toy t = make_toy(18);
  const ToyContext ctx = t.family.sample_context(t.cfg, false, 4, 19);
  const LowRankUpdate w = gd_adapt(t.gen, ctx.support, t.w0, 0.01, 0);
  EXPECT_EQ(w.flat(), t.w0.flat());
  for (const Mat& d : dense_difference(w, t.w0)) EXPECT_EQ(d.cwiseAbs().maxCoeff(), 0.0);
}

TEST(GdTarget, OneStepIsMinusEtaGradient) {
  Toy t = make_toy(20);
  const ToyContext ctx = t.family.sample_context(t.cfg, false, 4, 21);
  Vec g = Vec::Zero(t.w0.size());
  t.gen.loss_grad(ctx.support, t.w0, &g);
  const LowRankUpdate w = gd_adapt(t.gen, ctx.support, t.w0, 0.01, 1);
  EXPECT_LE((w.flat() - t.w0.flat() + 0.01 * g).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GdTarget, SingleTrajectoryMatchesSeparateRuns) {
  Toy t = make_toy(22);
  const ToyContext ctx = t.family.sample_context(t.cfg, false, 4, 23);
  const auto targets = gd_targets(t.gen, ctx.support, t.w0, 0.01, {1, 5, 10});
  const auto direct = dense_difference(gd_adapt(t.gen, ctx.support, t.w0, 0.01, 5), t.w0);
  for (std::size_t b = 0; b < direct.size(); ++b) {
    EXPECT_LE((targets[1][b] - direct[b]).cwiseAbs().maxCoeff(), 1e-14);
  }
}

TEST(Predictor, GradientMatchesCentralDifferences) {
  Toy t = make_toy(24);
  t.cfg.hidden = 16;
  t.cfg.trunk_out = 8;
  Rng rng(25);
  Predictor p(t.cfg, rng);
  std::vector<Vec> enc;
  std::vector<std::vector<Mat>> tgt;
  for (int i = 0; i < 4; ++i) {
    const ToyContext ctx = t.family.sample_context(t.cfg, false, 1, 26 + i);
    enc.push_back(t.gen.encode(ctx.support, t.w0));
    tgt.push_back(gd_targets(t.gen, ctx.support, t.w0, 0.01, {1})[0]);
  }
  std::vector<const Vec*> ep;
  std::vector<const std::vector<Mat>*> tp;
  for (int i = 0; i < 4; ++i) {
    ep.push_back(&enc[i]);
    tp.push_back(&tgt[i]);
  }
  auto f = [&](const Vec& theta, Vec* g) {
    p.set_flat(theta);
    Vec local;
    const double l = p.batch_loss_grad(ep, tp, g ? &local : nullptr);
    if (g) *g += local;
    return l;
  };
  // The relu trunk has kinks; a small step keeps them out of the interval.
  EXPECT_LE(probe_gradient(f, p.get_flat(), 50, 27, 1e-7).max_rel, 1e-5);
}

TEST(Predictor, MemorizesConstantContext) {
  Toy t = make_toy(28);
  t.cfg.epochs = 600;
  t.cfg.batch = 8;
  const ToyContext ctx = t.family.sample_context(t.cfg, false, 1, 29);
  PredictorSample s{t.gen.encode(ctx.support, t.w0), gd_targets(t.gen, ctx.support, t.w0, 0.01, {5})[0]};
  std::vector<PredictorSample> data(16, s);
  Rng rng(30);
  Predictor p(t.cfg, rng);
  const double before = mean_matching_loss(p, data, t.cfg);
  train_predictor(p, data, t.cfg, 31);
  const double after = mean_matching_loss(p, data, t.cfg);
  EXPECT_LT(after, 0.02);
  EXPECT_LT(after, before / 20);
}

TEST(Predictor, DetachedFromTargets) {
  Toy t = make_toy(32);
  const ToyContext ctx = t.family.sample_context(t.cfg, false, 1, 33);
  const auto a = gd_targets(t.gen, ctx.support, t.w0, 0.01, {5});
  Rng rng(34);
  Predictor p(t.cfg, rng);
  p.set_flat(p.get_flat() * 3.0);
  const auto b = gd_targets(t.gen, ctx.support, t.w0, 0.01, {5});
  for (std::size_t i = 0; i < a[0].size(); ++i) EXPECT_EQ(a[0][i], b[0][i]);
}

TEST(Deploy, ZeroPredictorIsBaseInterface) {
  Toy t = make_toy(35);
  Rng rng(36);
  Predictor p(t.cfg, rng);
  p.set_flat(Vec::Zero(p.param_count()));
  const ToyContext ctx = t.family.sample_context(t.cfg, false, 6, 37);
  const auto got = deploy(t.gen, t.w0, p, ctx.support, ctx.queries);
  const auto eff = t.gen.effective(t.w0);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i], t.gen.predict(ctx.queries[i], eff));
  const LowRankUpdate out = p.forward(Vec::Ones(t.cfg.width));
  EXPECT_EQ(out.layers, t.w0.layers);
  EXPECT_EQ(out.rank, t.w0.rank);
  EXPECT_EQ(out.size(), t.w0.size());
}

TEST(Deploy, NoBackwardPasses) {
  Toy t = make_toy(38);
  Rng rng(39);
  const Predictor p(t.cfg, rng);
  const ToyContext ctx = t.family.sample_context(t.cfg, false, 6, 40);
  const auto before = ad::Tape::backward_count();
  deploy(t.gen, t.w0, p, ctx.support, ctx.queries);
  evaluate_amortized(t.gen, t.w0, p, {ctx}, 5);
  EXPECT_EQ(ad::Tape::backward_count(), before);
  evaluate_tt_sgd(t.gen, t.w0, {ctx}, 0.01, 2);
  EXPECT_GT(ad::Tape::backward_count(), before);
}

TEST(Deploy, OracleUpdateMatchesAdaptedInterface) {
  Toy t = make_toy(41);
  const ToyContext ctx = t.family.sample_context(t.cfg, false, 6, 42);
  const LowRankUpdate adapted = gd_adapt(t.gen, ctx.support, t.w0, 0.01, 5);
  const auto target = dense_difference(adapted, t.w0);
  std::vector<Mat> composed = t.w0.dense();
  for (std::size_t b = 0; b < composed.size(); ++b) composed[b] += target[b];
  const auto a = t.gen.effective(composed);
  const auto b = t.gen.effective(adapted);
  for (const auto& q : ctx.queries) EXPECT_NEAR(t.gen.predict(q, a), t.gen.predict(q, b), 1e-12);
}

TEST(Suite, ZeroStepTtSgdIsBase) {
  Toy t = make_toy(43);
  std::vector<ToyContext> ctxs;
  for (int i = 0; i < 5; ++i) ctxs.push_back(t.family.sample_context(t.cfg, i % 2 == 1, 4, 44 + i));
  ctxs.resize(3);
  const SuiteRow base = evaluate_base(t.gen, t.w0, ctxs);
  const SuiteRow tt = evaluate_tt_sgd(t.gen, t.w0, ctxs, 0.01, 0);
  EXPECT_EQ(base.eval_loss, tt.eval_loss);
  EXPECT_THROW(evaluate_base(t.gen, t.w0, {}), std::invalid_argument);
}

TEST(Suite, CostOrdering) {
  Toy t = make_toy(49);
  Rng rng(50);
  const Predictor p(t.cfg, rng);
  const std::vector<ToyContext> ctxs{t.family.sample_context(t.cfg, false, 8, 51)};
  const SuiteRow am = evaluate_amortized(t.gen, t.w0, p, ctxs, 5);
  const SuiteRow tt = evaluate_tt_sgd(t.gen, t.w0, ctxs, 0.01, 5);
  EXPECT_LT(am.flops_per_query, tt.flops_per_query);
  EXPECT_EQ(am.method, "amortized");
  EXPECT_EQ(tt.k, 5);
}

TEST(Family, TransferContextsFlagged) {
  ToyConfig cfg;
  Rng rng(52);
  const ToyFamily fam = ToyFamily::sample(rng);
  const ToyContext a = fam.sample_context(cfg, true, 3, 53);
  EXPECT_TRUE(a.transfer);
  EXPECT_EQ(a.support.size(), 3u);
  const ToyContext b = fam.sample_context(cfg, false, 3, 53);
  EXPECT_FALSE(b.transfer);
  const double angle_a = std::atan2(a.beta(1), a.beta(0));
  const double angle_b = std::atan2(b.beta(1), b.beta(0));
  EXPECT_NE(angle_a, angle_b);
}
