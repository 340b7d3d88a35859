#include "ragicl/autodiff.hpp"
#include "ragicl/lsa_model.hpp"
#include "ragicl/rng.hpp"
#include "ragicl/trainer.hpp"

#include "grad_check.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace ragicl;
using ragicl::testing::probe_gradient;

namespace {

TaskConfig dot_cfg(int docs = 5) {
  TaskConfig cfg;
  cfg.doc_count = docs;
  return cfg;
}

TaskSampler sampler_for(const TaskConfig& cfg, std::uint64_t master) {
  return [cfg, master](std::uint64_t i) { return sample_task(cfg, stream_seed(master, i)); };
}

double model_rel_error(LsaModel model, const std::vector<Task>& tasks, std::uint64_t seed, double h = 1e-5,
                       GradMode mode = GradMode::closed_form) {
  auto f = [&](const Vec& theta, Vec* g) {
    model.set_flat(theta);
    return batch_loss_grad(model, tasks, g, mode, 1);
  };
  return probe_gradient(f, model.get_flat(), 50, seed, h).max_rel;
}

std::vector<Task> tasks_of(const TaskConfig& cfg, int n, std::uint64_t master) {
  std::vector<Task> out;
  for (int i = 0; i < n; ++i) out.push_back(sample_task(cfg, stream_seed(master, i)));
  return out;
}

LsaModel make_model(const TaskConfig& cfg, LsaModelConfig mc, std::uint64_t seed) {
  Rng rng(seed);
  return LsaModel::random(tokens_of(sample_task(cfg, 0)).layout, mc, rng);
}

}  // namespace

TEST(Tape, ScalarModelHandGradient) {
  ad::Tape tape;
  ad::Var w = tape.leaf(Mat::Constant(1, 1, 1.0));
  ad::Var x = tape.constant(Mat::Constant(1, 1, 2.0));
  ad::Var y = tape.constant(Mat::Constant(1, 1, 0.0));
  ad::Var loss = ad::squared_norm(w * x - y);
  tape.backward(loss);
  EXPECT_EQ(loss.value()(0, 0), 4.0);
  EXPECT_EQ(w.grad()(0, 0), 8.0);
}

TEST(Tape, MatrixOpsMatchCentralDifferences) {
  Rng rng(1);
  const Mat a0 = rng.normal_matrix(3, 4);
  const Mat b0 = rng.normal_matrix(4, 2);
  auto f = [&](const Vec& theta, Vec* g) {
    ad::Tape tape;
    ad::Var a = tape.leaf(Eigen::Map<const Mat>(theta.data(), 3, 4));
    ad::Var b = tape.constant(b0);
    ad::Var c = ad::tanh(a * b);
    ad::Var d = ad::hconcat({c, ad::relu(ad::transpose(ad::block(a, 0, 0, 2, 3)))});
    ad::Var e = ad::log(ad::squared_norm(d) + ad::sqrt(ad::sum(ad::hadamard(a, a))));
    if (g != nullptr) {
      tape.backward(e);
      *g += Eigen::Map<const Vec>(a.grad().data(), 12);
    }
    return e.value()(0, 0);
  };
  Vec theta = Eigen::Map<const Vec>(a0.data(), 12);
  EXPECT_LE(probe_gradient(f, theta, 50, 2).max_rel, 1e-6);
}

TEST(Tape, ConstantsReceiveNoGradient) {
  ad::Tape tape;
  ad::Var c = tape.constant(Mat::Ones(2, 2));
  ad::Var w = tape.leaf(Mat::Ones(2, 2));
  tape.backward(ad::sum(c * w));
  EXPECT_FALSE(tape.needs_grad(c.id));
  EXPECT_EQ(w.grad(), Mat::Constant(2, 2, 2.0));
}

TEST(LsaGradient, SingleLayer) {
  const TaskConfig cfg = dot_cfg();
  EXPECT_LE(model_rel_error(make_model(cfg, {}, 3), tasks_of(cfg, 8, 4), 5), 1e-5);
}

TEST(LsaGradient, ProjectionInterface) {
  TaskConfig cfg = dot_cfg(3);
  cfg.interface = InterfaceKind::projection_based;
  cfg.doc_dim = 2;
  EXPECT_LE(model_rel_error(make_model(cfg, {}, 6), tasks_of(cfg, 8, 7), 8), 1e-5);
}

TEST(LsaGradient, SharedStackDepthTwo) {
  const TaskConfig cfg = dot_cfg();
  LsaModelConfig mc;
  mc.depth = 2;
  EXPECT_LE(model_rel_error(make_model(cfg, mc, 9), tasks_of(cfg, 8, 10), 11), 1e-5);
}

TEST(LsaGradient, UnsharedStackDepthFive) {
  const TaskConfig cfg = dot_cfg();
  LsaModelConfig mc;
  mc.depth = 5;
  mc.share_params = false;
  EXPECT_LE(model_rel_error(make_model(cfg, mc, 12), tasks_of(cfg, 8, 13), 14), 1e-5);
}

TEST(LsaGradient, MultiHead) {
  TaskConfig cfg = dot_cfg();
  cfg.input_dim = 4;
  cfg.output_dim = 2;
  LsaModelConfig mc;
  mc.heads = 2;
  EXPECT_LE(model_rel_error(make_model(cfg, mc, 15), tasks_of(cfg, 8, 16), 17), 1e-5);
}

TEST(LsaGradient, EmbeddedTanh) {
  const TaskConfig cfg = dot_cfg();
  LsaModelConfig mc;
  mc.embed = true;
  mc.embed_activation = Activation::tanh;
  EXPECT_LE(model_rel_error(make_model(cfg, mc, 18), tasks_of(cfg, 8, 19), 20), 1e-5);
}

TEST(LsaGradient, EmbeddedReluSmallStep) {
  // Central differences straddle relu kinks at h = 1e-5 often enough to
  // matter; a smaller step keeps them out of the interval.
  const TaskConfig cfg = dot_cfg();
  LsaModelConfig mc;
  mc.embed = true;
  EXPECT_LE(model_rel_error(make_model(cfg, mc, 21), tasks_of(cfg, 8, 22), 23, 1e-7), 1e-5);
}

TEST(LsaGradient, TapeAgreesWithClosedForm) {
  const TaskConfig cfg = dot_cfg();
  for (bool embed : {false, true}) {
    LsaModelConfig mc;
    mc.depth = 3;
    mc.share_params = false;
    mc.embed = embed;
    const LsaModel m = make_model(cfg, mc, 24);
    for (const Task& t : tasks_of(cfg, 5, 25)) {
      Vec a = Vec::Zero(m.param_count()), b = Vec::Zero(m.param_count());
      const double la = m.loss_grad(t, &a);
      const double lb = m.loss_grad_tape(t, &b);
      EXPECT_NEAR(la, lb, 1e-12 * std::max(1.0, la));
      EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, a.cwiseAbs().maxCoeff()));
    }
  }
}

TEST(LsaGradient, ZeroResidualBatchHasZeroGradient) {
  TaskConfig cfg = dot_cfg();
  cfg.zero_teacher = true;
  LsaModelConfig mc;
  mc.init_scale = 0.0;
  const LsaModel m = make_model(cfg, mc, 26);
  Vec g = Vec::Zero(m.param_count());
  EXPECT_EQ(batch_loss_grad(m, tasks_of(cfg, 4, 27), &g, GradMode::closed_form, 1), 0.0);
  EXPECT_EQ(g.cwiseAbs().maxCoeff(), 0.0);
}

TEST(LsaModel, FlatRoundTrip) {
  LsaModelConfig mc;
  mc.depth = 2;
  mc.share_params = false;
  mc.embed = true;
  LsaModel m = make_model(dot_cfg(), mc, 28);
  const Vec f = m.get_flat();
  Vec g = f * 2.0;
  m.set_flat(g);
  EXPECT_EQ(m.get_flat(), g);
  EXPECT_THROW(m.set_flat(Vec::Zero(3)), std::invalid_argument);
}

TEST(LsaModel, SensitivityMatchesCentralDifferences) {
  const TaskConfig cfg = dot_cfg();
  LsaModelConfig mc;
  mc.depth = 2;
  mc.embed = true;
  mc.embed_activation = Activation::tanh;
  const LsaModel m = make_model(cfg, mc, 29);
  for (const Task& t : tasks_of(cfg, 5, 30)) {
    const Mat a = m.sensitivity(t);
    const Mat fd = finite_difference_sensitivity(m, t);
    EXPECT_LE((a - fd).norm(), 1e-6 * std::max(1.0, a.norm()));
  }
}

TEST(Trainer, ZeroLearningRateKeepsParameters) {
  const TaskConfig cfg = dot_cfg();
  LsaModel m = make_model(cfg, {}, 31);
  const Vec before = m.get_flat();
  TrainConfig tc;
  tc.lr = 0.0;
  tc.steps = 5;
  tc.batch = 8;
  train(m, tc, sampler_for(cfg, 32));
  EXPECT_EQ(m.get_flat(), before);
}

TEST(Trainer, BitwiseReproducible) {
  const TaskConfig cfg = dot_cfg();
  TrainConfig tc;
  tc.steps = 30;
  tc.batch = 16;
  tc.optimizer = OptimizerKind::adam;
  tc.workers = 0;
  LsaModel a = make_model(cfg, {}, 33);
  LsaModel b = make_model(cfg, {}, 33);
  train(a, tc, sampler_for(cfg, 34));
  tc.workers = 1;
  train(b, tc, sampler_for(cfg, 34));
  EXPECT_EQ(a.get_flat(), b.get_flat());
}

TEST(Trainer, LossDecreases) {
  const TaskConfig cfg = dot_cfg(2);
  LsaModel m = make_model(cfg, {}, 35);
  TrainConfig tc;
  tc.steps = 1000;
  tc.batch = 32;
  tc.optimizer = OptimizerKind::adam;
  const TrainResult r = train(m, tc, sampler_for(cfg, 36));
  ASSERT_FALSE(r.diverged);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 20; ++i) {
    first += r.curve[i].train_loss;
    last += r.curve[r.curve.size() - 1 - i].train_loss;
  }
  EXPECT_LT(last, 0.5 * first);
}

TEST(Trainer, DivergenceReportedNotThrown) {
  const TaskConfig cfg = dot_cfg();
  LsaModel m = make_model(cfg, {}, 37);
  TrainConfig tc;
  tc.steps = 200;
  tc.batch = 8;
  tc.lr = 10.0;
  const TrainResult r = train(m, tc, sampler_for(cfg, 38));
  EXPECT_TRUE(r.diverged);
  EXPECT_FALSE(r.diagnostic.empty());
}

TEST(Trainer, SpikeSkipping) {
  TaskConfig cfg = dot_cfg();
  LsaModel m = make_model(cfg, {}, 39);
  TrainConfig tc;
  tc.steps = 40;
  tc.batch = 8;
  tc.lr = 1e-3;
  tc.spike_factor = 3.0;
  // Every tenth batch gets a target a thousand times larger.
  TaskSampler s = [cfg](std::uint64_t i) {
    Task t = sample_task(cfg, i);
    if ((i / 8) % 10 == 9) t.query.y *= 1000.0;
    return t;
  };
  const TrainResult r = train(m, tc, s);
  EXPECT_FALSE(r.diverged);
  EXPECT_EQ(r.skipped, 4);
  EXPECT_TRUE(r.curve[9].skipped);
  EXPECT_FALSE(r.curve[10].skipped);
}

TEST(Trainer, LossCurveCsv) {
  std::ostringstream os;
  write_loss_curve(os, {{0, 1.5, std::nullopt, false}, {1, 1.25, 0.5, true}});
  EXPECT_EQ(os.str(), "step,train_loss,val_loss,skipped\n0,1.5,,0\n1,1.25,0.5,1\n");
}

TEST(InnerSgd, ZeroStepsZeroUpdate) {
  LossGradFn f = [](const Vec& w, Vec* g) {
    if (g) *g += 2.0 * w;
    return w.squaredNorm();
  };
  const Vec w0 = Vec::Constant(3, 1.5);
  EXPECT_EQ(inner_sgd(f, w0, 0.1, 0), Vec::Zero(3));
}

TEST(InnerSgd, OneStepIsMinusEtaGradient) {
  // Linear least squares: L(w) = (1/2N) ||X w - y||^2.
  Rng rng(40);
  const Mat x = rng.normal_matrix(6, 3);
  const Vec y = rng.normal_matrix(6, 1);
  LossGradFn f = [&](const Vec& w, Vec* g) {
    const Vec r = x * w - y;
    if (g) *g += x.transpose() * r / 6.0;
    return r.squaredNorm() / 12.0;
  };
  const Vec w0 = rng.normal_matrix(3, 1);
  const Vec hand = -0.01 * (x.transpose() * (x * w0 - y) / 6.0);
  EXPECT_LE((inner_sgd(f, w0, 0.01, 1) - hand).cwiseAbs().maxCoeff(), 1e-16);
}

TEST(InnerSgd, NonFiniteThrows) {
  LossGradFn f = [](const Vec&, Vec*) { return std::nan(""); };
  EXPECT_THROW(inner_sgd(f, Vec::Zero(2), 0.1, 1), NonFiniteError);
}

TEST(Optimizer, AdamFirstStepIsSignedLr) {
  Optimizer opt(OptimizerKind::adam, 0.01);
  Vec p = Vec::Zero(2);
  Vec g(2);
  g << 3.0, -0.5;
  opt.step(p, g);
  EXPECT_NEAR(p(0), -0.01, 1e-9);
  EXPECT_NEAR(p(1), 0.01, 1e-9);
}
