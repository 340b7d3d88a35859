#include "ragicl/gd_equivalence.hpp"
#include "ragicl/lsa_model.hpp"
#include "ragicl/raggd.hpp"
#include "ragicl/rng.hpp"
#include "ragicl/trainer.hpp"

#include <benchmark/benchmark.h>

#include <vector>

namespace {

using namespace ragicl;

TaskConfig task_config(int docs) {
  TaskConfig cfg;
  cfg.doc_count = docs;
  return cfg;
}

std::vector<Task> tasks(const TaskConfig& cfg, int n) {
  std::vector<Task> out;
  for (int i = 0; i < n; ++i) out.push_back(sample_task(cfg, stream_seed(7, i)));
  return out;
}

// Constructed one-step LSA forward pass, by document count.
void BM_LsaForward(benchmark::State& state) {
  const Task task = sample_task(task_config(static_cast<int>(state.range(0))), 1);
  const TokenMatrix tokens = tokens_of(task);
  const Mat w1 = Mat::Zero(task.output_dim(), task.input_dim());
  const Mat w2 = Mat::Zero(task.output_dim(), task.retrieval_dim());
  const AttentionParams p = construct_lsa(w1, w2, 0.1, task.context.y.rows(), tokens.layout);
  for (auto _ : state) benchmark::DoNotOptimize(lsa_forward(p, tokens));
}
BENCHMARK(BM_LsaForward)->Arg(5)->Arg(10)->Arg(25);

void BM_GdStep(benchmark::State& state) {
  const Task task = sample_task(task_config(static_cast<int>(state.range(0))), 2);
  const Mat w1 = Mat::Zero(task.output_dim(), task.input_dim());
  const Mat w2 = Mat::Zero(task.output_dim(), task.retrieval_dim());
  for (auto _ : state) {
    benchmark::DoNotOptimize(gd_step(w1, w2, task.context, 0.1, task.query.x1, task.query.x2));
  }
}
BENCHMARK(BM_GdStep)->Arg(5)->Arg(10)->Arg(25);

// Batch loss and gradient of a trainable depth-1 LSA, closed form vs tape.
void BM_BatchLossGrad(benchmark::State& state) {
  const TaskConfig cfg = task_config(10);
  const std::vector<Task> batch = tasks(cfg, 64);
  Rng rng(3);
  const LsaModel model = LsaModel::random(tokens_of(batch.front()).layout, {}, rng);
  const GradMode mode = state.range(0) == 0 ? GradMode::closed_form : GradMode::reverse_mode;
  Vec grad = Vec::Zero(model.param_count());
  for (auto _ : state) {
    grad.setZero();
    benchmark::DoNotOptimize(batch_loss_grad(model, batch, &grad, mode, 1));
  }
  state.SetLabel(state.range(0) == 0 ? "closed_form" : "reverse_mode");
}
BENCHMARK(BM_BatchLossGrad)->Arg(0)->Arg(1);

struct ToySetup {
  ToyConfig cfg;
  ToyGenerator gen;
  ToyFamily family;
  LowRankUpdate w0;
  ToyContext ctx;
};

const ToySetup& toy() {
  static const ToySetup s = [] {
    ToySetup t;
    Rng g(11), f(12), w(13);
    t.gen = ToyGenerator::build(t.cfg, g);
    t.family = ToyFamily::sample(f);
    t.w0 = LowRankUpdate::zeros(t.cfg.depth, t.cfg.width, t.cfg.rank);
    t.w0.set_flat(w.normal_matrix(t.w0.size(), 1, 0.1));
    t.ctx = t.family.sample_context(t.cfg, false, 1, 14);
    return t;
  }();
  return s;
}

// Forward-only amortized adaptation for one context.
void BM_ToyDeploy(benchmark::State& state) {
  const ToySetup& t = toy();
  Rng rng(15);
  const Predictor predictor(t.cfg, rng);
  for (auto _ : state) benchmark::DoNotOptimize(deploy(t.gen, t.w0, predictor, t.ctx.support, t.ctx.queries));
}
BENCHMARK(BM_ToyDeploy);

// K full-batch SGD steps on the support set for one context.
void BM_ToyTestTimeSgd(benchmark::State& state) {
  const ToySetup& t = toy();
  const int k = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(gd_adapt(t.gen, t.ctx.support, t.w0, 0.01, k));
}
BENCHMARK(BM_ToyTestTimeSgd)->Arg(1)->Arg(5);

}  // namespace

BENCHMARK_MAIN();
