#pragma once

#include "ragicl/attention.hpp"
#include "ragicl/model.hpp"
#include "ragicl/task_synth.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace ragicl {

// (1/2N) sum_i ||W1 x1_i + W2 x2_i - y_i||^2. Throws on an empty context.
double rag_loss(const Mat& w1, const Mat& w2, const Context& ctx);

// Rows: W1 x1_i + W2 x2_i - y_i.
Mat residuals(const Mat& w1, const Mat& w2, const Context& ctx);

struct GdStepResult {
  Mat dw1;
  Mat dw2;
  Vec dy_query;  // dw1 q1 + dw2 q2
};

GdStepResult gd_step(const Mat& w1, const Mat& w2, const Context& ctx, double eta, const Vec& q1,
                     const Vec& q2);

// W_V y-rows [W1 W2 -I], W_K = W_Q = blockdiag(I, I, 0), P = -(eta/n) on the
// y-slot, everything else zero. The step size stays in P instead of being
// folded into W_V so the weight block can be read off directly.
AttentionParams construct_lsa(const Mat& w1, const Mat& w2, double eta, int n, const TokenLayout& layout);

struct GdTrajectory {
  std::vector<Mat> w1;             // iterates 0..K
  std::vector<Mat> w2;
  std::vector<Vec> predictions;    // query prediction after steps 1..K
};

GdTrajectory gd_trajectory(const Mat& w1, const Mat& w2, const Context& ctx, const Vec& q1, const Vec& q2,
                           double eta, int steps);

enum class StackMode {
  // construct_lsa(W0) at every layer: what a shared-parameter stack can
  // represent. Matches GD only for the first layer.
  frozen,
  // Layer t uses x-block 2 W^(t) - W^(0). The context y-slots drift by
  // (W^(t) - W^(0)) x_i, which this compensates; the query y-slot then holds
  // yhat^(t) - yhat^(0) exactly.
  refreshed,
};

std::vector<AttentionParams> construct_stack(const Mat& w1, const Mat& w2, const Context& ctx, double eta,
                                             int depth, StackMode mode, const TokenLayout& layout);

// Query predictions after each layer: W^(0) x_q plus the query y-slot.
std::vector<Vec> stack_predictions(const std::vector<AttentionParams>& layers, const Task& task, const Mat& w1,
                                   const Mat& w2);

std::vector<double> log_grid(double lo, double hi, int points);
std::vector<double> default_eta_grid();  // 25 points in [1e-4, 10]

using TaskSampler = std::function<Task(std::uint64_t index)>;

struct LineSearchResult {
  double eta = 0.0;
  std::size_t index = 0;
  std::vector<double> grid;
  std::vector<double> losses;  // mean query squared error per grid point
};

// Mean query squared error of `steps`-step GD from W = 0 over tasks
// sampler(0..t_train-1), for every grid point.
LineSearchResult line_search_eta(const TaskSampler& sampler, const std::vector<double>& grid, int t_train,
                                 int steps = 1, int workers = 0);

// argmin over eta of the mean one-step query loss from W = 0; the prediction
// is linear in eta so the optimum is closed form.
double optimal_one_step_eta(const TaskSampler& sampler, int t_train);

// K-step GD from W = 0 with a fixed eta, evaluated at the task's query.
class GdReference : public QueryModel {
 public:
  GdReference(double eta, int steps) : eta_(eta), steps_(steps) {}
  Vec predict(const Task& task) const override;
  Mat sensitivity(const Task& task) const override;
  std::string name() const override { return "gd"; }
  double eta() const { return eta_; }
  int steps() const { return steps_; }

 private:
  double eta_;
  int steps_;
};

}  // namespace ragicl
