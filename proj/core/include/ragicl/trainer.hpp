#pragma once

#include "ragicl/gd_equivalence.hpp"
#include "ragicl/lsa_model.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ragicl {

enum class GradMode { closed_form, reverse_mode };
enum class OptimizerKind { sgd, adam };

std::string_view to_string(GradMode mode);
std::string_view to_string(OptimizerKind kind);
GradMode parse_grad_mode(std::string_view text);
OptimizerKind parse_optimizer(std::string_view text);

struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// First-order optimizer over a flat parameter vector.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, double momentum = 0.0, double beta1 = 0.9, double beta2 = 0.999,
            double eps = 1e-8);
  void step(Vec& params, const Vec& grad);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  OptimizerKind kind_;
  double lr_;
  double momentum_;
  double beta1_;
  double beta2_;
  double eps_;
  long t_ = 0;
  Vec m_;
  Vec v_;
};

struct TrainConfig {
  int batch = 256;
  int steps = 10000;
  double lr = 1e-3;
  double momentum = 0.0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  // Cosine decay from lr to lr * decay_final over the run; 1 disables it.
  double decay_final = 1.0;
  int warmup = 0;           // linear ramp from 0 over the first `warmup` steps
  double grad_clip = 0.0;   // rescale the batch gradient to this norm; 0 disables
  // Skip the update when the batch loss exceeds spike_factor times the running
  // mean of accepted losses (or is not finite); 0 disables. More than
  // max_skips consecutive skips count as divergence.
  double spike_factor = 0.0;
  int max_skips = 50;
  std::uint64_t seed = 0;
  bool fresh_tasks = true;  // false: reuse the first batch every step
  GradMode mode = GradMode::closed_form;
  double divergence_threshold = 1e6;
  int eval_every = 0;       // 0: no validation
  int val_tasks = 0;
  bool keep_best = false;   // restore the best-validation parameters at the end
  int workers = 0;
};

struct LossRecord {
  int step = 0;
  double train_loss = 0.0;
  std::optional<double> val_loss;
  bool skipped = false;
};

struct TrainResult {
  std::vector<LossRecord> curve;
  bool diverged = false;
  int skipped = 0;
  std::string diagnostic;
  double best_val = 0.0;
  int best_step = -1;
};

// Mean over tasks of ||yhat - y||^2; gradient (mean) written to `grad` when
// non-null. Per-task gradients are reduced in task order.
double batch_loss_grad(const LsaModel& model, const std::vector<Task>& tasks, Vec* grad, GradMode mode,
                       int workers = 0);

double mean_query_loss(const QueryModel& model, const std::vector<Task>& tasks, int workers = 0);

// Fresh tasks: batch b of step s is sampler(s * batch + b).
TrainResult train(LsaModel& model, const TrainConfig& cfg, const TaskSampler& sampler,
                  const TaskSampler* val_sampler = nullptr);

void write_loss_curve(std::ostream& os, const std::vector<LossRecord>& curve);

using LossGradFn = std::function<double(const Vec& params, Vec* grad)>;

// K plain gradient steps from w0; returns W^(K) - W^(0). Throws NonFiniteError
// on a non-finite inner loss.
Vec inner_sgd(const LossGradFn& loss_grad, const Vec& w0, double eta, int steps);

}  // namespace ragicl
