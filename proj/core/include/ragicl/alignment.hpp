#pragma once

#include "ragicl/model.hpp"
#include "ragicl/task_synth.hpp"

#include <vector>

namespace ragicl {

struct AlignmentReport {
  double pred_diff = 0.0;  // mean ||yhat_a - yhat_b||_2
  double sens_cos = 0.0;   // mean cosine of the flattened sensitivities
  double sens_l2 = 0.0;    // mean ||J_a - J_b||_F
  double loss_diff = 0.0;  // loss_a - loss_b
  double loss_a = 0.0;     // mean ||yhat - y||^2
  double loss_b = 0.0;
  std::size_t tasks = 0;

  // Reported as the "model difference".
  double model_diff() const { return sens_l2; }
  // |loss_a - loss_b| / loss_b.
  double relative_loss_gap() const;
};

// Cosine of two Jacobians after flattening; 1 when both are zero, 0 when
// exactly one is.
double sensitivity_cosine(const Mat& a, const Mat& b);

struct TaskAlignment {
  double pred_diff = 0.0;
  double sens_cos = 0.0;
  double sens_l2 = 0.0;
  double loss_a = 0.0;
  double loss_b = 0.0;
};

TaskAlignment compare_task(const QueryModel& a, const QueryModel& b, const Task& task);

// Per-task metrics reduced with compensated sums in task order.
AlignmentReport compare(const QueryModel& a, const QueryModel& b, const std::vector<Task>& tasks, int workers = 0);

}  // namespace ragicl
