#include "ragicl/alignment.hpp"

#include "ragicl/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ragicl {

Mat finite_difference_sensitivity(const QueryModel& model, const Task& task, double h) {
  const bool shared = task.interface() == InterfaceKind::dot_product;
  const int n = task.input_dim();
  Mat jac(task.output_dim(), n);
  Task probe = task;
  for (int j = 0; j < n; ++j) {
    auto shift = [&](double delta) {
      probe.query.x1(j) = task.query.x1(j) + delta;
      if (shared) probe.query.x2(j) = task.query.x2(j) + delta;
      return model.predict(probe);
    };
    const Vec plus = shift(h);
    const Vec minus = shift(-h);
    jac.col(j) = (plus - minus) / (2.0 * h);
    probe.query.x1(j) = task.query.x1(j);
    if (shared) probe.query.x2(j) = task.query.x2(j);
  }
  return jac;
}

double AlignmentReport::relative_loss_gap() const {
  if (loss_b == 0.0) return loss_a == 0.0 ? 0.0 : INFINITY;
  return std::abs(loss_a - loss_b) / loss_b;
}

double sensitivity_cosine(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("sensitivity_cosine: shape mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  const double c = frobenius_dot(a, b) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

TaskAlignment compare_task(const QueryModel& a, const QueryModel& b, const Task& task) {
  const Vec ya = a.predict(task);
  const Vec yb = b.predict(task);
  if (!ya.allFinite() || !yb.allFinite()) throw std::runtime_error("compare: non-finite prediction");
  const Mat ja = a.sensitivity(task);
  const Mat jb = b.sensitivity(task);
  TaskAlignment t;
  t.pred_diff = (ya - yb).norm();
  t.sens_cos = sensitivity_cosine(ja, jb);
  t.sens_l2 = (ja - jb).norm();
  t.loss_a = (ya - task.query.y).squaredNorm();
  t.loss_b = (yb - task.query.y).squaredNorm();
  return t;
}

AlignmentReport compare(const QueryModel& a, const QueryModel& b, const std::vector<Task>& tasks, int workers) {
  if (tasks.empty()) throw std::invalid_argument("compare: empty task set");
  std::vector<TaskAlignment> per(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t i) { per[i] = compare_task(a, b, tasks[i]); }, workers);
  CompensatedSum pd, sc, sl, la, lb;
  for (const auto& t : per) {
    pd.add(t.pred_diff);
    sc.add(t.sens_cos);
    sl.add(t.sens_l2);
    la.add(t.loss_a);
    lb.add(t.loss_b);
  }
  AlignmentReport r;
  r.tasks = tasks.size();
  r.pred_diff = pd.mean();
  r.sens_cos = sc.mean();
  r.sens_l2 = sl.mean();
  r.loss_a = la.mean();
  r.loss_b = lb.mean();
  r.loss_diff = r.loss_a - r.loss_b;
  return r;
}

}  // namespace ragicl
