#include "ragicl/gd_equivalence.hpp"

#include "ragicl/parallel.hpp"

#include <cmath>
#include <stdexcept>

namespace ragicl {

namespace {

void check_context(const Mat& w1, const Mat& w2, const Context& ctx) {
  if (ctx.size() == 0) throw std::invalid_argument("empty context");
  if (w1.cols() != ctx.x1.cols() || w2.cols() != ctx.x2.cols() || w1.rows() != ctx.y.cols() ||
      w2.rows() != ctx.y.cols()) {
    throw std::invalid_argument("weight shapes do not match the context");
  }
}

Vec query_x2(const Task& task) { return task.query.x2; }

}  // namespace

Mat residuals(const Mat& w1, const Mat& w2, const Context& ctx) {
  check_context(w1, w2, ctx);
  return ctx.x1 * w1.transpose() + ctx.x2 * w2.transpose() - ctx.y;
}

double rag_loss(const Mat& w1, const Mat& w2, const Context& ctx) {
  const Mat r = residuals(w1, w2, ctx);
  return r.squaredNorm() / (2.0 * ctx.size());
}

GdStepResult gd_step(const Mat& w1, const Mat& w2, const Context& ctx, double eta, const Vec& q1, const Vec& q2) {
  const Mat r = residuals(w1, w2, ctx);
  const double scale = -eta / ctx.size();
  GdStepResult out;
  out.dw1 = scale * (r.transpose() * ctx.x1);
  out.dw2 = scale * (r.transpose() * ctx.x2);
  out.dy_query = out.dw1 * q1 + out.dw2 * q2;
  return out;
}

AttentionParams construct_lsa(const Mat& w1, const Mat& w2, double eta, int n, const TokenLayout& layout) {
  if (n <= 0) throw std::invalid_argument("construct_lsa: context size must be positive");
  if (w1.rows() != layout.dy || w1.cols() != layout.d1 || w2.rows() != layout.dy || w2.cols() != layout.d2) {
    throw std::invalid_argument("construct_lsa: weights do not match the token layout");
  }
  const int dim = layout.dim();
  AttentionParams p = AttentionParams::zeros(dim);
  const int dx = layout.d1 + layout.d2;
  p.key.topLeftCorner(dx, dx).setIdentity();
  p.query.topLeftCorner(dx, dx).setIdentity();
  p.value.block(layout.y_offset(), layout.x1_offset(), layout.dy, layout.d1) = w1;
  p.value.block(layout.y_offset(), layout.x2_offset(), layout.dy, layout.d2) = w2;
  p.value.block(layout.y_offset(), layout.y_offset(), layout.dy, layout.dy) = -Mat::Identity(layout.dy, layout.dy);
  p.proj.block(layout.y_offset(), layout.y_offset(), layout.dy, layout.dy) =
      -(eta / n) * Mat::Identity(layout.dy, layout.dy);
  return p;
}

GdTrajectory gd_trajectory(const Mat& w1, const Mat& w2, const Context& ctx, const Vec& q1, const Vec& q2,
                           double eta, int steps) {
  if (steps < 1) throw std::invalid_argument("gd_trajectory: steps must be at least 1");
  GdTrajectory traj;
  traj.w1.push_back(w1);
  traj.w2.push_back(w2);
  for (int t = 0; t < steps; ++t) {
    const GdStepResult step = gd_step(traj.w1.back(), traj.w2.back(), ctx, eta, q1, q2);
    traj.w1.push_back(traj.w1.back() + step.dw1);
    traj.w2.push_back(traj.w2.back() + step.dw2);
    traj.predictions.push_back(traj.w1.back() * q1 + traj.w2.back() * q2);
  }
  return traj;
}

std::vector<AttentionParams> construct_stack(const Mat& w1, const Mat& w2, const Context& ctx, double eta,
                                             int depth, StackMode mode, const TokenLayout& layout) {
  if (depth < 1) throw std::invalid_argument("construct_stack: depth must be at least 1");
  std::vector<AttentionParams> layers;
  layers.reserve(depth);
  if (mode == StackMode::frozen) {
    layers.assign(depth, construct_lsa(w1, w2, eta, ctx.size(), layout));
    return layers;
  }
  const Vec zero1 = Vec::Zero(w1.cols());
  const Vec zero2 = Vec::Zero(w2.cols());
  GdTrajectory traj;
  traj.w1 = {w1};
  traj.w2 = {w2};
  if (depth > 1) traj = gd_trajectory(w1, w2, ctx, zero1, zero2, eta, depth - 1);
  for (int t = 0; t < depth; ++t) {
    layers.push_back(construct_lsa(2.0 * traj.w1[t] - w1, 2.0 * traj.w2[t] - w2, eta, ctx.size(), layout));
  }
  return layers;
}

std::vector<Vec> stack_predictions(const std::vector<AttentionParams>& layers, const Task& task, const Mat& w1,
                                   const Mat& w2) {
  StackConfig cfg{static_cast<int>(layers.size()), false};
  const StackResult res = stack_forward(layers, cfg, tokens_of(task));
  const Vec base = w1 * task.query.x1 + w2 * query_x2(task);
  std::vector<Vec> out;
  out.reserve(res.query_y.size());
  for (const Vec& y : res.query_y) out.push_back(base + y);
  return out;
}

std::vector<double> log_grid(double lo, double hi, int points) {
  if (points < 1 || lo <= 0.0 || hi < lo) throw std::invalid_argument("log_grid: bad range");
  std::vector<double> grid;
  grid.reserve(points);
  if (points == 1) {
    grid.push_back(lo);
    return grid;
  }
  const double a = std::log10(lo);
  const double b = std::log10(hi);
  for (int i = 0; i < points; ++i) grid.push_back(std::pow(10.0, a + (b - a) * i / (points - 1)));
  return grid;
}

std::vector<double> default_eta_grid() { return log_grid(1e-4, 10.0, 25); }

LineSearchResult line_search_eta(const TaskSampler& sampler, const std::vector<double>& grid, int t_train,
                                 int steps, int workers) {
  if (grid.empty()) throw std::invalid_argument("line_search_eta: empty grid");
  if (t_train < 1) throw std::invalid_argument("line_search_eta: t_train must be at least 1");
  if (steps < 1) throw std::invalid_argument("line_search_eta: steps must be at least 1");
  // per_task[i * grid + g]: squared query error of task i at grid point g.
  std::vector<double> per_task(static_cast<std::size_t>(t_train) * grid.size());
  parallel_for(
      static_cast<std::size_t>(t_train),
      [&](std::size_t i) {
        const Task task = sampler(i);
        const Mat w1 = Mat::Zero(task.output_dim(), task.input_dim());
        const Mat w2 = Mat::Zero(task.output_dim(), task.retrieval_dim());
        for (std::size_t g = 0; g < grid.size(); ++g) {
          const GdTrajectory traj = gd_trajectory(w1, w2, task.context, task.query.x1, task.query.x2, grid[g], steps);
          per_task[i * grid.size() + g] = (traj.predictions.back() - task.query.y).squaredNorm();
        }
      },
      workers);
  LineSearchResult res;
  res.grid = grid;
  res.losses.resize(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) {
    CompensatedSum sum;
    for (int i = 0; i < t_train; ++i) sum.add(per_task[static_cast<std::size_t>(i) * grid.size() + g]);
    res.losses[g] = sum.mean();
  }
  res.index = 0;
  for (std::size_t g = 1; g < grid.size(); ++g) {
    // Non-finite losses (divergent steps) never win.
    if (std::isfinite(res.losses[g]) && (!std::isfinite(res.losses[res.index]) || res.losses[g] < res.losses[res.index])) {
      res.index = g;
    }
  }
  res.eta = grid[res.index];
  return res;
}

double optimal_one_step_eta(const TaskSampler& sampler, int t_train) {
  if (t_train < 1) throw std::invalid_argument("optimal_one_step_eta: t_train must be at least 1");
  CompensatedSum num;
  CompensatedSum den;
  for (int i = 0; i < t_train; ++i) {
    const Task task = sampler(static_cast<std::uint64_t>(i));
    const Mat w1 = Mat::Zero(task.output_dim(), task.input_dim());
    const Mat w2 = Mat::Zero(task.output_dim(), task.retrieval_dim());
    const Vec s = gd_step(w1, w2, task.context, 1.0, task.query.x1, task.query.x2).dy_query;
    num.add(s.dot(task.query.y));
    den.add(s.squaredNorm());
  }
  if (den.sum() == 0.0) throw std::runtime_error("optimal_one_step_eta: degenerate tasks");
  return num.sum() / den.sum();
}

Vec GdReference::predict(const Task& task) const {
  const Mat w1 = Mat::Zero(task.output_dim(), task.input_dim());
  const Mat w2 = Mat::Zero(task.output_dim(), task.retrieval_dim());
  return gd_trajectory(w1, w2, task.context, task.query.x1, task.query.x2, eta_, steps_).predictions.back();
}

Mat GdReference::sensitivity(const Task& task) const {
  const Mat w1 = Mat::Zero(task.output_dim(), task.input_dim());
  const Mat w2 = Mat::Zero(task.output_dim(), task.retrieval_dim());
  const GdTrajectory traj = gd_trajectory(w1, w2, task.context, task.query.x1, task.query.x2, eta_, steps_);
  if (task.interface() == InterfaceKind::dot_product) return traj.w1.back() + traj.w2.back();
  return traj.w1.back();
}

}  // namespace ragicl
