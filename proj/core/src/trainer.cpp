#include "ragicl/trainer.hpp"

#include "ragicl/checkpoint.hpp"
#include "ragicl/parallel.hpp"

#include <cmath>
#include <numbers>
#include <limits>
#include <ostream>
#include <sstream>

namespace ragicl {

std::string_view to_string(GradMode mode) {
  return mode == GradMode::closed_form ? "closed_form" : "reverse_mode";
}

std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::sgd ? "sgd" : "adam"; }

GradMode parse_grad_mode(std::string_view text) {
  if (text == "closed_form") return GradMode::closed_form;
  if (text == "reverse_mode") return GradMode::reverse_mode;
  throw std::invalid_argument("unknown grad mode '" + std::string(text) + "'");
}

OptimizerKind parse_optimizer(std::string_view text) {
  if (text == "sgd") return OptimizerKind::sgd;
  if (text == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + std::string(text) + "'");
}

Optimizer::Optimizer(OptimizerKind kind, double lr, double momentum, double beta1, double beta2, double eps)
    : kind_(kind), lr_(lr), momentum_(momentum), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Optimizer::step(Vec& params, const Vec& grad) {
  if (m_.size() != params.size()) {
    m_ = Vec::Zero(params.size());
    v_ = Vec::Zero(params.size());
  }
  ++t_;
  if (kind_ == OptimizerKind::sgd) {
    if (momentum_ == 0.0) {
      params -= lr_ * grad;
    } else {
      m_ = momentum_ * m_ + grad;
      params -= lr_ * m_;
    }
    return;
  }
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

double batch_loss_grad(const LsaModel& model, const std::vector<Task>& tasks, Vec* grad, GradMode mode,
                       int workers) {
  if (tasks.empty()) throw std::invalid_argument("batch_loss_grad: empty batch");
  const Eigen::Index np = model.param_count();
  std::vector<double> losses(tasks.size());
  std::vector<Vec> grads(grad != nullptr ? tasks.size() : 0);
  parallel_for(
      tasks.size(),
      [&](std::size_t i) {
        Vec* g = nullptr;
        if (grad != nullptr) {
          grads[i] = Vec::Zero(np);
          g = &grads[i];
        }
        losses[i] = mode == GradMode::closed_form ? model.loss_grad(tasks[i], g) : model.loss_grad_tape(tasks[i], g);
      },
      workers);
  CompensatedSum total;
  for (double l : losses) total.add(l);
  const double loss = total.mean();
  if (!std::isfinite(loss)) throw NonFiniteError("non-finite batch loss");
  if (grad != nullptr) {
    grad->setZero(np);
    for (const Vec& g : grads) *grad += g;
    *grad /= static_cast<double>(tasks.size());
  }
  return loss;
}

double mean_query_loss(const QueryModel& model, const std::vector<Task>& tasks, int workers) {
  std::vector<double> losses(tasks.size());
  parallel_for(
      tasks.size(), [&](std::size_t i) { losses[i] = (model.predict(tasks[i]) - tasks[i].query.y).squaredNorm(); },
      workers);
  CompensatedSum total;
  for (double l : losses) total.add(l);
  return total.mean();
}

TrainResult train(LsaModel& model, const TrainConfig& cfg, const TaskSampler& sampler,
                  const TaskSampler* val_sampler) {
  if (cfg.batch < 1 || cfg.steps < 0) throw std::invalid_argument("train: bad batch/steps");
  TrainResult result;
  Optimizer opt(cfg.optimizer, cfg.lr, cfg.momentum);
  std::vector<Task> val;
  if (val_sampler != nullptr && cfg.eval_every > 0) {
    for (int i = 0; i < cfg.val_tasks; ++i) val.push_back((*val_sampler)(static_cast<std::uint64_t>(i)));
  }
  Vec params = model.get_flat();
  Vec best = params;
  Vec grad(params.size());
  std::vector<Task> batch(cfg.batch);
  auto fill_batch = [&](int step) {
    const std::uint64_t base = static_cast<std::uint64_t>(cfg.fresh_tasks ? step : 0) * cfg.batch;
    for (int b = 0; b < cfg.batch; ++b) batch[b] = sampler(base + b);
  };
  auto validate = [&](int step, LossRecord& rec) {
    if (val.empty() || cfg.eval_every <= 0) return;
    if (step % cfg.eval_every != 0 && step != cfg.steps) return;
    const double v = mean_query_loss(model, val, cfg.workers);
    rec.val_loss = v;
    if (result.best_step < 0 || v < result.best_val) {
      result.best_val = v;
      result.best_step = step;
      best = model.get_flat();
    }
  };
  double running = 0.0;
  bool have_mean = false;
  int consecutive = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    double f = 1.0;
    if (cfg.decay_final != 1.0 && cfg.steps > 1) {
      const double frac = static_cast<double>(step) / (cfg.steps - 1);
      f = cfg.decay_final + (1.0 - cfg.decay_final) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
    }
    if (step < cfg.warmup) f *= static_cast<double>(step + 1) / cfg.warmup;
    opt.set_lr(cfg.lr * f);
    if (step == 0 || cfg.fresh_tasks) fill_batch(step);
    LossRecord rec;
    rec.step = step;
    bool finite = true;
    try {
      rec.train_loss = batch_loss_grad(model, batch, &grad, cfg.mode, cfg.workers);
    } catch (const NonFiniteError& e) {
      if (cfg.spike_factor <= 0.0) {
        result.diverged = true;
        result.diagnostic = "step " + std::to_string(step) + ": " + e.what();
        return result;
      }
      finite = false;
      rec.train_loss = std::numeric_limits<double>::infinity();
    }
    if (cfg.spike_factor > 0.0 && (!finite || (have_mean && rec.train_loss > cfg.spike_factor * running))) {
      rec.skipped = true;
      ++result.skipped;
      result.curve.push_back(rec);
      if (++consecutive > cfg.max_skips) {
        result.diverged = true;
        result.diagnostic = "step " + std::to_string(step) + ": " + std::to_string(consecutive) +
                            " consecutive loss spikes";
        return result;
      }
      continue;
    }
    consecutive = 0;
    running = have_mean ? 0.99 * running + 0.01 * rec.train_loss : rec.train_loss;
    have_mean = true;
    if (rec.train_loss > cfg.divergence_threshold) {
      result.diverged = true;
      std::ostringstream msg;
      msg << "step " << step << ": loss " << rec.train_loss << " exceeds divergence threshold "
          << cfg.divergence_threshold;
      result.diagnostic = msg.str();
      result.curve.push_back(rec);
      return result;
    }
    validate(step, rec);
    result.curve.push_back(rec);
    if (cfg.grad_clip > 0.0) {
      const double norm = grad.norm();
      if (norm > cfg.grad_clip) grad *= cfg.grad_clip / norm;
    }
    opt.step(params, grad);
    model.set_flat(params);
  }
  if (!val.empty() && cfg.eval_every > 0) {
    LossRecord rec;
    rec.step = cfg.steps;
    rec.train_loss = batch.empty() ? 0.0 : batch_loss_grad(model, batch, nullptr, cfg.mode, cfg.workers);
    validate(cfg.steps, rec);
    result.curve.push_back(rec);
    if (cfg.keep_best) model.set_flat(best);
  }
  return result;
}

void write_loss_curve(std::ostream& os, const std::vector<LossRecord>& curve) {
  os << "step,train_loss,val_loss,skipped\n";
  for (const auto& r : curve) {
    os << r.step << ',' << format_double(r.train_loss) << ',';
    if (r.val_loss) os << format_double(*r.val_loss);
    os << ',' << (r.skipped ? 1 : 0) << '\n';
  }
}

Vec inner_sgd(const LossGradFn& loss_grad, const Vec& w0, double eta, int steps) {
  if (steps < 0) throw std::invalid_argument("inner_sgd: steps must be non-negative");
  Vec w = w0;
  Vec g(w.size());
  for (int t = 0; t < steps; ++t) {
    g.setZero();
    const double loss = loss_grad(w, &g);
    if (!std::isfinite(loss) || !g.allFinite()) {
      throw NonFiniteError("inner_sgd: non-finite loss at step " + std::to_string(t));
    }
    w -= eta * g;
  }
  return w - w0;
}

}  // namespace ragicl
