#include "ragicl/raggd.hpp"

#include "ragicl/autodiff.hpp"
#include "ragicl/gd_equivalence.hpp"
#include "ragicl/rng.hpp"
#include "ragicl/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace ragicl {

void ToyConfig::validate() const {
  if (width < ToyGenerator::kScratch + 3) throw std::invalid_argument("toy: width must be at least 11");
  if (depth != 2) throw std::invalid_argument("toy: the generator has exactly two layers");
  if (rank < 1 || docs < 1 || demos < 1 || queries < 1) throw std::invalid_argument("toy: sizes must be positive");
  if (ks.empty()) throw std::invalid_argument("toy: empty K list");
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] < 0 || (i > 0 && ks[i] <= ks[i - 1])) throw std::invalid_argument("toy: K list must be ascending");
  }
  if (!(radius_hi >= radius_lo) || radius_lo < 0.0) throw std::invalid_argument("toy: bad latent radius range");
  if (!(source_arc > 0.0 && source_arc < 2.0)) throw std::invalid_argument("toy: source_arc must be in (0, 2)");
  if (train_contexts < 1 || batch < 1 || epochs < 0) throw std::invalid_argument("toy: bad predictor schedule");
}

LowRankUpdate LowRankUpdate::zeros(int layers, int width, int rank) {
  LowRankUpdate w;
  w.layers = layers;
  w.width = width;
  w.rank = rank;
  w.u.assign(3 * layers, Mat::Zero(width, rank));
  w.v.assign(3 * layers, Mat::Zero(width, rank));
  return w;
}

std::vector<Mat> LowRankUpdate::dense() const {
  std::vector<Mat> out;
  out.reserve(u.size());
  for (std::size_t b = 0; b < u.size(); ++b) out.push_back(u[b] * v[b].transpose());
  return out;
}

Vec LowRankUpdate::flat() const {
  Vec f(size());
  Eigen::Index at = 0;
  for (std::size_t b = 0; b < u.size(); ++b) {
    f.segment(at, u[b].size()) = u[b].reshaped();
    at += u[b].size();
    f.segment(at, v[b].size()) = v[b].reshaped();
    at += v[b].size();
  }
  return f;
}

void LowRankUpdate::set_flat(const Vec& f) {
  if (f.size() != size()) throw std::invalid_argument("LowRankUpdate::set_flat: size mismatch");
  Eigen::Index at = 0;
  for (std::size_t b = 0; b < u.size(); ++b) {
    u[b].reshaped() = f.segment(at, u[b].size());
    at += u[b].size();
    v[b].reshaped() = f.segment(at, v[b].size());
    at += v[b].size();
  }
}

std::vector<Mat> dense_difference(const LowRankUpdate& a, const LowRankUpdate& b) {
  std::vector<Mat> da = a.dense();
  const std::vector<Mat> db = b.dense();
  for (std::size_t i = 0; i < da.size(); ++i) da[i] -= db[i];
  return da;
}

ToyFamily ToyFamily::sample(Rng& rng) {
  ToyFamily f;
  f.m_src = rng.normal_matrix(2, 2);
  f.b1 = rng.normal_matrix(2, 2);
  f.b2 = rng.normal_matrix(2, 2);
  return f;
}

Vec ToyFamily::sample_beta(const ToyConfig& cfg, bool transfer, Rng& rng) const {
  const double arc = cfg.source_arc * std::numbers::pi;
  const double angle = transfer ? rng.uniform(arc, 2.0 * std::numbers::pi) : rng.uniform(0.0, arc);
  const double radius = rng.uniform(cfg.radius_lo, cfg.radius_hi);
  Vec beta(2);
  beta << radius * std::cos(angle), radius * std::sin(angle);
  return beta;
}

ToyInstance ToyFamily::sample_instance(const ToyConfig& cfg, const Vec& beta, Rng& rng) const {
  ToyInstance inst;
  auto feature = [&] { return cfg.feature_mean + cfg.feature_sd * rng.normal(); };
  inst.x.resize(2);
  inst.a.resize(cfg.docs, 2);
  inst.c.resize(cfg.docs);
  for (int j = 0; j < 2; ++j) inst.x(j) = feature();
  for (int i = 0; i < cfg.docs; ++i) {
    for (int j = 0; j < 2; ++j) inst.a(i, j) = feature();
  }
  for (int i = 0; i < cfg.docs; ++i) inst.c(i) = feature();
  const Mat m = m_src + beta(0) * b1 + beta(1) * b2;
  const Vec mx = m * inst.x;
  inst.y = inst.c.dot(inst.a * mx) / cfg.docs + cfg.noise * rng.normal();
  return inst;
}

ToyContext ToyFamily::sample_context(const ToyConfig& cfg, bool transfer, int queries, std::uint64_t seed) const {
  Rng rng(seed);
  ToyContext ctx;
  ctx.transfer = transfer;
  ctx.beta = sample_beta(cfg, transfer, rng);
  for (int i = 0; i < cfg.demos; ++i) ctx.support.push_back(sample_instance(cfg, ctx.beta, rng));
  for (int i = 0; i < queries; ++i) ctx.queries.push_back(sample_instance(cfg, ctx.beta, rng));
  return ctx;
}

ToyGenerator ToyGenerator::build(const ToyConfig& cfg, Rng& rng) {
  cfg.validate();
  ToyGenerator gen;
  gen.cfg_ = cfg;
  const int d = cfg.width;
  AttentionParams l1 = AttentionParams::zeros(d);
  const Mat rq = Mat::Identity(2, 2) + rng.normal_matrix(2, 2, cfg.coupling_sd);
  const Mat rk = Mat::Identity(2, 2) + rng.normal_matrix(2, 2, cfg.coupling_sd);
  // Layer 1 scores the query input against each document key and writes the
  // score-weighted document values into PRED.
  l1.query.block(kScratch, kSlotX, 2, 2) = rq;
  l1.key.block(kScratch, kSlotA, 2, 2) = rk;
  l1.value(kScratch + 2, kSlotC) = 1.0;
  l1.proj(kSlotPred, kScratch + 2) = 1.0 / cfg.docs;
  const double s = cfg.layer2_scale / std::sqrt(static_cast<double>(d));
  AttentionParams l2 = AttentionParams::random(d, s, rng);
  gen.backbone_ = {l1, l2};
  return gen;
}

std::uint64_t ToyGenerator::backbone_hash() const {
  // FNV-1a over the raw bytes of every backbone matrix.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const Mat& m) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : backbone_) {
    mix(p.query);
    mix(p.key);
    mix(p.value);
    mix(p.proj);
  }
  return h;
}

std::vector<Mat> ToyGenerator::effective(const std::vector<Mat>& deltas) const {
  std::vector<Mat> eff;
  eff.reserve(3 * backbone_.size());
  for (std::size_t l = 0; l < backbone_.size(); ++l) {
    eff.push_back(backbone_[l].query);
    eff.push_back(backbone_[l].key);
    eff.push_back(backbone_[l].value);
  }
  if (!deltas.empty()) {
    if (deltas.size() != eff.size()) throw std::invalid_argument("toy: wrong number of delta blocks");
    for (std::size_t b = 0; b < eff.size(); ++b) eff[b] += deltas[b];
  }
  return eff;
}

namespace {

Mat doc_rows(const ToyInstance& inst, int width) {
  Mat d = Mat::Zero(inst.a.rows(), width);
  d.middleCols(ToyGenerator::kSlotA, 2) = inst.a;
  d.col(ToyGenerator::kSlotC) = inst.c;
  return d;
}

Vec query_row(const ToyInstance& inst, int width, bool with_answer) {
  Vec e = Vec::Zero(width);
  e.segment(ToyGenerator::kSlotX, 2) = inst.x;
  e(ToyGenerator::kSlotFlag) = 1.0;
  if (with_answer) e(ToyGenerator::kSlotY) = inst.y;
  return e;
}

}  // namespace

Vec ToyGenerator::forward(const ToyInstance& inst, const std::vector<Mat>& eff, bool with_answer) const {
  const int d = cfg_.width;
  const Mat docs = doc_rows(inst, d);
  Vec e = query_row(inst, d, with_answer);
  for (std::size_t l = 0; l < backbone_.size(); ++l) {
    const Mat& wq = eff[3 * l];
    const Mat& wk = eff[3 * l + 1];
    const Mat& wv = eff[3 * l + 2];
    const Vec q = wq * e;
    Vec upd;
    if (l == 0 || !cfg_.layer2_self) {
      const Vec s = docs * (wk.transpose() * q);
      upd = wv * (docs.transpose() * s);
    } else {
      Mat src(docs.rows() + 1, d);
      src.topRows(docs.rows()) = docs;
      src.row(docs.rows()) = e.transpose();
      const Vec s = src * (wk.transpose() * q);
      upd = wv * (src.transpose() * s);
    }
    e += backbone_[l].proj * upd;
  }
  return e;
}

double ToyGenerator::predict(const ToyInstance& inst, const std::vector<Mat>& eff) const {
  return cfg_.readout_gain * forward(inst, eff)(kSlotPred);
}

double ToyGenerator::mean_loss(const std::vector<ToyInstance>& insts, const std::vector<Mat>& eff) const {
  CompensatedSum sum;
  for (const auto& inst : insts) {
    const double r = predict(inst, eff) - inst.y;
    sum.add(r * r);
  }
  return sum.mean();
}

double ToyGenerator::loss_grad(const std::vector<ToyInstance>& insts, const LowRankUpdate& w, Vec* grad) const {
  using namespace ad;
  if (insts.empty()) throw std::invalid_argument("toy loss: no instances");
  Tape tape;
  const int d = cfg_.width;
  std::vector<Var> us;
  std::vector<Var> vs;
  std::vector<Var> eff;
  for (int b = 0; b < w.blocks(); ++b) {
    us.push_back(tape.leaf(w.u[b]));
    vs.push_back(tape.leaf(w.v[b]));
  }
  for (std::size_t l = 0; l < backbone_.size(); ++l) {
    const Mat* frozen[3] = {&backbone_[l].query, &backbone_[l].key, &backbone_[l].value};
    for (int p = 0; p < 3; ++p) {
      const int b = static_cast<int>(3 * l) + p;
      eff.push_back(add(tape.constant(*frozen[p]), matmul(us[b], transpose(vs[b]))));
    }
  }
  std::vector<Var> effk_t;  // W_K^T, shared by all instances
  std::vector<Var> projs;
  for (std::size_t l = 0; l < backbone_.size(); ++l) {
    effk_t.push_back(transpose(eff[3 * l + 1]));
    projs.push_back(tape.constant(backbone_[l].proj));
  }
  std::vector<Var> sq;
  for (const auto& inst : insts) {
    const Var docs = tape.constant(doc_rows(inst, d));
    const Var docs_t = tape.constant(doc_rows(inst, d).transpose());
    Var e = tape.constant(query_row(inst, d, false));
    for (std::size_t l = 0; l < backbone_.size(); ++l) {
      const Var q = matmul(eff[3 * l], e);
      const Var kq = matmul(effk_t[l], q);
      Var upd;
      if (l == 0 || !cfg_.layer2_self) {
        upd = matmul(eff[3 * l + 2], matmul(docs_t, matmul(docs, kq)));
      } else {
        const Var src = vconcat({docs, transpose(e)});
        upd = matmul(eff[3 * l + 2], matmul(transpose(src), matmul(src, kq)));
      }
      e = add(e, matmul(projs[l], upd));
    }
    const Var pred = scale(block(e, kSlotPred, 0, 1, 1), cfg_.readout_gain);
    const Var r = sub(pred, tape.constant(Mat::Constant(1, 1, inst.y)));
    sq.push_back(squared_norm(r));
  }
  const Var loss = scale(sum(vconcat(sq)), 1.0 / static_cast<double>(insts.size()));
  if (grad != nullptr) {
    tape.backward(loss);
    grad->resize(w.size());
    Eigen::Index at = 0;
    for (int b = 0; b < w.blocks(); ++b) {
      grad->segment(at, us[b].grad().size()) = us[b].grad().reshaped();
      at += us[b].grad().size();
      grad->segment(at, vs[b].grad().size()) = vs[b].grad().reshaped();
      at += vs[b].grad().size();
    }
  }
  return loss.value()(0, 0);
}

Vec ToyGenerator::encode(const std::vector<ToyInstance>& support, const LowRankUpdate& w) const {
  const std::vector<Mat> eff = effective(w);
  Vec h = Vec::Zero(cfg_.width);
  for (const auto& inst : support) h += forward(inst, eff, true);
  return h / static_cast<double>(support.size());
}

double ToyGenerator::forward_flops() const {
  const double d = cfg_.width;
  const double k = cfg_.docs;
  double total = 0.0;
  for (std::size_t l = 0; l < backbone_.size(); ++l) {
    const double n = l == 0 ? k : k + 1;
    // q, W_K^T q, src (W_K^T q), src^T s, W_V (.), P (.) and the residual add.
    total += 2 * d * d + 2 * d * d + 2 * n * d + 2 * n * d + 2 * d * d + 2 * d * d + d;
  }
  return total + 1;
}

double ToyGenerator::compose_flops() const {
  const double d = cfg_.width;
  const double r = cfg_.rank;
  return 3.0 * backbone_.size() * (2 * d * d * r + d * d);
}

BaseTrainResult train_base_interface(const ToyGenerator& gen, const ToyFamily& family, std::uint64_t seed) {
  const ToyConfig& cfg = gen.config();
  Rng init(stream_seed(seed, 0));
  BaseTrainResult res;
  res.w0 = LowRankUpdate::zeros(cfg.depth, cfg.width, cfg.rank);
  for (auto& u : res.w0.u) u = init.normal_matrix(cfg.width, cfg.rank, cfg.base_init);
  Optimizer opt(OptimizerKind::adam, cfg.base_lr);
  Vec params = res.w0.flat();
  Vec grad;
  for (int step = 0; step < cfg.base_steps; ++step) {
    Rng rng(stream_seed(seed, 1 + static_cast<std::uint64_t>(step)));
    std::vector<ToyInstance> batch;
    for (int c = 0; c < cfg.base_contexts; ++c) {
      const Vec beta = family.sample_beta(cfg, false, rng);
      for (int i = 0; i < cfg.base_instances; ++i) batch.push_back(family.sample_instance(cfg, beta, rng));
    }
    const double loss = gen.loss_grad(batch, res.w0, &grad);
    if (!std::isfinite(loss)) throw NonFiniteError("base interface training diverged at step " + std::to_string(step));
    res.curve.push_back(loss);
    opt.step(params, grad);
    res.w0.set_flat(params);
  }
  return res;
}

LowRankUpdate gd_adapt(const ToyGenerator& gen, const std::vector<ToyInstance>& support, const LowRankUpdate& w0,
                       double eta, int steps) {
  LowRankUpdate w = w0;
  const Vec delta = inner_sgd(
      [&](const Vec& p, Vec* g) {
        w.set_flat(p);
        return gen.loss_grad(support, w, g);
      },
      w0.flat(), eta, steps);
  w.set_flat(w0.flat() + delta);
  return w;
}

std::vector<std::vector<Mat>> gd_targets(const ToyGenerator& gen, const std::vector<ToyInstance>& support,
                                         const LowRankUpdate& w0, double eta, const std::vector<int>& ks) {
  std::vector<std::vector<Mat>> out;
  LowRankUpdate w = w0;
  int done = 0;
  for (int k : ks) {
    w = gd_adapt(gen, support, w, eta, k - done);
    done = k;
    out.push_back(dense_difference(w, w0));
  }
  return out;
}

EtaSearchResult search_inner_eta(const ToyGenerator& gen, const ToyFamily& family, const LowRankUpdate& w0,
                                 std::uint64_t seed) {
  const ToyConfig& cfg = gen.config();
  EtaSearchResult res;
  res.grid = log_grid(cfg.eta_lo, cfg.eta_hi, cfg.eta_points);
  std::vector<ToyContext> probes;
  for (int i = 0; i < cfg.eta_probe_contexts; ++i) {
    probes.push_back(family.sample_context(cfg, false, cfg.queries, stream_seed(seed, static_cast<std::uint64_t>(i))));
  }
  const int horizon = std::max(1, cfg.ks.back());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<bool> stable;
  std::vector<double> one_step;
  for (double eta : res.grid) {
    CompensatedSum sum;
    bool ok = true;
    for (const auto& ctx : probes) {
      try {
        const LowRankUpdate w1 = gd_adapt(gen, ctx.support, w0, eta, 1);
        const LowRankUpdate wk = gd_adapt(gen, ctx.support, w1, eta, horizon - 1);
        const double start = gen.mean_loss(ctx.support, gen.effective(w0));
        const double tail = gen.mean_loss(ctx.support, gen.effective(wk));
        if (!std::isfinite(tail) || tail > start) {
          ok = false;
          break;
        }
        sum.add(gen.mean_loss(ctx.queries, gen.effective(w1)));
      } catch (const NonFiniteError&) {
        ok = false;
        break;
      }
    }
    stable.push_back(ok);
    one_step.push_back(ok ? sum.mean() : inf);
  }
  double best = inf;
  for (std::size_t i = 0; i < res.grid.size(); ++i) {
    bool qualifies = stable[i];
    for (std::size_t j = i + 1; j < res.grid.size() && res.grid[j] <= cfg.eta_margin * res.grid[i] * (1 + 1e-12); ++j) {
      qualifies = qualifies && stable[j];
    }
    res.losses.push_back(qualifies ? one_step[i] : inf);
    if (res.losses.back() < best) {
      best = res.losses.back();
      res.eta = res.grid[i];
    }
  }
  if (!std::isfinite(best)) throw NonFiniteError("search_inner_eta: every grid step size diverged");
  return res;
}

double matching_loss(const std::vector<Mat>& pred, const std::vector<Mat>& target, double lambda,
                     double zero_penalty, std::vector<Mat>* grads) {
  if (pred.size() != target.size()) throw std::invalid_argument("matching_loss: block count mismatch");
  if (grads != nullptr) grads->assign(pred.size(), Mat());
  double total = 0.0;
  for (std::size_t b = 0; b < pred.size(); ++b) {
    const Mat& p = pred[b];
    const Mat& t = target[b];
    if (p.rows() != t.rows() || p.cols() != t.cols()) throw std::invalid_argument("matching_loss: shape mismatch");
    const double tn = t.norm();
    if (grads != nullptr) (*grads)[b] = Mat::Zero(p.rows(), p.cols());
    if (tn == 0.0) {
      total += zero_penalty;
      continue;
    }
    const double pn = std::max(p.norm(), 1e-300);
    const double ip = frobenius_dot(p, t);
    const double log_ratio = std::log(pn) - std::log(tn);
    total += 1.0 - ip / (pn * tn) + lambda * std::abs(log_ratio);
    if (grads != nullptr) {
      const double sgn = log_ratio > 0.0 ? 1.0 : (log_ratio < 0.0 ? -1.0 : 0.0);
      (*grads)[b] = -t / (pn * tn) + (ip / (pn * pn * pn * tn)) * p + (lambda * sgn / (pn * pn)) * p;
    }
  }
  return total;
}

Predictor::Predictor(const ToyConfig& cfg, Rng& rng)
    : width_(cfg.width), rank_(cfg.rank), blocks_(3 * cfg.depth), lambda_(cfg.lambda),
      zero_penalty_(cfg.zero_block_penalty) {
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  auto layer = [&](int out, int in, Mat& w, Vec& b) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    w = rng.uniform_matrix(out, in, -bound, bound);
    b = rng.uniform_matrix(out, 1, -bound, bound);
  };
  layer(cfg.hidden, cfg.width, w1_, b1_);
  layer(cfg.trunk_out, cfg.hidden, w2_, b2_);
  wh_.resize(blocks_);
  bh_.resize(blocks_);
  for (int b = 0; b < blocks_; ++b) layer(2 * cfg.width * cfg.rank, cfg.trunk_out, wh_[b], bh_[b]);
  mean_ = Vec::Zero(cfg.width);
  inv_std_ = Vec::Ones(cfg.width);
}

void Predictor::set_standardization(const Vec& mean, const Vec& stddev) {
  mean_ = mean;
  inv_std_ = stddev.cwiseMax(1e-8).cwiseInverse();
}

LowRankUpdate Predictor::forward(const Vec& encoding) const {
  const Vec x = (encoding - mean_).cwiseProduct(inv_std_);
  const Vec h1 = (w1_ * x + b1_).cwiseMax(0.0);
  const Vec z = (w2_ * h1 + b2_).cwiseMax(0.0);
  LowRankUpdate out = LowRankUpdate::zeros(blocks_ / 3, width_, rank_);
  const Eigen::Index half = static_cast<Eigen::Index>(width_) * rank_;
  for (int b = 0; b < blocks_; ++b) {
    const Vec o = wh_[b] * z + bh_[b];
    out.u[b] = o.head(half).reshaped(width_, rank_);
    out.v[b] = o.tail(half).reshaped(width_, rank_);
  }
  return out;
}

Eigen::Index Predictor::param_count() const {
  Eigen::Index n = w1_.size() + b1_.size() + w2_.size() + b2_.size();
  for (int b = 0; b < blocks_; ++b) n += wh_[b].size() + bh_[b].size();
  return n;
}

Vec Predictor::get_flat() const {
  Vec f(param_count());
  Eigen::Index at = 0;
  auto put = [&](const auto& m) {
    f.segment(at, m.size()) = m.reshaped();
    at += m.size();
  };
  put(w1_);
  put(b1_);
  put(w2_);
  put(b2_);
  for (int b = 0; b < blocks_; ++b) {
    put(wh_[b]);
    put(bh_[b]);
  }
  return f;
}

void Predictor::set_flat(const Vec& f) {
  if (f.size() != param_count()) throw std::invalid_argument("Predictor::set_flat: size mismatch");
  Eigen::Index at = 0;
  auto take = [&](auto& m) {
    m.reshaped() = f.segment(at, m.size());
    at += m.size();
  };
  take(w1_);
  take(b1_);
  take(w2_);
  take(b2_);
  for (int b = 0; b < blocks_; ++b) {
    take(wh_[b]);
    take(bh_[b]);
  }
}

double Predictor::batch_loss_grad(const std::vector<const Vec*>& enc,
                                  const std::vector<const std::vector<Mat>*>& targets, Vec* grad) const {
  const auto n = static_cast<Eigen::Index>(enc.size());
  if (n == 0 || targets.size() != enc.size()) throw std::invalid_argument("predictor: bad batch");
  // Columns are samples.
  Mat x(width_, n);
  for (Eigen::Index i = 0; i < n; ++i) x.col(i) = (*enc[i] - mean_).cwiseProduct(inv_std_);
  const Mat a1 = (w1_ * x).colwise() + b1_;
  const Mat h1 = a1.cwiseMax(0.0);
  const Mat a2 = (w2_ * h1).colwise() + b2_;
  const Mat z = a2.cwiseMax(0.0);
  const Eigen::Index half = static_cast<Eigen::Index>(width_) * rank_;
  std::vector<Mat> outs(blocks_);
  for (int b = 0; b < blocks_; ++b) outs[b] = (wh_[b] * z).colwise() + bh_[b];

  double total = 0.0;
  std::vector<Mat> douts(blocks_, Mat::Zero(2 * half, n));
  std::vector<Mat> pred(blocks_);
  std::vector<Mat> us(blocks_);
  std::vector<Mat> vs(blocks_);
  std::vector<Mat> g;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int b = 0; b < blocks_; ++b) {
      us[b] = outs[b].col(i).head(half).reshaped(width_, rank_);
      vs[b] = outs[b].col(i).tail(half).reshaped(width_, rank_);
      pred[b] = us[b] * vs[b].transpose();
    }
    total += matching_loss(pred, *targets[i], lambda_, zero_penalty_, grad != nullptr ? &g : nullptr);
    if (grad == nullptr) continue;
    for (int b = 0; b < blocks_; ++b) {
      const Mat du = g[b] * vs[b];
      const Mat dv = g[b].transpose() * us[b];
      douts[b].col(i).head(half) = du.reshaped();
      douts[b].col(i).tail(half) = dv.reshaped();
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  if (grad == nullptr) return total * inv_n;

  Mat dz = Mat::Zero(z.rows(), n);
  std::vector<Mat> dwh(blocks_);
  std::vector<Vec> dbh(blocks_);
  for (int b = 0; b < blocks_; ++b) {
    douts[b] *= inv_n;
    dwh[b] = douts[b] * z.transpose();
    dbh[b] = douts[b].rowwise().sum();
    dz.noalias() += wh_[b].transpose() * douts[b];
  }
  const Mat da2 = dz.cwiseProduct((a2.array() > 0.0).cast<double>().matrix());
  const Mat dw2 = da2 * h1.transpose();
  const Vec db2 = da2.rowwise().sum();
  const Mat dh1 = w2_.transpose() * da2;
  const Mat da1 = dh1.cwiseProduct((a1.array() > 0.0).cast<double>().matrix());
  const Mat dw1 = da1 * x.transpose();
  const Vec db1 = da1.rowwise().sum();

  grad->resize(param_count());
  Eigen::Index at = 0;
  auto put = [&](const auto& m) {
    grad->segment(at, m.size()) = m.reshaped();
    at += m.size();
  };
  put(dw1);
  put(db1);
  put(dw2);
  put(db2);
  for (int b = 0; b < blocks_; ++b) {
    put(dwh[b]);
    put(dbh[b]);
  }
  return total * inv_n;
}

double Predictor::forward_flops() const {
  double f = 2.0 * width_;  // standardization
  f += 2.0 * w1_.size() + 2.0 * b1_.size();
  f += 2.0 * w2_.size() + 2.0 * b2_.size();
  for (int b = 0; b < blocks_; ++b) f += 2.0 * wh_[b].size() + bh_[b].size();
  return f;
}

std::vector<double> train_predictor(Predictor& predictor, const std::vector<PredictorSample>& data,
                                    const ToyConfig& cfg, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("train_predictor: no data");
  Optimizer opt(OptimizerKind::adam, cfg.lr);
  Vec params = predictor.get_flat();
  Vec grad;
  std::vector<double> curve;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    CompensatedSum epoch_loss;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<const Vec*> enc;
      std::vector<const std::vector<Mat>*> tgt;
      for (std::size_t j = start; j < stop; ++j) {
        enc.push_back(&data[order[j]].encoding);
        tgt.push_back(&data[order[j]].target);
      }
      const double loss = predictor.batch_loss_grad(enc, tgt, &grad);
      if (!std::isfinite(loss) || loss > 1e6) {
        throw NonFiniteError("predictor training diverged in epoch " + std::to_string(epoch));
      }
      epoch_loss.add(loss);
      opt.step(params, grad);
      predictor.set_flat(params);
    }
    curve.push_back(epoch_loss.mean());
  }
  return curve;
}

double mean_matching_loss(const Predictor& predictor, const std::vector<PredictorSample>& data,
                          const ToyConfig& cfg) {
  CompensatedSum sum;
  for (const auto& s : data) {
    sum.add(matching_loss(predictor.forward(s.encoding).dense(), s.target, cfg.lambda, cfg.zero_block_penalty));
  }
  return sum.mean();
}

std::vector<double> deploy(const ToyGenerator& gen, const LowRankUpdate& w0, const Predictor& predictor,
                           const std::vector<ToyInstance>& support, const std::vector<ToyInstance>& queries) {
  const LowRankUpdate update = predictor.forward(gen.encode(support, w0));
  std::vector<Mat> delta = w0.dense();
  const std::vector<Mat> extra = update.dense();
  for (std::size_t b = 0; b < delta.size(); ++b) delta[b] += extra[b];
  const std::vector<Mat> eff = gen.effective(delta);
  std::vector<double> out;
  out.reserve(queries.size());
  for (const auto& q : queries) out.push_back(gen.predict(q, eff));
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

struct Accum {
  CompensatedSum loss;
  std::size_t queries = 0;
  double ms = 0.0;
};

void add_losses(Accum& acc, const std::vector<double>& preds, const std::vector<ToyInstance>& queries) {
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const double r = preds[i] - queries[i].y;
    acc.loss.add(r * r);
  }
  acc.queries += queries.size();
}

SuiteRow finish(const char* method, int k, const std::vector<ToyContext>& contexts, const Accum& acc,
                double flops_per_context) {
  if (contexts.empty()) throw std::invalid_argument("evaluate_suite: empty context set");
  SuiteRow row;
  row.method = method;
  row.k = k;
  row.transfer = contexts.front().transfer;
  row.eval_loss = acc.loss.mean();
  const double per_context_queries = static_cast<double>(acc.queries) / static_cast<double>(contexts.size());
  row.flops_per_query = flops_per_context / per_context_queries;
  row.wall_ms_per_query = acc.ms / static_cast<double>(acc.queries);
  return row;
}

}  // namespace

SuiteRow evaluate_base(const ToyGenerator& gen, const LowRankUpdate& w0, const std::vector<ToyContext>& contexts) {
  Accum acc;
  double queries = 0.0;
  for (const auto& ctx : contexts) {
    const auto t0 = Clock::now();
    const std::vector<Mat> eff = gen.effective(w0);
    std::vector<double> preds;
    for (const auto& q : ctx.queries) preds.push_back(gen.predict(q, eff));
    acc.ms += std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    add_losses(acc, preds, ctx.queries);
    queries = static_cast<double>(ctx.queries.size());
  }
  const double flops = gen.compose_flops() + queries * gen.forward_flops();
  return finish("base", 0, contexts, acc, flops);
}

SuiteRow evaluate_tt_sgd(const ToyGenerator& gen, const LowRankUpdate& w0, const std::vector<ToyContext>& contexts,
                         double eta, int k) {
  Accum acc;
  double queries = 0.0;
  for (const auto& ctx : contexts) {
    const auto t0 = Clock::now();
    const LowRankUpdate w = gd_adapt(gen, ctx.support, w0, eta, k);
    const std::vector<Mat> eff = gen.effective(w);
    std::vector<double> preds;
    for (const auto& q : ctx.queries) preds.push_back(gen.predict(q, eff));
    acc.ms += std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    add_losses(acc, preds, ctx.queries);
    queries = static_cast<double>(ctx.queries.size());
  }
  const ToyConfig& cfg = gen.config();
  const double n = cfg.demos;
  const double factor_grads = 3.0 * cfg.depth * 2.0 * (2.0 * cfg.width * cfg.width * cfg.rank);
  const double update = 2.0 * static_cast<double>(w0.size());
  // Each inner step: compose, N forwards, backward at twice the forward cost,
  // factor gradients and the parameter update.
  const double step = gen.compose_flops() + 3.0 * n * gen.forward_flops() + factor_grads + update;
  const double flops = k * step + gen.compose_flops() + queries * gen.forward_flops();
  return finish("tt_sgd", k, contexts, acc, flops);
}

SuiteRow evaluate_amortized(const ToyGenerator& gen, const LowRankUpdate& w0, const Predictor& predictor,
                            const std::vector<ToyContext>& contexts, int k) {
  Accum acc;
  double queries = 0.0;
  for (const auto& ctx : contexts) {
    const auto t0 = Clock::now();
    const std::vector<double> preds = deploy(gen, w0, predictor, ctx.support, ctx.queries);
    acc.ms += std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    add_losses(acc, preds, ctx.queries);
    queries = static_cast<double>(ctx.queries.size());
  }
  const ToyConfig& cfg = gen.config();
  const double blocks = 3.0 * cfg.depth;
  const double d2 = static_cast<double>(cfg.width) * cfg.width;
  // Encode (compose W0 + N forwards), predictor pass, compose both updates
  // and add them, then answer the queries.
  const double flops = gen.compose_flops() + cfg.demos * gen.forward_flops() + predictor.forward_flops() +
                       2.0 * gen.compose_flops() + blocks * d2 + queries * gen.forward_flops();
  return finish("amortized", k, contexts, acc, flops);
}

}  // namespace ragicl
