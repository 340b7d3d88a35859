#include "ragicl/lsa_model.hpp"

#include "ragicl/autodiff.hpp"
#include "ragicl/rng.hpp"

#include <stdexcept>

namespace ragicl {

namespace {

// Forward state of one layer restricted to the rows whose output is needed.
struct LayerCache {
  Mat e_in;      // full token matrix entering the layer
  int row0 = 0;  // first computed row
  Mat src;       // context rows feeding keys/values
  Mat k;         // n_kv x d (context keys then injected rows)
  Mat v;
  Mat q;         // computed rows x d
  std::vector<Mat> s;  // per head: computed rows x n_kv
  Mat a;         // computed rows x d
};

Mat injected_rows(const DocInjection* inject, const TokenLayout& layout) {
  const int dim = layout.dim();
  if (inject == nullptr) return Mat(0, dim);
  Mat rows = Mat::Zero(inject->h_d.rows(), dim);
  const auto cols = std::min<Eigen::Index>(inject->h_d.cols(), layout.d1);
  rows.leftCols(cols) = inject->h_d.leftCols(cols);
  return rows;
}

Mat layer_forward(const AttentionParams& p, const Mat& e, const TokenLayout& layout, const DocInjection* inject,
                  bool query_only, LayerCache& c) {
  const int dim = layout.dim();
  const int n_rows = static_cast<int>(e.rows());
  const int ctx = n_rows - 1;
  const int s = dim / p.heads;
  const Mat inj = injected_rows(inject, layout);
  c.e_in = e;
  c.row0 = query_only ? ctx : 0;
  c.src = e.topRows(ctx);
  c.k.resize(ctx + inj.rows(), dim);
  c.v.resize(ctx + inj.rows(), dim);
  c.k.topRows(ctx) = c.src * p.key.transpose();
  c.v.topRows(ctx) = c.src * p.value.transpose();
  c.k.bottomRows(inj.rows()) = inj;
  c.v.bottomRows(inj.rows()) = inj;
  c.q = e.bottomRows(n_rows - c.row0) * p.query.transpose();
  c.a.resize(c.q.rows(), dim);
  c.s.assign(p.heads, Mat());
  for (int h = 0; h < p.heads; ++h) {
    c.s[h] = c.q.middleCols(h * s, s) * c.k.middleCols(h * s, s).transpose();
    c.a.middleCols(h * s, s) = c.s[h] * c.v.middleCols(h * s, s);
  }
  Mat out = e.bottomRows(n_rows - c.row0);
  out.noalias() += c.a * p.proj.transpose();
  return out;
}

// g: gradient w.r.t. the computed rows of the layer output. Returns the
// gradient w.r.t. the full input token matrix and accumulates into dp.
Mat layer_backward(const AttentionParams& p, const LayerCache& c, const Mat& g, AttentionParams& dp) {
  const int dim = static_cast<int>(c.e_in.cols());
  const int ctx = static_cast<int>(c.src.rows());
  const int s = dim / p.heads;
  Mat de = Mat::Zero(c.e_in.rows(), dim);
  de.bottomRows(g.rows()) = g;
  dp.proj.noalias() += g.transpose() * c.a;
  const Mat da = g * p.proj;
  Mat dq(c.q.rows(), dim);
  Mat dk(c.k.rows(), dim);
  Mat dv(c.v.rows(), dim);
  for (int h = 0; h < p.heads; ++h) {
    const Mat ds = da.middleCols(h * s, s) * c.v.middleCols(h * s, s).transpose();
    dv.middleCols(h * s, s) = c.s[h].transpose() * da.middleCols(h * s, s);
    dq.middleCols(h * s, s) = ds * c.k.middleCols(h * s, s);
    dk.middleCols(h * s, s) = ds.transpose() * c.q.middleCols(h * s, s);
  }
  const Mat rows_in = c.e_in.bottomRows(g.rows());
  dp.query.noalias() += dq.transpose() * rows_in;
  de.bottomRows(g.rows()).noalias() += dq * p.query;
  const Mat dkc = dk.topRows(ctx);
  const Mat dvc = dv.topRows(ctx);
  dp.key.noalias() += dkc.transpose() * c.src;
  dp.value.noalias() += dvc.transpose() * c.src;
  de.topRows(ctx).noalias() += dkc * p.key + dvc * p.value;
  return de;
}

struct EmbedCache {
  std::vector<Mat> h;  // inputs to each linear layer (rows x width_in)
  std::vector<Mat> z;  // pre-activations
};

Mat embed_rows_forward(const EmbedMLP& mlp, const Mat& x, EmbedCache& c) {
  Mat h = x;
  const std::size_t last = mlp.weights.size() - 1;
  for (std::size_t i = 0; i < mlp.weights.size(); ++i) {
    c.h.push_back(h);
    Mat z = (h * mlp.weights[i].transpose()).rowwise() + mlp.biases[i].transpose();
    c.z.push_back(z);
    h = i == last ? z : z.unaryExpr([&](double v) { return activate(mlp.activation, v); });
  }
  return h;
}

void embed_rows_backward(const EmbedMLP& mlp, const EmbedCache& c, Mat g, std::vector<Mat>& dw,
                         std::vector<Vec>& db) {
  const std::size_t last = mlp.weights.size() - 1;
  for (std::size_t i = mlp.weights.size(); i-- > 0;) {
    if (i != last) {
      g = g.cwiseProduct(c.z[i].unaryExpr([&](double v) { return activate_derivative(mlp.activation, v); }));
    }
    dw[i].noalias() += g.transpose() * c.h[i];
    db[i] += g.colwise().sum().transpose();
    g = g * mlp.weights[i];
  }
}

}  // namespace

LsaModel::LsaModel(std::vector<AttentionParams> layers, StackConfig stack, std::optional<EmbedMLP> embed,
                   bool use_injection)
    : layers_(std::move(layers)), stack_(stack), embed_(std::move(embed)), use_injection_(use_injection) {
  const std::size_t expected = stack_.share_params ? 1 : static_cast<std::size_t>(stack_.depth);
  if (stack_.depth < 1 || layers_.size() != expected) throw std::invalid_argument("LsaModel: layer count mismatch");
  for (const auto& l : layers_) l.validate();
  if (embed_) embed_->validate();
}

LsaModel LsaModel::random(const TokenLayout& layout, const LsaModelConfig& cfg, Rng& rng) {
  std::vector<AttentionParams> layers;
  const int count = cfg.share_params ? 1 : cfg.depth;
  for (int i = 0; i < count; ++i) {
    AttentionParams p = AttentionParams::random(layout.dim(), cfg.init_scale, rng);
    p.heads = cfg.heads;
    layers.push_back(std::move(p));
  }
  std::optional<EmbedMLP> embed;
  if (cfg.embed) {
    embed = EmbedMLP::random(layout.d1 + layout.d2, cfg.embed_hidden, cfg.embed_activation, cfg.embed_scale, rng);
  }
  return LsaModel(std::move(layers), StackConfig{cfg.depth, cfg.share_params}, std::move(embed), cfg.use_injection);
}

TokenMatrix LsaModel::prepare(const Task& task) const {
  TokenMatrix tokens = tokens_of(task);
  if (embed_) tokens = embed_forward(*embed_, tokens);
  return tokens;
}

std::optional<DocInjection> LsaModel::injection(const Task& task) const {
  if (!use_injection_ || task.interface() != InterfaceKind::dot_product) return std::nullopt;
  return make_injection(task.documents, task.input_dim());
}

Vec LsaModel::predict(const Task& task) const {
  const TokenMatrix tokens = prepare(task);
  const auto inj = injection(task);
  const DocInjection* ip = inj ? &*inj : nullptr;
  Mat e = tokens.rows;
  LayerCache cache;
  for (int l = 0; l < stack_.depth; ++l) {
    const bool last = l + 1 == stack_.depth;
    Mat out = layer_forward(layer(l), e, tokens.layout, ip, last, cache);
    if (last) return out.row(0).segment(tokens.layout.y_offset(), tokens.layout.dy).transpose();
    e = std::move(out);
  }
  return {};
}

Mat LsaModel::sensitivity(const Task& task) const {
  const TokenMatrix tokens = prepare(task);
  const TokenLayout& lay = tokens.layout;
  const auto inj = injection(task);
  const DocInjection* ip = inj ? &*inj : nullptr;
  const int dim = lay.dim();
  // The query never feeds keys or values, so each layer maps the query row
  // through the fixed matrix I + sum_h P_h V_h^T K_h W_Q,h.
  Mat jac = Mat::Identity(dim, dim);
  Mat e = tokens.rows;
  LayerCache cache;
  for (int l = 0; l < stack_.depth; ++l) {
    const AttentionParams& p = layer(l);
    Mat out = layer_forward(p, e, lay, ip, false, cache);
    const int s = dim / p.heads;
    Mat m = Mat::Identity(dim, dim);
    for (int h = 0; h < p.heads; ++h) {
      m.noalias() += p.proj.middleCols(h * s, s) * cache.v.middleCols(h * s, s).transpose() *
                     cache.k.middleCols(h * s, s) * p.query.middleRows(h * s, s);
    }
    jac = m * jac;
    e = std::move(out);
  }
  const int width = lay.d1 + lay.d2;
  Mat dx = jac.block(lay.y_offset(), 0, lay.dy, width);  // d yhat / d [x1|x2] after embedding
  if (embed_) {
    Vec raw(width);
    raw << task.query.x1, task.query.x2;
    dx = dx * embed_jacobian(*embed_, raw);
  }
  Mat out = dx.leftCols(lay.d1);
  if (task.interface() == InterfaceKind::dot_product) out += dx.middleCols(lay.d1, lay.d2);
  return out;
}

double LsaModel::loss_grad(const Task& task, Vec* grad) const {
  TokenMatrix tokens = tokens_of(task);
  const TokenLayout lay = tokens.layout;
  const int width = lay.d1 + lay.d2;
  EmbedCache ecache;
  if (embed_) {
    tokens.rows.leftCols(width) = embed_rows_forward(*embed_, tokens.rows.leftCols(width), ecache);
  }
  const auto inj = injection(task);
  const DocInjection* ip = inj ? &*inj : nullptr;
  std::vector<LayerCache> caches(stack_.depth);
  Mat e = tokens.rows;
  for (int l = 0; l < stack_.depth; ++l) {
    e = layer_forward(layer(l), e, lay, ip, l + 1 == stack_.depth, caches[l]);
  }
  const Vec r = e.row(0).segment(lay.y_offset(), lay.dy).transpose() - task.query.y;
  const double loss = r.squaredNorm();
  if (grad == nullptr) return loss;

  std::vector<AttentionParams> dlayers;
  for (const auto& p : layers_) {
    AttentionParams z = AttentionParams::zeros(p.token_dim());
    z.heads = p.heads;
    dlayers.push_back(std::move(z));
  }
  Mat g = Mat::Zero(1, lay.dim());
  g.block(0, lay.y_offset(), 1, lay.dy) = 2.0 * r.transpose();
  for (int l = stack_.depth; l-- > 0;) {
    AttentionParams& dp = stack_.share_params ? dlayers.front() : dlayers[l];
    g = layer_backward(layer(l), caches[l], g, dp);
  }
  std::vector<Mat> dw;
  std::vector<Vec> db;
  if (embed_) {
    for (std::size_t i = 0; i < embed_->weights.size(); ++i) {
      dw.push_back(Mat::Zero(embed_->weights[i].rows(), embed_->weights[i].cols()));
      db.push_back(Vec::Zero(embed_->biases[i].size()));
    }
    embed_rows_backward(*embed_, ecache, g.leftCols(width), dw, db);
  }
  Eigen::Index at = 0;
  auto put = [&](const auto& m) {
    grad->segment(at, m.size()) += m.reshaped();
    at += m.size();
  };
  if (grad->size() != param_count()) throw std::invalid_argument("loss_grad: gradient buffer has the wrong size");
  for (const auto& dp : dlayers) {
    put(dp.key);
    put(dp.query);
    put(dp.value);
    put(dp.proj);
  }
  for (std::size_t i = 0; i < dw.size(); ++i) put(dw[i]);
  for (std::size_t i = 0; i < db.size(); ++i) put(db[i]);
  return loss;
}

double LsaModel::loss_grad_tape(const Task& task, Vec* grad) const {
  using namespace ad;
  Tape tape;
  const TokenMatrix raw = tokens_of(task);
  const TokenLayout lay = raw.layout;
  const int width = lay.d1 + lay.d2;
  const int n = raw.token_count();
  const int ctx = n - 1;
  const int dim = lay.dim();

  struct LayerVars {
    Var key, query, value, proj;
  };
  std::vector<LayerVars> lv;
  for (const auto& p : layers_) {
    lv.push_back({tape.leaf(p.key), tape.leaf(p.query), tape.leaf(p.value), tape.leaf(p.proj)});
  }
  std::vector<Var> ew;
  std::vector<Var> eb;
  if (embed_) {
    for (const auto& w : embed_->weights) ew.push_back(tape.leaf(w));
    for (const auto& b : embed_->biases) eb.push_back(tape.leaf(Mat(b)));
  }

  Var e = tape.constant(raw.rows);
  if (embed_) {
    Var h = block(e, 0, 0, n, width);
    for (std::size_t i = 0; i < ew.size(); ++i) {
      h = add_row_broadcast(matmul(h, transpose(ew[i])), transpose(eb[i]));
      if (i + 1 < ew.size()) {
        switch (embed_->activation) {
          case Activation::relu:
            h = relu(h);
            break;
          case Activation::tanh:
            h = ad::tanh(h);
            break;
          case Activation::identity:
            break;
        }
      }
    }
    e = hconcat({h, block(e, 0, width, n, dim - width)});
  }
  const auto inj = injection(task);
  const Mat inj_rows = injected_rows(inj ? &*inj : nullptr, lay);
  const Var inj_var = tape.constant(inj_rows);
  for (int l = 0; l < stack_.depth; ++l) {
    const LayerVars& p = stack_.share_params ? lv.front() : lv[l];
    const int heads = layer(l).heads;
    const int s = dim / heads;
    const Var src = block(e, 0, 0, ctx, dim);
    Var k = matmul(src, transpose(p.key));
    Var v = matmul(src, transpose(p.value));
    if (inj_rows.rows() > 0) {
      k = vconcat({k, inj_var});
      v = vconcat({v, inj_var});
    }
    const Var q = matmul(e, transpose(p.query));
    std::vector<Var> heads_out;
    for (int h = 0; h < heads; ++h) {
      const Var qh = block(q, 0, h * s, n, s);
      const Var kh = block(k, 0, h * s, k.rows(), s);
      const Var vh = block(v, 0, h * s, v.rows(), s);
      heads_out.push_back(matmul(matmul(qh, transpose(kh)), vh));
    }
    const Var a = heads == 1 ? heads_out.front() : hconcat(heads_out);
    e = add(e, matmul(a, transpose(p.proj)));
  }
  const Var yhat = block(e, ctx, lay.y_offset(), 1, lay.dy);
  const Var diff = sub(yhat, tape.constant(task.query.y.transpose()));
  const Var loss = squared_norm(diff);
  if (grad != nullptr) {
    if (grad->size() != param_count()) throw std::invalid_argument("loss_grad_tape: gradient buffer has the wrong size");
    tape.backward(loss);
    Eigen::Index at = 0;
    auto put = [&](Var v) {
      grad->segment(at, v.grad().size()) += v.grad().reshaped();
      at += v.grad().size();
    };
    for (const auto& p : lv) {
      put(p.key);
      put(p.query);
      put(p.value);
      put(p.proj);
    }
    for (const Var& w : ew) put(w);
    for (const Var& b : eb) put(b);
  }
  return loss.value()(0, 0);
}

Eigen::Index LsaModel::param_count() const {
  Eigen::Index n = 0;
  for (const auto& p : layers_) n += p.key.size() + p.query.size() + p.value.size() + p.proj.size();
  if (embed_) {
    for (const auto& w : embed_->weights) n += w.size();
    for (const auto& b : embed_->biases) n += b.size();
  }
  return n;
}

Vec LsaModel::get_flat() const {
  Vec flat(param_count());
  Eigen::Index at = 0;
  auto put = [&](const auto& m) {
    flat.segment(at, m.size()) = m.reshaped();
    at += m.size();
  };
  for (const auto& p : layers_) {
    put(p.key);
    put(p.query);
    put(p.value);
    put(p.proj);
  }
  if (embed_) {
    for (const auto& w : embed_->weights) put(w);
    for (const auto& b : embed_->biases) put(b);
  }
  return flat;
}

void LsaModel::set_flat(const Vec& flat) {
  if (flat.size() != param_count()) throw std::invalid_argument("set_flat: size mismatch");
  Eigen::Index at = 0;
  auto take = [&](auto& m) {
    m.reshaped() = flat.segment(at, m.size());
    at += m.size();
  };
  for (auto& p : layers_) {
    take(p.key);
    take(p.query);
    take(p.value);
    take(p.proj);
  }
  if (embed_) {
    for (auto& w : embed_->weights) take(w);
    for (auto& b : embed_->biases) take(b);
  }
}

}  // namespace ragicl
