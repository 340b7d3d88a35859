#include "ragicl/attention.hpp"

#include "ragicl/rng.hpp"
#include "ragicl/task_synth.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ragicl {

void AttentionParams::validate() const {
  const auto d = key.rows();
  auto square = [d](const Mat& m) { return m.rows() == d && m.cols() == d; };
  if (!square(key) || !square(query) || !square(value) || !square(proj)) {
    throw std::invalid_argument("attention params: all matrices must be token_dim x token_dim");
  }
  if (heads <= 0 || d % heads != 0) throw std::invalid_argument("attention params: token_dim must divide into heads");
}

AttentionParams AttentionParams::zeros(int token_dim) {
  const Mat z = Mat::Zero(token_dim, token_dim);
  return {z, z, z, z, 1};
}

AttentionParams AttentionParams::random(int token_dim, double scale, Rng& rng) {
  AttentionParams p;
  p.key = rng.normal_matrix(token_dim, token_dim, scale);
  p.query = rng.normal_matrix(token_dim, token_dim, scale);
  p.value = rng.normal_matrix(token_dim, token_dim, scale);
  p.proj = rng.normal_matrix(token_dim, token_dim, scale);
  return p;
}

DocInjection make_injection(const DocumentSet& docs, int input_dim) {
  DocInjection inj;
  inj.h_d = Mat::Zero(docs.docs.rows(), input_dim);
  const auto cols = std::min<Eigen::Index>(input_dim, docs.docs.cols());
  inj.h_d.leftCols(cols) = docs.docs.leftCols(cols);
  return inj;
}

namespace {

void check_tokens(const AttentionParams& params, const TokenMatrix& tokens) {
  params.validate();
  if (tokens.rows.cols() != params.token_dim()) {
    throw std::invalid_argument("attention: token_dim " + std::to_string(tokens.rows.cols()) +
                                " does not match params " + std::to_string(params.token_dim()));
  }
  if (tokens.token_count() < 1) throw std::invalid_argument("attention: empty token matrix");
}

Mat source_rows(const TokenMatrix& tokens, const AttentionOptions& opts) {
  return opts.query_attends_self ? tokens.rows : Mat(tokens.rows.topRows(tokens.context_size()));
}

// Injection rows lifted into token space (x1 block).
Mat injection_rows(const DocInjection* inject, const TokenMatrix& tokens) {
  if (inject == nullptr) return Mat(0, tokens.rows.cols());
  Mat rows = Mat::Zero(inject->h_d.rows(), tokens.rows.cols());
  const auto cols = std::min<Eigen::Index>(inject->h_d.cols(), tokens.layout.d1);
  rows.leftCols(cols) = inject->h_d.leftCols(cols);
  return rows;
}

}  // namespace

TokenMatrix lsa_forward(const AttentionParams& params, const TokenMatrix& tokens, const DocInjection* inject,
                        const AttentionOptions& opts) {
  check_tokens(params, tokens);
  const Mat src = source_rows(tokens, opts);
  const Mat inj = injection_rows(inject, tokens);
  const Eigen::Index n_src = src.rows();
  const Eigen::Index n_kv = n_src + inj.rows();
  const int s = params.token_dim() / params.heads;

  TokenMatrix out = tokens;
  for (int h = 0; h < params.heads; ++h) {
    const Mat q = tokens.rows * params.query.middleRows(h * s, s).transpose();
    Mat k(n_kv, s);
    Mat v(n_kv, s);
    k.topRows(n_src) = src * params.key.middleRows(h * s, s).transpose();
    v.topRows(n_src) = src * params.value.middleRows(h * s, s).transpose();
    k.bottomRows(inj.rows()) = inj.middleCols(h * s, s);
    v.bottomRows(inj.rows()) = inj.middleCols(h * s, s);
    out.rows.noalias() += ((q * k.transpose()) * v) * params.proj.middleCols(h * s, s).transpose();
  }
  return out;
}

Mat softmax_weights(const AttentionParams& params, const TokenMatrix& tokens, double score_scale, int head,
                    const AttentionOptions& opts) {
  check_tokens(params, tokens);
  const Mat src = source_rows(tokens, opts);
  const int s = params.token_dim() / params.heads;
  const Mat q = tokens.rows * params.query.middleRows(head * s, s).transpose();
  const Mat k = src * params.key.middleRows(head * s, s).transpose();
  Mat w = score_scale * (q * k.transpose());
  for (Eigen::Index j = 0; j < w.rows(); ++j) {
    const double mx = w.row(j).maxCoeff();
    w.row(j) = (w.row(j).array() - mx).exp();
    w.row(j) /= w.row(j).sum();
  }
  return w;
}

TokenMatrix softmax_forward(const AttentionParams& params, const TokenMatrix& tokens, double score_scale,
                            const AttentionOptions& opts) {
  check_tokens(params, tokens);
  const Mat src = source_rows(tokens, opts);
  if (src.rows() == 0) throw std::invalid_argument("softmax attention: no context rows");
  const int s = params.token_dim() / params.heads;
  TokenMatrix out = tokens;
  for (int h = 0; h < params.heads; ++h) {
    const Mat w = softmax_weights(params, tokens, score_scale, h, opts);
    const Mat v = src * params.value.middleRows(h * s, s).transpose();
    out.rows.noalias() += (w * v) * params.proj.middleCols(h * s, s).transpose();
  }
  return out;
}

StackResult stack_forward(std::span<const AttentionParams> params, const StackConfig& cfg, const TokenMatrix& tokens,
                          const DocInjection* inject, const AttentionOptions& opts) {
  if (cfg.depth < 1) throw std::invalid_argument("stack_forward: depth must be at least 1");
  const std::size_t expected = cfg.share_params ? 1 : static_cast<std::size_t>(cfg.depth);
  if (params.size() != expected) {
    throw std::invalid_argument("stack_forward: expected " + std::to_string(expected) + " parameter sets, got " +
                                std::to_string(params.size()));
  }
  StackResult result{tokens, {}};
  result.query_y.reserve(cfg.depth);
  for (int layer = 0; layer < cfg.depth; ++layer) {
    const AttentionParams& p = cfg.share_params ? params[0] : params[layer];
    result.tokens = lsa_forward(p, result.tokens, inject, opts);
    result.query_y.push_back(result.tokens.query_y());
  }
  return result;
}

double activate(Activation act, double v) {
  switch (act) {
    case Activation::identity:
      return v;
    case Activation::relu:
      return v > 0.0 ? v : 0.0;
    case Activation::tanh:
      return std::tanh(v);
  }
  return v;
}

double activate_derivative(Activation act, double v) {
  switch (act) {
    case Activation::identity:
      return 1.0;
    case Activation::relu:
      return v > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: {
      const double t = std::tanh(v);
      return 1.0 - t * t;
    }
  }
  return 1.0;
}

void EmbedMLP::validate() const {
  if (weights.empty() || weights.size() != biases.size()) throw std::invalid_argument("embed mlp: malformed layers");
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i].rows() != biases[i].size()) throw std::invalid_argument("embed mlp: bias width mismatch");
    if (i > 0 && weights[i].cols() != weights[i - 1].rows()) throw std::invalid_argument("embed mlp: width mismatch");
  }
  if (weights.back().rows() != weights.front().cols()) {
    throw std::invalid_argument("embed mlp: output width must equal input width");
  }
}

EmbedMLP EmbedMLP::identity(int width) {
  EmbedMLP mlp;
  mlp.weights.push_back(Mat::Identity(width, width));
  mlp.biases.push_back(Vec::Zero(width));
  mlp.activation = Activation::identity;
  return mlp;
}

EmbedMLP EmbedMLP::random(int width, const std::vector<int>& hidden, Activation act, double scale, Rng& rng) {
  EmbedMLP mlp;
  mlp.activation = act;
  int in = width;
  for (int h : hidden) {
    mlp.weights.push_back(rng.normal_matrix(h, in, scale / std::sqrt(static_cast<double>(in))));
    mlp.biases.push_back(Vec::Zero(h));
    in = h;
  }
  mlp.weights.push_back(rng.normal_matrix(width, in, scale / std::sqrt(static_cast<double>(in))));
  mlp.biases.push_back(Vec::Zero(width));
  return mlp;
}

Vec embed_apply(const EmbedMLP& mlp, const Vec& x) {
  Vec h = x;
  const std::size_t last = mlp.weights.size() - 1;
  for (std::size_t i = 0; i < mlp.weights.size(); ++i) {
    h = mlp.weights[i] * h + mlp.biases[i];
    if (i != last) h = h.unaryExpr([&](double v) { return activate(mlp.activation, v); });
  }
  return h;
}

Mat embed_jacobian(const EmbedMLP& mlp, const Vec& x) {
  Vec h = x;
  Mat jac = Mat::Identity(x.size(), x.size());
  const std::size_t last = mlp.weights.size() - 1;
  for (std::size_t i = 0; i < mlp.weights.size(); ++i) {
    const Vec pre = mlp.weights[i] * h + mlp.biases[i];
    jac = mlp.weights[i] * jac;
    if (i != last) {
      const Vec slope = pre.unaryExpr([&](double v) { return activate_derivative(mlp.activation, v); });
      jac = slope.asDiagonal() * jac;
      h = pre.unaryExpr([&](double v) { return activate(mlp.activation, v); });
    } else {
      h = pre;
    }
  }
  return jac;
}

TokenMatrix embed_forward(const EmbedMLP& mlp, const TokenMatrix& tokens) {
  mlp.validate();
  const int width = tokens.layout.d1 + tokens.layout.d2;
  if (mlp.width() != width) throw std::invalid_argument("embed_forward: mlp width does not match [x1|x2] block");
  TokenMatrix out = tokens;
  for (int r = 0; r < tokens.token_count(); ++r) {
    out.rows.row(r).head(width) = embed_apply(mlp, tokens.rows.row(r).head(width).transpose()).transpose();
  }
  return out;
}

}  // namespace ragicl
