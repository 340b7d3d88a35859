#pragma once

#include "ragicl/linalg.hpp"
#include "ragicl/tokens.hpp"

#include <span>
#include <vector>

namespace ragicl {

class Rng;
struct DocumentSet;

// One self-attention layer. All four matrices are token_dim x token_dim; with
// heads > 1 the projected space is split into equal contiguous chunks.
struct AttentionParams {
  Mat key;
  Mat query;
  Mat value;
  Mat proj;
  int heads = 1;

  int token_dim() const { return static_cast<int>(key.rows()); }
  void validate() const;

  static AttentionParams zeros(int token_dim);
  static AttentionParams random(int token_dim, double scale, Rng& rng);
};

// Fixed document rows appended to the keys and values (never the queries).
// Rows are k x n_I and land in the x1 block of the token space.
struct DocInjection {
  Mat h_d;
};

// Row-wise identity projection of the documents, padded or truncated to
// `input_dim` columns.
DocInjection make_injection(const DocumentSet& docs, int input_dim);

struct AttentionOptions {
  // Default: keys/values come from the context rows only, so the query row
  // does not attend to itself.
  bool query_attends_self = false;
};

// e_j + sum_h P_h V_h K_h^T q_{h,j} for every row j.
TokenMatrix lsa_forward(const AttentionParams& params, const TokenMatrix& tokens,
                        const DocInjection* inject = nullptr, const AttentionOptions& opts = {});

// Standard softmax attention: softmax over the context keys of each query, scores
// multiplied by `score_scale` first. No bias terms.
TokenMatrix softmax_forward(const AttentionParams& params, const TokenMatrix& tokens,
                            double score_scale = 1.0, const AttentionOptions& opts = {});

// Softmax attention weights (rows: queries, cols: context keys).
Mat softmax_weights(const AttentionParams& params, const TokenMatrix& tokens, double score_scale = 1.0,
                    int head = 0, const AttentionOptions& opts = {});

struct StackConfig {
  int depth = 1;
  bool share_params = true;
};

struct StackResult {
  TokenMatrix tokens;
  std::vector<Vec> query_y;  // query y-slot after each layer
};

// `params` holds one entry when share_params is set, otherwise `depth`.
StackResult stack_forward(std::span<const AttentionParams> params, const StackConfig& cfg,
                          const TokenMatrix& tokens, const DocInjection* inject = nullptr,
                          const AttentionOptions& opts = {});

enum class Activation { identity, relu, tanh };

// MLP over the input-feature block [x1 | x2] of every token. The last layer is
// linear and maps back to the block width, so the token layout is preserved.
struct EmbedMLP {
  std::vector<Mat> weights;
  std::vector<Vec> biases;
  Activation activation = Activation::relu;

  int width() const { return weights.empty() ? 0 : static_cast<int>(weights.front().cols()); }
  int hidden_layers() const { return static_cast<int>(weights.size()) - 1; }
  void validate() const;

  static EmbedMLP identity(int width);
  static EmbedMLP random(int width, const std::vector<int>& hidden, Activation act, double scale, Rng& rng);
};

Vec embed_apply(const EmbedMLP& mlp, const Vec& x);
Mat embed_jacobian(const EmbedMLP& mlp, const Vec& x);
TokenMatrix embed_forward(const EmbedMLP& mlp, const TokenMatrix& tokens);

double activate(Activation act, double v);
double activate_derivative(Activation act, double v);

}  // namespace ragicl
