#pragma once

#include "ragicl/attention.hpp"
#include "ragicl/linalg.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ragicl {

class Rng;

struct ToyConfig {
  // Generator.
  int width = 16;
  int depth = 2;
  int rank = 4;
  int docs = 4;
  double readout_gain = 1.0;
  double layer2_scale = 0.3;   // layer-2 entries ~ N(0, (scale / sqrt(width))^2)
  double coupling_sd = 0.3;    // layer-1 score maps are I + N(0, sd^2)
  bool layer2_self = true;     // layer 2 lets the query row attend to itself
  // Task family.
  int demos = 3;               // support size N
  int queries = 8;             // evaluation queries per context
  double feature_mean = 1.0;
  double feature_sd = 0.3;
  double noise = 0.05;
  double radius_lo = 0.5;
  double radius_hi = 1.5;
  double source_arc = 1.5;     // source latent angles in [0, source_arc * pi); the rest is held out
  // Inner loop. With eta_search set, inner_eta is replaced by the grid value
  // minimizing the mean one-step query loss over probe training contexts;
  // a grid value under which any probe ends max(ks) steps with a higher
  // support loss than it started with is unstable, and a value qualifies only
  // if every grid value up to eta_margin times it is stable.
  double inner_eta = 1e-2;
  bool eta_search = true;
  double eta_lo = 1e-4;
  double eta_hi = 1e-1;
  int eta_points = 25;
  int eta_probe_contexts = 100;
  double eta_margin = 2.0;
  std::vector<int> ks{1, 5, 10};
  // Base interface W0.
  int base_steps = 3000;
  int base_contexts = 64;
  int base_instances = 4;
  double base_lr = 3e-3;
  double base_init = 0.1;
  // Predictor.
  int hidden = 256;
  int trunk_out = 64;
  int train_contexts = 8000;
  int test_contexts = 500;
  int holdout_contexts = 500;
  int epochs = 60;
  int batch = 64;
  double lr = 1e-3;
  double lambda = 0.1;
  double zero_block_penalty = 1.0;

  void validate() const;
};

// Per (layer, projection) rank-r factors; block index = 3 * layer + p with
// p = 0 (query), 1 (key), 2 (value).
struct LowRankUpdate {
  int layers = 0;
  int width = 0;
  int rank = 0;
  std::vector<Mat> u;  // width x rank
  std::vector<Mat> v;

  static LowRankUpdate zeros(int layers, int width, int rank);
  int blocks() const { return 3 * layers; }
  std::vector<Mat> dense() const;  // U V^T per block
  Vec flat() const;
  void set_flat(const Vec& flat);
  Eigen::Index size() const { return static_cast<Eigen::Index>(blocks()) * 2 * width * rank; }
};

std::vector<Mat> dense_difference(const LowRankUpdate& a, const LowRankUpdate& b);  // dense(a) - dense(b)

struct ToyInstance {
  Vec x;     // 2
  Mat a;     // docs x 2 document keys
  Vec c;     // docs document values
  double y = 0.0;
};

struct ToyContext {
  Vec beta;
  bool transfer = false;
  std::vector<ToyInstance> support;
  std::vector<ToyInstance> queries;
};

// Latent-indexed regression family: y = (1/k) sum_i c_i a_i^T M(beta) x +
// noise with M(beta) = M_src + beta_1 B_1 + beta_2 B_2.
struct ToyFamily {
  Mat m_src;
  Mat b1;
  Mat b2;

  static ToyFamily sample(Rng& rng);
  Vec sample_beta(const ToyConfig& cfg, bool transfer, Rng& rng) const;
  ToyInstance sample_instance(const ToyConfig& cfg, const Vec& beta, Rng& rng) const;
  ToyContext sample_context(const ToyConfig& cfg, bool transfer, int queries, std::uint64_t seed) const;
};

// Frozen two-layer linear-attention generator. Documents are key/value-only
// rows (they never issue queries); layer 1 excludes the query from its own
// keys, layer 2 includes it. The answer is readout_gain times the PRED slot of
// the final query row.
class ToyGenerator {
 public:
  static constexpr int kSlotX = 0;
  static constexpr int kSlotA = 2;
  static constexpr int kSlotC = 4;
  static constexpr int kSlotY = 5;
  static constexpr int kSlotPred = 6;
  static constexpr int kSlotFlag = 7;
  static constexpr int kScratch = 8;

  static ToyGenerator build(const ToyConfig& cfg, Rng& rng);

  const ToyConfig& config() const { return cfg_; }
  const std::vector<AttentionParams>& backbone() const { return backbone_; }
  std::uint64_t backbone_hash() const;

  // Frozen projections plus dense deltas (one per block, or empty for none).
  std::vector<Mat> effective(const std::vector<Mat>& deltas) const;
  std::vector<Mat> effective(const LowRankUpdate& w) const { return effective(w.dense()); }

  // Final query row; with_answer puts y in the Y slot (demonstration encoding).
  Vec forward(const ToyInstance& inst, const std::vector<Mat>& eff, bool with_answer = false) const;
  double predict(const ToyInstance& inst, const std::vector<Mat>& eff) const;
  double mean_loss(const std::vector<ToyInstance>& insts, const std::vector<Mat>& eff) const;

  // Mean squared error over `insts` under interface `w`; the gradient w.r.t.
  // the flattened factors is computed with the reverse-mode tape.
  double loss_grad(const std::vector<ToyInstance>& insts, const LowRankUpdate& w, Vec* grad) const;

  // Mean-pooled final hidden states of the demonstrations under interface w.
  Vec encode(const std::vector<ToyInstance>& support, const LowRankUpdate& w) const;

  // Multiply-add based flop estimates.
  double forward_flops() const;
  double compose_flops() const;

 private:
  ToyConfig cfg_;
  std::vector<AttentionParams> backbone_;
};

struct BaseTrainResult {
  LowRankUpdate w0;
  std::vector<double> curve;
};

BaseTrainResult train_base_interface(const ToyGenerator& gen, const ToyFamily& family, std::uint64_t seed);

struct EtaSearchResult {
  double eta = 0.0;
  std::vector<double> grid;
  std::vector<double> losses;  // mean one-step query loss; +inf when disqualified
};

EtaSearchResult search_inner_eta(const ToyGenerator& gen, const ToyFamily& family, const LowRankUpdate& w0,
                                 std::uint64_t seed);

// W^(K) after K full-batch SGD steps on the support loss, started at w0.
LowRankUpdate gd_adapt(const ToyGenerator& gen, const std::vector<ToyInstance>& support, const LowRankUpdate& w0,
                       double eta, int steps);

// Dense targets dense(W^(K)) - dense(W0) for each K in `ks` (ascending), from
// a single trajectory.
std::vector<std::vector<Mat>> gd_targets(const ToyGenerator& gen, const std::vector<ToyInstance>& support,
                                         const LowRankUpdate& w0, double eta, const std::vector<int>& ks);

// sum over blocks of 1 - cos_F(P, T) + lambda |log(||P|| / ||T||)|. A
// zero-norm target block contributes `zero_penalty` and no gradient. When
// grads is non-null it receives dLoss/dP per block.
double matching_loss(const std::vector<Mat>& pred, const std::vector<Mat>& target, double lambda,
                     double zero_penalty = 1.0, std::vector<Mat>* grads = nullptr);

// Trunk MLP (width -> hidden -> trunk_out, relu) and one linear head per
// block emitting (U, V). Inputs are standardized with statistics fitted on the
// training encodings.
class Predictor {
 public:
  Predictor() = default;
  Predictor(const ToyConfig& cfg, Rng& rng);

  LowRankUpdate forward(const Vec& encoding) const;
  void set_standardization(const Vec& mean, const Vec& stddev);

  Eigen::Index param_count() const;
  Vec get_flat() const;
  void set_flat(const Vec& flat);

  // Mean matching loss over a batch and its gradient (flattened).
  double batch_loss_grad(const std::vector<const Vec*>& enc, const std::vector<const std::vector<Mat>*>& targets,
                         Vec* grad) const;

  double forward_flops() const;

 private:
  int width_ = 0;
  int rank_ = 0;
  int blocks_ = 0;
  double lambda_ = 0.1;
  double zero_penalty_ = 1.0;
  Vec mean_;
  Vec inv_std_;
  Mat w1_, w2_;
  Vec b1_, b2_;
  std::vector<Mat> wh_;
  std::vector<Vec> bh_;
};

struct PredictorSample {
  Vec encoding;
  std::vector<Mat> target;
};

std::vector<double> train_predictor(Predictor& predictor, const std::vector<PredictorSample>& data,
                                    const ToyConfig& cfg, std::uint64_t seed);

double mean_matching_loss(const Predictor& predictor, const std::vector<PredictorSample>& data, const ToyConfig& cfg);

// Forward-only adaptation: one predictor pass, then the generator answers
// with W0 + predicted update. No tape is created.
std::vector<double> deploy(const ToyGenerator& gen, const LowRankUpdate& w0, const Predictor& predictor,
                           const std::vector<ToyInstance>& support, const std::vector<ToyInstance>& queries);

struct SuiteRow {
  std::string method;  // base, tt_sgd, amortized
  int k = 0;
  bool transfer = false;
  double eval_loss = 0.0;
  double flops_per_query = 0.0;
  double wall_ms_per_query = 0.0;
};

// Mean query loss and per-query cost for one method over a context set.
SuiteRow evaluate_base(const ToyGenerator& gen, const LowRankUpdate& w0, const std::vector<ToyContext>& contexts);
SuiteRow evaluate_tt_sgd(const ToyGenerator& gen, const LowRankUpdate& w0, const std::vector<ToyContext>& contexts,
                         double eta, int k);
SuiteRow evaluate_amortized(const ToyGenerator& gen, const LowRankUpdate& w0, const Predictor& predictor,
                            const std::vector<ToyContext>& contexts, int k);

}  // namespace ragicl
