#pragma once

#include "ragicl/attention.hpp"
#include "ragicl/model.hpp"
#include "ragicl/task_synth.hpp"

#include <optional>
#include <vector>

namespace ragicl {

class Rng;

struct LsaModelConfig {
  int depth = 1;
  bool share_params = true;
  bool use_injection = true;  // dot_product tasks only
  int heads = 1;
  double init_scale = 0.1;    // std of the random initial entries
  bool embed = false;
  std::vector<int> embed_hidden{32};
  Activation embed_activation = Activation::relu;
  double embed_scale = 1.0;
};

// Trainable LSA (stack) answering a task through the query y-slot. Parameters
// flatten in the order: per layer key, query, value, proj (column-major), then
// the embedding weights and biases layer by layer.
class LsaModel : public QueryModel {
 public:
  LsaModel() = default;
  LsaModel(std::vector<AttentionParams> layers, StackConfig stack, std::optional<EmbedMLP> embed = std::nullopt,
           bool use_injection = true);

  static LsaModel random(const TokenLayout& layout, const LsaModelConfig& cfg, Rng& rng);

  Vec predict(const Task& task) const override;
  Mat sensitivity(const Task& task) const override;
  std::string name() const override { return "lsa"; }

  // ||yhat - y||^2 at the query; when grad is non-null the gradient is added
  // to it (flattened, see above).
  double loss_grad(const Task& task, Vec* grad) const;
  // Same quantity through the reverse-mode tape.
  double loss_grad_tape(const Task& task, Vec* grad) const;

  Eigen::Index param_count() const;
  Vec get_flat() const;
  void set_flat(const Vec& flat);

  const std::vector<AttentionParams>& layers() const { return layers_; }
  std::vector<AttentionParams>& layers() { return layers_; }
  const StackConfig& stack() const { return stack_; }
  const std::optional<EmbedMLP>& embed() const { return embed_; }
  bool use_injection() const { return use_injection_; }

  // Token matrix after the embedding, and the injection for this task.
  TokenMatrix prepare(const Task& task) const;
  std::optional<DocInjection> injection(const Task& task) const;

 private:
  const AttentionParams& layer(int depth_index) const {
    return stack_.share_params ? layers_.front() : layers_[depth_index];
  }

  std::vector<AttentionParams> layers_;
  StackConfig stack_;
  std::optional<EmbedMLP> embed_;
  bool use_injection_ = true;
};

}  // namespace ragicl
