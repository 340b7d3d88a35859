#pragma once

#include "ragicl/lsa_model.hpp"
#include "ragicl/raggd.hpp"
#include "ragicl/tabular.hpp"
#include "ragicl/task_synth.hpp"
#include "ragicl/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ragicl {

// Bad config file, unknown key or unparsable value. Maps to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Experiment {
  verify_construction,
  train_align,
  doc_sweep,
  shift_sweep,
  depth_sweep,
  normalize_study,
  raggd_toy,
};

std::string_view to_string(Experiment e);
Experiment parse_experiment(std::string_view text);

// Flat "section.key" -> value store. Every known key has a default; files
// and overrides may only set known keys.
class ConfigTree {
 public:
  static ConfigTree defaults();

  // INI file with [section] headers. A JSON run manifest is accepted too:
  // its "config" object is read back as the effective configuration.
  void merge_file(const std::filesystem::path& path);
  void merge_ini(std::istream& is);
  // "section.key=value".
  void set(std::string_view assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  // Canonical text: sorted "key=value" lines, excluding keys that cannot
  // change results (output location, worker count).
  std::string canonical() const;
  std::string hash() const;  // 16 hex digits, FNV-1a of canonical()

 private:
  std::map<std::string, std::string> values_;
};

struct VerifySettings {
  int tasks = 1000;
  int max_dim = 10;
  std::vector<int> stack_steps{2, 5};
  int stack_tasks = 100;
  double tolerance = 1e-10;
  double eta = 0.1;
  // "none" or "key_block": shift the key x1 block by one column, to check
  // that a broken construction is caught and localized.
  std::string fault = "none";
};

struct EvalSettings {
  int tasks = 10000;              // T_val
  int line_search_tasks = 10000;  // T_train for the eta line search
};

struct TabularSettings {
  std::filesystem::path data_dir;
  std::vector<std::string> datasets;
  std::vector<NormalizerKind> normalizers;
  bool include_leaky_counts = false;
  int n_context = 10;
  int docs = 5;
  std::vector<int> embed_hidden{32};
  int synthetic_features = 8;
  std::size_t synthetic_train = 4000;
  std::size_t synthetic_test = 1000;
  double synthetic_noise = 0.1;
  int eval_tasks = 2000;
  // Training of the embedded model; the other settings come from [train].
  int steps = 2000;
  int batch = 64;
  double lr = 1e-3;
};

struct RunConfig {
  Experiment experiment = Experiment::train_align;
  std::vector<InterfaceKind> interfaces;
  std::vector<int> docs;
  std::vector<double> alphas;
  std::vector<int> depths;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path out_dir;
  int workers = 0;
  bool reload = false;  // reuse matching checkpoints found under out_dir

  TaskConfig task;
  TrainConfig train;
  LsaModelConfig model;
  // Stacks deeper than one layer train with these instead of train.lr,
  // train.warmup, train.grad_clip and model.init_scale.
  TrainConfig deep_train;
  double deep_init_scale = 0.02;
  EvalSettings eval;
  VerifySettings verify;
  TabularSettings tabular;
  ToyConfig toy;

  ConfigTree tree;
  std::string hash;
};

// Environment variable naming the default output directory.
inline constexpr const char* kOutDirEnv = "RAGICL_OUT_DIR";

// Typed view of a tree; throws ConfigError on invalid values.
RunConfig resolve(const ConfigTree& tree);

std::string version();

}  // namespace ragicl
