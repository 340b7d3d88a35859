#pragma once

#include "ragicl/task_synth.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ragicl {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

// Header row required; quoted fields allowed. Throws std::runtime_error on an
// empty input or a row whose width differs from the header.
CsvTable parse_csv(std::istream& is, char delimiter = ',');
CsvTable read_csv(const std::filesystem::path& path, char delimiter = ',');
void write_csv(std::ostream& os, const CsvTable& table, char delimiter = ',');

// Per-dataset ingestion recipe: which columns are features, which is the
// target, how categorical strings map to numbers and how many rows go to
// each split.
struct DatasetRecipe {
  std::string name;
  std::vector<std::string> features;
  std::vector<std::string> target_candidates;  // first present header wins
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::map<std::string, std::map<std::string, double>> categorical;  // column -> lowercase value -> code
};

struct RecipeOptions {
  // Bike Sharing: keep casual/registered, whose sum is the target.
  bool include_leaky_counts = false;
};

std::vector<std::string> recipe_names();
DatasetRecipe recipe(std::string_view name, const RecipeOptions& opts = {});

struct TabularDataset {
  std::string name;
  std::vector<std::string> feature_names;
  Mat x_train;
  Mat x_test;
  Vec y_train;
  Vec y_test;
  std::size_t dropped_rows = 0;  // rows with missing or unparsable values
};

// Rows are shuffled with a seeded Fisher-Yates pass, then the first
// train_size rows form the training split and the next test_size rows the
// test split. If the file is shorter, the declared test size is kept and the
// remainder goes to training. Throws on schema mismatch or too few rows.
TabularDataset from_table(const DatasetRecipe& recipe, const CsvTable& table, std::uint64_t seed);
TabularDataset load(std::string_view name, const std::filesystem::path& path, std::uint64_t seed = 0,
                    const RecipeOptions& opts = {});

enum class NormalizerKind { zscore, minmax, rank, tanh };
std::string_view to_string(NormalizerKind kind);
NormalizerKind parse_normalizer(std::string_view text);
std::vector<NormalizerKind> all_normalizers();

// Per-feature statistics fitted on training rows only.
class Normalizer {
 public:
  static constexpr double kStdFloor = 1e-12;

  explicit Normalizer(NormalizerKind kind) : kind_(kind) {}
  void fit(const Mat& train);
  Mat apply(const Mat& x) const;
  NormalizerKind kind() const { return kind_; }

  const Vec& mean() const { return mean_; }
  const Vec& stddev() const { return std_; }  // population std, floored
  const Vec& min() const { return min_; }
  const Vec& max() const { return max_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  bool operator==(const Normalizer& other) const;

 private:
  double rank_of(Eigen::Index feature, double v) const;

  NormalizerKind kind_;
  Vec mean_;
  Vec std_;
  Vec min_;
  Vec max_;
  // rank: sorted distinct training values and their fractional ranks r/(n+1),
  // ties averaged.
  std::vector<std::vector<double>> values_;
  std::vector<std::vector<double>> ranks_;
  std::vector<std::string> warnings_;
};

struct NormalizedSplits {
  Mat train;
  Mat test;
  Normalizer normalizer;
};

NormalizedSplits fit_apply(NormalizerKind kind, const Mat& train, const Mat& test);

// The retrieval corpus: training rows z-scored with training statistics,
// whatever the input-side normalizer is.
DocumentSet build_corpus(const TabularDataset& data);

// In-context regression tasks drawn from one dataset. Context rows come from
// the training split; the query comes from training (for model fitting) or
// test (for evaluation). Inputs use the chosen normalizer, targets are
// standardized with training statistics, and each task retrieves the k
// corpus rows with the largest dot product against the z-scored query. The
// interface is dot_product: x2 = x1 and the documents are injected.
class TabularTaskSource {
 public:
  TabularTaskSource(const TabularDataset& data, NormalizerKind kind, int n_context, int doc_count,
                    std::uint64_t seed);

  Task train_task(std::uint64_t index) const;
  Task test_task(std::uint64_t index) const;
  int input_dim() const { return static_cast<int>(inputs_train_.cols()); }
  const Normalizer& normalizer() const { return splits_.normalizer; }
  const DocumentSet& corpus() const { return corpus_; }

 private:
  Task make(std::uint64_t index, bool from_test) const;

  NormalizedSplits splits_;
  Mat inputs_train_;
  Mat inputs_test_;
  Mat zs_train_;  // z-scored rows used for retrieval
  Mat zs_test_;
  Vec y_train_;
  Vec y_test_;
  DocumentSet corpus_;
  int n_context_;
  int doc_count_;
  std::uint64_t seed_;
};

// Synthetic datasets for the normalization boundary: features either bounded
// uniform on [0, 1] or heavy-tailed log-normal; the target is a fixed linear
// function of the z-scored features plus noise.
enum class SyntheticFeatures { uniform, lognormal };
TabularDataset synthetic_dataset(SyntheticFeatures kind, int features, std::size_t train, std::size_t test,
                                 double noise, std::uint64_t seed);

}  // namespace ragicl
