#pragma once

#include "ragicl/alignment.hpp"
#include "ragicl/harness_config.hpp"
#include "ragicl/lsa_model.hpp"
#include "ragicl/raggd.hpp"
#include "ragicl/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ragicl {

// Anything that goes wrong while running a valid configuration (unreadable
// data, I/O failure, an experiment that cannot proceed). Maps to exit code 3.
struct RuntimeFault : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// verify

struct VerifyCheck {
  std::uint64_t seed = 0;
  InterfaceKind interface = InterfaceKind::dot_product;
  std::string check;  // "single_step" or "stack"
  int steps = 1;
  int tasks = 0;
  double max_deviation = 0.0;
  bool pass = false;
  std::string diagnostic;  // location of the worst deviation
};

struct VerifyReport {
  double tolerance = 0.0;
  std::vector<VerifyCheck> checks;
  bool pass() const;
  double max_deviation() const;
};

// Constructed LSA against gd_step (one layer) and gd_trajectory (refreshed
// stacks) on random tasks of random shape, for every seed and interface.
VerifyReport run_verify(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// alignment experiments

struct AlignmentRow {
  std::string experiment;
  InterfaceKind interface = InterfaceKind::dot_product;
  int depth = 1;
  int docs = 0;
  double alpha = 1.0;
  std::uint64_t seed = 0;
  AlignmentReport report;
  double eta = 0.0;
  std::string status = "ok";  // "ok" or "failed: <reason>"
  bool ok() const { return status == "ok"; }
};

struct TrainedPoint {
  LsaModel model;
  TrainResult result;
  double eta = 0.0;
  std::vector<double> eta_losses;  // line-search losses over the default grid
};

// Trained models keyed by everything that determines them. Sharing one cache
// across experiments lets a sweep reuse the model another sweep trained at
// the same point; a replay should use a fresh cache so it retrains.
class ModelCache {
 public:
  std::shared_ptr<const TrainedPoint> find(const std::string& key) const;
  void put(const std::string& key, std::shared_ptr<const TrainedPoint> point);

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<const TrainedPoint>> points_;
};

// Task settings for a sweep point: interface, document count, training at the
// configured alpha.
TaskConfig point_task(const RunConfig& cfg, InterfaceKind interface, int docs);

// Line search over steps = depth, then train. Divergence is reported through
// result.diverged, not thrown.
TrainedPoint train_point(const RunConfig& cfg, const TaskConfig& task, int depth, std::uint64_t seed, int workers);

// Held-out tasks for a point; alpha scales the query range only.
std::vector<Task> eval_tasks(const RunConfig& cfg, const TaskConfig& task, double alpha, std::uint64_t seed);

struct AlignmentRun {
  std::vector<AlignmentRow> rows;
  // Trained models and loss curves, keyed by point label.
  std::map<std::string, std::shared_ptr<const TrainedPoint>> points;
};

// train_align: one point per interface at task.doc_count, depth 1, alpha 1.
// doc_sweep / shift_sweep / depth_sweep: the sweeps over run.docs, run.alphas
// (model trained at alpha 1) and run.depths x run.docs.
AlignmentRun run_alignment(const RunConfig& cfg, ModelCache* cache = nullptr);

// ---------------------------------------------------------------------------
// normalization study

struct NormalizeRow {
  std::string dataset;
  std::string source;  // "real" or "synthetic"
  NormalizerKind normalizer = NormalizerKind::zscore;
  std::uint64_t seed = 0;
  int docs = 0;
  AlignmentReport report;
  double eta = 0.0;
  std::string status = "ok";  // "ok", "failed: ..." or "skipped: ..."
};

std::vector<NormalizeRow> run_normalize_study(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// toy RAG-GD pipeline

struct RaggdRow {
  std::uint64_t seed = 0;
  double eta = 0.0;
  SuiteRow row;
};

struct MatchingRow {
  std::uint64_t seed = 0;
  int k = 0;
  std::string split;  // "test" or "holdout"
  double trained = 0.0;
  double untrained = 0.0;
};

struct RaggdSeedArtifacts {
  std::uint64_t seed = 0;
  ToyGenerator generator;
  LowRankUpdate w0;
  std::vector<double> base_curve;
  EtaSearchResult eta;
  std::map<int, Predictor> predictors;  // by K
  std::map<int, std::vector<double>> predictor_curves;
};

struct RaggdRun {
  std::vector<RaggdRow> rows;
  std::vector<MatchingRow> matching;
  std::vector<RaggdSeedArtifacts> seeds;
};

RaggdRun run_raggd(const RunConfig& cfg);

// ---------------------------------------------------------------------------
// persistence

struct RunManifest {
  std::string experiment;
  std::string config_hash;
  std::string version;
  std::map<std::string, std::string> config;
  std::vector<std::string> outputs;                               // shared CSVs, relative to out_dir
  std::map<std::uint64_t, std::vector<std::string>> seed_outputs;  // per-seed artifacts
  std::string started;
  std::string finished;
};

struct RunSummary {
  RunManifest manifest;
  std::filesystem::path out_dir;
  bool verify_pass = true;  // verify_construction only
  std::size_t failed_rows = 0;
  VerifyReport verify;
  AlignmentRun alignment;
  std::vector<NormalizeRow> normalize;
  RaggdRun raggd;
};

// Runs cfg.experiment, writes its CSVs, per-seed artifacts and manifest.json
// into cfg.out_dir (created if missing).
RunSummary run_experiment(const RunConfig& cfg, ModelCache* cache = nullptr);

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);
RunManifest read_manifest(const std::filesystem::path& path);

// Column names of the alignment CSV; the first nine are fixed.
std::vector<std::string> alignment_header();

// Compares every CSV named in two manifests' outputs, cell by cell, skipping
// columns whose name starts with "wall_". Returns human-readable mismatches
// (empty when the payloads agree).
std::vector<std::string> compare_payloads(const std::filesystem::path& dir_a, const std::filesystem::path& dir_b);

// Summary tables (markdown) over every manifest found under `dir`.
std::string report(const std::filesystem::path& dir);

}  // namespace ragicl
