#include "ragicl/harness.hpp"

#include "ragicl/checkpoint.hpp"
#include "ragicl/gd_equivalence.hpp"
#include "ragicl/parallel.hpp"
#include "ragicl/rng.hpp"
#include "ragicl/tabular.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>

namespace ragicl {

namespace fs = std::filesystem;

namespace {

// Stream indices under a run seed. Each consumer owns one so that adding a
// consumer never shifts another's random numbers.
enum Stream : std::uint64_t {
  kVerifySingle = 1,
  kVerifyStack = 2,
  kTrainTasks = 10,
  kEvalTasks = 11,
  kModelInit = 12,
  kTabularData = 20,
  kTabularTasks = 21,
  kTabularInit = 22,
  kToyGenerator = 30,
  kToyFamily = 31,
  kToyBase = 32,
  kToyEta = 33,
  kToyTrain = 34,
  kToyTest = 35,
  kToyHoldout = 36,
  kToyPredictorInit = 40,
  kToyPredictorTrain = 50,
};

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string num(double v) { return format_double(v); }

std::string timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Rows from concurrent jobs reach the file in job order: a job's rows are
// held back until every earlier job has been written.
class OrderedCsvWriter {
 public:
  OrderedCsvWriter(const fs::path& path, std::vector<std::string> header, std::size_t jobs)
      : out_(path), pending_(jobs), done_(jobs, false) {
    if (!out_) throw RuntimeFault("cannot write " + path.string());
    write_rows({std::move(header)});
  }

  void submit(std::size_t job, std::vector<std::vector<std::string>> rows) {
    std::lock_guard lock(mu_);
    pending_[job] = std::move(rows);
    done_[job] = true;
    while (next_ < done_.size() && done_[next_]) {
      write_rows(pending_[next_]);
      pending_[next_].clear();
      ++next_;
    }
    out_.flush();
    if (!out_) throw RuntimeFault("write failed");
  }

 private:
  void write_rows(const std::vector<std::vector<std::string>>& rows) {
    for (const auto& r : rows) write_csv(out_, CsvTable{r, {}});
  }

  std::ofstream out_;
  std::mutex mu_;
  std::vector<std::vector<std::vector<std::string>>> pending_;
  std::vector<bool> done_;
  std::size_t next_ = 0;
};

void write_table(const fs::path& path, const CsvTable& table) {
  std::ofstream out(path);
  if (!out) throw RuntimeFault("cannot write " + path.string());
  write_csv(out, table);
  if (!out) throw RuntimeFault("write failed: " + path.string());
}

// Outer jobs get the worker pool; inner loops run serially when the pool is
// already split across jobs.
int inner_workers(const RunConfig& cfg, std::size_t jobs) {
  const int w = cfg.workers > 0 ? cfg.workers : default_workers();
  return jobs > 1 && w > 1 ? 1 : w;
}

// ---------------------------------------------------------------------------
// verify helpers

Task verify_task(InterfaceKind iface, int max_dim, std::uint64_t seed) {
  Rng rng(seed);
  TaskConfig tc;
  tc.interface = iface;
  tc.output_dim = 1;
  tc.n_context = 1 + static_cast<int>(rng.below(20));
  tc.input_dim = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_dim)));
  if (iface == InterfaceKind::dot_product) {
    tc.doc_count = 1 + static_cast<int>(rng.below(10));
  } else {
    tc.doc_dim = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_dim)));
    tc.doc_count = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_dim / tc.doc_dim)));
  }
  return sample_task(tc, rng.engine()());
}

void inject_fault(const std::string& fault, AttentionParams& p, const TokenLayout& layout) {
  if (fault != "key_block") return;
  // Off-by-one: the x1 key block lands one column to the right (cyclically).
  const Mat block = p.key.block(layout.x1_offset(), layout.x1_offset(), layout.d1, layout.d1);
  for (int c = 0; c < layout.d1; ++c) {
    p.key.block(layout.x1_offset(), layout.x1_offset() + (c + 1) % layout.d1, layout.d1, 1) = block.col(c);
  }
}

std::string slot_name(const TokenLayout& layout, int col) {
  if (col < layout.x2_offset()) return "x1[" + std::to_string(col) + "]";
  if (col < layout.y_offset()) return "x2[" + std::to_string(col - layout.x2_offset()) + "]";
  return "y[" + std::to_string(col - layout.y_offset()) + "]";
}

const char* block_name(int idx) {
  static const char* names[] = {"x1", "x2", "y"};
  return names[idx];
}

// First block of a constructed layer that differs from the expected
// pattern (key/query blockdiag(I, I, 0), value y-rows [W1 W2 -I], proj
// -(eta/n) on y); empty when none does.
std::string audit_layer(const AttentionParams& p, const Mat& w1, const Mat& w2, double eta, int n,
                        const TokenLayout& layout) {
  const int offs[] = {layout.x1_offset(), layout.x2_offset(), layout.y_offset()};
  const int sizes[] = {layout.d1, layout.d2, layout.dy};
  auto expect_score = [&](int r, int c) -> Mat {
    if (r == c && r < 2) return Mat::Identity(sizes[r], sizes[c]);
    return Mat::Zero(sizes[r], sizes[c]);
  };
  auto expect_value = [&](int r, int c) -> Mat {
    if (r != 2) return Mat::Zero(sizes[r], sizes[c]);
    if (c == 0) return w1;
    if (c == 1) return w2;
    return -Mat::Identity(sizes[2], sizes[2]);
  };
  auto expect_proj = [&](int r, int c) -> Mat {
    if (r == 2 && c == 2) return Mat::Identity(sizes[2], sizes[2]) * (-eta / n);
    return Mat::Zero(sizes[r], sizes[c]);
  };
  const std::pair<const char*, const Mat*> mats[] = {{"key", &p.key}, {"query", &p.query}, {"value", &p.value},
                                                     {"proj", &p.proj}};
  for (int m = 0; m < 4; ++m) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) {
        if (sizes[r] == 0 || sizes[c] == 0) continue;
        const Mat want = m < 2 ? expect_score(r, c) : m == 2 ? expect_value(r, c) : expect_proj(r, c);
        const Mat got = mats[m].second->block(offs[r], offs[c], sizes[r], sizes[c]);
        const double off = (got - want).cwiseAbs().maxCoeff();
        if (off > 1e-15 * (1.0 + want.cwiseAbs().maxCoeff())) {
          return std::string(mats[m].first) + "[" + block_name(r) + "," + block_name(c) + "] off by " + num(off);
        }
      }
    }
  }
  return {};
}

std::string shape_of(const Task& task) {
  return "d1=" + std::to_string(task.input_dim()) + " d2=" + std::to_string(task.retrieval_dim()) +
         " n=" + std::to_string(task.context.size());
}

VerifyCheck verify_single(const VerifySettings& vs, InterfaceKind iface, std::uint64_t seed, int workers) {
  VerifyCheck check{seed, iface, "single_step", 1, vs.tasks, 0.0, true, {}};
  std::vector<double> dev(static_cast<std::size_t>(vs.tasks), 0.0);
  std::vector<std::string> where(static_cast<std::size_t>(vs.tasks));
  const std::uint64_t base = stream_seed(seed, kVerifySingle + 100 * static_cast<std::uint64_t>(iface));
  parallel_for(
      static_cast<std::size_t>(vs.tasks),
      [&](std::size_t i) {
        const Task task = verify_task(iface, vs.max_dim, stream_seed(base, i));
        Rng rng(stream_seed(base, i + (1ULL << 40)));
        const Mat w1 = rng.normal_matrix(task.output_dim(), task.input_dim(), 0.5);
        const Mat w2 = rng.normal_matrix(task.output_dim(), task.retrieval_dim(), 0.5);
        const GdStepResult gd = gd_step(w1, w2, task.context, vs.eta, task.query.x1, task.query.x2);
        const TokenMatrix in = tokens_of(task);
        AttentionParams p = construct_lsa(w1, w2, vs.eta, task.context.size(), in.layout);
        inject_fault(vs.fault, p, in.layout);
        const TokenMatrix out = lsa_forward(p, in);
        const Mat delta = out.rows - in.rows;
        const int q = in.query_index();
        double worst = 0.0;
        std::string at;
        for (int j = 0; j < in.layout.dy; ++j) {
          const double d = std::abs(delta(q, in.layout.y_offset() + j) - gd.dy_query(j));
          if (d > worst) {
            worst = d;
            at = "query " + slot_name(in.layout, in.layout.y_offset() + j) + " shift vs gd_step";
          }
        }
        // The x-coordinates of every token stay put.
        for (int r = 0; r < in.token_count(); ++r) {
          for (int c = 0; c < in.layout.y_offset(); ++c) {
            const double d = std::abs(delta(r, c));
            if (d > worst) {
              worst = d;
              at = "token " + std::to_string(r) + " " + slot_name(in.layout, c) + " changed";
            }
          }
        }
        dev[i] = worst;
        if (worst > vs.tolerance) {
          std::string blame = audit_layer(p, w1, w2, vs.eta, task.context.size(), in.layout);
          where[i] = "task " + std::to_string(i) + " (" + shape_of(task) + "): " + at + " by " + num(worst) +
                     (blame.empty() ? "" : "; constructed " + blame);
        }
      },
      workers);
  for (std::size_t i = 0; i < dev.size(); ++i) {
    if (dev[i] > check.max_deviation) check.max_deviation = dev[i];
    if (check.diagnostic.empty() && !where[i].empty()) check.diagnostic = where[i];
  }
  check.pass = check.max_deviation <= vs.tolerance;
  return check;
}

VerifyCheck verify_stack(const VerifySettings& vs, InterfaceKind iface, int steps, std::uint64_t seed, int workers) {
  VerifyCheck check{seed, iface, "stack", steps, vs.stack_tasks, 0.0, true, {}};
  std::vector<double> dev(static_cast<std::size_t>(vs.stack_tasks), 0.0);
  std::vector<std::string> where(static_cast<std::size_t>(vs.stack_tasks));
  const std::uint64_t base =
      stream_seed(seed, kVerifyStack + 100 * static_cast<std::uint64_t>(iface) + 1000 * static_cast<std::uint64_t>(steps));
  parallel_for(
      static_cast<std::size_t>(vs.stack_tasks),
      [&](std::size_t i) {
        const Task task = verify_task(iface, vs.max_dim, stream_seed(base, i));
        Rng rng(stream_seed(base, i + (1ULL << 40)));
        const Mat w1 = rng.normal_matrix(task.output_dim(), task.input_dim(), 0.5);
        const Mat w2 = rng.normal_matrix(task.output_dim(), task.retrieval_dim(), 0.5);
        const TokenLayout layout = tokens_of(task).layout;
        auto layers = construct_stack(w1, w2, task.context, vs.eta, steps, StackMode::refreshed, layout);
        for (auto& l : layers) inject_fault(vs.fault, l, layout);
        const auto preds = stack_predictions(layers, task, w1, w2);
        const GdTrajectory traj = gd_trajectory(w1, w2, task.context, task.query.x1, task.query.x2, vs.eta, steps);
        double worst = 0.0;
        int at = 0;
        for (int t = 0; t < steps; ++t) {
          const double d = (preds[t] - traj.predictions[t]).cwiseAbs().maxCoeff();
          if (d > worst) {
            worst = d;
            at = t;
          }
        }
        dev[i] = worst;
        if (worst > vs.tolerance) {
          // Blame the first layer whose weights differ from the construction
          // for the GD iterate it should hold.
          const GdTrajectory w = gd_trajectory(w1, w2, task.context, task.query.x1, task.query.x2, vs.eta, steps);
          std::string blame;
          for (int t = 0; t < steps && blame.empty(); ++t) {
            blame = audit_layer(layers[t], 2.0 * w.w1[t] - w1, 2.0 * w.w2[t] - w2, vs.eta, task.context.size(), layout);
            if (!blame.empty()) blame = "layer " + std::to_string(t + 1) + " " + blame;
          }
          where[i] = "task " + std::to_string(i) + " (" + shape_of(task) + "): query prediction after layer " +
                     std::to_string(at + 1) + " off by " + num(worst) + (blame.empty() ? "" : "; constructed " + blame);
        }
      },
      workers);
  for (std::size_t i = 0; i < dev.size(); ++i) {
    if (dev[i] > check.max_deviation) check.max_deviation = dev[i];
    if (check.diagnostic.empty() && !where[i].empty()) check.diagnostic = where[i];
  }
  check.pass = check.max_deviation <= vs.tolerance;
  return check;
}

// ---------------------------------------------------------------------------
// alignment helpers

struct PointSpec {
  InterfaceKind interface;
  int docs;
  int depth;
  std::uint64_t seed;
  std::vector<double> alphas;

  std::string label() const {
    return std::string(to_string(interface)) + "_L" + std::to_string(depth) + "_k" + std::to_string(docs) + "_s" +
           std::to_string(seed);
  }
};

// Everything a trained point depends on.
std::string point_key(const RunConfig& cfg, const PointSpec& p) {
  std::string key = p.label() + "\n";
  for (const auto& [k, v] : cfg.tree.values()) {
    const bool relevant = k.rfind("task.", 0) == 0 || k.rfind("train.", 0) == 0 || k.rfind("model.", 0) == 0 ||
                          (p.depth > 1 && k.rfind("deep.", 0) == 0) || k == "eval.line_search_tasks";
    if (relevant) key += k + "=" + v + "\n";
  }
  return key;
}

std::string digest(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Checkpoint model_checkpoint(const TrainedPoint& p, const std::string& key_digest) {
  Checkpoint ck;
  const LsaModel& m = p.model;
  for (std::size_t i = 0; i < m.layers().size(); ++i) add_params(ck, "layer" + std::to_string(i), m.layers()[i]);
  ck.meta["layers"] = std::to_string(m.layers().size());
  ck.meta["depth"] = std::to_string(m.stack().depth);
  ck.meta["share_params"] = m.stack().share_params ? "true" : "false";
  ck.meta["use_injection"] = m.use_injection() ? "true" : "false";
  ck.meta["eta"] = num(p.eta);
  ck.meta["point"] = key_digest;
  if (m.embed()) {
    const EmbedMLP& e = *m.embed();
    ck.meta["embed.layers"] = std::to_string(e.weights.size());
    ck.meta["embed.activation"] = std::to_string(static_cast<int>(e.activation));
    for (std::size_t i = 0; i < e.weights.size(); ++i) {
      ck.add("embed.w" + std::to_string(i), e.weights[i]);
      ck.add("embed.b" + std::to_string(i), Mat(e.biases[i]));
    }
  }
  ck.add("eta_losses", Eigen::Map<const Mat>(p.eta_losses.data(), 1, static_cast<Eigen::Index>(p.eta_losses.size())));
  return ck;
}

TrainedPoint point_from_checkpoint(const Checkpoint& ck) {
  TrainedPoint p;
  const int layers = std::stoi(ck.meta.at("layers"));
  std::vector<AttentionParams> params;
  for (int i = 0; i < layers; ++i) params.push_back(get_params(ck, "layer" + std::to_string(i)));
  std::optional<EmbedMLP> embed;
  if (ck.meta.count("embed.layers")) {
    EmbedMLP e;
    e.activation = static_cast<Activation>(std::stoi(ck.meta.at("embed.activation")));
    const int n = std::stoi(ck.meta.at("embed.layers"));
    for (int i = 0; i < n; ++i) {
      e.weights.push_back(ck.get("embed.w" + std::to_string(i)));
      e.biases.push_back(ck.get("embed.b" + std::to_string(i)).col(0));
    }
    embed = std::move(e);
  }
  p.model = LsaModel(std::move(params), StackConfig{std::stoi(ck.meta.at("depth")), ck.meta.at("share_params") == "true"},
                     std::move(embed), ck.meta.at("use_injection") == "true");
  p.eta = std::stod(ck.meta.at("eta"));
  const Mat& l = ck.get("eta_losses");
  p.eta_losses.assign(l.data(), l.data() + l.size());
  return p;
}

std::vector<PointSpec> alignment_points(const RunConfig& cfg) {
  std::vector<PointSpec> pts;
  const double a0 = cfg.task.alpha;
  for (std::uint64_t seed : cfg.seeds) {
    for (InterfaceKind iface : cfg.interfaces) {
      switch (cfg.experiment) {
        case Experiment::train_align:
          pts.push_back({iface, cfg.task.doc_count, 1, seed, {a0}});
          break;
        case Experiment::doc_sweep:
          for (int k : cfg.docs) pts.push_back({iface, k, 1, seed, {a0}});
          break;
        case Experiment::shift_sweep:
          pts.push_back({iface, cfg.task.doc_count, 1, seed, cfg.alphas});
          break;
        case Experiment::depth_sweep:
          for (int L : cfg.depths) {
            for (int k : cfg.docs) pts.push_back({iface, k, L, seed, {a0}});
          }
          break;
        default:
          throw ConfigError("config: " + std::string(to_string(cfg.experiment)) + " is not an alignment experiment");
      }
    }
  }
  if (pts.empty()) throw ConfigError("config: the sweep lists are empty");
  for (const auto& p : pts) {
    if (p.docs < 1) throw ConfigError("config: document counts must be positive");
    if (p.depth < 1) throw ConfigError("config: depths must be positive");
    if (p.alphas.empty()) throw ConfigError("config: run.alphas is empty");
    for (double a : p.alphas) {
      if (!(a > 0.0)) throw ConfigError("config: alphas must be positive");
    }
  }
  return pts;
}

std::vector<std::string> alignment_cells(const std::string& hash, const AlignmentRow& r) {
  const AlignmentReport& rep = r.report;
  return {hash,
          std::string(to_string(r.interface)),
          std::to_string(r.depth),
          std::to_string(r.docs),
          num(r.alpha),
          num(rep.pred_diff),
          num(rep.sens_cos),
          num(rep.sens_l2),
          num(rep.loss_diff),
          r.experiment,
          std::to_string(r.seed),
          num(rep.loss_a),
          num(rep.loss_b),
          num(r.ok() ? rep.relative_loss_gap() : kNaN),
          num(r.eta),
          r.status};
}

AlignmentReport failed_report() {
  AlignmentReport r;
  r.pred_diff = r.sens_cos = r.sens_l2 = r.loss_diff = r.loss_a = r.loss_b = kNaN;
  return r;
}

std::vector<AlignmentRow> evaluate_point(const RunConfig& cfg, const PointSpec& spec, const TaskConfig& tc,
                                         const TrainedPoint* point, const std::string& failure, int workers) {
  std::vector<AlignmentRow> rows;
  for (double alpha : spec.alphas) {
    AlignmentRow row;
    row.experiment = std::string(to_string(cfg.experiment));
    row.interface = spec.interface;
    row.depth = spec.depth;
    row.docs = spec.docs;
    row.alpha = alpha;
    row.seed = spec.seed;
    row.eta = point ? point->eta : kNaN;
    if (!failure.empty()) {
      row.report = failed_report();
      row.status = "failed: " + failure;
    } else {
      const GdReference gd(point->eta, spec.depth);
      row.report = compare(point->model, gd, eval_tasks(cfg, tc, alpha, spec.seed), workers);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_curve(const fs::path& path, const std::vector<LossRecord>& curve) {
  std::ofstream out(path);
  if (!out) throw RuntimeFault("cannot write " + path.string());
  write_loss_curve(out, curve);
}

// ---------------------------------------------------------------------------
// toy helpers

std::vector<ToyContext> toy_contexts(const ToyFamily& fam, const ToyConfig& t, bool transfer, int count,
                                     std::uint64_t base) {
  std::vector<ToyContext> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(fam.sample_context(t, transfer, t.queries, stream_seed(base, i)));
  return out;
}

// Encodings and GD targets for every K, one trajectory per context.
std::vector<std::vector<PredictorSample>> toy_samples(const ToyGenerator& gen, const LowRankUpdate& w0,
                                                      const std::vector<ToyContext>& contexts, double eta,
                                                      const std::vector<int>& ks, int workers) {
  std::vector<Vec> enc(contexts.size());
  std::vector<std::vector<std::vector<Mat>>> tgt(contexts.size());
  parallel_for(
      contexts.size(),
      [&](std::size_t i) {
        enc[i] = gen.encode(contexts[i].support, w0);
        tgt[i] = gd_targets(gen, contexts[i].support, w0, eta, ks);
      },
      workers);
  std::vector<std::vector<PredictorSample>> out(ks.size());
  for (std::size_t k = 0; k < ks.size(); ++k) {
    out[k].reserve(contexts.size());
    for (std::size_t i = 0; i < contexts.size(); ++i) out[k].push_back({enc[i], tgt[i][k]});
  }
  return out;
}

const char* kProjNames[] = {"query", "key", "value"};

Checkpoint interface_checkpoint(const LowRankUpdate& w, const std::string& role) {
  Checkpoint ck;
  ck.meta["role"] = role;
  ck.meta["layers"] = std::to_string(w.layers);
  ck.meta["width"] = std::to_string(w.width);
  ck.meta["rank"] = std::to_string(w.rank);
  for (int b = 0; b < w.blocks(); ++b) {
    const std::string name = "layer" + std::to_string(b / 3) + "." + kProjNames[b % 3];
    ck.add(name + ".u", w.u[b]);
    ck.add(name + ".v", w.v[b]);
  }
  return ck;
}

// ---------------------------------------------------------------------------
// report helpers

struct Summary {
  std::vector<std::string> group;
  std::vector<std::string> values;
};

std::optional<Summary> summary_for(const std::string& file) {
  const std::string stem = fs::path(file).stem().string();
  if (stem == "verify") return Summary{{"interface", "check", "steps"}, {"max_deviation"}};
  if (stem == "normalize_study") return Summary{{"dataset", "normalizer"}, {"pred_diff", "sens_cos", "sens_l2", "loss_diff"}};
  if (stem == "raggd") return Summary{{"method", "K", "transfer"}, {"eval_loss", "flops_per_query", "wall_ms_per_query"}};
  if (stem == "raggd_matching") return Summary{{"K", "split"}, {"trained", "untrained"}};
  if (stem == "train_align" || stem == "doc_sweep" || stem == "shift_sweep" || stem == "depth_sweep") {
    return Summary{{"interface", "depth", "docs", "alpha"}, {"pred_diff", "sens_cos", "sens_l2", "loss_diff", "rel_loss_gap"}};
  }
  return std::nullopt;
}

std::string summarize(const CsvTable& t, const Summary& s) {
  auto col = [&](const std::string& name) -> std::ptrdiff_t {
    auto it = std::find(t.header.begin(), t.header.end(), name);
    return it == t.header.end() ? -1 : it - t.header.begin();
  };
  std::vector<std::ptrdiff_t> gi, vi;
  for (const auto& g : s.group) {
    if (col(g) >= 0) gi.push_back(col(g));
  }
  for (const auto& v : s.values) {
    if (col(v) >= 0) vi.push_back(col(v));
  }
  const std::ptrdiff_t status = col("status");
  struct Acc {
    std::vector<CompensatedSum> sums;
    std::size_t rows = 0;
    std::size_t failed = 0;
  };
  std::vector<std::vector<std::string>> order;
  std::map<std::vector<std::string>, Acc> groups;
  for (const auto& row : t.rows) {
    std::vector<std::string> key;
    for (auto g : gi) key.push_back(row[g]);
    auto [it, fresh] = groups.try_emplace(key);
    if (fresh) {
      order.push_back(key);
      it->second.sums.resize(vi.size());
    }
    ++it->second.rows;
    if (status >= 0 && row[status] != "ok" && row[status] != "pass") {
      ++it->second.failed;
      continue;
    }
    for (std::size_t j = 0; j < vi.size(); ++j) {
      const double v = std::strtod(row[vi[j]].c_str(), nullptr);
      if (std::isfinite(v)) it->second.sums[j].add(v);
    }
  }
  std::ostringstream os;
  os << "|";
  for (auto g : gi) os << " " << t.header[g] << " |";
  for (auto v : vi) os << " " << t.header[v] << " |";
  os << " rows | failed |\n|";
  for (std::size_t j = 0; j < gi.size() + vi.size() + 2; ++j) os << "---|";
  os << "\n";
  for (const auto& key : order) {
    const Acc& a = groups.at(key);
    os << "|";
    for (const auto& k : key) os << " " << k << " |";
    for (const auto& s2 : a.sums) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6g", s2.count() ? s2.mean() : kNaN);
      os << " " << buf << " |";
    }
    os << " " << a.rows << " | " << a.failed << " |\n";
  }
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------

bool VerifyReport::pass() const {
  return std::all_of(checks.begin(), checks.end(), [](const VerifyCheck& c) { return c.pass; });
}

double VerifyReport::max_deviation() const {
  double m = 0.0;
  for (const auto& c : checks) m = std::max(m, c.max_deviation);
  return m;
}

VerifyReport run_verify(const RunConfig& cfg) {
  VerifyReport rep;
  rep.tolerance = cfg.verify.tolerance;
  const int workers = cfg.workers;
  for (std::uint64_t seed : cfg.seeds) {
    for (InterfaceKind iface : {InterfaceKind::dot_product, InterfaceKind::projection_based}) {
      rep.checks.push_back(verify_single(cfg.verify, iface, seed, workers));
      for (int k : cfg.verify.stack_steps) {
        if (k < 1) throw ConfigError("config: verify.stack_steps must be positive");
        rep.checks.push_back(verify_stack(cfg.verify, iface, k, seed, workers));
      }
    }
  }
  return rep;
}

std::shared_ptr<const TrainedPoint> ModelCache::find(const std::string& key) const {
  std::lock_guard lock(mu_);
  auto it = points_.find(key);
  return it == points_.end() ? nullptr : it->second;
}

void ModelCache::put(const std::string& key, std::shared_ptr<const TrainedPoint> point) {
  std::lock_guard lock(mu_);
  points_[key] = std::move(point);
}

TaskConfig point_task(const RunConfig& cfg, InterfaceKind interface, int docs) {
  TaskConfig tc = cfg.task;
  tc.interface = interface;
  tc.doc_count = docs;
  tc.query_alpha = 0.0;
  tc.validate();
  return tc;
}

TrainedPoint train_point(const RunConfig& cfg, const TaskConfig& task, int depth, std::uint64_t seed, int workers) {
  const std::uint64_t stream = stream_seed(seed, kTrainTasks);
  const TaskSampler sampler = [task, stream](std::uint64_t i) { return sample_task(task, stream_seed(stream, i)); };
  TrainedPoint p;
  const LineSearchResult ls = line_search_eta(sampler, default_eta_grid(), cfg.eval.line_search_tasks, depth, workers);
  p.eta = ls.eta;
  p.eta_losses = ls.losses;

  LsaModelConfig mc = cfg.model;
  mc.depth = depth;
  TrainConfig tcfg = depth > 1 ? cfg.deep_train : cfg.train;
  if (depth > 1) mc.init_scale = cfg.deep_init_scale;
  tcfg.seed = stream_seed(seed, kTrainTasks);
  tcfg.workers = workers;
  Rng rng(stream_seed(seed, kModelInit));
  p.model = LsaModel::random(tokens_of(sampler(0)).layout, mc, rng);
  p.result = train(p.model, tcfg, sampler);
  return p;
}

std::vector<Task> eval_tasks(const RunConfig& cfg, const TaskConfig& task, double alpha, std::uint64_t seed) {
  TaskConfig tq = task;
  tq.query_alpha = alpha;
  const std::uint64_t stream = stream_seed(seed, kEvalTasks);
  std::vector<Task> tasks;
  tasks.reserve(static_cast<std::size_t>(cfg.eval.tasks));
  for (int i = 0; i < cfg.eval.tasks; ++i) tasks.push_back(sample_task(tq, stream_seed(stream, i)));
  return tasks;
}

std::vector<std::string> alignment_header() {
  return {"config_hash", "interface", "depth", "docs",   "alpha",        "pred_diff", "sens_cos",      "sens_l2",
          "loss_diff",   "experiment", "seed", "trained_loss", "constructed_loss", "rel_loss_gap", "eta", "status"};
}

namespace {

AlignmentRun alignment_impl(const RunConfig& cfg, ModelCache* cache, OrderedCsvWriter* writer,
                            const fs::path* model_dir) {
  const std::vector<PointSpec> pts = alignment_points(cfg);
  const int inner = inner_workers(cfg, pts.size());
  std::vector<std::vector<AlignmentRow>> rows(pts.size());
  std::vector<std::shared_ptr<const TrainedPoint>> trained(pts.size());
  parallel_for(
      pts.size(),
      [&](std::size_t i) {
        const PointSpec& spec = pts[i];
        const TaskConfig tc = point_task(cfg, spec.interface, spec.docs);
        const std::string key = point_key(cfg, spec);
        const std::string key_digest = digest(key);
        std::shared_ptr<const TrainedPoint> point = cache ? cache->find(key) : nullptr;
        std::string failure;
        try {
          if (!point && cfg.reload && model_dir) {
            const fs::path ck = *model_dir / (spec.label() + ".ckpt");
            if (fs::exists(ck)) {
              Checkpoint c = load_checkpoint(ck);
              if (c.meta.count("point") && c.meta.at("point") == key_digest) {
                point = std::make_shared<const TrainedPoint>(point_from_checkpoint(c));
              }
            }
          }
          if (!point) {
            point = std::make_shared<const TrainedPoint>(train_point(cfg, tc, spec.depth, spec.seed, inner));
            if (cache && !point->result.diverged) cache->put(key, point);
          }
          if (point->result.diverged) failure = point->result.diagnostic.empty() ? "diverged" : point->result.diagnostic;
        } catch (const NonFiniteError& e) {
          failure = e.what();
        }
        rows[i] = evaluate_point(cfg, spec, tc, failure.empty() ? point.get() : nullptr, failure, inner);
        for (auto& r : rows[i]) r.eta = point ? point->eta : kNaN;
        trained[i] = point;
        if (model_dir && point && failure.empty()) {
          save_checkpoint(*model_dir / (spec.label() + ".ckpt"), model_checkpoint(*point, key_digest));
        }
        if (writer) {
          std::vector<std::vector<std::string>> cells;
          for (const auto& r : rows[i]) cells.push_back(alignment_cells(cfg.hash, r));
          writer->submit(i, std::move(cells));
        }
      },
      cfg.workers);
  AlignmentRun run;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (auto& r : rows[i]) run.rows.push_back(std::move(r));
    if (trained[i]) run.points[pts[i].label()] = trained[i];
  }
  return run;
}

}  // namespace

AlignmentRun run_alignment(const RunConfig& cfg, ModelCache* cache) {
  return alignment_impl(cfg, cache, nullptr, nullptr);
}

std::vector<NormalizeRow> run_normalize_study(const RunConfig& cfg) {
  const TabularSettings& ts = cfg.tabular;
  if (ts.normalizers.empty()) throw ConfigError("config: tabular.normalizers is empty");

  struct Source {
    std::string name;
    std::string kind;  // real or synthetic
    std::string skip;  // reason when unavailable
    std::optional<SyntheticFeatures> synthetic;
    fs::path path;
  };
  std::vector<Source> sources;
  for (const auto& d : ts.datasets) {
    Source s{d, "real", {}, std::nullopt, ts.data_dir / (d + ".csv")};
    if (!fs::exists(s.path)) s.skip = "missing " + s.path.string();
    sources.push_back(std::move(s));
  }
  sources.push_back({"synthetic_uniform", "synthetic", {}, SyntheticFeatures::uniform, {}});
  sources.push_back({"synthetic_lognormal", "synthetic", {}, SyntheticFeatures::lognormal, {}});

  struct Unit {
    std::size_t source;
    NormalizerKind normalizer;
    std::uint64_t seed;
  };
  std::vector<Unit> units;
  for (std::uint64_t seed : cfg.seeds) {
    for (std::size_t s = 0; s < sources.size(); ++s) {
      for (NormalizerKind n : ts.normalizers) units.push_back({s, n, seed});
    }
  }
  const int inner = inner_workers(cfg, units.size());
  std::vector<NormalizeRow> rows(units.size());
  parallel_for(
      units.size(),
      [&](std::size_t i) {
        const Unit& u = units[i];
        const Source& src = sources[u.source];
        NormalizeRow& row = rows[i];
        row.dataset = src.name;
        row.source = src.kind;
        row.normalizer = u.normalizer;
        row.seed = u.seed;
        row.docs = ts.docs;
        row.report = failed_report();
        row.eta = kNaN;
        if (!src.skip.empty()) {
          row.status = "skipped: " + src.skip;
          return;
        }
        TabularDataset data;
        try {
          const std::uint64_t dseed = stream_seed(u.seed, kTabularData);
          data = src.synthetic ? synthetic_dataset(*src.synthetic, ts.synthetic_features, ts.synthetic_train,
                                                   ts.synthetic_test, ts.synthetic_noise, dseed)
                               : load(src.name, src.path, dseed, RecipeOptions{ts.include_leaky_counts});
        } catch (const std::exception& e) {
          row.status = std::string("skipped: ") + e.what();
          return;
        }
        const TabularTaskSource tasks(data, u.normalizer, ts.n_context, ts.docs, stream_seed(u.seed, kTabularTasks));
        const TaskSampler sampler = [&tasks](std::uint64_t k) { return tasks.train_task(k); };
        const LineSearchResult ls = line_search_eta(sampler, default_eta_grid(), cfg.eval.line_search_tasks, 1, inner);
        row.eta = ls.eta;

        LsaModelConfig mc = cfg.model;
        mc.depth = 1;
        mc.embed = true;
        mc.embed_hidden = ts.embed_hidden;
        TrainConfig tcfg = cfg.train;
        tcfg.steps = ts.steps;
        tcfg.batch = ts.batch;
        tcfg.lr = ts.lr;
        tcfg.workers = inner;
        Rng rng(stream_seed(u.seed, kTabularInit));
        LsaModel model = LsaModel::random(tokens_of(sampler(0)).layout, mc, rng);
        const TrainResult res = train(model, tcfg, sampler);
        if (res.diverged) {
          row.status = "failed: " + (res.diagnostic.empty() ? std::string("diverged") : res.diagnostic);
          return;
        }
        std::vector<Task> test;
        test.reserve(static_cast<std::size_t>(ts.eval_tasks));
        for (int k = 0; k < ts.eval_tasks; ++k) test.push_back(tasks.test_task(static_cast<std::uint64_t>(k)));
        row.report = compare(model, GdReference(ls.eta, 1), test, inner);
        row.status = "ok";
      },
      cfg.workers);
  return rows;
}

RaggdRun run_raggd(const RunConfig& cfg) {
  RaggdRun run;
  const int workers = cfg.workers;
  for (std::uint64_t seed : cfg.seeds) {
    ToyConfig t = cfg.toy;
    Rng grng(stream_seed(seed, kToyGenerator));
    RaggdSeedArtifacts art{seed, ToyGenerator::build(t, grng), {}, {}, {}, {}, {}};
    const ToyGenerator& gen = art.generator;
    Rng frng(stream_seed(seed, kToyFamily));
    const ToyFamily fam = ToyFamily::sample(frng);

    BaseTrainResult base = train_base_interface(gen, fam, stream_seed(seed, kToyBase));
    art.w0 = base.w0;
    art.base_curve = base.curve;
    if (t.eta_search) {
      art.eta = search_inner_eta(gen, fam, art.w0, stream_seed(seed, kToyEta));
    } else {
      art.eta.eta = t.inner_eta;
    }
    const double eta = art.eta.eta;

    const auto train_ctx = toy_contexts(fam, t, false, t.train_contexts, stream_seed(seed, kToyTrain));
    const auto test_ctx = toy_contexts(fam, t, false, t.test_contexts, stream_seed(seed, kToyTest));
    const auto hold_ctx = toy_contexts(fam, t, true, t.holdout_contexts, stream_seed(seed, kToyHoldout));
    const auto d_train = toy_samples(gen, art.w0, train_ctx, eta, t.ks, workers);
    const auto d_test = toy_samples(gen, art.w0, test_ctx, eta, t.ks, workers);
    const auto d_hold = toy_samples(gen, art.w0, hold_ctx, eta, t.ks, workers);

    SuiteRow b_test = evaluate_base(gen, art.w0, test_ctx);
    SuiteRow b_hold = evaluate_base(gen, art.w0, hold_ctx);
    run.rows.push_back({seed, eta, b_test});
    run.rows.push_back({seed, eta, b_hold});

    for (std::size_t ki = 0; ki < t.ks.size(); ++ki) {
      const int k = t.ks[ki];
      Rng prng(stream_seed(seed, kToyPredictorInit + ki));
      Predictor pred(t, prng);
      // Standardization from the training encodings (sample std).
      const auto& samples = d_train[ki];
      Vec mean = Vec::Zero(t.width);
      for (const auto& s : samples) mean += s.encoding;
      mean /= static_cast<double>(samples.size());
      Vec sq = Vec::Zero(t.width);
      for (const auto& s : samples) sq += (s.encoding - mean).cwiseAbs2();
      const Vec sd = (sq / static_cast<double>(std::max<std::size_t>(1, samples.size() - 1))).cwiseSqrt();
      pred.set_standardization(mean, sd);

      const double un_test = mean_matching_loss(pred, d_test[ki], t);
      const double un_hold = mean_matching_loss(pred, d_hold[ki], t);
      art.predictor_curves[k] = train_predictor(pred, samples, t, stream_seed(seed, kToyPredictorTrain + ki));
      run.matching.push_back({seed, k, "test", mean_matching_loss(pred, d_test[ki], t), un_test});
      run.matching.push_back({seed, k, "holdout", mean_matching_loss(pred, d_hold[ki], t), un_hold});

      for (const auto* ctx : {&test_ctx, &hold_ctx}) {
        run.rows.push_back({seed, eta, evaluate_tt_sgd(gen, art.w0, *ctx, eta, k)});
        run.rows.push_back({seed, eta, evaluate_amortized(gen, art.w0, pred, *ctx, k)});
      }
      art.predictors.emplace(k, std::move(pred));
    }
    run.seeds.push_back(std::move(art));
  }
  return run;
}

// ---------------------------------------------------------------------------
// persistence

void write_manifest(const fs::path& path, const RunManifest& m) {
  nlohmann::json j;
  j["tool"] = "ragicl";
  j["version"] = m.version;
  j["experiment"] = m.experiment;
  j["config_hash"] = m.config_hash;
  j["config"] = m.config;
  j["outputs"] = m.outputs;
  nlohmann::json per_seed = nlohmann::json::object();
  for (const auto& [seed, files] : m.seed_outputs) per_seed[std::to_string(seed)] = files;
  j["seed_outputs"] = per_seed;
  j["started"] = m.started;
  j["finished"] = m.finished;
  std::ofstream out(path);
  if (!out) throw RuntimeFault("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw RuntimeFault("write failed: " + path.string());
}

RunManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFault("cannot open " + path.string());
  RunManifest m;
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    m.version = j.at("version").get<std::string>();
    m.experiment = j.at("experiment").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config = j.at("config").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::vector<std::string>>();
    for (const auto& [seed, files] : j.at("seed_outputs").items()) {
      m.seed_outputs[std::stoull(seed)] = files.get<std::vector<std::string>>();
    }
    m.started = j.value("started", "");
    m.finished = j.value("finished", "");
  } catch (const std::exception& e) {
    throw RuntimeFault("bad manifest " + path.string() + ": " + e.what());
  }
  return m;
}

RunSummary run_experiment(const RunConfig& cfg, ModelCache* cache) {
  if (cfg.out_dir.empty()) throw ConfigError("config: no output directory (set --out, run.out or RAGICL_OUT_DIR)");
  RunSummary s;
  s.out_dir = cfg.out_dir;
  RunManifest& m = s.manifest;
  m.experiment = std::string(to_string(cfg.experiment));
  m.config_hash = cfg.hash;
  m.version = version();
  m.config = cfg.tree.values();
  m.started = timestamp();
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw RuntimeFault("cannot create " + cfg.out_dir.string() + ": " + ec.message());
  const fs::path dir = cfg.out_dir;

  switch (cfg.experiment) {
    case Experiment::verify_construction: {
      s.verify = run_verify(cfg);
      CsvTable t;
      t.header = {"config_hash", "seed", "interface", "check", "steps", "tasks", "max_deviation", "tolerance", "status",
                  "diagnostic"};
      for (const auto& c : s.verify.checks) {
        t.rows.push_back({cfg.hash, std::to_string(c.seed), std::string(to_string(c.interface)), c.check,
                          std::to_string(c.steps), std::to_string(c.tasks), num(c.max_deviation),
                          num(s.verify.tolerance), c.pass ? "pass" : "fail", c.diagnostic});
      }
      write_table(dir / "verify.csv", t);
      m.outputs.push_back("verify.csv");
      s.verify_pass = s.verify.pass();
      for (const auto& c : s.verify.checks) s.failed_rows += c.pass ? 0 : 1;
      break;
    }
    case Experiment::train_align:
    case Experiment::doc_sweep:
    case Experiment::shift_sweep:
    case Experiment::depth_sweep: {
      const std::string name = m.experiment + ".csv";
      const fs::path models = dir / "models";
      const fs::path curves = dir / "curves";
      fs::create_directories(models);
      fs::create_directories(curves);
      const auto pts = alignment_points(cfg);
      OrderedCsvWriter writer(dir / name, alignment_header(), pts.size());
      s.alignment = alignment_impl(cfg, cache, &writer, &models);
      m.outputs.push_back(name);
      for (const auto& spec : pts) {
        auto it = s.alignment.points.find(spec.label());
        if (it == s.alignment.points.end()) continue;
        auto& files = m.seed_outputs[spec.seed];
        const std::string curve = "curves/" + spec.label() + ".csv";
        if (!it->second->result.curve.empty()) {
          write_curve(dir / curve, it->second->result.curve);
          if (std::find(files.begin(), files.end(), curve) == files.end()) files.push_back(curve);
        }
        const std::string model = "models/" + spec.label() + ".ckpt";
        if (fs::exists(dir / model) && std::find(files.begin(), files.end(), model) == files.end()) {
          files.push_back(model);
        }
      }
      for (const auto& r : s.alignment.rows) s.failed_rows += r.ok() ? 0 : 1;
      break;
    }
    case Experiment::normalize_study: {
      s.normalize = run_normalize_study(cfg);
      CsvTable t;
      t.header = {"config_hash", "interface",  "depth",  "docs", "alpha",        "pred_diff", "sens_cos", "sens_l2",
                  "loss_diff",   "dataset",    "source", "normalizer", "seed", "trained_loss", "gd_loss", "eta",
                  "status"};
      for (const auto& r : s.normalize) {
        t.rows.push_back({cfg.hash, "dot_product", "1", std::to_string(r.docs), "1", num(r.report.pred_diff),
                          num(r.report.sens_cos), num(r.report.sens_l2), num(r.report.loss_diff), r.dataset, r.source,
                          std::string(to_string(r.normalizer)), std::to_string(r.seed), num(r.report.loss_a),
                          num(r.report.loss_b), num(r.eta), r.status});
        s.failed_rows += r.status.rfind("failed", 0) == 0 ? 1 : 0;
      }
      write_table(dir / "normalize_study.csv", t);
      m.outputs.push_back("normalize_study.csv");
      break;
    }
    case Experiment::raggd_toy: {
      s.raggd = run_raggd(cfg);
      CsvTable t;
      t.header = {"method", "K", "eta", "seed", "eval_loss", "flops_per_query", "wall_ms_per_query", "config_hash",
                  "transfer"};
      for (const auto& r : s.raggd.rows) {
        t.rows.push_back({r.row.method, std::to_string(r.row.k), num(r.eta), std::to_string(r.seed),
                          num(r.row.eval_loss), num(r.row.flops_per_query), num(r.row.wall_ms_per_query), cfg.hash,
                          r.row.transfer ? "true" : "false"});
      }
      write_table(dir / "raggd.csv", t);
      CsvTable mt;
      mt.header = {"config_hash", "seed", "K", "split", "trained", "untrained"};
      for (const auto& r : s.raggd.matching) {
        mt.rows.push_back({cfg.hash, std::to_string(r.seed), std::to_string(r.k), r.split, num(r.trained),
                           num(r.untrained)});
      }
      write_table(dir / "raggd_matching.csv", mt);
      m.outputs.push_back("raggd.csv");
      m.outputs.push_back("raggd_matching.csv");

      fs::create_directories(dir / "toy");
      for (const auto& a : s.raggd.seeds) {
        auto& files = m.seed_outputs[a.seed];
        const std::string prefix = "toy/s" + std::to_string(a.seed) + "_";
        Checkpoint gk;
        for (std::size_t l = 0; l < a.generator.backbone().size(); ++l) {
          add_params(gk, "layer" + std::to_string(l), a.generator.backbone()[l]);
        }
        gk.meta["backbone_hash"] = std::to_string(a.generator.backbone_hash());
        save_checkpoint(dir / (prefix + "generator.ckpt"), gk);
        Checkpoint wk = interface_checkpoint(a.w0, "base_interface");
        wk.meta["inner_eta"] = num(a.eta.eta);
        save_checkpoint(dir / (prefix + "w0.ckpt"), wk);
        files.push_back(prefix + "generator.ckpt");
        files.push_back(prefix + "w0.ckpt");
        for (const auto& [k, p] : a.predictors) {
          Checkpoint pk;
          const Vec flat = p.get_flat();
          pk.add("params", Eigen::Map<const Mat>(flat.data(), 1, flat.size()));
          pk.meta["K"] = std::to_string(k);
          pk.meta["rank"] = std::to_string(cfg.toy.rank);
          std::string blocks;
          for (int b = 0; b < 3 * a.w0.layers; ++b) {
            blocks += (b ? "," : "") + std::string("layer") + std::to_string(b / 3) + "." + kProjNames[b % 3];
          }
          pk.meta["blocks"] = blocks;
          const std::string name = prefix + "predictor_K" + std::to_string(k) + ".ckpt";
          save_checkpoint(dir / name, pk);
          files.push_back(name);
        }
        CsvTable ct;
        ct.header = {"curve", "index", "value"};
        for (std::size_t i = 0; i < a.base_curve.size(); ++i) {
          ct.rows.push_back({"base_interface", std::to_string(i), num(a.base_curve[i])});
        }
        for (const auto& [k, c] : a.predictor_curves) {
          for (std::size_t i = 0; i < c.size(); ++i) {
            ct.rows.push_back({"predictor_K" + std::to_string(k), std::to_string(i), num(c[i])});
          }
        }
        for (std::size_t g = 0; g < a.eta.grid.size(); ++g) {
          ct.rows.push_back({"eta_search_" + num(a.eta.grid[g]), std::to_string(g), num(a.eta.losses[g])});
        }
        write_table(dir / (prefix + "curves.csv"), ct);
        files.push_back(prefix + "curves.csv");
      }
      break;
    }
  }
  m.finished = timestamp();
  write_manifest(dir / "manifest.json", m);
  return s;
}

std::vector<std::string> compare_payloads(const fs::path& dir_a, const fs::path& dir_b) {
  std::vector<std::string> diffs;
  const RunManifest a = read_manifest(dir_a / "manifest.json");
  const RunManifest b = read_manifest(dir_b / "manifest.json");
  if (a.config_hash != b.config_hash) diffs.push_back("config hash " + a.config_hash + " vs " + b.config_hash);
  std::set<std::string> files_a(a.outputs.begin(), a.outputs.end());
  std::set<std::string> files_b(b.outputs.begin(), b.outputs.end());
  for (const auto& [seed, f] : a.seed_outputs) files_a.insert(f.begin(), f.end());
  for (const auto& [seed, f] : b.seed_outputs) files_b.insert(f.begin(), f.end());
  for (const auto& f : files_a) {
    if (!files_b.count(f)) diffs.push_back(f + ": only in " + dir_a.string());
  }
  for (const auto& f : files_b) {
    if (!files_a.count(f)) diffs.push_back(f + ": only in " + dir_b.string());
  }
  for (const auto& f : files_a) {
    if (!files_b.count(f) || fs::path(f).extension() != ".csv") continue;
    CsvTable ta, tb;
    try {
      ta = read_csv(dir_a / f);
      tb = read_csv(dir_b / f);
    } catch (const std::exception& e) {
      diffs.push_back(f + ": " + e.what());
      continue;
    }
    if (ta.header != tb.header) {
      diffs.push_back(f + ": headers differ");
      continue;
    }
    if (ta.rows.size() != tb.rows.size()) {
      diffs.push_back(f + ": " + std::to_string(ta.rows.size()) + " vs " + std::to_string(tb.rows.size()) + " rows");
      continue;
    }
    for (std::size_t r = 0; r < ta.rows.size(); ++r) {
      for (std::size_t c = 0; c < ta.header.size(); ++c) {
        if (ta.header[c].rfind("wall_", 0) == 0) continue;
        if (ta.rows[r][c] != tb.rows[r][c]) {
          diffs.push_back(f + ": row " + std::to_string(r + 1) + " column " + ta.header[c] + ": " + ta.rows[r][c] +
                          " vs " + tb.rows[r][c]);
        }
      }
    }
  }
  return diffs;
}

std::string report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw RuntimeFault("no such directory: " + dir.string());
  std::vector<fs::path> manifests;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() == "manifest.json") manifests.push_back(e.path());
  }
  std::sort(manifests.begin(), manifests.end());
  if (manifests.empty()) throw RuntimeFault("no manifest.json under " + dir.string());
  std::ostringstream os;
  for (const auto& mp : manifests) {
    const RunManifest m = read_manifest(mp);
    os << "## " << m.experiment << " (" << fs::relative(mp.parent_path(), dir).string() << ", config " << m.config_hash
       << ")\n\n";
    for (const auto& f : m.outputs) {
      const auto sum = summary_for(f);
      if (!sum) continue;
      os << "### " << f << "\n\n" << summarize(read_csv(mp.parent_path() / f), *sum) << "\n";
    }
  }
  return os.str();
}

}  // namespace ragicl
