// ragicl: run, replay and summarize the experiments.
//
//   ragicl verify          [--fault key_block]
//   ragicl train-align
//   ragicl sweep           --kind docs|shift|depth
//   ragicl normalize-study [--data-dir DIR]
//   ragicl raggd
//   ragicl report
//
// Common flags: --seed, --config (INI or a previous manifest.json), --out,
// --set section.key=value (repeatable), --workers. The output directory
// defaults to $RAGICL_OUT_DIR.
//
// Exit codes: 0 success, 1 a check failed, 2 configuration error, 3 runtime
// fault.

#include "ragicl/harness.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <functional>
#include <fstream>
#include <iostream>
#include <optional>

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kConfigError = 2, kRuntimeFault = 3 };

struct Common {
  std::string seed;
  std::string config;
  std::string out;
  std::vector<std::string> sets;
  std::optional<int> workers;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Seed or comma-separated seeds (run.seeds)");
  cmd->add_option("--config", c.config, "INI config or manifest.json to replay");
  cmd->add_option("--out", c.out, "Output directory (default $RAGICL_OUT_DIR)");
  cmd->add_option("--set", c.sets, "Override: section.key=value");
  cmd->add_option("--workers", c.workers, "Worker threads (0: hardware)");
}

ragicl::ConfigTree build_tree(const Common& c) {
  ragicl::ConfigTree tree = ragicl::ConfigTree::defaults();
  if (!c.config.empty()) tree.merge_file(c.config);
  for (const auto& s : c.sets) tree.set(s);
  if (!c.seed.empty()) tree.set("run.seeds", c.seed);
  if (c.workers) tree.set("run.workers", std::to_string(*c.workers));
  if (!c.out.empty()) {
    tree.set("run.out", c.out);
  } else if (tree.get("run.out").empty()) {
    if (const char* env = std::getenv(ragicl::kOutDirEnv); env && *env) tree.set("run.out", env);
  }
  return tree;
}

void print_verify(const ragicl::VerifyReport& rep) {
  for (const auto& c : rep.checks) {
    std::cout << (c.pass ? "PASS " : "FAIL ") << ragicl::to_string(c.interface) << " " << c.check;
    if (c.check == "stack") std::cout << " K=" << c.steps;
    std::cout << " seed=" << c.seed << " tasks=" << c.tasks << " max_deviation=" << c.max_deviation << "\n";
    if (!c.pass) std::cout << "  " << c.diagnostic << "\n";
  }
  std::cout << (rep.pass() ? "PASS" : "FAIL") << " max deviation " << rep.max_deviation() << " (tolerance "
            << rep.tolerance << ")\n";
}

int run(const Common& common, const std::function<void(ragicl::ConfigTree&)>& adjust) {
  ragicl::ConfigTree tree = build_tree(common);
  adjust(tree);
  const ragicl::RunConfig cfg = ragicl::resolve(tree);
  std::cerr << "ragicl " << ragicl::version() << ": " << ragicl::to_string(cfg.experiment) << " config "
            << cfg.hash << " -> " << cfg.out_dir.string() << "\n";
  const ragicl::RunSummary s = ragicl::run_experiment(cfg);
  if (cfg.experiment == ragicl::Experiment::verify_construction) print_verify(s.verify);
  for (const auto& f : s.manifest.outputs) std::cout << (s.out_dir / f).string() << "\n";
  if (s.failed_rows > 0) std::cerr << s.failed_rows << " row(s) failed; see the status column\n";
  return s.verify_pass ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrieval-augmented in-context learning experiments"};
  app.set_version_flag("--version", ragicl::version());
  app.require_subcommand(1);

  Common common;
  std::string fault;
  std::string kind;
  std::string data_dir;

  auto* verify = app.add_subcommand("verify", "Check the constructed LSA against gradient descent");
  add_common(verify, common);
  verify->add_option("--fault", fault, "Inject a construction fault")->check(CLI::IsMember({"none", "key_block"}));

  auto* align = app.add_subcommand("train-align", "Train one LSA layer and compare it with the GD predictor");
  add_common(align, common);

  auto* sweep = app.add_subcommand("sweep", "Document-count, query-shift or depth sweep");
  add_common(sweep, common);
  sweep->add_option("--kind", kind, "docs, shift or depth")->check(CLI::IsMember({"docs", "shift", "depth"}));

  auto* norm = app.add_subcommand("normalize-study", "Normalizer sweep on tabular data");
  add_common(norm, common);
  norm->add_option("--data-dir", data_dir, "Directory holding <dataset>.csv files");

  auto* raggd = app.add_subcommand("raggd", "Toy amortized adaptation pipeline");
  add_common(raggd, common);

  auto* rep = app.add_subcommand("report", "Summarize every run under the output directory");
  add_common(rep, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  auto experiment = [](const char* name) {
    return [name](ragicl::ConfigTree& t) { t.set("run.experiment", name); };
  };

  try {
    if (*verify) {
      return run(common, [&](ragicl::ConfigTree& t) {
        t.set("run.experiment", "verify_construction");
        if (!fault.empty()) t.set("verify.fault", fault);
      });
    }
    if (*align) return run(common, experiment("train_align"));
    if (*sweep) {
      return run(common, [&](ragicl::ConfigTree& t) {
        if (!kind.empty()) {
          t.set("run.experiment", kind == "docs" ? "doc_sweep" : kind + "_sweep");
          return;
        }
        const std::string& e = t.get("run.experiment");
        if (e != "doc_sweep" && e != "shift_sweep" && e != "depth_sweep") t.set("run.experiment", "doc_sweep");
      });
    }
    if (*norm) {
      return run(common, [&](ragicl::ConfigTree& t) {
        t.set("run.experiment", "normalize_study");
        if (!data_dir.empty()) t.set("tabular.data_dir", data_dir);
      });
    }
    if (*raggd) return run(common, experiment("raggd_toy"));
    if (*rep) {
      const ragicl::ConfigTree tree = build_tree(common);
      const std::string dir = tree.get("run.out");
      if (dir.empty()) throw ragicl::ConfigError("config: no output directory (set --out or RAGICL_OUT_DIR)");
      const std::string text = ragicl::report(dir);
      std::cout << text;
      std::ofstream out(std::filesystem::path(dir) / "summary.md");
      out << text;
      return kOk;
    }
  } catch (const ragicl::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "fault: " << e.what() << "\n";
    return kRuntimeFault;
  }
  return kOk;
}
