#include "ragicl/harness_config.hpp"

#include "ragicl/checkpoint.hpp"

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#ifndef RAGICL_VERSION
#define RAGICL_VERSION "dev"
#endif

namespace ragicl {

namespace {

constexpr std::pair<Experiment, std::string_view> kExperiments[] = {
    {Experiment::verify_construction, "verify_construction"},
    {Experiment::train_align, "train_align"},
    {Experiment::doc_sweep, "doc_sweep"},
    {Experiment::shift_sweep, "shift_sweep"},
    {Experiment::depth_sweep, "depth_sweep"},
    {Experiment::normalize_study, "normalize_study"},
    {Experiment::raggd_toy, "raggd_toy"},
};

// Keys that never influence a result value.
bool excluded_from_hash(const std::string& key) {
  return key == "run.out" || key == "run.workers" || key == "run.reload";
}

std::string fail_value(const std::string& key, const std::string& value, const char* what) {
  return "config: " + key + " = '" + value + "' is not " + what;
}

}  // namespace

std::string_view to_string(Experiment e) {
  for (const auto& [k, name] : kExperiments) {
    if (k == e) return name;
  }
  return "unknown";
}

Experiment parse_experiment(std::string_view text) {
  for (const auto& [k, name] : kExperiments) {
    if (name == text) return k;
  }
  throw ConfigError("unknown experiment '" + std::string(text) + "'");
}

ConfigTree ConfigTree::defaults() {
  const ToyConfig toy;
  auto num = [](double v) { return format_double(v); };
  auto list = [](const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  ConfigTree t;
  t.values_ = {
      {"run.experiment", "train_align"},
      {"run.interfaces", "dot_product"},
      {"run.docs", "2,5,10,25"},
      {"run.alphas", "0.5,1,1.5,2"},
      {"run.depths", "2,5"},
      {"run.seeds", "0"},
      {"run.out", ""},
      {"run.workers", "0"},
      {"run.reload", "false"},

      {"task.n_context", "10"},
      {"task.input_dim", "10"},
      {"task.doc_count", "10"},
      {"task.output_dim", "1"},
      {"task.alpha", "1"},
      {"task.sigma", "1"},
      {"task.asymmetric_similarity", "false"},

      {"train.steps", "10000"},
      {"train.batch", "256"},
      {"train.lr", "0.001"},
      {"train.optimizer", "adam"},
      {"train.momentum", "0"},
      {"train.decay_final", "0.01"},
      {"train.warmup", "0"},
      {"train.grad_clip", "0"},
      {"train.grad_mode", "closed_form"},
      {"train.divergence_threshold", "1e6"},
      {"train.spike_factor", "0"},

      {"deep.lr", "0.0003"},
      {"deep.warmup", "500"},
      {"deep.grad_clip", "0"},
      {"deep.spike_factor", "10"},
      {"deep.init_scale", "0.02"},

      {"model.init_scale", "0.1"},
      {"model.heads", "1"},
      {"model.share_params", "true"},
      {"model.use_injection", "true"},

      {"eval.tasks", "10000"},
      {"eval.line_search_tasks", "10000"},

      {"verify.tasks", "1000"},
      {"verify.max_dim", "10"},
      {"verify.stack_steps", "2,5"},
      {"verify.stack_tasks", "100"},
      {"verify.tolerance", "1e-10"},
      {"verify.eta", "0.1"},
      {"verify.fault", "none"},

      {"tabular.data_dir", "data"},
      {"tabular.datasets", "california_housing,bike_sharing,wine_quality,calorie_expenditure"},
      {"tabular.normalizers", "zscore,minmax,rank,tanh"},
      {"tabular.include_leaky_counts", "false"},
      {"tabular.n_context", "10"},
      {"tabular.docs", "5"},
      {"tabular.embed_hidden", "32"},
      {"tabular.synthetic_features", "8"},
      {"tabular.synthetic_train", "4000"},
      {"tabular.synthetic_test", "1000"},
      {"tabular.synthetic_noise", "0.1"},
      {"tabular.eval_tasks", "2000"},
      {"tabular.steps", "2000"},
      {"tabular.batch", "64"},
      {"tabular.lr", "0.001"},

      {"toy.width", std::to_string(toy.width)},
      {"toy.rank", std::to_string(toy.rank)},
      {"toy.docs", std::to_string(toy.docs)},
      {"toy.readout_gain", num(toy.readout_gain)},
      {"toy.layer2_scale", num(toy.layer2_scale)},
      {"toy.coupling_sd", num(toy.coupling_sd)},
      {"toy.layer2_self", toy.layer2_self ? "true" : "false"},
      {"toy.demos", std::to_string(toy.demos)},
      {"toy.queries", std::to_string(toy.queries)},
      {"toy.feature_mean", num(toy.feature_mean)},
      {"toy.feature_sd", num(toy.feature_sd)},
      {"toy.noise", num(toy.noise)},
      {"toy.radius_lo", num(toy.radius_lo)},
      {"toy.radius_hi", num(toy.radius_hi)},
      {"toy.source_arc", num(toy.source_arc)},
      {"toy.inner_eta", num(toy.inner_eta)},
      {"toy.eta_search", toy.eta_search ? "true" : "false"},
      {"toy.eta_lo", num(toy.eta_lo)},
      {"toy.eta_hi", num(toy.eta_hi)},
      {"toy.eta_points", std::to_string(toy.eta_points)},
      {"toy.eta_probe_contexts", std::to_string(toy.eta_probe_contexts)},
      {"toy.eta_margin", num(toy.eta_margin)},
      {"toy.ks", list(toy.ks)},
      {"toy.base_steps", std::to_string(toy.base_steps)},
      {"toy.base_contexts", std::to_string(toy.base_contexts)},
      {"toy.base_instances", std::to_string(toy.base_instances)},
      {"toy.base_lr", num(toy.base_lr)},
      {"toy.base_init", num(toy.base_init)},
      {"toy.hidden", std::to_string(toy.hidden)},
      {"toy.trunk_out", std::to_string(toy.trunk_out)},
      {"toy.train_contexts", std::to_string(toy.train_contexts)},
      {"toy.test_contexts", std::to_string(toy.test_contexts)},
      {"toy.holdout_contexts", std::to_string(toy.holdout_contexts)},
      {"toy.epochs", std::to_string(toy.epochs)},
      {"toy.batch", std::to_string(toy.batch)},
      {"toy.lr", num(toy.lr)},
      {"toy.lambda", num(toy.lambda)},
      {"toy.zero_block_penalty", num(toy.zero_block_penalty)},
  };
  return t;
}

void ConfigTree::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
  it->second = boost::algorithm::trim_copy(value);
}

void ConfigTree::set(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("config: override '" + std::string(assignment) + "' is not section.key=value");
  }
  set(boost::algorithm::trim_copy(std::string(assignment.substr(0, eq))), std::string(assignment.substr(eq + 1)));
}

void ConfigTree::merge_ini(std::istream& is) {
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::ini_parser::read_ini(is, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& [section, body] : pt) {
    if (body.empty()) throw ConfigError("config: key '" + section + "' outside any [section]");
    for (const auto& [key, value] : body) set(section + "." + key, value.data());
  }
}

void ConfigTree::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  if (path.extension() == ".json") {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: " + path.string() + ": " + e.what());
    }
    if (!j.contains("config") || !j["config"].is_object()) {
      throw ConfigError("config: " + path.string() + " has no \"config\" object");
    }
    for (const auto& [key, value] : j["config"].items()) {
      if (!value.is_string()) throw ConfigError("config: manifest value for " + key + " is not a string");
      set(key, value.get<std::string>());
    }
    return;
  }
  merge_ini(in);
}

const std::string& ConfigTree::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
  return it->second;
}

std::string ConfigTree::canonical() const {
  std::string out;
  for (const auto& [k, v] : values_) {
    if (excluded_from_hash(k)) continue;
    out += k + "=" + v + "\n";
  }
  return out;
}

std::string ConfigTree::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

class Reader {
 public:
  explicit Reader(const ConfigTree& t) : t_(t) {}

  const std::string& str(const std::string& key) const { return t_.get(key); }

  double real(const std::string& key) const { return parse_real(key, str(key)); }

  int integer(const std::string& key, int min = std::numeric_limits<int>::min()) const {
    const int v = parse_int(key, str(key));
    if (v < min) throw ConfigError(fail_value(key, str(key), ("an integer >= " + std::to_string(min)).c_str()));
    return v;
  }

  bool flag(const std::string& key) const {
    const std::string v = boost::algorithm::to_lower_copy(str(key));
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(fail_value(key, str(key), "a boolean"));
  }

  std::vector<std::string> words(const std::string& key) const {
    std::vector<std::string> parts;
    const std::string& v = str(key);
    if (boost::algorithm::trim_copy(v).empty()) return parts;
    boost::algorithm::split(parts, v, boost::algorithm::is_any_of(","));
    for (auto& p : parts) boost::algorithm::trim(p);
    return parts;
  }

  std::vector<int> ints(const std::string& key) const {
    std::vector<int> out;
    for (const auto& w : words(key)) out.push_back(parse_int(key, w));
    return out;
  }

  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& w : words(key)) out.push_back(parse_real(key, w));
    return out;
  }

  template <typename F>
  auto parsed(const std::string& key, F&& parse) const {
    try {
      return parse(str(key));
    } catch (const std::invalid_argument& e) {
      throw ConfigError("config: " + key + ": " + e.what());
    }
  }

 private:
  static double parse_real(const std::string& key, const std::string& text) {
    double v = 0.0;
    const auto* end = text.data() + text.size();
    auto [p, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || p != end) throw ConfigError(fail_value(key, text, "a number"));
    return v;
  }

  static int parse_int(const std::string& key, const std::string& text) {
    int v = 0;
    const auto* end = text.data() + text.size();
    auto [p, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || p != end) throw ConfigError(fail_value(key, text, "an integer"));
    return v;
  }

  const ConfigTree& t_;
};

}  // namespace

RunConfig resolve(const ConfigTree& tree) {
  const Reader r(tree);
  RunConfig c;
  c.tree = tree;
  c.hash = tree.hash();

  c.experiment = r.parsed("run.experiment", [](const std::string& s) { return parse_experiment(s); });
  for (const auto& w : r.words("run.interfaces")) {
    try {
      c.interfaces.push_back(parse_interface(w));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: run.interfaces: ") + e.what());
    }
  }
  c.docs = r.ints("run.docs");
  c.alphas = r.reals("run.alphas");
  c.depths = r.ints("run.depths");
  for (const auto& w : r.words("run.seeds")) {
    std::uint64_t s = 0;
    auto [p, ec] = std::from_chars(w.data(), w.data() + w.size(), s);
    if (ec != std::errc() || p != w.data() + w.size()) throw ConfigError(fail_value("run.seeds", w, "a seed"));
    c.seeds.push_back(s);
  }
  if (c.seeds.empty()) throw ConfigError("config: run.seeds is empty");
  if (c.interfaces.empty()) throw ConfigError("config: run.interfaces is empty");
  c.out_dir = r.str("run.out");
  c.workers = r.integer("run.workers", 0);
  c.reload = r.flag("run.reload");

  c.task.n_context = r.integer("task.n_context", 1);
  c.task.input_dim = r.integer("task.input_dim", 1);
  c.task.doc_count = r.integer("task.doc_count", 1);
  c.task.output_dim = r.integer("task.output_dim", 1);
  c.task.alpha = r.real("task.alpha");
  c.task.sigma = r.real("task.sigma");
  c.task.asymmetric_similarity = r.flag("task.asymmetric_similarity");
  c.task.interface = c.interfaces.front();

  c.train.steps = r.integer("train.steps", 0);
  c.train.batch = r.integer("train.batch", 1);
  c.train.lr = r.real("train.lr");
  c.train.optimizer = r.parsed("train.optimizer", [](const std::string& s) { return parse_optimizer(s); });
  c.train.momentum = r.real("train.momentum");
  c.train.decay_final = r.real("train.decay_final");
  c.train.warmup = r.integer("train.warmup", 0);
  c.train.grad_clip = r.real("train.grad_clip");
  c.train.mode = r.parsed("train.grad_mode", [](const std::string& s) { return parse_grad_mode(s); });
  c.train.divergence_threshold = r.real("train.divergence_threshold");
  c.train.spike_factor = r.real("train.spike_factor");

  c.deep_train = c.train;
  c.deep_train.lr = r.real("deep.lr");
  c.deep_train.warmup = r.integer("deep.warmup", 0);
  c.deep_train.grad_clip = r.real("deep.grad_clip");
  c.deep_train.spike_factor = r.real("deep.spike_factor");
  c.deep_init_scale = r.real("deep.init_scale");

  c.model.init_scale = r.real("model.init_scale");
  c.model.heads = r.integer("model.heads", 1);
  c.model.share_params = r.flag("model.share_params");
  c.model.use_injection = r.flag("model.use_injection");

  c.eval.tasks = r.integer("eval.tasks", 1);
  c.eval.line_search_tasks = r.integer("eval.line_search_tasks", 1);

  c.verify.tasks = r.integer("verify.tasks", 1);
  c.verify.max_dim = r.integer("verify.max_dim", 1);
  c.verify.stack_steps = r.ints("verify.stack_steps");
  c.verify.stack_tasks = r.integer("verify.stack_tasks", 0);
  c.verify.tolerance = r.real("verify.tolerance");
  c.verify.eta = r.real("verify.eta");
  c.verify.fault = r.str("verify.fault");
  if (c.verify.fault != "none" && c.verify.fault != "key_block") {
    throw ConfigError(fail_value("verify.fault", c.verify.fault, "'none' or 'key_block'"));
  }

  c.tabular.data_dir = r.str("tabular.data_dir");
  c.tabular.datasets = r.words("tabular.datasets");
  for (const auto& d : c.tabular.datasets) {
    try {
      recipe(d);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: tabular.datasets: ") + e.what());
    }
  }
  for (const auto& w : r.words("tabular.normalizers")) {
    try {
      c.tabular.normalizers.push_back(parse_normalizer(w));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: tabular.normalizers: ") + e.what());
    }
  }
  c.tabular.include_leaky_counts = r.flag("tabular.include_leaky_counts");
  c.tabular.n_context = r.integer("tabular.n_context", 1);
  c.tabular.docs = r.integer("tabular.docs", 1);
  c.tabular.embed_hidden = r.ints("tabular.embed_hidden");
  c.tabular.synthetic_features = r.integer("tabular.synthetic_features", 1);
  c.tabular.synthetic_train = static_cast<std::size_t>(r.integer("tabular.synthetic_train", 1));
  c.tabular.synthetic_test = static_cast<std::size_t>(r.integer("tabular.synthetic_test", 1));
  c.tabular.synthetic_noise = r.real("tabular.synthetic_noise");
  c.tabular.eval_tasks = r.integer("tabular.eval_tasks", 1);
  c.tabular.steps = r.integer("tabular.steps", 0);
  c.tabular.batch = r.integer("tabular.batch", 1);
  c.tabular.lr = r.real("tabular.lr");

  ToyConfig& t = c.toy;
  t.width = r.integer("toy.width", 1);
  t.rank = r.integer("toy.rank", 1);
  t.docs = r.integer("toy.docs", 1);
  t.readout_gain = r.real("toy.readout_gain");
  t.layer2_scale = r.real("toy.layer2_scale");
  t.coupling_sd = r.real("toy.coupling_sd");
  t.layer2_self = r.flag("toy.layer2_self");
  t.demos = r.integer("toy.demos", 1);
  t.queries = r.integer("toy.queries", 1);
  t.feature_mean = r.real("toy.feature_mean");
  t.feature_sd = r.real("toy.feature_sd");
  t.noise = r.real("toy.noise");
  t.radius_lo = r.real("toy.radius_lo");
  t.radius_hi = r.real("toy.radius_hi");
  t.source_arc = r.real("toy.source_arc");
  t.inner_eta = r.real("toy.inner_eta");
  t.eta_search = r.flag("toy.eta_search");
  t.eta_lo = r.real("toy.eta_lo");
  t.eta_hi = r.real("toy.eta_hi");
  t.eta_points = r.integer("toy.eta_points", 1);
  t.eta_probe_contexts = r.integer("toy.eta_probe_contexts", 1);
  t.eta_margin = r.real("toy.eta_margin");
  t.ks = r.ints("toy.ks");
  t.base_steps = r.integer("toy.base_steps", 0);
  t.base_contexts = r.integer("toy.base_contexts", 1);
  t.base_instances = r.integer("toy.base_instances", 1);
  t.base_lr = r.real("toy.base_lr");
  t.base_init = r.real("toy.base_init");
  t.hidden = r.integer("toy.hidden", 1);
  t.trunk_out = r.integer("toy.trunk_out", 1);
  t.train_contexts = r.integer("toy.train_contexts", 1);
  t.test_contexts = r.integer("toy.test_contexts", 1);
  t.holdout_contexts = r.integer("toy.holdout_contexts", 1);
  t.epochs = r.integer("toy.epochs", 0);
  t.batch = r.integer("toy.batch", 1);
  t.lr = r.real("toy.lr");
  t.lambda = r.real("toy.lambda");
  t.zero_block_penalty = r.real("toy.zero_block_penalty");

  try {
    c.task.validate();
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

std::string version() { return RAGICL_VERSION; }

}  // namespace ragicl
