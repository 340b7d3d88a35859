#include "ragicl/tabular.hpp"

#include "ragicl/rng.hpp"


#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace ragicl {

namespace {

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::optional<double> parse_number(const std::string& text) {
  const std::string t = trim(text);
  if (t.empty()) return std::nullopt;
  double v = 0.0;
  const char* first = t.data();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

// Quoted fields may contain the delimiter; a doubled quote inside one is a
// literal quote.
std::vector<std::string> split_line(const std::string& line, char delimiter) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c != '"') {
        field += c;
      } else if (i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else {
        quoted = false;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == delimiter) {
      out.push_back(trim(field));
      field.clear();
    } else {
      field += c;
    }
  }
  if (quoted) throw std::runtime_error("csv: unterminated quoted field");
  out.push_back(trim(field));
  return out;
}

// Fractional ranks r/(n+1) of `sorted` values, ties averaged; returns the
// distinct values and their ranks.
void fractional_ranks(std::vector<double> v, std::vector<double>& values, std::vector<double>& ranks) {
  std::sort(v.begin(), v.end());
  const double denom = static_cast<double>(v.size()) + 1.0;
  values.clear();
  ranks.clear();
  std::size_t i = 0;
  while (i < v.size()) {
    std::size_t j = i;
    while (j + 1 < v.size() && v[j + 1] == v[i]) ++j;
    // 1-based ranks i+1 .. j+1 averaged.
    const double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
    values.push_back(v[i]);
    ranks.push_back(avg / denom);
    i = j + 1;
  }
}

}  // namespace

CsvTable parse_csv(std::istream& is, char delimiter) {
  CsvTable table;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto fields = split_line(line, delimiter);
    if (table.header.empty()) {
      if (!fields.empty() && fields.front().rfind("\xEF\xBB\xBF", 0) == 0) fields.front().erase(0, 3);
      table.header = std::move(fields);
      continue;
    }
    if (fields.size() != table.header.size()) {
      throw std::runtime_error("csv: row " + std::to_string(table.rows.size() + 2) + " has " +
                               std::to_string(fields.size()) + " fields, header has " +
                               std::to_string(table.header.size()));
    }
    table.rows.push_back(std::move(fields));
  }
  if (table.header.empty()) throw std::runtime_error("csv: empty input");
  return table;
}

CsvTable read_csv(const std::filesystem::path& path, char delimiter) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("csv: cannot open " + path.string());
  return parse_csv(is, delimiter);
}

void write_csv(std::ostream& os, const CsvTable& table, char delimiter) {
  auto emit = [&](const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i > 0) os << delimiter;
      const bool quote = row[i].find_first_of(std::string(1, delimiter) + "\"\n") != std::string::npos;
      if (quote) {
        os << '"';
        for (char c : row[i]) {
          if (c == '"') os << '"';
          os << c;
        }
        os << '"';
      } else {
        os << row[i];
      }
    }
    os << '\n';
  };
  emit(table.header);
  for (const auto& r : table.rows) emit(r);
}

std::vector<std::string> recipe_names() {
  return {"california_housing", "bike_sharing", "wine_quality", "calorie_expenditure"};
}

DatasetRecipe recipe(std::string_view name, const RecipeOptions& opts) {
  DatasetRecipe r;
  r.name = std::string(name);
  if (name == "california_housing") {
    r.features = {"MedInc", "HouseAge", "AveRooms", "AveBedrms", "Population", "AveOccup", "Latitude", "Longitude"};
    r.target_candidates = {"MedHouseVal"};
    r.train_size = 16640;
    r.test_size = 2000;
  } else if (name == "bike_sharing") {
    r.features = {"season", "yr", "mnth", "hr", "holiday", "weekday", "workingday", "weathersit", "temp", "atemp",
                  "hum", "windspeed"};
    if (opts.include_leaky_counts) {
      r.features.push_back("casual");
      r.features.push_back("registered");
    }
    r.target_candidates = {"cnt", "count"};
    r.train_size = 15641;
    r.test_size = 1738;
  } else if (name == "wine_quality") {
    r.features = {"fixed acidity", "volatile acidity", "citric acid", "residual sugar", "chlorides",
                  "free sulfur dioxide", "total sulfur dioxide", "density", "pH", "sulphates", "alcohol"};
    r.target_candidates = {"quality"};
    r.train_size = 4408;
    r.test_size = 490;
  } else if (name == "calorie_expenditure") {
    r.features = {"Gender", "Age", "Height", "Weight", "Duration", "Heart_Rate", "Body_Temp"};
    r.target_candidates = {"Calories"};
    r.train_size = 13500;
    r.test_size = 1540;
    r.categorical["Gender"] = {{"male", 0.0}, {"female", 1.0}, {"m", 0.0}, {"f", 1.0}};
  } else {
    throw std::invalid_argument("unknown dataset '" + std::string(name) + "'");
  }
  return r;
}

TabularDataset from_table(const DatasetRecipe& recipe, const CsvTable& table, std::uint64_t seed) {
  auto column = [&](const std::string& name) -> std::size_t {
    for (std::size_t i = 0; i < table.header.size(); ++i) {
      if (table.header[i] == name) return i;
    }
    return table.header.size();
  };
  std::vector<std::size_t> feature_cols;
  for (const auto& f : recipe.features) {
    const std::size_t c = column(f);
    if (c == table.header.size()) throw std::runtime_error(recipe.name + ": missing column '" + f + "'");
    feature_cols.push_back(c);
  }
  std::size_t target_col = table.header.size();
  for (const auto& t : recipe.target_candidates) {
    target_col = column(t);
    if (target_col != table.header.size()) break;
  }
  if (target_col == table.header.size()) throw std::runtime_error(recipe.name + ": missing target column");

  std::vector<std::vector<double>> rows;
  TabularDataset data;
  data.name = recipe.name;
  data.feature_names = recipe.features;
  for (const auto& raw : table.rows) {
    std::vector<double> row;
    bool ok = true;
    for (std::size_t j = 0; j < feature_cols.size() && ok; ++j) {
      const std::string& cell = raw[feature_cols[j]];
      auto cat = recipe.categorical.find(recipe.features[j]);
      if (cat != recipe.categorical.end()) {
        auto code = cat->second.find(lower(trim(cell)));
        if (code != cat->second.end()) {
          row.push_back(code->second);
          continue;
        }
      }
      const auto v = parse_number(cell);
      ok = v.has_value();
      if (ok) row.push_back(*v);
    }
    const auto y = parse_number(raw[target_col]);
    if (!ok || !y) {
      ++data.dropped_rows;
      continue;
    }
    row.push_back(*y);
    rows.push_back(std::move(row));
  }
  if (rows.size() < 2) throw std::runtime_error(recipe.name + ": fewer than two usable rows");

  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  std::size_t test = std::min(recipe.test_size, rows.size() - 1);
  std::size_t train = std::min(recipe.train_size, rows.size() - test);
  if (recipe.test_size == 0 && recipe.train_size == 0) {
    test = rows.size() / 10;
    train = rows.size() - test;
  }
  const auto nf = static_cast<Eigen::Index>(feature_cols.size());
  data.x_train.resize(static_cast<Eigen::Index>(train), nf);
  data.y_train.resize(static_cast<Eigen::Index>(train));
  data.x_test.resize(static_cast<Eigen::Index>(test), nf);
  data.y_test.resize(static_cast<Eigen::Index>(test));
  for (std::size_t i = 0; i < train + test; ++i) {
    const auto& r = rows[order[i]];
    const bool is_train = i < train;
    const auto at = static_cast<Eigen::Index>(is_train ? i : i - train);
    Mat& x = is_train ? data.x_train : data.x_test;
    Vec& y = is_train ? data.y_train : data.y_test;
    for (Eigen::Index j = 0; j < nf; ++j) x(at, j) = r[static_cast<std::size_t>(j)];
    y(at) = r.back();
  }
  return data;
}

TabularDataset load(std::string_view name, const std::filesystem::path& path, std::uint64_t seed,
                    const RecipeOptions& opts) {
  const DatasetRecipe r = recipe(name, opts);
  std::ifstream probe(path);
  if (!probe) throw std::runtime_error(r.name + ": cannot open " + path.string());
  std::string first;
  std::getline(probe, first);
  // The UCI wine files are ';'-separated; everything else is comma-separated.
  const char delimiter = std::count(first.begin(), first.end(), ';') > std::count(first.begin(), first.end(), ',')
                             ? ';'
                             : ',';
  return from_table(r, read_csv(path, delimiter), seed);
}

std::string_view to_string(NormalizerKind kind) {
  switch (kind) {
    case NormalizerKind::zscore:
      return "zscore";
    case NormalizerKind::minmax:
      return "minmax";
    case NormalizerKind::rank:
      return "rank";
    case NormalizerKind::tanh:
      return "tanh";
  }
  return "unknown";
}

NormalizerKind parse_normalizer(std::string_view text) {
  for (auto k : all_normalizers()) {
    if (to_string(k) == text) return k;
  }
  throw std::invalid_argument("unknown normalizer '" + std::string(text) + "'");
}

std::vector<NormalizerKind> all_normalizers() {
  return {NormalizerKind::zscore, NormalizerKind::minmax, NormalizerKind::rank, NormalizerKind::tanh};
}

void Normalizer::fit(const Mat& train) {
  if (train.rows() == 0) throw std::invalid_argument("normalizer: empty training data");
  const auto nf = train.cols();
  const double n = static_cast<double>(train.rows());
  mean_ = train.colwise().mean().transpose();
  std_.resize(nf);
  warnings_.clear();
  for (Eigen::Index j = 0; j < nf; ++j) {
    const double var = (train.col(j).array() - mean_(j)).square().sum() / n;
    std_(j) = std::sqrt(var);
    if (std_(j) < kStdFloor) {
      warnings_.push_back("feature " + std::to_string(j) + " has zero variance; std floored at 1e-12");
      std_(j) = kStdFloor;
    }
  }
  min_ = train.colwise().minCoeff().transpose();
  max_ = train.colwise().maxCoeff().transpose();
  values_.assign(nf, {});
  ranks_.assign(nf, {});
  if (kind_ == NormalizerKind::rank) {
    for (Eigen::Index j = 0; j < nf; ++j) {
      std::vector<double> col(train.col(j).data(), train.col(j).data() + train.rows());
      fractional_ranks(std::move(col), values_[j], ranks_[j]);
    }
  }
}

double Normalizer::rank_of(Eigen::Index feature, double v) const {
  const auto& vals = values_[feature];
  const auto& rk = ranks_[feature];
  if (v <= vals.front()) return rk.front();
  if (v >= vals.back()) return rk.back();
  const auto it = std::lower_bound(vals.begin(), vals.end(), v);
  const auto hi = static_cast<std::size_t>(it - vals.begin());
  if (*it == v) return rk[hi];
  const std::size_t lo = hi - 1;
  const double t = (v - vals[lo]) / (vals[hi] - vals[lo]);
  return rk[lo] + t * (rk[hi] - rk[lo]);
}

Mat Normalizer::apply(const Mat& x) const {
  if (x.cols() != mean_.size()) throw std::invalid_argument("normalizer: feature count mismatch");
  Mat out(x.rows(), x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    switch (kind_) {
      case NormalizerKind::zscore:
        out.col(j) = (x.col(j).array() - mean_(j)) / std_(j);
        break;
      case NormalizerKind::minmax: {
        const double range = max_(j) - min_(j);
        if (range > 0.0) {
          out.col(j) = (x.col(j).array() - min_(j)) / range;
        } else {
          out.col(j).setZero();
        }
        break;
      }
      case NormalizerKind::rank:
        for (Eigen::Index i = 0; i < x.rows(); ++i) out(i, j) = rank_of(j, x(i, j));
        break;
      case NormalizerKind::tanh:
        out.col(j) = 0.5 * ((0.01 * (x.col(j).array() - mean_(j)) / std_(j)).tanh() + 1.0);
        break;
    }
  }
  return out;
}

bool Normalizer::operator==(const Normalizer& o) const {
  return kind_ == o.kind_ && mean_ == o.mean_ && std_ == o.std_ && min_ == o.min_ && max_ == o.max_ &&
         values_ == o.values_ && ranks_ == o.ranks_;
}

NormalizedSplits fit_apply(NormalizerKind kind, const Mat& train, const Mat& test) {
  Normalizer norm(kind);
  norm.fit(train);
  return {norm.apply(train), norm.apply(test), norm};
}

DocumentSet build_corpus(const TabularDataset& data) {
  Normalizer z(NormalizerKind::zscore);
  z.fit(data.x_train);
  return make_document_set(z.apply(data.x_train));
}

TabularTaskSource::TabularTaskSource(const TabularDataset& data, NormalizerKind kind, int n_context, int doc_count,
                                     std::uint64_t seed)
    : splits_(fit_apply(kind, data.x_train, data.x_test)),
      corpus_(build_corpus(data)),
      n_context_(n_context),
      doc_count_(doc_count),
      seed_(seed) {
  if (n_context < 1 || doc_count < 1) throw std::invalid_argument("tabular tasks: n_context and doc_count must be positive");
  if (data.x_train.rows() < n_context + 1) throw std::invalid_argument("tabular tasks: training split too small");
  if (data.x_test.rows() < 1) throw std::invalid_argument("tabular tasks: empty test split");
  if (doc_count > data.x_train.rows()) throw std::invalid_argument("tabular tasks: doc_count exceeds corpus size");
  inputs_train_ = splits_.train;
  inputs_test_ = splits_.test;
  Normalizer z(NormalizerKind::zscore);
  z.fit(data.x_train);
  zs_train_ = corpus_.docs;
  zs_test_ = z.apply(data.x_test);
  const double mu = data.y_train.mean();
  double sd = std::sqrt((data.y_train.array() - mu).square().mean());
  if (sd < Normalizer::kStdFloor) sd = Normalizer::kStdFloor;
  y_train_ = (data.y_train.array() - mu) / sd;
  y_test_ = (data.y_test.array() - mu) / sd;
}

Task TabularTaskSource::train_task(std::uint64_t index) const { return make(index, false); }
Task TabularTaskSource::test_task(std::uint64_t index) const { return make(index, true); }

Task TabularTaskSource::make(std::uint64_t index, bool from_test) const {
  Rng rng(stream_seed(seed_, 2 * index + (from_test ? 1 : 0)));
  const auto n_train = static_cast<std::uint64_t>(inputs_train_.rows());
  const std::uint64_t query_row = from_test ? rng.below(static_cast<std::uint64_t>(inputs_test_.rows()))
                                            : rng.below(n_train);
  // Context rows: distinct training rows, excluding the query row.
  std::vector<std::uint64_t> picked;
  while (static_cast<int>(picked.size()) < n_context_) {
    const std::uint64_t r = rng.below(n_train);
    if (!from_test && r == query_row) continue;
    if (std::find(picked.begin(), picked.end(), r) != picked.end()) continue;
    picked.push_back(r);
  }
  const int nf = input_dim();
  Task task;
  task.retrieval.kind = InterfaceKind::dot_product;
  task.teacher.w1 = Mat::Zero(1, nf);
  task.teacher.w2 = Mat::Zero(1, nf);
  task.context.x1.resize(n_context_, nf);
  task.context.y.resize(n_context_, 1);
  for (int i = 0; i < n_context_; ++i) {
    task.context.x1.row(i) = inputs_train_.row(static_cast<Eigen::Index>(picked[i]));
    task.context.y(i, 0) = y_train_(static_cast<Eigen::Index>(picked[i]));
  }
  task.context.x2 = task.context.x1;
  const auto q = static_cast<Eigen::Index>(query_row);
  task.query.x1 = from_test ? Vec(inputs_test_.row(q).transpose()) : Vec(inputs_train_.row(q).transpose());
  task.query.x2 = task.query.x1;
  task.query.y = Vec::Constant(1, from_test ? y_test_(q) : y_train_(q));

  // Top-k corpus rows by dot product with the z-scored query; ties broken by
  // row index. A training query never retrieves itself.
  const Vec zq = from_test ? Vec(zs_test_.row(q).transpose()) : Vec(zs_train_.row(q).transpose());
  const Vec scores = zs_train_ * zq;
  std::vector<Eigen::Index> idx;
  idx.reserve(static_cast<std::size_t>(scores.size()));
  for (Eigen::Index i = 0; i < scores.size(); ++i) {
    if (!from_test && i == q) continue;
    idx.push_back(i);
  }
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(doc_count_), idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](Eigen::Index a, Eigen::Index b) {
                      return scores(a) != scores(b) ? scores(a) > scores(b) : a < b;
                    });
  Mat docs(static_cast<Eigen::Index>(k), nf);
  for (std::size_t i = 0; i < k; ++i) docs.row(static_cast<Eigen::Index>(i)) = zs_train_.row(idx[i]);
  task.documents = make_document_set(std::move(docs));
  return task;
}

TabularDataset synthetic_dataset(SyntheticFeatures kind, int features, std::size_t train, std::size_t test,
                                 double noise, std::uint64_t seed) {
  if (features < 1 || train < 2 || test < 1) throw std::invalid_argument("synthetic_dataset: bad sizes");
  Rng rng(seed);
  const auto n = static_cast<Eigen::Index>(train + test);
  Mat x(n, features);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < features; ++j) {
      x(i, j) = kind == SyntheticFeatures::uniform ? rng.uniform(0.0, 1.0) : std::exp(1.5 * rng.normal());
    }
  }
  const Vec w = rng.normal_matrix(features, 1);
  Normalizer z(NormalizerKind::zscore);
  z.fit(x.topRows(static_cast<Eigen::Index>(train)));
  Vec y = z.apply(x) * w;
  for (Eigen::Index i = 0; i < n; ++i) y(i) += noise * rng.normal();
  TabularDataset data;
  data.name = kind == SyntheticFeatures::uniform ? "synthetic_uniform" : "synthetic_lognormal";
  for (int j = 0; j < features; ++j) data.feature_names.push_back("f" + std::to_string(j));
  data.x_train = x.topRows(static_cast<Eigen::Index>(train));
  data.x_test = x.bottomRows(static_cast<Eigen::Index>(test));
  data.y_train = y.head(static_cast<Eigen::Index>(train));
  data.y_test = y.tail(static_cast<Eigen::Index>(test));
  return data;
}

}  // namespace ragicl
