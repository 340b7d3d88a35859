#include "ragicl/rng.hpp"
#include "ragicl/tabular.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace ragicl;
namespace fs = std::filesystem;

namespace {

Mat column(std::initializer_list<double> v) {
  Mat m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

// Writes rows of random numbers under the recipe's header.
fs::path write_fake_dataset(const DatasetRecipe& r, std::size_t rows, char delim, const std::string& file) {
  const fs::path p = fs::temp_directory_path() / file;
  std::ofstream out(p);
  for (std::size_t j = 0; j < r.features.size(); ++j) out << (j ? std::string(1, delim) : "") << '"' << r.features[j] << '"';
  out << delim << r.target_candidates.front() << "\n";
  Rng rng(1);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < r.features.size(); ++j) {
      if (j) out << delim;
      if (r.categorical.count(r.features[j])) {
        out << (i % 2 ? "female" : "male");
      } else {
        out << rng.uniform(0, 10);
      }
    }
    out << delim << rng.uniform(0, 1) << "\n";
  }
  return p;
}

}  // namespace

TEST(Normalizer, ZscoreHandExample) {
  const NormalizedSplits s = fit_apply(NormalizerKind::zscore, column({0, 2}), column({4}));
  EXPECT_EQ(s.train, column({-1, 1}));
  EXPECT_EQ(s.test(0, 0), 3.0);
}

TEST(Normalizer, MinmaxHandExample) {
  const NormalizedSplits s = fit_apply(NormalizerKind::minmax, column({0, 5, 10}), column({15}));
  EXPECT_EQ(s.train, column({0, 0.5, 1}));
  EXPECT_EQ(s.test(0, 0), 1.5);
}

TEST(Normalizer, RankHandExample) {
  const NormalizedSplits s = fit_apply(NormalizerKind::rank, column({3, 1, 2}), column({1.5}));
  EXPECT_EQ(s.train, column({0.75, 0.25, 0.5}));
  EXPECT_NEAR(s.test(0, 0), 0.375, 1e-15);
}

TEST(Normalizer, RankTiesAveraged) {
  const NormalizedSplits s = fit_apply(NormalizerKind::rank, column({1, 2, 2, 3}), column({2}));
  EXPECT_NEAR(s.train(1, 0), 0.5, 1e-15);
  EXPECT_NEAR(s.train(2, 0), 0.5, 1e-15);
  EXPECT_NEAR(s.train(0, 0), 0.2, 1e-15);
}

TEST(Normalizer, TanhInOpenUnitInterval) {
  Rng rng(2);
  const Mat train = rng.normal_matrix(200, 3, 50.0);
  const NormalizedSplits s = fit_apply(NormalizerKind::tanh, train, train);
  EXPECT_GT(s.train.minCoeff(), 0.0);
  EXPECT_LT(s.train.maxCoeff(), 1.0);
  EXPECT_NEAR(s.train.mean(), 0.5, 1e-3);
}

TEST(Normalizer, ZscoreMoments) {
  Rng rng(3);
  const Mat train = rng.uniform_matrix(300, 4, -7, 20);
  const NormalizedSplits s = fit_apply(NormalizerKind::zscore, train, train);
  for (int j = 0; j < 4; ++j) {
    const Vec c = s.train.col(j);
    EXPECT_LE(std::abs(c.mean()), 1e-10);
    EXPECT_LE(std::abs(std::sqrt((c.array() - c.mean()).square().mean()) - 1.0), 1e-10);
  }
}

TEST(Normalizer, MinmaxTrainInUnitInterval) {
  Rng rng(4);
  const NormalizedSplits s = fit_apply(NormalizerKind::minmax, rng.normal_matrix(100, 3), rng.normal_matrix(10, 3));
  EXPECT_EQ(s.train.minCoeff(), 0.0);
  EXPECT_EQ(s.train.maxCoeff(), 1.0);
}

TEST(Normalizer, MonotoneForRankAndMinmax) {
  Rng rng(5);
  const Mat train = rng.normal_matrix(50, 1);
  for (auto kind : {NormalizerKind::rank, NormalizerKind::minmax}) {
    const NormalizedSplits s = fit_apply(kind, train, train);
    for (int i = 0; i < 50; ++i) {
      for (int j = 0; j < 50; ++j) {
        if (train(i, 0) < train(j, 0)) EXPECT_LT(s.train(i, 0), s.train(j, 0));
      }
    }
  }
}

TEST(Normalizer, ZeroVarianceFloored) {
  Normalizer n(NormalizerKind::zscore);
  n.fit(Mat::Constant(5, 2, 3.0));
  EXPECT_EQ(n.stddev()(0), Normalizer::kStdFloor);
  EXPECT_FALSE(n.warnings().empty());
  EXPECT_TRUE(n.apply(Mat::Constant(1, 2, 3.0)).allFinite());
}

TEST(Normalizer, TestRowsNeverLeak) {
  Rng rng(6);
  const Mat train = rng.normal_matrix(40, 3);
  for (auto kind : all_normalizers()) {
    const NormalizedSplits a = fit_apply(kind, train, rng.normal_matrix(10, 3));
    const NormalizedSplits b = fit_apply(kind, train, rng.normal_matrix(10, 3, 100.0));
    EXPECT_TRUE(a.normalizer == b.normalizer) << to_string(kind);
    EXPECT_EQ(a.train, b.train);
  }
}

TEST(Normalizer, Names) {
  for (auto kind : all_normalizers()) EXPECT_EQ(parse_normalizer(to_string(kind)), kind);
  EXPECT_THROW(parse_normalizer("l2"), std::invalid_argument);
}

TEST(Csv, RoundTrip) {
  const std::string text = "a,b,c\n1,2.5,x\n\"q,uoted\",-3,\"\"\"y\"\"\"\n";
  std::istringstream is(text);
  const CsvTable t = parse_csv(is);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[1][0], "q,uoted");
  EXPECT_EQ(t.rows[1][2], "\"y\"");
  std::ostringstream os;
  write_csv(os, t);
  std::istringstream again(os.str());
  const CsvTable u = parse_csv(again);
  EXPECT_EQ(u.header, t.header);
  EXPECT_EQ(u.rows, t.rows);
}

TEST(Csv, Errors) {
  std::istringstream empty("");
  EXPECT_THROW(parse_csv(empty), std::runtime_error);
  std::istringstream ragged("a,b\n1\n");
  EXPECT_THROW(parse_csv(ragged), std::runtime_error);
}

TEST(Dataset, ThreeRowTableRoundTrips) {
  DatasetRecipe r;
  r.name = "tiny";
  r.features = {"u", "v"};
  r.target_candidates = {"t"};
  r.train_size = 2;
  r.test_size = 1;
  std::istringstream is("u,v,t\n1,2,3\n4,5,6\n7,8,9\n");
  const TabularDataset d = from_table(r, parse_csv(is), 0);
  ASSERT_EQ(d.x_train.rows() + d.x_test.rows(), 3);
  double total = d.y_train.sum() + d.y_test.sum();
  EXPECT_EQ(total, 18.0);
  for (Eigen::Index i = 0; i < d.x_train.rows(); ++i) {
    EXPECT_EQ(d.x_train(i, 1), d.x_train(i, 0) + 1);
    EXPECT_EQ(d.y_train(i), d.x_train(i, 0) + 2);
  }
}

TEST(Dataset, MissingValuesDropped) {
  DatasetRecipe r;
  r.name = "gaps";
  r.features = {"u"};
  r.target_candidates = {"t"};
  std::istringstream is("u,t\n1,2\n,3\n4,\n5,6\n7,8\n");
  const TabularDataset d = from_table(r, parse_csv(is), 0);
  EXPECT_EQ(d.dropped_rows, 2u);
  EXPECT_EQ(d.x_train.rows() + d.x_test.rows(), 3);
}

TEST(Dataset, SchemaMismatchThrows) {
  std::istringstream is("x,y\n1,2\n3,4\n");
  EXPECT_THROW(from_table(recipe("wine_quality"), parse_csv(is), 0), std::runtime_error);
  EXPECT_THROW(recipe("iris"), std::invalid_argument);
}

TEST(Dataset, WineQualityDeclaredSplit) {
  const DatasetRecipe r = recipe("wine_quality");
  EXPECT_EQ(r.features.size(), 11u);
  const fs::path p = write_fake_dataset(r, 4898, ';', "ragicl_wine.csv");
  const TabularDataset d = load("wine_quality", p, 3);
  EXPECT_EQ(d.x_train.rows(), 4408);
  EXPECT_EQ(d.x_test.rows(), 490);
  EXPECT_EQ(d.x_train.cols(), 11);
  fs::remove(p);
}

TEST(Dataset, BikeSharingFeatureVariants) {
  EXPECT_EQ(recipe("bike_sharing").features.size(), 12u);
  RecipeOptions leaky;
  leaky.include_leaky_counts = true;
  const DatasetRecipe r = recipe("bike_sharing", leaky);
  EXPECT_EQ(r.features.size(), 14u);
  EXPECT_EQ(r.train_size, 15641u);
  EXPECT_EQ(r.test_size, 1738u);
}

TEST(Dataset, CategoricalGenderEncoded) {
  const DatasetRecipe r = recipe("calorie_expenditure");
  const fs::path p = write_fake_dataset(r, 40, ',', "ragicl_calories.csv");
  const TabularDataset d = load("calorie_expenditure", p, 0);
  EXPECT_EQ(d.dropped_rows, 0u);
  for (Eigen::Index i = 0; i < d.x_train.rows(); ++i) {
    EXPECT_TRUE(d.x_train(i, 0) == 0.0 || d.x_train(i, 0) == 1.0);
  }
  fs::remove(p);
}

TEST(Corpus, ZscoredAndNormalizerIndependent) {
  const TabularDataset d = synthetic_dataset(SyntheticFeatures::lognormal, 4, 500, 100, 0.1, 7);
  const DocumentSet c = build_corpus(d);
  EXPECT_LE(c.docs.colwise().mean().cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE((c.second_moment - c.second_moment.transpose()).cwiseAbs().maxCoeff(), 1e-9);
  Eigen::SelfAdjointEigenSolver<Mat> es(c.second_moment);
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-9);
  const TabularTaskSource a(d, NormalizerKind::minmax, 10, 5, 1);
  const TabularTaskSource b(d, NormalizerKind::rank, 10, 5, 1);
  EXPECT_EQ(a.corpus().docs, b.corpus().docs);
  EXPECT_EQ(a.corpus().second_moment, b.corpus().second_moment);
}

TEST(TaskSource, DotProductTasks) {
  const TabularDataset d = synthetic_dataset(SyntheticFeatures::uniform, 6, 300, 50, 0.1, 8);
  const TabularTaskSource src(d, NormalizerKind::zscore, 10, 5, 2);
  const Task t = src.test_task(3);
  EXPECT_EQ(t.interface(), InterfaceKind::dot_product);
  EXPECT_EQ(t.context.size(), 10);
  EXPECT_EQ(t.input_dim(), 6);
  EXPECT_EQ(t.context.x1, t.context.x2);
  EXPECT_EQ(t.documents.docs.rows(), 5);
  const Task again = src.test_task(3);
  EXPECT_EQ(t.context.x1, again.context.x1);
  EXPECT_EQ(t.query.y, again.query.y);
}

TEST(Synthetic, Deterministic) {
  const TabularDataset a = synthetic_dataset(SyntheticFeatures::uniform, 3, 100, 20, 0.1, 9);
  const TabularDataset b = synthetic_dataset(SyntheticFeatures::uniform, 3, 100, 20, 0.1, 9);
  EXPECT_EQ(a.x_train, b.x_train);
  EXPECT_EQ(a.y_test, b.y_test);
  EXPECT_GE(a.x_train.minCoeff(), 0.0);
  EXPECT_LE(a.x_train.maxCoeff(), 1.0);
}
