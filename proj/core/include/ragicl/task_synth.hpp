#pragma once

#include "ragicl/linalg.hpp"

#include <cstdint>
#include <string_view>
#include <utility>

namespace ragicl {

enum class InterfaceKind { projection_based, dot_product };

std::string_view to_string(InterfaceKind kind);
// Accepts "projection_based"/"projection" and "dot_product"/"dot".
InterfaceKind parse_interface(std::string_view text);

struct TaskConfig {
  int n_context = 10;    // N
  int input_dim = 10;    // n_I, also d1
  int doc_count = 5;     // k
  int doc_dim = 0;       // d_d; 0 resolves to input_dim
  int output_dim = 1;    // d_y
  InterfaceKind interface = InterfaceKind::dot_product;
  double alpha = 1.0;        // context inputs ~ U(-alpha, alpha)
  double query_alpha = 0.0;  // query input range; 0 resolves to alpha
  double sigma = 1.0;        // std of W_z, M and W_d entries
  bool zero_teacher = false;
  // General DPR form with separate encoders: M is not symmetrized. Generated
  // for completeness; the equivalence results only cover the symmetric case.
  bool asymmetric_similarity = false;

  int resolved_doc_dim() const { return doc_dim > 0 ? doc_dim : input_dim; }
  double resolved_query_alpha() const { return query_alpha > 0.0 ? query_alpha : alpha; }
  // d2: the width of the retrieval-derived feature x2.
  int retrieval_dim() const;
  // Throws std::invalid_argument on non-positive sizes or inconsistent shapes.
  void validate() const;
};

struct TeacherWeights {
  Mat w1;  // d_y x d1
  Mat w2;  // d_y x d2, the effective retrieval weight
};

struct DocumentSet {
  Mat docs;           // k x d_d, one document per row
  Mat second_moment;  // sum_i d_i d_i^T
};

// Ascending document index, one rank-one update at a time.
Mat second_moment(const Mat& docs);
DocumentSet make_document_set(Mat docs);

struct RetrievalInterface {
  InterfaceKind kind = InterfaceKind::dot_product;
  Mat w_z;  // dot_product: d_y x d_d
  Mat m;    // dot_product: d_d x d_d similarity
  Mat w_d;  // projection_based: d1 x d2
};

// In-context examples, one per row.
struct Context {
  Mat x1;  // N x d1
  Mat x2;  // N x d2
  Mat y;   // N x d_y
  int size() const { return static_cast<int>(x1.rows()); }
};

struct QueryExample {
  Vec x1;
  Vec x2;
  Vec y;
};

struct Task {
  TeacherWeights teacher;
  RetrievalInterface retrieval;
  DocumentSet documents;
  Context context;
  QueryExample query;
  double alpha = 1.0;

  InterfaceKind interface() const { return retrieval.kind; }
  int input_dim() const { return static_cast<int>(context.x1.cols()); }
  int retrieval_dim() const { return static_cast<int>(context.x2.cols()); }
  int output_dim() const { return static_cast<int>(context.y.cols()); }
};

Task sample_task(const TaskConfig& cfg, std::uint64_t seed);

struct EffectiveWeights {
  Mat w1;
  Mat w2;
};

// W2 recomputed from the interface parts: W1 W_d for projection_based and
// W_z D M^T for dot_product.
EffectiveWeights effective_weights(const Task& task);
Mat effective_retrieval_weight(const RetrievalInterface& retrieval, const DocumentSet& docs,
                               const Mat& w1);

// y = W1 x1 + W2 x2 for a single example.
Vec linear_predict(const Mat& w1, const Mat& w2, const Vec& x1, const Vec& x2);

}  // namespace ragicl

#include "ragicl/tokens.hpp"

namespace ragicl {

// Row i = (x1_i, x2_i, y_i); the query row carries a zero y-slot.
TokenMatrix tokens_of(const Task& task);

}  // namespace ragicl
