#include "ragicl/task_synth.hpp"

#include "ragicl/rng.hpp"

#include <stdexcept>
#include <string>

namespace ragicl {

std::string_view to_string(InterfaceKind kind) {
  switch (kind) {
    case InterfaceKind::projection_based:
      return "projection_based";
    case InterfaceKind::dot_product:
      return "dot_product";
  }
  return "unknown";
}

InterfaceKind parse_interface(std::string_view text) {
  if (text == "projection_based" || text == "projection") return InterfaceKind::projection_based;
  if (text == "dot_product" || text == "dot") return InterfaceKind::dot_product;
  throw std::invalid_argument("unknown retrieval interface: " + std::string(text));
}

int TaskConfig::retrieval_dim() const {
  return interface == InterfaceKind::dot_product ? input_dim : doc_count * resolved_doc_dim();
}

void TaskConfig::validate() const {
  if (n_context <= 0 || input_dim <= 0 || output_dim <= 0 || doc_dim < 0) {
    throw std::invalid_argument("task config: dimensions must be positive");
  }
  if (doc_count <= 0) throw std::invalid_argument("task config: doc_count must be at least 1");
  if (!(alpha > 0.0) || query_alpha < 0.0) throw std::invalid_argument("task config: alpha must be positive");
  if (!(sigma >= 0.0)) throw std::invalid_argument("task config: sigma must be non-negative");
  if (interface == InterfaceKind::dot_product && resolved_doc_dim() != input_dim) {
    throw std::invalid_argument("task config: dot_product requires doc_dim == input_dim");
  }
}

Mat second_moment(const Mat& docs) {
  Mat d = Mat::Zero(docs.cols(), docs.cols());
  for (Eigen::Index i = 0; i < docs.rows(); ++i) {
    d.noalias() += docs.row(i).transpose() * docs.row(i);
  }
  return d;
}

DocumentSet make_document_set(Mat docs) {
  DocumentSet set;
  set.second_moment = second_moment(docs);
  set.docs = std::move(docs);
  return set;
}

Mat effective_retrieval_weight(const RetrievalInterface& retrieval, const DocumentSet& docs,
                               const Mat& w1) {
  if (retrieval.kind == InterfaceKind::projection_based) {
    if (w1.cols() != retrieval.w_d.rows()) throw std::invalid_argument("effective_weights: W1/W_d shape mismatch");
    return w1 * retrieval.w_d;
  }
  if (retrieval.w_z.cols() != docs.second_moment.rows() || docs.second_moment.cols() != retrieval.m.cols()) {
    throw std::invalid_argument("effective_weights: W_z/D/M shape mismatch");
  }
  return retrieval.w_z * docs.second_moment * retrieval.m.transpose();
}

EffectiveWeights effective_weights(const Task& task) {
  return {task.teacher.w1, effective_retrieval_weight(task.retrieval, task.documents, task.teacher.w1)};
}

Vec linear_predict(const Mat& w1, const Mat& w2, const Vec& x1, const Vec& x2) {
  return w1 * x1 + w2 * x2;
}

Task sample_task(const TaskConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int n = cfg.n_context;
  const int d1 = cfg.input_dim;
  const int dd = cfg.resolved_doc_dim();
  const int dy = cfg.output_dim;

  Task task;
  task.alpha = cfg.alpha;
  task.teacher.w1 = rng.normal_matrix(dy, d1);
  task.documents = make_document_set(rng.uniform_matrix(cfg.doc_count, dd, -0.5, 0.5));

  RetrievalInterface& ri = task.retrieval;
  ri.kind = cfg.interface;
  if (cfg.interface == InterfaceKind::dot_product) {
    ri.w_z = rng.normal_matrix(dy, dd, cfg.sigma);
    const Mat a = rng.normal_matrix(dd, dd, cfg.sigma);
    ri.m = cfg.asymmetric_similarity ? a : Mat(0.5 * (a + a.transpose()));
  } else {
    ri.w_d = rng.normal_matrix(d1, cfg.retrieval_dim(), cfg.sigma);
  }
  if (cfg.zero_teacher) {
    task.teacher.w1.setZero();
    if (cfg.interface == InterfaceKind::dot_product) ri.w_z.setZero();
  }
  task.teacher.w2 = effective_retrieval_weight(ri, task.documents, task.teacher.w1);

  Context& ctx = task.context;
  ctx.x1 = rng.uniform_matrix(n, d1, -cfg.alpha, cfg.alpha);
  Vec flat_docs;
  if (cfg.interface == InterfaceKind::dot_product) {
    ctx.x2 = ctx.x1;
  } else {
    // Projection-based tokens carry the whole retrieved set: e_i = (x_i, D, y_i).
    flat_docs.resize(cfg.retrieval_dim());
    for (int i = 0; i < cfg.doc_count; ++i) flat_docs.segment(i * dd, dd) = task.documents.docs.row(i).transpose();
    ctx.x2 = flat_docs.transpose().replicate(n, 1);
  }
  ctx.y.resize(n, dy);
  for (int i = 0; i < n; ++i) {
    ctx.y.row(i) = linear_predict(task.teacher.w1, task.teacher.w2, ctx.x1.row(i).transpose(),
                                  ctx.x2.row(i).transpose()).transpose();
  }

  const double qa = cfg.resolved_query_alpha();
  task.query.x1 = rng.uniform_matrix(d1, 1, -qa, qa);
  task.query.x2 = cfg.interface == InterfaceKind::dot_product ? task.query.x1 : flat_docs;
  task.query.y = linear_predict(task.teacher.w1, task.teacher.w2, task.query.x1, task.query.x2);
  return task;
}

TokenMatrix tokens_of(const Task& task) {
  TokenMatrix t;
  t.layout = {task.input_dim(), task.retrieval_dim(), task.output_dim()};
  const int n = task.context.size();
  t.rows = Mat::Zero(n + 1, t.layout.dim());
  t.rows.block(0, t.layout.x1_offset(), n, t.layout.d1) = task.context.x1;
  t.rows.block(0, t.layout.x2_offset(), n, t.layout.d2) = task.context.x2;
  t.rows.block(0, t.layout.y_offset(), n, t.layout.dy) = task.context.y;
  t.rows.block(n, t.layout.x1_offset(), 1, t.layout.d1) = task.query.x1.transpose();
  t.rows.block(n, t.layout.x2_offset(), 1, t.layout.d2) = task.query.x2.transpose();
  return t;
}

}  // namespace ragicl
