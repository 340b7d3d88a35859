#include "ragicl/autodiff.hpp"

#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ragicl::ad {

namespace {

std::atomic<std::uint64_t> g_backward_calls{0};

void same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

void same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw std::invalid_argument("autodiff: vars live on different tapes");
}

}  // namespace

const Mat& Var::value() const { return tape->value(id); }
const Mat& Var::grad() const { return tape->grad(id); }

Var Tape::leaf(Mat value) {
  Node n;
  n.grad = Mat::Zero(value.rows(), value.cols());
  n.value = std::move(value);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Mat value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Mat value, std::vector<int> parents, Backprop backprop) {
  bool needs = false;
  for (int p : parents) needs = needs || nodes_[p].needs_grad;
  Node n;
  n.needs_grad = needs;
  if (needs) {
    n.grad = Mat::Zero(value.rows(), value.cols());
    n.backprop = std::move(backprop);
  }
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(int id, const Mat& g) {
  Node& n = nodes_[id];
  if (n.needs_grad) n.grad += g;
}

void Tape::backward(Var out) {
  if (out.tape != this) throw std::invalid_argument("backward: var from another tape");
  if (out.rows() != 1 || out.cols() != 1) throw std::invalid_argument("backward: output must be 1x1");
  ++g_backward_calls;
  for (auto& n : nodes_) {
    if (n.needs_grad) n.grad.setZero();
  }
  if (!nodes_[out.id].needs_grad) return;
  nodes_[out.id].grad(0, 0) = 1.0;
  for (int i = out.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.needs_grad && n.backprop) {
      const Mat g = n.grad;
      n.backprop(*this, g);
    }
  }
}

std::uint64_t Tape::backward_count() { return g_backward_calls.load(); }

Var matmul(Var a, Var b) {
  same_tape(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  const int ia = a.id;
  const int ib = b.id;
  return a.tape->record(a.value() * b.value(), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var add(Var a, Var b) {
  same_tape(a, b);
  same_shape(a, b, "add");
  const int ia = a.id;
  const int ib = b.id;
  return a.tape->record(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  same_tape(a, b);
  same_shape(a, b, "sub");
  const int ia = a.id;
  const int ib = b.id;
  return a.tape->record(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var scale(Var a, double s) {
  const int ia = a.id;
  return a.tape->record(s * a.value(), {ia}, [ia, s](Tape& t, const Mat& g) { t.accumulate(ia, s * g); });
}

Var scale(Var a, Var s) {
  same_tape(a, s);
  if (s.rows() != 1 || s.cols() != 1) throw std::invalid_argument("scale: scalar must be 1x1");
  const int ia = a.id;
  const int is = s.id;
  return a.tape->record(s.value()(0, 0) * a.value(), {ia, is}, [ia, is](Tape& t, const Mat& g) {
    t.accumulate(ia, t.value(is)(0, 0) * g);
    if (t.needs_grad(is)) t.accumulate(is, Mat::Constant(1, 1, frobenius_dot(g, t.value(ia))));
  });
}

Var hadamard(Var a, Var b) {
  same_tape(a, b);
  same_shape(a, b, "hadamard");
  const int ia = a.id;
  const int ib = b.id;
  return a.tape->record(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var transpose(Var a) {
  const int ia = a.id;
  return a.tape->record(a.value().transpose(), {ia}, [ia](Tape& t, const Mat& g) { t.accumulate(ia, g.transpose()); });
}

Var relu(Var a) {
  const int ia = a.id;
  return a.tape->record(a.value().cwiseMax(0.0), {ia}, [ia](Tape& t, const Mat& g) {
    t.accumulate(ia, (t.value(ia).array() > 0.0).cast<double>().matrix().cwiseProduct(g));
  });
}

Var tanh(Var a) {
  const int ia = a.id;
  Mat v = a.value().array().tanh().matrix();
  const int out = static_cast<int>(a.tape->size());
  return a.tape->record(std::move(v), {ia}, [ia, out](Tape& t, const Mat& g) {
    const Mat& y = t.value(out);
    t.accumulate(ia, (1.0 - y.array().square()).matrix().cwiseProduct(g));
  });
}

Var sum(Var a) {
  const int ia = a.id;
  const Eigen::Index r = a.rows();
  const Eigen::Index c = a.cols();
  return a.tape->record(Mat::Constant(1, 1, a.value().sum()), {ia},
                        [ia, r, c](Tape& t, const Mat& g) { t.accumulate(ia, Mat::Constant(r, c, g(0, 0))); });
}

Var dot(Var a, Var b) {
  same_tape(a, b);
  same_shape(a, b, "dot");
  const int ia = a.id;
  const int ib = b.id;
  return a.tape->record(Mat::Constant(1, 1, frobenius_dot(a.value(), b.value())), {ia, ib},
                        [ia, ib](Tape& t, const Mat& g) {
                          if (t.needs_grad(ia)) t.accumulate(ia, g(0, 0) * t.value(ib));
                          if (t.needs_grad(ib)) t.accumulate(ib, g(0, 0) * t.value(ia));
                        });
}

Var squared_norm(Var a) {
  const int ia = a.id;
  return a.tape->record(Mat::Constant(1, 1, a.value().squaredNorm()), {ia},
                        [ia](Tape& t, const Mat& g) { t.accumulate(ia, 2.0 * g(0, 0) * t.value(ia)); });
}

Var sqrt(Var a) {
  const int ia = a.id;
  Mat v = a.value().array().sqrt().matrix();
  const int out = static_cast<int>(a.tape->size());
  return a.tape->record(std::move(v), {ia}, [ia, out](Tape& t, const Mat& g) {
    t.accumulate(ia, (0.5 * g.array() / t.value(out).array()).matrix());
  });
}

Var log(Var a) {
  const int ia = a.id;
  return a.tape->record(a.value().array().log().matrix(), {ia}, [ia](Tape& t, const Mat& g) {
    t.accumulate(ia, (g.array() / t.value(ia).array()).matrix());
  });
}

Var abs(Var a) {
  const int ia = a.id;
  return a.tape->record(a.value().cwiseAbs(), {ia}, [ia](Tape& t, const Mat& g) {
    const Mat sign = t.value(ia).unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
    t.accumulate(ia, sign.cwiseProduct(g));
  });
}

Var block(Var a, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols) {
  if (row < 0 || col < 0 || row + rows > a.rows() || col + cols > a.cols()) {
    throw std::invalid_argument("block: out of range");
  }
  const int ia = a.id;
  const Eigen::Index r = a.rows();
  const Eigen::Index c = a.cols();
  return a.tape->record(a.value().block(row, col, rows, cols), {ia},
                        [ia, r, c, row, col, rows, cols](Tape& t, const Mat& g) {
                          Mat full = Mat::Zero(r, c);
                          full.block(row, col, rows, cols) = g;
                          t.accumulate(ia, full);
                        });
}

Var hconcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("hconcat: no parts");
  Tape* tape = parts.front().tape;
  Eigen::Index cols = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    same_tape(parts.front(), p);
    if (p.rows() != parts.front().rows()) throw std::invalid_argument("hconcat: row mismatch");
    cols += p.cols();
    ids.push_back(p.id);
  }
  Mat v(parts.front().rows(), cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    offsets.push_back(at);
    v.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return tape->record(std::move(v), ids, [ids, offsets](Tape& t, const Mat& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.needs_grad(ids[i])) t.accumulate(ids[i], g.middleCols(offsets[i], t.value(ids[i]).cols()));
    }
  });
}

Var vconcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("vconcat: no parts");
  Tape* tape = parts.front().tape;
  Eigen::Index rows = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    same_tape(parts.front(), p);
    if (p.cols() != parts.front().cols()) throw std::invalid_argument("vconcat: column mismatch");
    rows += p.rows();
    ids.push_back(p.id);
  }
  Mat v(rows, parts.front().cols());
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    offsets.push_back(at);
    v.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return tape->record(std::move(v), ids, [ids, offsets](Tape& t, const Mat& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.needs_grad(ids[i])) t.accumulate(ids[i], g.middleRows(offsets[i], t.value(ids[i]).rows()));
    }
  });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) throw std::invalid_argument("reshape: size mismatch");
  const int ia = a.id;
  const Eigen::Index r = a.rows();
  const Eigen::Index c = a.cols();
  Mat v = a.value().reshaped(rows, cols);
  return a.tape->record(std::move(v), {ia}, [ia, r, c](Tape& t, const Mat& g) {
    t.accumulate(ia, g.reshaped(r, c));
  });
}

Var add_row_broadcast(Var a, Var row) {
  same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row_broadcast: shape mismatch");
  const int ia = a.id;
  const int ir = row.id;
  Mat v = a.value().rowwise() + row.value().row(0);
  return a.tape->record(std::move(v), {ia, ir}, [ia, ir](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    if (t.needs_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

}  // namespace ragicl::ad
