#pragma once

#include "ragicl/linalg.hpp"

#include <cstdint>
#include <functional>
#include <vector>

namespace ragicl::ad {

class Tape;

// Handle to a matrix-valued node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  const Mat& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Records matrix operations and replays them backwards. Nodes are appended in
// evaluation order, so a reverse sweep visits every node after all its users.
class Tape {
 public:
  Var leaf(Mat value);      // receives a gradient
  Var constant(Mat value);  // never receives a gradient

  const Mat& value(int id) const { return nodes_[id].value; }
  const Mat& grad(int id) const { return nodes_[id].grad; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(out)/d(out) = 1; `out` must be 1x1.
  void backward(Var out);
  void clear() { nodes_.clear(); }

  // Process-wide count of backward() calls, used to check that deployment
  // code paths never differentiate.
  static std::uint64_t backward_count();

  using Backprop = std::function<void(Tape&, const Mat& grad)>;
  Var record(Mat value, std::vector<int> parents, Backprop backprop);
  void accumulate(int id, const Mat& g);

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    Backprop backprop;
  };
  std::vector<Node> nodes_;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var scale(Var a, Var s);  // s is 1x1
Var hadamard(Var a, Var b);
Var transpose(Var a);
Var relu(Var a);
Var tanh(Var a);
Var sum(Var a);              // 1x1
Var dot(Var a, Var b);       // Frobenius inner product, 1x1
Var squared_norm(Var a);     // 1x1
Var sqrt(Var a);
Var log(Var a);
Var abs(Var a);
Var block(Var a, Eigen::Index row, Eigen::Index col, Eigen::Index rows, Eigen::Index cols);
Var hconcat(const std::vector<Var>& parts);
Var vconcat(const std::vector<Var>& parts);
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);  // column-major, like Eigen
Var add_row_broadcast(Var a, Var row);  // a + 1 * row for a 1 x cols row

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return matmul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace ragicl::ad
