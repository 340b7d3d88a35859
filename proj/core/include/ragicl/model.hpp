#pragma once

#include "ragicl/linalg.hpp"

#include <string>

namespace ragicl {

struct Task;

// Anything that answers the query of a task. The sensitivity is the Jacobian
// of the prediction w.r.t. the test input; for dot_product tasks the test
// input feeds both the x1 and the x2 slot, for projection_based only x1.
class QueryModel {
 public:
  virtual ~QueryModel() = default;
  virtual Vec predict(const Task& task) const = 0;
  virtual Mat sensitivity(const Task& task) const = 0;
  virtual std::string name() const = 0;
};

// Central differences of QueryModel::predict w.r.t. the test input.
Mat finite_difference_sensitivity(const QueryModel& model, const Task& task, double h = 1e-5);

}  // namespace ragicl
