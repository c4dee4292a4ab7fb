#pragma once

#include <vector>

#include <Eigen/Dense>

namespace osaka {

/// Labelled examples as seen by a learner: inputs plus either class labels
/// (classification) or real-valued targets (regression). Carries nothing
/// about the context that generated it.
struct Batch {
  Eigen::MatrixXd x;
  std::vector<int> labels;
  Eigen::MatrixXd targets;

  Eigen::Index size() const { return x.rows(); }
  bool empty() const { return x.rows() == 0; }
};

/// Rows of `b` selected by `rows`, in that order.
Batch select_rows(const Batch& b, const std::vector<int>& rows);

/// Concatenation of batches that share a layout.
Batch concat(const std::vector<Batch>& parts);

}  // namespace osaka
