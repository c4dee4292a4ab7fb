#pragma once

// Dense tensors with tape-based reverse-mode differentiation.
//
// Every tensor is a 2-D row-major view over an Eigen matrix (scalars are
// 1x1, bias vectors are 1xn). A tensor is either a constant or a handle
// into a Tape. Operations whose inputs include a tracked tensor are
// recorded on that tensor's tape; all-constant operations just compute.
//
// Gradients are themselves built from the same primitives, so a gradient
// computed with `create_graph` stays on the tape and can be differentiated
// again. That is what makes exact meta-gradients through an inner SGD step
// possible.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "osaka/errors.hpp"

namespace osaka::nd {

using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

class Tape;
class Gradients;

struct NodeRef {
  Tape* tape = nullptr;
  std::size_t index = 0;
  std::uint64_t generation = 0;
};

class Tensor {
 public:
  Tensor();
  explicit Tensor(Matrix value);
  static Tensor scalar(double v);

  const Matrix& value() const { return *value_; }
  Index rows() const { return value_->rows(); }
  Index cols() const { return value_->cols(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }
  Index size() const { return value_->size(); }

  /// Value of a 1x1 tensor.
  double item() const;

  bool tracked() const { return node_.has_value(); }
  const std::optional<NodeRef>& node() const { return node_; }

  /// Same value, no tape handle.
  Tensor detach() const;

 private:
  friend class Tape;
  std::shared_ptr<const Matrix> value_;
  std::optional<NodeRef> node_;
};

/// Local vector-Jacobian product of one recorded op: given dL/d(output),
/// returns dL/d(parent) for each parent whose `needed` flag is set.
using VjpFn = std::function<std::array<Tensor, 2>(const Tensor& grad_out, std::array<bool, 2> needed)>;

/// Append-only record of primitive operations. Nodes are stored in creation
/// order, which is a topological order because an op can only reference
/// tensors that already exist. Single-threaded.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// New leaf marked as a parameter (reported by backward()).
  Tensor parameter(Matrix value);
  /// Leaf that tracks an existing tensor's value.
  Tensor parameter(const Tensor& value) { return parameter(value.value()); }

  /// Drop every node and advance the generation; outstanding handles become stale.
  void clear();

  std::uint64_t generation() const { return generation_; }
  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return recording_; }

  /// Records `value` as the result of an op over `parents`. Returns a
  /// constant when no parent is tracked or the tape is not recording.
  static Tensor record(Matrix value, std::array<const Tensor*, 2> parents, VjpFn vjp);

  bool is_parameter(std::size_t index) const { return nodes_.at(index).is_parameter; }

 private:
  friend std::vector<Tensor> grad(const Tensor&, std::span<const Tensor>, bool);
  friend class Gradients;
  friend Gradients backward(const Tensor&);

  struct Node {
    std::array<std::ptrdiff_t, 2> parents{-1, -1};
    VjpFn vjp;
    bool is_parameter = false;
  };

  void check(const NodeRef& ref) const;
  std::vector<std::optional<Tensor>> run_backward(const Tensor& loss, bool create_graph);

  std::vector<Node> nodes_;
  std::uint64_t generation_ = 0;
  bool recording_ = true;
};

/// Gradient map over the parameter leaves of a tape, as returned by backward().
class Gradients {
 public:
  /// Gradient for a parameter leaf; zeros of the leaf's shape when the loss
  /// does not depend on it.
  Tensor of(const Tensor& leaf) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend Gradients backward(const Tensor&);
  std::unordered_map<std::size_t, Tensor> grads_;
};

// -- primitive ops ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// Elementwise product.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
/// s * a for a 1x1 tensor s.
Tensor mul_scalar(const Tensor& s, const Tensor& a);
/// a[m x n] + row[1 x n] broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& row);
/// Column sums: [m x n] -> [1 x n].
Tensor sum_rows(const Tensor& a);
/// Row sums: [m x n] -> [m x 1].
Tensor sum_cols(const Tensor& a);
Tensor repeat_rows(const Tensor& row, Index m);
Tensor repeat_cols(const Tensor& col, Index n);
/// Sum of all entries as a 1x1 tensor.
Tensor sum(const Tensor& a);
/// 1x1 tensor broadcast to [rows x cols].
Tensor broadcast(const Tensor& s, Index rows, Index cols);
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor softmax_rows(const Tensor& a);

/// Mean over the batch of -log softmax(logits)[label]. Stabilized by
/// subtracting each row's max.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Mean squared error against a constant target of the same shape.
Tensor mean_squared_error(const Tensor& pred, const Matrix& target);

// -- differentiation -------------------------------------------------------

/// d(loss)/d(w) for each tensor in `wrt` (leaves or intermediate nodes on the
/// loss's tape). With `create_graph` the returned gradients are themselves
/// recorded on the tape. The tape is left intact.
std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt, bool create_graph = false);

/// Gradients for every parameter leaf, then clears the tape (generation advances).
Gradients backward(const Tensor& loss);

enum class GradMode { first_order, exact };

/// Result of one differentiable SGD step p - s * grad(inner_loss, p).
struct UpdateRecord {
  std::vector<Tensor> params;
  GradMode mode = GradMode::first_order;
};

/// One SGD step on `params` with per-tensor 1x1 step sizes. In exact mode the
/// inner gradient is recorded so the result stays twice differentiable; in
/// first-order mode it enters as a constant.
UpdateRecord gradient_step(const Tensor& inner_loss, std::span<const Tensor> params,
                           std::span<const Tensor> step_sizes, GradMode mode);

/// Gradients of an outer loss built on updated parameters with respect to
/// `wrt` (typically the pre-update parameters and log step sizes). Exact mode
/// requires that the update itself was taped in exact mode.
std::vector<Tensor> backward_through_update(const Tensor& outer_loss, const UpdateRecord& update,
                                            std::span<const Tensor> wrt, GradMode requested);

/// Throws NonFiniteError naming `what` if any entry is NaN or infinite.
void require_finite(const Matrix& m, const char* what);

}  // namespace osaka::nd
