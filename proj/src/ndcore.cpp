#include "osaka/ndcore.hpp"

#include <cmath>
#include <string>

namespace osaka::nd {

namespace {

std::string shape_str(const Tensor& t) {
  return "[" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + "]";
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_scalar(const Tensor& s, const char* op) {
  if (s.rows() != 1 || s.cols() != 1)
    throw DimensionError(std::string(op) + ": expected 1x1 tensor, got " + shape_str(s));
}

Tensor unary(Matrix value, const Tensor& a, VjpFn vjp) { return Tape::record(std::move(value), {&a, nullptr}, std::move(vjp)); }

Tensor binary(Matrix value, const Tensor& a, const Tensor& b, VjpFn vjp) {
  return Tape::record(std::move(value), {&a, &b}, std::move(vjp));
}

class RecordingGuard {
 public:
  RecordingGuard(bool& flag, bool value) : flag_(flag), saved_(flag) { flag_ = value; }
  ~RecordingGuard() { flag_ = saved_; }
  RecordingGuard(const RecordingGuard&) = delete;
  RecordingGuard& operator=(const RecordingGuard&) = delete;

 private:
  bool& flag_;
  bool saved_;
};

}  // namespace

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw NonFiniteError(std::string("non-finite value in ") + what);
}

// -- Tensor ----------------------------------------------------------------

Tensor::Tensor() {
  static const auto empty = std::make_shared<const Matrix>(0, 0);
  value_ = empty;
}

Tensor::Tensor(Matrix value) : value_(std::make_shared<const Matrix>(std::move(value))) {}

Tensor Tensor::scalar(double v) { return Tensor(Matrix::Constant(1, 1, v)); }

double Tensor::item() const {
  if (rows() != 1 || cols() != 1) throw DimensionError("item(): tensor is " + shape_str(*this));
  return (*value_)(0, 0);
}

Tensor Tensor::detach() const {
  Tensor t;
  t.value_ = value_;
  return t;
}

// -- Tape ------------------------------------------------------------------

Tensor Tape::parameter(Matrix value) {
  Tensor t(std::move(value));
  Node node;
  node.is_parameter = true;
  nodes_.push_back(std::move(node));
  t.node_ = NodeRef{this, nodes_.size() - 1, generation_};
  return t;
}

void Tape::clear() {
  nodes_.clear();
  ++generation_;
}

void Tape::check(const NodeRef& ref) const {
  if (ref.generation != generation_ || ref.index >= nodes_.size())
    throw GenerationError("tensor refers to a cleared tape generation");
}

Tensor Tape::record(Matrix value, std::array<const Tensor*, 2> parents, VjpFn vjp) {
  Tape* tape = nullptr;
  for (const Tensor* p : parents) {
    if (p == nullptr || !p->tracked()) continue;
    const NodeRef& ref = *p->node();
    ref.tape->check(ref);
    if (tape != nullptr && tape != ref.tape) throw ContractError("operands live on different tapes");
    tape = ref.tape;
  }
  Tensor out(std::move(value));
  if (tape == nullptr || !tape->recording_) return out;

  Node node;
  for (std::size_t k = 0; k < 2; ++k) {
    if (parents[k] != nullptr && parents[k]->tracked())
      node.parents[k] = static_cast<std::ptrdiff_t>(parents[k]->node()->index);
  }
  node.vjp = std::move(vjp);
  tape->nodes_.push_back(std::move(node));
  out.node_ = NodeRef{tape, tape->nodes_.size() - 1, tape->generation_};
  return out;
}

std::vector<std::optional<Tensor>> Tape::run_backward(const Tensor& loss, bool create_graph) {
  const std::size_t root = loss.node()->index;
  std::vector<std::optional<Tensor>> grads(root + 1);
  grads[root] = Tensor::scalar(1.0);

  RecordingGuard guard(recording_, create_graph);
  for (std::size_t i = root + 1; i-- > 0;) {
    if (!grads[i]) continue;
    // Copy: recording during the pass may reallocate nodes_.
    const auto parents = nodes_[i].parents;
    const VjpFn vjp = nodes_[i].vjp;
    if (!vjp) continue;
    const std::array<bool, 2> needed{parents[0] >= 0, parents[1] >= 0};
    std::array<Tensor, 2> local = vjp(*grads[i], needed);
    for (std::size_t k = 0; k < 2; ++k) {
      if (!needed[k]) continue;
      auto& slot = grads[static_cast<std::size_t>(parents[k])];
      slot = slot ? add(*slot, local[k]) : local[k];
    }
  }
  return grads;
}

Tensor Gradients::of(const Tensor& leaf) const {
  if (!leaf.tracked()) throw ContractError("gradient requested for an untracked tensor");
  auto it = grads_.find(leaf.node()->index);
  if (it == grads_.end()) return Tensor(Matrix::Zero(leaf.rows(), leaf.cols()));
  return it->second;
}

// -- differentiation -------------------------------------------------------

namespace {

Tape& loss_tape(const Tensor& loss) {
  if (loss.rows() != 1 || loss.cols() != 1)
    throw ContractError("backward: loss must be a scalar, got " + shape_str(loss));
  if (!loss.tracked()) throw ContractError("backward: loss is not on an active tape");
  const NodeRef& ref = *loss.node();
  if (ref.generation != ref.tape->generation())
    throw GenerationError("backward: loss refers to a cleared tape generation");
  require_finite(loss.value(), "loss");
  return *ref.tape;
}

}  // namespace

std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt, bool create_graph) {
  Tape& tape = loss_tape(loss);
  for (const Tensor& w : wrt) {
    if (!w.tracked() || w.node()->tape != &tape)
      throw ContractError("grad: differentiation target is not on the loss's tape");
    tape.check(*w.node());
  }
  auto grads = tape.run_backward(loss, create_graph);
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Tensor& w : wrt) {
    const std::size_t idx = w.node()->index;
    if (idx < grads.size() && grads[idx]) {
      require_finite(grads[idx]->value(), "gradient");
      out.push_back(*grads[idx]);
    } else {
      out.emplace_back(Matrix::Zero(w.rows(), w.cols()));
    }
  }
  return out;
}

Gradients backward(const Tensor& loss) {
  Tape& tape = loss_tape(loss);
  auto grads = tape.run_backward(loss, false);
  Gradients result;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i] || !tape.nodes_[i].is_parameter) continue;
    require_finite(grads[i]->value(), "gradient");
    result.grads_.emplace(i, *grads[i]);
  }
  tape.clear();
  return result;
}

UpdateRecord gradient_step(const Tensor& inner_loss, std::span<const Tensor> params,
                           std::span<const Tensor> step_sizes, GradMode mode) {
  if (params.size() != step_sizes.size()) throw ContractError("gradient_step: one step size per parameter required");
  const auto grads = grad(inner_loss, params, mode == GradMode::exact);
  UpdateRecord rec;
  rec.mode = mode;
  rec.params.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    rec.params.push_back(sub(params[i], mul_scalar(step_sizes[i], grads[i])));
  return rec;
}

std::vector<Tensor> backward_through_update(const Tensor& outer_loss, const UpdateRecord& update,
                                            std::span<const Tensor> wrt, GradMode requested) {
  if (requested != update.mode) {
    if (requested == GradMode::exact)
      throw ContractError("exact meta-gradient requested but the inner step was not taped");
    throw ContractError("first-order meta-gradient requested on an exactly taped update");
  }
  return grad(outer_loss, wrt, false);
}

// -- primitive ops ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a) + " * " + shape_str(b));
  return binary(a.value() * b.value(), a, b, [a, b](const Tensor& g, std::array<bool, 2> need) {
    std::array<Tensor, 2> r;
    if (need[0]) r[0] = matmul(g, transpose(b));
    if (need[1]) r[1] = matmul(transpose(a), g);
    return r;
  });
}

Tensor transpose(const Tensor& a) {
  return unary(a.value().transpose(), a, [](const Tensor& g, std::array<bool, 2>) {
    return std::array<Tensor, 2>{transpose(g), Tensor()};
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  return binary(a.value() + b.value(), a, b,
                [](const Tensor& g, std::array<bool, 2>) { return std::array<Tensor, 2>{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  return binary(a.value() - b.value(), a, b, [](const Tensor& g, std::array<bool, 2> need) {
    std::array<Tensor, 2> r{g, Tensor()};
    if (need[1]) r[1] = scale(g, -1.0);
    return r;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  return binary(a.value().cwiseProduct(b.value()), a, b, [a, b](const Tensor& g, std::array<bool, 2> need) {
    std::array<Tensor, 2> r;
    if (need[0]) r[0] = mul(g, b);
    if (need[1]) r[1] = mul(g, a);
    return r;
  });
}

Tensor scale(const Tensor& a, double c) {
  return unary(a.value() * c, a, [c](const Tensor& g, std::array<bool, 2>) {
    return std::array<Tensor, 2>{scale(g, c), Tensor()};
  });
}

Tensor mul_scalar(const Tensor& s, const Tensor& a) {
  require_scalar(s, "mul_scalar");
  return binary(s.item() * a.value(), s, a, [s, a](const Tensor& g, std::array<bool, 2> need) {
    std::array<Tensor, 2> r;
    if (need[0]) r[0] = sum(mul(g, a));
    if (need[1]) r[1] = mul_scalar(s, g);
    return r;
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw DimensionError("add_row: cannot broadcast " + shape_str(row) + " over " + shape_str(a));
  Matrix v = a.value();
  v.rowwise() += row.value().row(0);
  return binary(std::move(v), a, row, [](const Tensor& g, std::array<bool, 2> need) {
    std::array<Tensor, 2> r{g, Tensor()};
    if (need[1]) r[1] = sum_rows(g);
    return r;
  });
}

Tensor sum_rows(const Tensor& a) {
  const Index m = a.rows();
  return unary(a.value().colwise().sum(), a, [m](const Tensor& g, std::array<bool, 2>) {
    return std::array<Tensor, 2>{repeat_rows(g, m), Tensor()};
  });
}

Tensor sum_cols(const Tensor& a) {
  const Index n = a.cols();
  return unary(a.value().rowwise().sum(), a, [n](const Tensor& g, std::array<bool, 2>) {
    return std::array<Tensor, 2>{repeat_cols(g, n), Tensor()};
  });
}

Tensor repeat_rows(const Tensor& row, Index m) {
  if (row.rows() != 1) throw DimensionError("repeat_rows: expected a row, got " + shape_str(row));
  return unary(row.value().replicate(m, 1), row, [](const Tensor& g, std::array<bool, 2>) {
    return std::array<Tensor, 2>{sum_rows(g), Tensor()};
  });
}

Tensor repeat_cols(const Tensor& col, Index n) {
  if (col.cols() != 1) throw DimensionError("repeat_cols: expected a column, got " + shape_str(col));
  return unary(col.value().replicate(1, n), col, [](const Tensor& g, std::array<bool, 2>) {
    return std::array<Tensor, 2>{sum_cols(g), Tensor()};
  });
}

Tensor sum(const Tensor& a) {
  const Index m = a.rows(), n = a.cols();
  return unary(Matrix::Constant(1, 1, a.value().sum()), a, [m, n](const Tensor& g, std::array<bool, 2>) {
    return std::array<Tensor, 2>{broadcast(g, m, n), Tensor()};
  });
}

Tensor broadcast(const Tensor& s, Index rows, Index cols) {
  require_scalar(s, "broadcast");
  return unary(Matrix::Constant(rows, cols, s.item()), s, [](const Tensor& g, std::array<bool, 2>) {
    return std::array<Tensor, 2>{sum(g), Tensor()};
  });
}

Tensor exp(const Tensor& a) {
  return unary(a.value().array().exp().matrix(), a, [a](const Tensor& g, std::array<bool, 2>) {
    return std::array<Tensor, 2>{mul(g, exp(a)), Tensor()};
  });
}

Tensor relu(const Tensor& a) {
  Matrix mask = (a.value().array() > 0.0).cast<double>().matrix();
  Matrix v = a.value().cwiseMax(0.0);
  return unary(std::move(v), a, [mask = Tensor(std::move(mask))](const Tensor& g, std::array<bool, 2>) {
    return std::array<Tensor, 2>{mul(g, mask), Tensor()};
  });
}

Tensor tanh(const Tensor& a) {
  // d tanh = 1 - tanh^2, written in terms of the input so that second-order
  // terms flow through `a`.
  Matrix v = a.value().array().tanh().matrix();
  return unary(std::move(v), a, [a](const Tensor& g, std::array<bool, 2>) {
    const Tensor y = tanh(a);
    const Tensor ones(Matrix::Ones(a.rows(), a.cols()));
    return std::array<Tensor, 2>{mul(g, sub(ones, mul(y, y))), Tensor()};
  });
}

namespace {

Matrix softmax_values(const Matrix& z) {
  Matrix shifted = z.colwise() - z.rowwise().maxCoeff();
  Matrix e = shifted.array().exp().matrix();
  return e.array().colwise() / e.rowwise().sum().array();
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
  return unary(softmax_values(a.value()), a, [a](const Tensor& g, std::array<bool, 2>) {
    // dx = y * (g - rowsum(g * y))
    const Tensor y = softmax_rows(a);
    const Tensor inner = repeat_cols(sum_cols(mul(g, y)), a.cols());
    return std::array<Tensor, 2>{mul(y, sub(g, inner)), Tensor()};
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const Index batch = logits.rows();
  const Index classes = logits.cols();
  if (static_cast<Index>(labels.size()) != batch)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(batch) + " rows");
  if (batch == 0) throw DimensionError("softmax_cross_entropy: empty batch");
  Matrix onehot = Matrix::Zero(batch, classes);
  for (Index i = 0; i < batch; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= classes)
      throw IndexError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(classes) + ")");
    onehot(i, y) = 1.0;
  }
  const Matrix& z = logits.value();
  const Eigen::VectorXd rmax = z.rowwise().maxCoeff();
  const Eigen::VectorXd lse =
      rmax.array() + (z.colwise() - rmax).array().exp().rowwise().sum().log();
  double total = 0.0;
  for (Index i = 0; i < batch; ++i) total += lse(i) - z(i, labels[static_cast<std::size_t>(i)]);
  const double loss = total / static_cast<double>(batch);
  if (!std::isfinite(loss)) throw NonFiniteError("non-finite value in cross-entropy loss");

  return unary(Matrix::Constant(1, 1, loss), logits,
               [logits, onehot = Tensor(std::move(onehot)), batch](const Tensor& g, std::array<bool, 2>) {
                 const Tensor residual = scale(sub(softmax_rows(logits), onehot), 1.0 / static_cast<double>(batch));
                 return std::array<Tensor, 2>{mul_scalar(g, residual), Tensor()};
               });
}

Tensor mean_squared_error(const Tensor& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw DimensionError("mean_squared_error: prediction " + shape_str(pred) + " vs target [" +
                         std::to_string(target.rows()) + "x" + std::to_string(target.cols()) + "]");
  if (pred.size() == 0) throw DimensionError("mean_squared_error: empty batch");
  const Tensor d = sub(pred, Tensor(target));
  Tensor loss = scale(sum(mul(d, d)), 1.0 / static_cast<double>(pred.size()));
  require_finite(loss.value(), "squared-error loss");
  return loss;
}

}  // namespace osaka::nd
