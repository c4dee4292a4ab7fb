#pragma once

// MLP predictor: slow weights (phi), fast weights (theta) and the
// meta-learned inner step size, in a plain-value form (ModelParams) and a
// tape-tracked form (TrackedParams) used wherever gradients are needed.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "osaka/batch.hpp"
#include "osaka/ndcore.hpp"

namespace osaka {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

enum class Activation { relu, tanh };
enum class LossKind { cross_entropy, mse };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct NetSpec {
  int input_dim = 16;
  std::vector<int> hidden_dims{64, 64};
  int output_dim = 5;
  Activation activation = Activation::relu;
  std::uint64_t seed = 0;
  /// Initial inner-loop step size; stored as its logarithm.
  double inner_lr_init = 0.1;
  /// One step size for the whole network instead of one per layer.
  bool shared_inner_lr = false;

  std::size_t num_layers() const { return hidden_dims.size() + 1; }
  std::size_t num_inner_lrs() const { return shared_inner_lr ? 1 : num_layers(); }
  int layer_in(std::size_t l) const;
  int layer_out(std::size_t l) const;

  bool operator==(const NetSpec&) const = default;
};

/// Throws ConfigError unless every dimension is >= 1 and the step size is >= 0.
void validate(const NetSpec& spec);

struct Layer {
  Matrix weight;  // [in x out]
  RowVector bias;  // [1 x out]
};

struct ModelParams {
  NetSpec spec;
  std::vector<Layer> layers;
  /// exp(log_inner_lr[i]) is the inner step size of layer i (or of every
  /// layer when the spec shares one).
  Vector log_inner_lr;

  /// Number of weight and bias entries (step sizes excluded).
  Eigen::Index weight_count() const;
  /// weight_count() plus the step-size scalars.
  Eigen::Index size() const { return weight_count() + log_inner_lr.size(); }
  double inner_lr(std::size_t layer) const;
  std::size_t lr_index(std::size_t layer) const { return spec.shared_inner_lr ? 0 : layer; }
};

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases, log step size
/// ln(inner_lr_init). Fully determined by spec.seed.
ModelParams init_params(const NetSpec& spec);

/// Affine-activation chain with an affine final layer.
Matrix forward(const ModelParams& params, const Matrix& x);

/// Layers in order (weight row-major, then bias), followed by log_inner_lr.
Vector flatten(const ModelParams& params);
/// Inverse of flatten(); `flat` must have params.size() entries.
void unflatten(ModelParams& params, const Vector& flat);

/// Euclidean norm of the flattened difference. Throws ContractError when the
/// specs differ.
double param_distance(const ModelParams& a, const ModelParams& b);

// -- losses on plain values --------------------------------------------------

double loss_value(const Matrix& out, const Batch& batch, LossKind kind);
/// Fraction of argmax hits (classification) or of |error| < 0.5 (regression).
double accuracy(const Matrix& out, const Batch& batch, LossKind kind);

// -- tracked parameters ------------------------------------------------------

struct TrackedParams {
  std::vector<nd::Tensor> weights;
  std::vector<nd::Tensor> biases;
  std::vector<nd::Tensor> log_lr;
  NetSpec spec;
  /// Set once the tensors are the result of inner adaptation; records whether
  /// the inner gradients were taped (exact) or frozen (first order).
  std::optional<nd::GradMode> update_mode;

  /// weights..., biases..., log_lr... in that order.
  std::vector<nd::Tensor> all() const;
  nd::Tensor step_size(std::size_t layer) const;
};

/// Puts every tensor of `params` on `tape` as a parameter leaf.
TrackedParams track(nd::Tape& tape, const ModelParams& params);
ModelParams values(const TrackedParams& params);

nd::Tensor forward(const TrackedParams& params, const nd::Tensor& x);
nd::Tensor batch_loss(const nd::Tensor& out, const Batch& batch, LossKind kind);

struct AdaptOptions {
  int steps = 1;
  bool head_only = false;
  nd::GradMode mode = nd::GradMode::first_order;
  LossKind loss = LossKind::cross_entropy;
};

/// `steps` SGD steps theta <- theta - exp(log_lr) * grad L(batch), starting
/// from theta = phi. With head_only only the final layer moves. The result
/// stays on phi's tape, differentiable with respect to phi and log_lr (to
/// second order in exact mode). A non-finite loss raises AdaptationError
/// carrying the step index.
TrackedParams inner_adapt(const TrackedParams& phi, const Batch& batch, const AdaptOptions& opts);

/// Value-only adaptation on a private tape.
ModelParams inner_adapt(const ModelParams& phi, const Batch& batch, const AdaptOptions& opts);

/// Gradient of `loss` with respect to every tensor of `params`, laid out as
/// flatten() lays out values.
Vector flat_gradient(const nd::Tensor& loss, const TrackedParams& params);

/// Gradient of an outer loss built on `adapted` with respect to `phi` and its
/// log step sizes, flattened. Exact mode requires an exactly taped adaptation.
Vector meta_gradient(const nd::Tensor& outer_loss, const TrackedParams& phi, const TrackedParams& adapted,
                     nd::GradMode requested);

}  // namespace osaka
