#pragma once

// Optimizers, meta-training and the online learners compared at CL time.
// Every learner predicts with the state it had before seeing the current
// batch, then updates on that batch.

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "osaka/batch.hpp"
#include "osaka/models.hpp"
#include "osaka/rng.hpp"
#include "osaka/stream.hpp"

namespace osaka {

// -- optimizers --------------------------------------------------------------

struct AdamState {
  Vector m;
  Vector v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected ADAM update. Moments are created on first use.
/// Throws StepError on non-finite gradients, DimensionError on shape mismatch.
Vector adam_step(AdamState& state, const Vector& params, const Vector& grads, double lr);

/// Logistic gate 1 / (1 + exp(-slope (loss - lambda))). lambda must be > 0.
double update_modulation(double loss, double lambda, double slope = 1.0);

struct BgdState {
  Vector mu;
  Vector sigma;
  int mc_samples = 5;
  /// Scale of the mean update.
  double beta = 1.0;
};

BgdState make_bgd_state(const Vector& mu, double sigma0, int mc_samples, double beta);

/// Gradient of the loss at a parameter sample.
using GradFn = std::function<Vector(const Vector& phi)>;

/// Draws mc_samples noise vectors (each filled coordinate by coordinate from
/// `rng`), evaluates the gradient at phi = mu + sigma * eps, and applies
///   mu    <- mu - beta sigma^2 E[g]
///   sigma <- sigma sqrt(1 + sigma E[g eps] / 2) - sigma E[g eps] / 2
/// with a negative radicand clamped to 0 and sigma clamped to >= 1e-10.
void bgd_step(BgdState& state, const GradFn& grad_fn, Rng& rng);

constexpr double kMinSigma = 1e-10;

// -- meta-training -----------------------------------------------------------

struct PretrainConfig {
  int epochs = 20;
  int iterations_per_epoch = 100;
  int batch_size = 16;
  int shots = 5;
  double outer_lr = 1e-3;
  int inner_steps = 1;
  bool first_order = false;
  bool head_only = false;
  bool freeze_inner_lr = false;
  std::uint64_t seed = 0;
};

PretrainConfig pretrain_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PretrainConfig& cfg);

struct PretrainResult {
  ModelParams params;
  /// Mean query loss after adaptation, one entry per epoch.
  std::vector<double> epoch_losses;
};

/// MAML meta-training on pretrain-family tasks with an ADAM outer loop over
/// the weights and the log step sizes. Throws TrainingError (with the epoch)
/// when the meta-loss is non-finite or exceeds 1e3.
PretrainResult pretrain_maml(const NetSpec& spec, const StreamConfig& stream, const Pools& pools,
                             const PretrainConfig& cfg);

/// Mean query accuracy after adapting on each task's support set.
double post_adaptation_accuracy(const ModelParams& params, const StreamConfig& stream, const Pools& pools, int tasks,
                                int shots, const AdaptOptions& opts, std::uint64_t seed);

// -- learners ----------------------------------------------------------------

struct StepDiagnostics {
  /// Loss and accuracy of the pre-update prediction on the batch.
  double loss = 0.0;
  double accuracy = 0.0;
  bool detected_boundary = false;
  std::optional<double> modulation;
};

class Learner {
 public:
  virtual ~Learner() = default;
  /// Prediction from the current state; never looks at labels.
  virtual Matrix predict(const Matrix& x) const = 0;
  /// Incur the loss on `batch` with the current state, then learn from it.
  virtual StepDiagnostics update(const Batch& batch) = 0;
};

struct LearnerConfig {
  std::string kind = "cmaml";
  /// Display name; defaults to the kind.
  std::string name;
  double eta = 1e-3;
  double inner_lr_init = 0.1;
  int inner_steps = 1;
  double gamma = 1.0;
  double lambda = 1.0;
  double slope = 1.0;
  bool first_order = true;
  int mc_samples = 5;
  double beta = 1.0;
  double sigma0 = 0.01;
  std::string pretrain_checkpoint;
  bool um = true;
  bool pap = true;
  /// Only meaningful to the search, which records the sampled value.
  int batch_size = 0;

  std::string display_name() const { return name.empty() ? kind : name; }
};

void validate(const LearnerConfig& cfg);
/// `gamma` may be given as a number or as "inf" / "-inf".
LearnerConfig learner_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LearnerConfig& cfg);

/// True for kinds that cannot run without a pre-trained checkpoint.
bool requires_checkpoint(const std::string& kind);

/// Builds a learner. `net` describes the untrained network used when no
/// checkpoint applies; its seed is replaced by one derived from `seed`.
/// Throws ConfigError for unknown kinds or a missing required checkpoint.
std::unique_ptr<Learner> make_learner(const LearnerConfig& cfg, const std::optional<ModelParams>& checkpoint,
                                      NetSpec net, LossKind loss, std::uint64_t seed);

/// Online ADAM on one set of weights (from scratch, or from a checkpoint for
/// fine-tuning).
class AdamLearner : public Learner {
 public:
  AdamLearner(ModelParams init, double lr, LossKind loss);
  Matrix predict(const Matrix& x) const override;
  StepDiagnostics update(const Batch& batch) override;
  const ModelParams& params() const { return params_; }

 private:
  ModelParams params_;
  AdamState adam_;
  double lr_;
  LossKind loss_;
};

/// Frozen slow weights; fast weights are re-adapted from them on every batch.
class MamlLearner : public Learner {
 public:
  MamlLearner(ModelParams phi, AdaptOptions opts);
  Matrix predict(const Matrix& x) const override;
  StepDiagnostics update(const Batch& batch) override;
  const ModelParams& slow() const { return phi_; }
  const ModelParams& fast() const { return theta_; }

 private:
  ModelParams phi_;
  ModelParams theta_;
  AdaptOptions opts_;
};

/// Weights as a factorized Gaussian updated by bgd_step; predicts with the mean.
class BgdLearner : public Learner {
 public:
  BgdLearner(ModelParams init, double sigma0, int mc_samples, double beta, LossKind loss, std::uint64_t seed);
  Matrix predict(const Matrix& x) const override;
  StepDiagnostics update(const Batch& batch) override;
  const BgdState& state() const { return bgd_; }

 private:
  ModelParams mean_params() const;

  ModelParams shape_;
  BgdState bgd_;
  LossKind loss_;
  Rng rng_;
};

/// Fast weights adapted (first order) from the BGD mean on the previous
/// batch; the weight distribution is updated by bgd_step on the incurred
/// loss. Step sizes stay at their checkpoint values.
class MetaBgdLearner : public Learner {
 public:
  MetaBgdLearner(ModelParams init, double sigma0, int mc_samples, double beta, AdaptOptions opts,
                 std::uint64_t seed);
  Matrix predict(const Matrix& x) const override;
  StepDiagnostics update(const Batch& batch) override;
  const BgdState& state() const { return bgd_; }

 private:
  ModelParams with_weights(const Vector& w) const;

  ModelParams shape_;
  BgdState bgd_;
  AdaptOptions opts_;
  ModelParams theta_;
  std::optional<Batch> previous_;
  Rng rng_;
};

// -- Continual-MAML ------------------------------------------------------------

struct CmamlConfig {
  double eta = 1e-3;
  int inner_steps = 1;
  /// Boundary threshold; +inf never detects, -inf always detects.
  double gamma = 1.0;
  double lambda = 1.0;
  double slope = 1.0;
  bool first_order = true;
  /// Scale the slow update by the modulation gate (otherwise the gate is 1).
  bool um = true;
  double split_fraction = 0.5;
  LossKind loss = LossKind::cross_entropy;
};

struct CmamlState {
  ModelParams phi;
  ModelParams theta;
  /// Batches seen since the last detected boundary.
  std::vector<Batch> buffer;
  AdamState adam;
  std::optional<Batch> previous;
  Rng rng;
};

/// The boundary rule: a shift is declared unless the current fast weights
/// are within `gamma` of a fresh one-step adaptation from phi. +inf never
/// fires and -inf always does.
bool boundary_detected(double incurred_loss, double fresh_loss, double gamma);

/// Starts with theta = phi and an empty buffer.
CmamlState make_cmaml_state(ModelParams phi, std::uint64_t seed);

/// Buffered version with a prolonged adaptation phase.
StepDiagnostics cmaml_step(CmamlState& state, const CmamlConfig& cfg, const Batch& batch);
/// Fast weights reset from phi every step; slow update while no boundary is detected.
StepDiagnostics cmaml_no_pap_step(CmamlState& state, const CmamlConfig& cfg, const Batch& batch);

class CmamlLearner : public Learner {
 public:
  CmamlLearner(ModelParams phi, CmamlConfig cfg, bool pap, std::uint64_t seed);
  Matrix predict(const Matrix& x) const override;
  StepDiagnostics update(const Batch& batch) override;
  const CmamlState& state() const { return state_; }

 private:
  CmamlState state_;
  CmamlConfig cfg_;
  bool pap_;
};

}  // namespace osaka
