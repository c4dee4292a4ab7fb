#pragma once

// Synthetic non-stationary environment: a hidden context follows a sticky
// Markov chain, each context defines a labelled distribution over Gaussian
// prototypes, and the learner only ever sees the resulting query batches.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "osaka/batch.hpp"
#include "osaka/rng.hpp"

namespace osaka {

enum class Family { pretrain, ood_inputs, ood_targets };
constexpr std::array<Family, 3> kFamilies{Family::pretrain, Family::ood_inputs, Family::ood_targets};

std::string to_string(Family f);
Family family_from_string(const std::string& s);

enum class TaskKind { classification, sinusoid };

struct PoolConfig {
  int n_pre = 64;
  int n_ood = 64;
  double mu_shift = 2.0;
  std::uint64_t seed = 0;
  /// Nuisance offsets added to every input, spanning a low-rank subspace.
  /// Pretrain and ood_inputs labels ignore them; ood_targets labels are
  /// defined by them.
  int n_styles = 8;
  int style_rank = 4;
  double style_scale = 2.0;
};

struct StreamConfig {
  double alpha = 0.98;
  int episode_length = 10000;
  std::array<double, 3> mixture{0.5, 0.25, 0.25};
  int ways = 5;
  int samples_per_step = 10;
  int dim = 16;
  double noise = 0.3;
  PoolConfig pools;
  std::uint64_t seed = 0;
  TaskKind task = TaskKind::classification;
  /// When positive, contexts come from a list of this many contexts drawn once
  /// up front, and a switch moves uniformly to one of the others.
  int fixed_contexts = 0;
  /// Each batch holds every class equally often (N-way k-shot) instead of
  /// i.i.d. uniform labels.
  bool balanced = true;
};

/// Throws ConfigError on any out-of-range field.
void validate(const StreamConfig& cfg);

StreamConfig stream_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const StreamConfig& cfg);

struct ContextSpec {
  int id = -1;
  Family family = Family::pretrain;
  /// Ids of the label-bearing factor, one per class position: prototypes of
  /// the family's pool, or styles for ood_targets.
  std::vector<int> class_subset;
  /// label_map[i] is the label emitted for class_subset[i].
  std::vector<int> label_map;
  /// ood_targets only: the pretrain prototypes its inputs are drawn from.
  /// Every prototype appears under every label.
  std::vector<int> nuisance_subset;
  double noise = 0.0;
  // sinusoid task only
  double amplitude = 0.0;
  double phase = 0.0;
};

/// Prototype and style rows. An input is prototype + style + noise. The
/// ood_targets family draws its inputs exactly like the pretrain family.
struct Pools {
  Eigen::MatrixXd pretrain;
  Eigen::MatrixXd ood;
  Eigen::MatrixXd styles;

  const Eigen::MatrixXd& of(Family f) const { return f == Family::ood_inputs ? ood : pretrain; }
};

Pools build_pools(const StreamConfig& cfg, Rng& rng);
/// Pools from the config's dedicated pool seed.
Pools build_pools(const StreamConfig& cfg);

/// Labelled examples plus the hidden fields only the evaluator may read.
struct StepBatch {
  Batch batch;
  int context_id = -1;
  Family family = Family::pretrain;
  int t = 0;
};

/// Owns the contexts seen so far and the transition rule between them.
/// Identical (family, subset, labels) draws share one id.
class ContextSampler {
 public:
  ContextSampler(const StreamConfig& cfg, const Pools& pools);

  /// Family per the mixture, then a random subset and bijection within it.
  const ContextSpec& draw_fresh(Rng& rng);
  const ContextSpec& draw_fresh(Family family, Rng& rng);

  /// Stays on `prev` with probability alpha, otherwise moves to a fresh
  /// context (or, in fixed-list mode, to a uniformly chosen other entry).
  int next_context(std::optional<int> prev, Rng& rng);

  const ContextSpec& context(int id) const { return contexts_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return contexts_.size(); }

 private:
  const ContextSpec& intern(ContextSpec spec);
  Family draw_family(Rng& rng) const;

  StreamConfig cfg_;
  const Pools* pools_;
  std::vector<ContextSpec> contexts_;
  std::map<std::vector<double>, int> index_;
  std::vector<int> fixed_;
};

StepBatch sample_step(const ContextSpec& ctx, const Pools& pools, const StreamConfig& cfg, Rng& rng);

struct PretrainTask {
  ContextSpec context;
  Batch support;
  Batch query;
};

struct PretrainEpisode {
  std::vector<PretrainTask> tasks;
};

/// `batch_size` independent pretrain-family tasks with `shots` support and
/// samples_per_step - shots query examples, each set drawn as in sample_step.
PretrainEpisode pretrain_episode(ContextSampler& sampler, const Pools& pools, const StreamConfig& cfg,
                                 int batch_size, int shots, Rng& rng);

/// Episode of episode_length steps, reproducible from cfg.seed.
class Stream {
 public:
  Stream(const StreamConfig& cfg, const Pools& pools);

  bool done() const { return t_ >= cfg_.episode_length; }
  StepBatch next();

  /// true_boundaries()[t] is set when C_t differs from C_{t-1}.
  const std::vector<bool>& true_boundaries() const { return boundaries_; }
  const std::vector<int>& context_ids() const { return ids_; }
  const ContextSampler& sampler() const { return sampler_; }
  const StreamConfig& config() const { return cfg_; }

 private:
  StreamConfig cfg_;
  const Pools* pools_;
  ContextSampler sampler_;
  Rng context_rng_;
  Rng sample_rng_;
  int t_ = 0;
  std::optional<int> current_;
  std::vector<bool> boundaries_;
  std::vector<int> ids_;
};

/// `t,context_id,is_boundary` rows for a whole episode.
std::string ground_truth_csv(const StreamConfig& cfg, const Pools& pools);

}  // namespace osaka
