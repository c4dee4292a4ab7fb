#pragma once

// Experiment driver behind the osaka command line: config loading,
// pre-training, multi-seed episodes, random search and reports.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "osaka/algorithms.hpp"
#include "osaka/eval.hpp"
#include "osaka/stream.hpp"

namespace osaka::cli {

inline constexpr int kSchemaVersion = 1;

struct NetConfig {
  std::vector<int> hidden_dims{64, 64};
  Activation activation = Activation::relu;
  double inner_lr_init = 0.1;
  bool shared_inner_lr = false;
};

/// Grid values per hyperparameter. Keys: eta, batch_size, inner_lr_init,
/// inner_steps, first_order, mc_samples, beta, sigma0, gamma, lambda.
using SearchSpace = std::map<std::string, std::vector<double>>;

SearchSpace default_search_space();

struct SearchConfig {
  int budget = 20;
  std::vector<std::string> kinds{"online_adam", "fine_tuning", "maml", "anil", "bgd", "meta_bgd", "cmaml"};
  SearchSpace space = default_search_space();
  /// Shared by every trial of a kind that needs it.
  std::string pretrain_checkpoint;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  /// Episode seeds; when absent, n_seeds consecutive values from `seed`.
  std::vector<std::uint64_t> seeds;
  std::string output_dir = "osaka_out";
  StreamConfig stream;
  NetConfig net;
  PretrainConfig pretrain;
  /// Where pretrain writes and where checkpoint-bound learners read by default.
  std::string checkpoint = "pretrain.bin";
  std::vector<LearnerConfig> learners;
  SearchConfig search;
  /// Tolerance window for boundary matching.
  int boundary_window = 0;
};

/// Parses and validates. `seed_override` (from OSAKA_SEED) replaces `seed`
/// and regenerates a seed list of the same length from it.
ExperimentConfig experiment_from_json(const nlohmann::json& j, std::optional<std::uint64_t> seed_override = {});
ExperimentConfig load_experiment(const std::string& path, std::optional<std::uint64_t> seed_override = {});
nlohmann::json to_json(const ExperimentConfig& cfg);

/// Reads OSAKA_SEED; throws ConfigError when it is not an unsigned integer.
std::optional<std::uint64_t> seed_from_env();

NetSpec net_spec(const ExperimentConfig& cfg);
LossKind loss_kind(const StreamConfig& s);

// -- pretrain ------------------------------------------------------------------

struct PretrainOutput {
  std::string checkpoint_path;
  std::string manifest_path;
  PretrainResult result;
};

/// Writes the checkpoint and `<checkpoint>.json` (spec, epochs, losses).
PretrainOutput cmd_pretrain(const ExperimentConfig& cfg);

// -- run -----------------------------------------------------------------------

struct EpisodeResult {
  std::string learner;
  std::uint64_t seed = 0;
  EpisodeTrace trace;
  RunSummary summary;
};

/// Loads every checkpoint a learner needs; throws ConfigError when one is
/// missing or unreadable.
std::map<std::string, ModelParams> load_checkpoints(const ExperimentConfig& cfg,
                                                    const std::vector<LearnerConfig>& learners);

/// One episode per (learner, seed) over `jobs` workers. Results come back in
/// (learner, seed) order whatever the scheduling.
std::vector<EpisodeResult> run_grid(const ExperimentConfig& cfg, const std::vector<LearnerConfig>& learners,
                                    const std::vector<std::uint64_t>& seeds, int jobs);

struct RunOutput {
  std::vector<EpisodeResult> episodes;
  bool all_completed = true;
};

/// Writes `<out>/<learner>/seed_<s>.csv`, `<out>/<learner>/summary.json` and
/// `<out>/config.json`.
RunOutput cmd_run(const ExperimentConfig& cfg, int jobs);

// -- search --------------------------------------------------------------------

struct Trial {
  int id = 0;
  LearnerConfig learner;
  std::vector<double> accuracies;
  bool gated = false;
  bool failed = false;
  double mean() const;
};

/// Names of the grid entries a kind actually uses.
std::vector<std::string> searched_parameters(const std::string& kind, bool pretrained);

/// Uniform kind, then each used hyperparameter uniform over its grid.
LearnerConfig sample_trial(const SearchConfig& search, Rng& rng);

/// Runs `budget` trials on two seeds each; the second seed is skipped when
/// the first scores at or below chance. Sorted best first; gated and failed
/// trials rank last.
std::vector<Trial> run_search(const ExperimentConfig& cfg, int budget, int jobs);

/// Writes `<out>/trials.csv` and `<out>/best_config.json`.
std::vector<Trial> cmd_search(const ExperimentConfig& cfg, int budget, int jobs);

// -- report --------------------------------------------------------------------

/// Trailing moving average; entry t averages the last min(t+1, window) values.
std::vector<double> smooth(const std::vector<double>& values, int window);

struct MethodStats {
  std::string name;
  std::map<std::string, Stat> stats;
  std::optional<double> gamma;
  std::vector<RunSummary> runs;
  /// Per-step accuracy averaged over seeds.
  std::vector<double> curve;
};

/// Column keys of the summary table, in display order.
const std::vector<std::string>& table_columns();

/// True when the method's interval excludes every other method's mean for `column`.
bool is_bold(const std::vector<MethodStats>& methods, std::size_t index, const std::string& column);

std::vector<MethodStats> collect(const std::string& dir);
std::string format_table(const std::vector<MethodStats>& methods);
std::string curves_svg(const std::vector<MethodStats>& methods, int window);
std::string pr_scatter_svg(const std::vector<MethodStats>& methods);

/// Prints the table and writes `table.md`, `curves.svg`, `pr.svg` into `dir`.
std::string cmd_report(const std::string& dir, int window);

}  // namespace osaka::cli
