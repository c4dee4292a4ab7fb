#pragma once

// Episode execution and the online metrics computed from its trace.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "osaka/algorithms.hpp"
#include "osaka/stream.hpp"

namespace osaka {

struct TraceRow {
  int t = 0;
  double loss = 0.0;
  /// Fraction of the step's batch predicted correctly.
  double acc = 0.0;
  int context_id = -1;
  Family family = Family::pretrain;
  bool true_boundary = false;
  bool detected_boundary = false;
  std::optional<double> modulation;
};

struct EpisodeTrace {
  std::vector<TraceRow> rows;
  /// Set when the learner raised an error; rows stop at the failing step.
  bool failed = false;
  std::string failure;
};

/// Scores learner.predict on each batch before calling learner.update on it.
EpisodeTrace run_episode(Learner& learner, Stream& stream);

/// Mean per-step accuracy, optionally restricted to one family. Throws
/// MetricError when the selection is empty.
double cumulative_accuracy(const EpisodeTrace& trace, std::optional<Family> family = std::nullopt);

struct BoundaryScore {
  double precision = 1.0;
  double recall = 1.0;
  double f1 = 1.0;
};

/// A detection counts when a true boundary lies within `window` steps of it;
/// a true boundary is found when a detection lies within `window` of it.
/// No detections gives precision 1, no true boundaries gives recall 1.
BoundaryScore boundary_metrics(const EpisodeTrace& trace, int window = 0);

struct RunSummary {
  double total = 0.0;
  std::map<Family, double> family_acc;
  std::map<Family, int> family_steps;
  BoundaryScore boundaries;
  std::uint64_t seed = 0;
  std::string config_hash;
  int steps = 0;
  bool failed = false;
};

RunSummary summarize(const EpisodeTrace& trace, std::uint64_t seed, const std::string& config_hash, int window = 0);

struct Stat {
  double mean = 0.0;
  double std = 0.0;
  /// Half-width of the normal-approximation 95% interval.
  double ci95 = 0.0;
  int n = 0;
};

/// Sample mean, n-1 standard deviation and 1.96 std / sqrt(n). Throws
/// AggregationError for fewer than two values.
Stat aggregate(const std::vector<double>& values);

/// Per-metric statistics over runs: total, each family, precision, recall,
/// f1. Family metrics only cover runs that visited the family and are left
/// out when fewer than two did.
std::map<std::string, Stat> aggregate(const std::vector<RunSummary>& runs);

nlohmann::json to_json(const std::map<std::string, Stat>& stats);

/// `t,loss,acc,context_id,family,true_boundary,detected_boundary,modulation`.
std::string trace_csv(const EpisodeTrace& trace);
/// Inverse of trace_csv. Throws ReportError naming `source` and the line.
EpisodeTrace parse_trace_csv(const std::string& text, const std::string& source);

/// Hex FNV-1a digest used to tag summaries with the config that made them.
std::string config_hash(const std::string& text);

}  // namespace osaka
