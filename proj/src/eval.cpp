#include "osaka/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "osaka/errors.hpp"

namespace osaka {

EpisodeTrace run_episode(Learner& learner, Stream& stream) {
  EpisodeTrace trace;
  const LossKind kind = stream.config().task == TaskKind::sinusoid ? LossKind::mse : LossKind::cross_entropy;
  trace.rows.reserve(static_cast<std::size_t>(stream.config().episode_length));
  while (!stream.done()) {
    const StepBatch step = stream.next();
    TraceRow row;
    row.t = step.t;
    row.context_id = step.context_id;
    row.family = step.family;
    row.true_boundary = stream.true_boundaries().back();
    try {
      const Matrix out = learner.predict(step.batch.x);
      row.loss = loss_value(out, step.batch, kind);
      row.acc = accuracy(out, step.batch, kind);
      const StepDiagnostics d = learner.update(step.batch);
      row.detected_boundary = d.detected_boundary;
      row.modulation = d.modulation;
    } catch (const Error& e) {
      trace.failed = true;
      trace.failure = "step " + std::to_string(step.t) + ": " + e.what();
      break;
    }
    trace.rows.push_back(row);
  }
  return trace;
}

double cumulative_accuracy(const EpisodeTrace& trace, std::optional<Family> family) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const TraceRow& r : trace.rows)
    if (!family || r.family == *family) {
      sum += r.acc;
      ++n;
    }
  if (n == 0) throw MetricError("cumulative accuracy over an empty selection");
  return sum / static_cast<double>(n);
}

BoundaryScore boundary_metrics(const EpisodeTrace& trace, int window) {
  std::vector<int> truth, found;
  for (const TraceRow& r : trace.rows) {
    if (r.true_boundary) truth.push_back(r.t);
    if (r.detected_boundary) found.push_back(r.t);
  }
  auto near = [window](const std::vector<int>& pool, int t) {
    const auto it = std::lower_bound(pool.begin(), pool.end(), t - window);
    return it != pool.end() && *it <= t + window;
  };
  BoundaryScore s;
  if (!found.empty()) {
    int hits = 0;
    for (int t : found) hits += near(truth, t) ? 1 : 0;
    s.precision = static_cast<double>(hits) / static_cast<double>(found.size());
  }
  if (!truth.empty()) {
    int hits = 0;
    for (int t : truth) hits += near(found, t) ? 1 : 0;
    s.recall = static_cast<double>(hits) / static_cast<double>(truth.size());
  }
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

RunSummary summarize(const EpisodeTrace& trace, std::uint64_t seed, const std::string& hash, int window) {
  RunSummary s;
  s.seed = seed;
  s.config_hash = hash;
  s.steps = static_cast<int>(trace.rows.size());
  s.failed = trace.failed;
  if (trace.rows.empty()) return s;
  s.total = cumulative_accuracy(trace);
  for (Family f : kFamilies) {
    int n = 0;
    for (const TraceRow& r : trace.rows) n += r.family == f ? 1 : 0;
    if (n == 0) continue;
    s.family_steps[f] = n;
    s.family_acc[f] = cumulative_accuracy(trace, f);
  }
  s.boundaries = boundary_metrics(trace, window);
  return s;
}

Stat aggregate(const std::vector<double>& values) {
  if (values.size() < 2) throw AggregationError("aggregation needs at least two runs");
  Stat s;
  s.n = static_cast<int>(values.size());
  for (double v : values) s.mean += v;
  s.mean /= s.n;
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / (s.n - 1));
  s.ci95 = 1.96 * s.std / std::sqrt(static_cast<double>(s.n));
  return s;
}

std::map<std::string, Stat> aggregate(const std::vector<RunSummary>& runs) {
  std::map<std::string, std::vector<double>> cols;
  for (const RunSummary& r : runs) {
    cols["total"].push_back(r.total);
    for (const auto& [f, acc] : r.family_acc) cols[to_string(f)].push_back(acc);
    cols["precision"].push_back(r.boundaries.precision);
    cols["recall"].push_back(r.boundaries.recall);
    cols["f1"].push_back(r.boundaries.f1);
  }
  if (runs.size() < 2) throw AggregationError("aggregation needs at least two runs");
  std::map<std::string, Stat> out;
  for (const auto& [name, values] : cols)
    if (values.size() >= 2) out[name] = aggregate(values);
  return out;
}

nlohmann::json to_json(const std::map<std::string, Stat>& stats) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, s] : stats) j[name] = {{"mean", s.mean}, {"std", s.std}, {"ci95", s.ci95}, {"n", s.n}};
  return j;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

constexpr const char* kHeader = "t,loss,acc,context_id,family,true_boundary,detected_boundary,modulation";

}  // namespace

std::string trace_csv(const EpisodeTrace& trace) {
  std::string out = kHeader;
  out += '\n';
  for (const TraceRow& r : trace.rows) {
    out += std::to_string(r.t) + ',' + fmt(r.loss) + ',' + fmt(r.acc) + ',' + std::to_string(r.context_id) + ',' +
           to_string(r.family) + ',' + (r.true_boundary ? '1' : '0') + ',' + (r.detected_boundary ? '1' : '0') + ',';
    if (r.modulation) out += fmt(*r.modulation);
    out += '\n';
  }
  return out;
}

EpisodeTrace parse_trace_csv(const std::string& text, const std::string& source) {
  std::istringstream in(text);
  std::string line;
  int lineno = 1;
  auto fail = [&](const std::string& why) {
    throw ReportError(source + ":" + std::to_string(lineno) + ": " + why);
  };
  if (!std::getline(in, line) || line != kHeader) fail("missing or unexpected header");
  EpisodeTrace trace;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 8) fail("expected 8 fields, found " + std::to_string(f.size()));
    TraceRow r;
    try {
      std::size_t used = 0;
      auto whole = [&](const std::string& s) {
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
      };
      r.t = static_cast<int>(whole(f[0]));
      r.loss = whole(f[1]);
      r.acc = whole(f[2]);
      r.context_id = static_cast<int>(whole(f[3]));
      r.family = family_from_string(f[4]);
      if ((f[5] != "0" && f[5] != "1") || (f[6] != "0" && f[6] != "1")) fail("boundary flags must be 0 or 1");
      r.true_boundary = f[5] == "1";
      r.detected_boundary = f[6] == "1";
      if (!f[7].empty()) r.modulation = whole(f[7]);
    } catch (const ReportError&) {
      throw;
    } catch (const std::exception&) {
      fail("malformed field");
    }
    if (!(r.loss >= 0.0) || r.acc < 0.0 || r.acc > 1.0) fail("loss or accuracy out of range");
    trace.rows.push_back(r);
  }
  return trace;
}

std::string config_hash(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace osaka
