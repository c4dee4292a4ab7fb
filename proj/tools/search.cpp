#include <algorithm>
#include <filesystem>
#include <sstream>

#include "experiment.hpp"
#include "io.hpp"
#include "osaka/errors.hpp"

namespace osaka::cli {

namespace {

const std::vector<std::string> kParamOrder{"eta",   "batch_size", "inner_lr_init", "inner_steps", "first_order",
                                           "mc_samples", "beta", "sigma0",        "gamma",       "lambda"};

void set_param(LearnerConfig& l, const std::string& key, double v) {
  if (key == "eta") l.eta = v;
  else if (key == "batch_size") l.batch_size = static_cast<int>(v);
  else if (key == "inner_lr_init") l.inner_lr_init = v;
  else if (key == "inner_steps") l.inner_steps = static_cast<int>(v);
  else if (key == "first_order") l.first_order = v != 0.0;
  else if (key == "mc_samples") l.mc_samples = static_cast<int>(v);
  else if (key == "beta") l.beta = v;
  else if (key == "sigma0") l.sigma0 = v;
  else if (key == "gamma") l.gamma = v;
  else if (key == "lambda") l.lambda = v;
  else throw ConfigError("search: unknown hyperparameter '" + key + "'");
}

std::string get_param(const LearnerConfig& l, const std::string& key) {
  std::ostringstream s;
  if (key == "eta") s << l.eta;
  else if (key == "batch_size") s << l.batch_size;
  else if (key == "inner_lr_init") s << l.inner_lr_init;
  else if (key == "inner_steps") s << l.inner_steps;
  else if (key == "first_order") s << (l.first_order ? "true" : "false");
  else if (key == "mc_samples") s << l.mc_samples;
  else if (key == "beta") s << l.beta;
  else if (key == "sigma0") s << l.sigma0;
  else if (key == "gamma") s << l.gamma;
  else if (key == "lambda") s << l.lambda;
  return s.str();
}

bool is_cmaml(const std::string& kind) { return kind == "cmaml" || kind == "cmaml_no_pap"; }

void check_space(const SearchConfig& s) {
  for (const std::string& kind : s.kinds) {
    LearnerConfig probe;
    probe.kind = kind;
    validate(probe);
    for (const std::string& key : searched_parameters(kind, !s.pretrain_checkpoint.empty())) {
      const auto it = s.space.find(key);
      if (it == s.space.end() || it->second.empty())
        throw ConfigError("search: empty grid for '" + key + "' (used by " + kind + ")");
      for (double v : it->second) {
        LearnerConfig l = probe;
        set_param(l, key, v);
        try {
          validate(l);
        } catch (const ConfigError& e) {
          throw ConfigError("search: grid value " + std::to_string(v) + " for '" + key + "': " + e.what());
        }
      }
    }
  }
}

}  // namespace

SearchSpace default_search_space() {
  return {{"eta", {1e-4, 5e-4, 1e-3, 5e-3, 1e-2}},
          {"batch_size", {1, 2, 4, 8, 16}},
          {"inner_lr_init", {5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 0.1, 0.5}},
          {"inner_steps", {1, 2, 4, 8, 16}},
          {"first_order", {1, 0}},
          {"mc_samples", {5}},
          {"beta", {0.5, 1, 10}},
          {"sigma0", {1e-3, 1e-2, 0.1}},
          {"gamma", {0.25, 0.5, 1, 2, 3, 5}},
          {"lambda", {0.25, 0.5, 0.75, 1, 1.25, 1.5, 2, 2.5, 3}}};
}

std::vector<std::string> searched_parameters(const std::string& kind, bool pretrained) {
  if (kind == "online_adam" || kind == "fine_tuning") return {"eta", "batch_size"};
  if (kind == "maml" || kind == "anil") return {"inner_steps", "batch_size"};
  if (kind == "bgd") return {"beta", "sigma0", "mc_samples", "batch_size"};
  if (kind == "meta_bgd") return {"beta", "sigma0", "mc_samples", "inner_steps", "batch_size"};
  if (is_cmaml(kind)) {
    std::vector<std::string> keys{"eta", "inner_steps", "first_order", "gamma", "lambda", "batch_size"};
    if (!pretrained) keys.insert(keys.begin() + 1, "inner_lr_init");
    return keys;
  }
  throw ConfigError("search: unknown learner kind '" + kind + "'");
}

LearnerConfig sample_trial(const SearchConfig& search, Rng& rng) {
  if (search.kinds.empty()) throw ConfigError("search: no learner kinds to sample");
  LearnerConfig l;
  l.kind = search.kinds[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(search.kinds.size())))];
  const bool pretrained = !search.pretrain_checkpoint.empty();
  if (pretrained && (is_cmaml(l.kind) || requires_checkpoint(l.kind))) l.pretrain_checkpoint = search.pretrain_checkpoint;
  for (const std::string& key : searched_parameters(l.kind, pretrained)) {
    const auto it = search.space.find(key);
    if (it == search.space.end() || it->second.empty()) throw ConfigError("search: empty grid for '" + key + "'");
    set_param(l, key, it->second[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(it->second.size())))]);
  }
  return l;
}

double Trial::mean() const {
  if (accuracies.empty()) return 0.0;
  double s = 0.0;
  for (double a : accuracies) s += a;
  return s / static_cast<double>(accuracies.size());
}

std::vector<Trial> run_search(const ExperimentConfig& cfg, int budget, int jobs) {
  if (budget < 1) throw ConfigError("search: budget must be >= 1");
  check_space(cfg.search);
  Rng rng = Rng::derive(cfg.seed, 0x73726368);
  std::vector<Trial> trials(static_cast<std::size_t>(budget));
  std::vector<LearnerConfig> learners;
  for (int i = 0; i < budget; ++i) {
    Trial& t = trials[static_cast<std::size_t>(i)];
    t.id = i;
    t.learner = sample_trial(cfg.search, rng);
    t.learner.name = "trial_" + std::to_string(i);
    learners.push_back(t.learner);
  }
  const std::uint64_t first = cfg.seeds[0];
  const std::uint64_t second = cfg.seeds.size() > 1 ? cfg.seeds[1] : cfg.seeds[0] + 1;
  const bool gate = cfg.stream.task == TaskKind::classification;
  const double chance = 1.0 / cfg.stream.ways;

  const auto round1 = run_grid(cfg, learners, {first}, jobs);
  std::vector<LearnerConfig> survivors;
  std::vector<std::size_t> survivor_ids;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    Trial& t = trials[i];
    if (round1[i].trace.failed) {
      t.failed = true;
      continue;
    }
    t.accuracies.push_back(round1[i].summary.total);
    if (gate && round1[i].summary.total <= chance) {
      t.gated = true;
      continue;
    }
    survivors.push_back(t.learner);
    survivor_ids.push_back(i);
  }
  if (!survivors.empty()) {
    const auto round2 = run_grid(cfg, survivors, {second}, jobs);
    for (std::size_t k = 0; k < survivors.size(); ++k) {
      Trial& t = trials[survivor_ids[k]];
      if (round2[k].trace.failed)
        t.failed = true;
      else
        t.accuracies.push_back(round2[k].summary.total);
    }
  }
  std::stable_sort(trials.begin(), trials.end(), [](const Trial& a, const Trial& b) {
    const bool a_out = a.gated || a.failed, b_out = b.gated || b.failed;
    if (a_out != b_out) return !a_out;
    return a.mean() > b.mean();
  });
  return trials;
}

std::vector<Trial> cmd_search(const ExperimentConfig& cfg, int budget, int jobs) {
  if (jobs < 1) throw ConfigError("--jobs must be >= 1");
  const std::vector<Trial> trials = run_search(cfg, budget, jobs);
  const std::filesystem::path root(cfg.output_dir);
  std::filesystem::create_directories(root);

  std::ostringstream csv;
  csv << "rank,trial,kind";
  for (const auto& k : kParamOrder) csv << ',' << k;
  csv << ",acc_seed1,acc_seed2,mean,gated,failed\n";
  for (std::size_t r = 0; r < trials.size(); ++r) {
    const Trial& t = trials[r];
    const auto used = searched_parameters(t.learner.kind, !t.learner.pretrain_checkpoint.empty() ||
                                                              requires_checkpoint(t.learner.kind));
    csv << r + 1 << ',' << t.id << ',' << t.learner.kind;
    for (const auto& k : kParamOrder)
      csv << ',' << (std::find(used.begin(), used.end(), k) != used.end() ? get_param(t.learner, k) : "");
    csv.precision(17);
    csv << ',' << (t.accuracies.size() > 0 ? std::to_string(t.accuracies[0]) : "") << ','
        << (t.accuracies.size() > 1 ? std::to_string(t.accuracies[1]) : "") << ','
        << (t.accuracies.empty() ? "" : std::to_string(t.mean())) << ',' << (t.gated ? 1 : 0) << ','
        << (t.failed ? 1 : 0) << '\n';
  }
  write_file(root / "trials.csv", csv.str());

  ExperimentConfig best = cfg;
  LearnerConfig winner = trials.front().learner;
  winner.name = "best_" + winner.kind;
  best.learners = {winner};
  best.output_dir = (root / "best").string();
  write_file(root / "best_config.json", to_json(best).dump(2) + "\n");
  return trials;
}

}  // namespace osaka::cli
