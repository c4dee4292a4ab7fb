#include "experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <thread>

#include "io.hpp"
#include "osaka/checkpoint.hpp"
#include "osaka/errors.hpp"
#include "osaka/json_util.hpp"

namespace osaka::cli {

namespace fs = std::filesystem;

namespace {

NetConfig net_from_json(const nlohmann::json& j) {
  const std::string where = "net";
  jsonu::check_keys(j, {"hidden_dims", "activation", "inner_lr_init", "shared_inner_lr"}, where);
  NetConfig n;
  n.hidden_dims = jsonu::get_or(j, "hidden_dims", n.hidden_dims, where);
  n.activation = activation_from_string(jsonu::get_or(j, "activation", to_string(n.activation), where));
  n.inner_lr_init = jsonu::get_or(j, "inner_lr_init", n.inner_lr_init, where);
  n.shared_inner_lr = jsonu::get_or(j, "shared_inner_lr", n.shared_inner_lr, where);
  for (int h : n.hidden_dims)
    if (h < 1) throw ConfigError("net: hidden widths must be >= 1");
  if (!(n.inner_lr_init >= 0.0)) throw ConfigError("net: inner_lr_init must be >= 0");
  return n;
}

nlohmann::json to_json(const NetConfig& n) {
  return {{"hidden_dims", n.hidden_dims},
          {"activation", to_string(n.activation)},
          {"inner_lr_init", n.inner_lr_init},
          {"shared_inner_lr", n.shared_inner_lr}};
}

SearchConfig search_from_json(const nlohmann::json& j) {
  const std::string where = "search";
  jsonu::check_keys(j, {"budget", "kinds", "space", "pretrain_checkpoint"}, where);
  SearchConfig s;
  s.budget = jsonu::get_or(j, "budget", s.budget, where);
  s.kinds = jsonu::get_or(j, "kinds", s.kinds, where);
  s.pretrain_checkpoint = jsonu::get_or(j, "pretrain_checkpoint", s.pretrain_checkpoint, where);
  if (j.contains("space")) {
    const SearchSpace defaults = default_search_space();
    const auto& sp = j.at("space");
    if (!sp.is_object()) throw ConfigError("search.space: expected an object");
    for (const auto& [key, values] : sp.items()) {
      if (!defaults.count(key)) throw ConfigError("search.space: unknown hyperparameter '" + key + "'");
      std::vector<double> grid;
      if (!values.is_array()) throw ConfigError("search.space." + key + ": expected a list");
      for (const auto& v : values) {
        if (v.is_boolean())
          grid.push_back(v.get<bool>() ? 1.0 : 0.0);
        else if (v.is_number())
          grid.push_back(v.get<double>());
        else
          throw ConfigError("search.space." + key + ": values must be numbers or booleans");
      }
      s.space[key] = grid;
    }
  }
  if (s.budget < 1) throw ConfigError("search: budget must be >= 1");
  if (s.kinds.empty()) throw ConfigError("search: no learner kinds to sample");
  return s;
}

nlohmann::json to_json(const SearchConfig& s) {
  nlohmann::json space = nlohmann::json::object();
  for (const auto& [k, v] : s.space) space[k] = v;
  nlohmann::json j{{"budget", s.budget}, {"kinds", s.kinds}, {"space", space}};
  if (!s.pretrain_checkpoint.empty()) j["pretrain_checkpoint"] = s.pretrain_checkpoint;
  return j;
}

bool valid_name(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) {
    return std::isalnum(c) || c == '_' || c == '-' || c == '.' || c == '+';
  }) && s != "." && s != "..";
}

}  // namespace

LossKind loss_kind(const StreamConfig& s) {
  return s.task == TaskKind::sinusoid ? LossKind::mse : LossKind::cross_entropy;
}

NetSpec net_spec(const ExperimentConfig& cfg) {
  NetSpec n;
  const bool sine = cfg.stream.task == TaskKind::sinusoid;
  n.input_dim = sine ? 1 : cfg.stream.dim;
  n.output_dim = sine ? 1 : cfg.stream.ways;
  n.hidden_dims = cfg.net.hidden_dims;
  n.activation = cfg.net.activation;
  n.inner_lr_init = cfg.net.inner_lr_init;
  n.shared_inner_lr = cfg.net.shared_inner_lr;
  n.seed = cfg.pretrain.seed;
  return n;
}

std::optional<std::uint64_t> seed_from_env() {
  const char* raw = std::getenv("OSAKA_SEED");
  if (!raw || !*raw) return std::nullopt;
  const std::string s(raw);
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size())
    throw ConfigError("OSAKA_SEED must be an unsigned integer, got '" + s + "'");
  return v;
}

ExperimentConfig experiment_from_json(const nlohmann::json& j, std::optional<std::uint64_t> seed_override) {
  const std::string where = "config";
  jsonu::check_keys(j, {"version", "seed", "seeds", "n_seeds", "output_dir", "stream", "net", "pretrain",
                        "checkpoint", "learners", "search", "boundary_window"},
                    where);
  const int version = jsonu::get_or(j, "version", kSchemaVersion, where);
  if (version != kSchemaVersion)
    throw ConfigError("config: schema version " + std::to_string(version) + " is not supported");
  ExperimentConfig c;
  c.seed = jsonu::get_or(j, "seed", c.seed, where);
  c.output_dir = jsonu::get_or(j, "output_dir", c.output_dir, where);
  c.checkpoint = jsonu::get_or(j, "checkpoint", c.checkpoint, where);
  c.boundary_window = jsonu::get_or(j, "boundary_window", c.boundary_window, where);
  if (c.boundary_window < 0) throw ConfigError("config: boundary_window must be >= 0");
  if (j.contains("stream")) c.stream = stream_config_from_json(j.at("stream"));
  validate(c.stream);
  if (j.contains("net")) c.net = net_from_json(j.at("net"));
  const bool pretrain_seed = j.contains("pretrain") && j.at("pretrain").contains("seed");
  if (j.contains("pretrain")) c.pretrain = pretrain_config_from_json(j.at("pretrain"));
  if (j.contains("search")) c.search = search_from_json(j.at("search"));
  if (j.contains("learners")) {
    if (!j.at("learners").is_array()) throw ConfigError("config: learners must be a list");
    std::set<std::string> names;
    for (const auto& l : j.at("learners")) {
      c.learners.push_back(learner_config_from_json(l));
      const std::string name = c.learners.back().display_name();
      if (!valid_name(name)) throw ConfigError("config: learner name '" + name + "' is not a valid directory name");
      if (!names.insert(name).second) throw ConfigError("config: duplicate learner name '" + name + "'");
    }
  }

  if (j.contains("seeds")) {
    c.seeds = jsonu::get_or(j, "seeds", c.seeds, where);
    if (j.contains("n_seeds")) throw ConfigError("config: give either seeds or n_seeds");
  } else {
    const int n = jsonu::get_or(j, "n_seeds", 20, where);
    if (n < 1) throw ConfigError("config: n_seeds must be >= 1");
    for (int i = 0; i < n; ++i) c.seeds.push_back(c.seed + static_cast<std::uint64_t>(i));
  }
  if (c.seeds.empty()) throw ConfigError("config: the seed list is empty");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size())
    throw ConfigError("config: seeds must be distinct");

  if (seed_override) {
    c.seed = *seed_override;
    const std::size_t n = c.seeds.size();
    c.seeds.clear();
    for (std::size_t i = 0; i < n; ++i) c.seeds.push_back(c.seed + i);
  }
  if (!pretrain_seed || seed_override) c.pretrain.seed = c.seed;
  return c;
}

ExperimentConfig load_experiment(const std::string& path, std::optional<std::uint64_t> seed_override) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return experiment_from_json(j, seed_override);
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json learners = nlohmann::json::array();
  for (const auto& l : c.learners) learners.push_back(osaka::to_json(l));
  return {{"version", kSchemaVersion},
          {"seed", c.seed},
          {"seeds", c.seeds},
          {"output_dir", c.output_dir},
          {"stream", osaka::to_json(c.stream)},
          {"net", to_json(c.net)},
          {"pretrain", osaka::to_json(c.pretrain)},
          {"checkpoint", c.checkpoint},
          {"learners", learners},
          {"search", to_json(c.search)},
          {"boundary_window", c.boundary_window}};
}

// -- pretrain ------------------------------------------------------------------

PretrainOutput cmd_pretrain(const ExperimentConfig& cfg) {
  const NetSpec spec = net_spec(cfg);
  const Pools pools = build_pools(cfg.stream);
  PretrainOutput out;
  out.result = pretrain_maml(spec, cfg.stream, pools, cfg.pretrain);
  out.checkpoint_path = cfg.checkpoint;
  out.manifest_path = cfg.checkpoint + ".json";

  const AdaptOptions opts{cfg.pretrain.inner_steps, cfg.pretrain.head_only,
                          cfg.pretrain.first_order ? nd::GradMode::first_order : nd::GradMode::exact,
                          loss_kind(cfg.stream)};
  const double acc = post_adaptation_accuracy(out.result.params, cfg.stream, pools, 200, cfg.pretrain.shots, opts,
                                              Rng::derive(cfg.pretrain.seed, 0x686f6c64).engine()());
  nlohmann::json manifest{
      {"spec",
       {{"input_dim", spec.input_dim},
        {"hidden_dims", spec.hidden_dims},
        {"output_dim", spec.output_dim},
        {"activation", to_string(spec.activation)},
        {"seed", spec.seed},
        {"inner_lr_init", spec.inner_lr_init},
        {"shared_inner_lr", spec.shared_inner_lr}}},
      {"pretrain", osaka::to_json(cfg.pretrain)},
      {"stream", osaka::to_json(cfg.stream)},
      {"epochs", cfg.pretrain.epochs},
      {"epoch_losses", out.result.epoch_losses},
      {"final_meta_loss", out.result.epoch_losses.empty() ? nlohmann::json(nullptr)
                                                          : nlohmann::json(out.result.epoch_losses.back())},
      {"heldout_post_adaptation_accuracy", acc}};
  if (const fs::path parent = fs::path(out.checkpoint_path).parent_path(); !parent.empty())
    fs::create_directories(parent);
  save_checkpoint(out.checkpoint_path, out.result.params);
  write_file(out.manifest_path, manifest.dump(2) + "\n");
  return out;
}

// -- run -----------------------------------------------------------------------

namespace {

std::string checkpoint_for(const ExperimentConfig& cfg, const LearnerConfig& l) {
  if (!l.pretrain_checkpoint.empty()) return l.pretrain_checkpoint;
  if (requires_checkpoint(l.kind)) return cfg.checkpoint;
  return {};
}

}  // namespace

std::map<std::string, ModelParams> load_checkpoints(const ExperimentConfig& cfg,
                                                    const std::vector<LearnerConfig>& learners) {
  std::map<std::string, ModelParams> out;
  for (const LearnerConfig& l : learners) {
    const std::string path = checkpoint_for(cfg, l);
    if (path.empty() || out.count(path)) continue;
    if (!fs::exists(path))
      throw ConfigError("learner '" + l.display_name() + "' needs checkpoint '" + path +
                        "', which does not exist (run `osaka pretrain` first)");
    try {
      out.emplace(path, load_checkpoint(path));
    } catch (const FormatError& e) {
      throw ConfigError("checkpoint '" + path + "' is unreadable: " + e.what());
    }
  }
  return out;
}

std::vector<EpisodeResult> run_grid(const ExperimentConfig& cfg, const std::vector<LearnerConfig>& learners,
                                    const std::vector<std::uint64_t>& seeds, int jobs) {
  const auto checkpoints = load_checkpoints(cfg, learners);
  const NetSpec spec = net_spec(cfg);
  const LossKind loss = loss_kind(cfg.stream);
  auto checkpoint_of = [&](const LearnerConfig& l) -> std::optional<ModelParams> {
    const std::string path = checkpoint_for(cfg, l);
    if (path.empty()) return std::nullopt;
    return checkpoints.at(path);
  };
  // surface configuration errors before any episode starts
  for (const LearnerConfig& l : learners) make_learner(l, checkpoint_of(l), spec, loss, 0);

  const Pools pools = build_pools(cfg.stream);
  std::vector<EpisodeResult> results(learners.size() * seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < results.size(); k = next++) {
      const LearnerConfig& l = learners[k / seeds.size()];
      const std::uint64_t seed = seeds[k % seeds.size()];
      StreamConfig sc = cfg.stream;
      sc.seed = seed;
      EpisodeResult& r = results[k];
      r.learner = l.display_name();
      r.seed = seed;
      Stream stream(sc, pools);
      auto learner = make_learner(l, checkpoint_of(l), spec, loss, seed);
      r.trace = run_episode(*learner, stream);
      const std::string hash = config_hash(osaka::to_json(l).dump() + osaka::to_json(cfg.stream).dump());
      r.summary = summarize(r.trace, seed, hash, cfg.boundary_window);
    }
  };
  const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(results.size())));
  std::vector<std::thread> pool;
  for (int i = 1; i < n_threads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return results;
}

namespace {

nlohmann::json summary_row(const RunSummary& s) {
  nlohmann::json families = nlohmann::json::object();
  for (const auto& [f, acc] : s.family_acc) families[to_string(f)] = acc;
  return {{"seed", s.seed},         {"total", s.total},
          {"families", families},   {"precision", s.boundaries.precision},
          {"recall", s.boundaries.recall}, {"f1", s.boundaries.f1},
          {"steps", s.steps},       {"failed", s.failed},
          {"config_hash", s.config_hash}};
}

}  // namespace

RunOutput cmd_run(const ExperimentConfig& cfg, int jobs) {
  if (cfg.learners.empty()) throw ConfigError("config: no learners to run");
  if (jobs < 1) throw ConfigError("--jobs must be >= 1");
  RunOutput out;
  out.episodes = run_grid(cfg, cfg.learners, cfg.seeds, jobs);

  const fs::path root(cfg.output_dir);
  fs::create_directories(root);
  write_file(root / "config.json", to_json(cfg).dump(2) + "\n");
  for (std::size_t li = 0; li < cfg.learners.size(); ++li) {
    const LearnerConfig& l = cfg.learners[li];
    const fs::path dir = root / l.display_name();
    fs::create_directories(dir);
    std::vector<RunSummary> runs;
    nlohmann::json rows = nlohmann::json::array();
    nlohmann::json failures = nlohmann::json::array();
    for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
      const EpisodeResult& r = out.episodes[li * cfg.seeds.size() + si];
      write_file(dir / ("seed_" + std::to_string(r.seed) + ".csv"), trace_csv(r.trace));
      rows.push_back(summary_row(r.summary));
      if (r.trace.failed) {
        out.all_completed = false;
        failures.push_back({{"seed", r.seed}, {"error", r.trace.failure}});
      }
      if (!r.trace.rows.empty()) runs.push_back(r.summary);
    }
    nlohmann::json summary{{"learner", osaka::to_json(l)}, {"runs", rows}, {"failures", failures}};
    summary["stats"] = runs.size() >= 2 ? osaka::to_json(aggregate(runs)) : nlohmann::json::object();
    write_file(dir / "summary.json", summary.dump(2) + "\n");
  }
  return out;
}

}  // namespace osaka::cli
