#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include <gtest/gtest.h>

#include "experiment.hpp"
#include "io.hpp"
#include "osaka/checkpoint.hpp"
#include "osaka/errors.hpp"

using namespace osaka;
using namespace osaka::cli;
namespace fs = std::filesystem;

namespace {

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("osaka_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

nlohmann::json small_config(const TempDir& dir) {
  return {{"version", 1},
          {"seed", 11},
          {"n_seeds", 3},
          {"output_dir", dir / "out"},
          {"checkpoint", dir / "pre.bin"},
          {"stream", {{"episode_length", 120}, {"dim", 8}, {"pools", {{"n_pre", 20}, {"n_ood", 20}}}}},
          {"net", {{"hidden_dims", {16}}}},
          {"pretrain", {{"epochs", 3}, {"iterations_per_epoch", 15}, {"batch_size", 4}, {"outer_lr", 0.005}}},
          {"learners", {{{"kind", "online_adam"}}, {{"kind", "cmaml"}, {"gamma", 2.0}}}}};
}

std::map<std::string, std::string> files_under(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
  return out;
}

double chi_square(const std::vector<int>& counts) {
  double total = 0.0;
  for (int c : counts) total += c;
  const double expect = total / static_cast<double>(counts.size());
  double x = 0.0;
  for (int c : counts) x += (c - expect) * (c - expect) / expect;
  return x;
}

/// Upper 1% points of the chi-square distribution, indexed by degrees of freedom.
double critical_01(std::size_t df) {
  static const double table[] = {0.0, 6.635, 9.210, 11.345, 13.277, 15.086, 16.812, 18.475, 20.090};
  return table[df];
}

double param_value(const LearnerConfig& l, const std::string& key) {
  if (key == "eta") return l.eta;
  if (key == "batch_size") return l.batch_size;
  if (key == "inner_lr_init") return l.inner_lr_init;
  if (key == "inner_steps") return l.inner_steps;
  if (key == "first_order") return l.first_order ? 1.0 : 0.0;
  if (key == "mc_samples") return l.mc_samples;
  if (key == "beta") return l.beta;
  if (key == "sigma0") return l.sigma0;
  if (key == "gamma") return l.gamma;
  return l.lambda;
}

}  // namespace

// -- configuration -------------------------------------------------------------

TEST(Config, DefaultsAndSeedList) {
  const ExperimentConfig c = experiment_from_json({{"seed", 100}});
  ASSERT_EQ(c.seeds.size(), 20u);
  EXPECT_EQ(c.seeds.front(), 100u);
  EXPECT_EQ(c.seeds.back(), 119u);
  EXPECT_EQ(c.stream.alpha, 0.98);
  EXPECT_EQ(c.pretrain.seed, 100u);
}

TEST(Config, SeedOverrideRegeneratesTheList) {
  const ExperimentConfig c = experiment_from_json({{"seed", 1}, {"seeds", {5, 9, 2}}}, 40);
  EXPECT_EQ(c.seed, 40u);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{40, 41, 42}));
  EXPECT_EQ(c.pretrain.seed, 40u);
}

TEST(Config, SeedFromEnvironment) {
  ::setenv("OSAKA_SEED", "77", 1);
  EXPECT_EQ(seed_from_env(), std::optional<std::uint64_t>(77));
  ::setenv("OSAKA_SEED", "7x", 1);
  EXPECT_THROW(seed_from_env(), ConfigError);
  ::unsetenv("OSAKA_SEED");
  EXPECT_EQ(seed_from_env(), std::nullopt);
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(experiment_from_json({{"sed", 1}}), ConfigError);
  EXPECT_THROW(experiment_from_json({{"version", 2}}), ConfigError);
  EXPECT_THROW(experiment_from_json({{"seeds", {1, 1}}}), ConfigError);
  EXPECT_THROW(experiment_from_json({{"seeds", nlohmann::json::array()}}), ConfigError);
  EXPECT_THROW(experiment_from_json({{"learners", {{{"kind", "maml"}}, {{"kind", "maml"}}}}}), ConfigError);
  EXPECT_THROW(experiment_from_json({{"learners", {{{"kind", "maml"}, {"name", "../x"}}}}}), ConfigError);
  EXPECT_THROW(experiment_from_json({{"stream", {{"alpha", 1.5}}}}), ConfigError);
  EXPECT_THROW(experiment_from_json({{"search", {{"space", {{"zeta", {1}}}}}}}), ConfigError);
  EXPECT_THROW(load_experiment("/nonexistent/cfg.json"), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  TempDir dir("roundtrip");
  const ExperimentConfig c = experiment_from_json(small_config(dir));
  const ExperimentConfig back = experiment_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

// -- search sampling -------------------------------------------------------------

TEST(Search, DefaultGridMatchesPublishedSpace) {
  const SearchSpace s = default_search_space();
  EXPECT_EQ(s.at("gamma"), (std::vector<double>{0.25, 0.5, 1, 2, 3, 5}));
  EXPECT_EQ(s.at("lambda"), (std::vector<double>{0.25, 0.5, 0.75, 1, 1.25, 1.5, 2, 2.5, 3}));
  EXPECT_EQ(s.at("eta").size(), 5u);
  EXPECT_EQ(s.at("inner_lr_init").size(), 7u);
  EXPECT_EQ(s.at("mc_samples"), std::vector<double>{5});
}

// One chi-square test per grid dimension at p = 0.01 over 10^4 draws,
// repeated over independent sampler seeds: each dimension may reject in
// about 1% of the repetitions, and a biased sampler rejects in nearly all.
TEST(Search, SamplingIsUniformOverTheGrid) {
  const int draws = 10000, repeats = 60;
  std::map<std::string, int> rejections;
  std::map<std::string, double> mean_stat;
  std::map<std::string, double> dof;
  SearchConfig all;
  SearchConfig cmaml_only;
  cmaml_only.kinds = {"cmaml"};
  for (int rep = 0; rep < repeats; ++rep) {
    Rng rng(1000 + static_cast<std::uint64_t>(rep));
    std::vector<int> kind_counts(all.kinds.size(), 0);
    std::map<std::string, std::vector<int>> counts;
    for (int i = 0; i < draws; ++i) {
      const LearnerConfig l = sample_trial(all, rng);
      const auto k = std::find(all.kinds.begin(), all.kinds.end(), l.kind);
      ASSERT_NE(k, all.kinds.end());
      ++kind_counts[static_cast<std::size_t>(k - all.kinds.begin())];
      const LearnerConfig c = sample_trial(cmaml_only, rng);
      for (const auto& key : searched_parameters("cmaml", false)) {
        const auto& grid = cmaml_only.space.at(key);
        const auto pos = std::find(grid.begin(), grid.end(), param_value(c, key));
        ASSERT_NE(pos, grid.end()) << key;
        counts[key].resize(grid.size(), 0);
        ++counts[key][static_cast<std::size_t>(pos - grid.begin())];
      }
    }
    counts["kind"] = kind_counts;
    ASSERT_EQ(counts.size(), 8u);
    for (const auto& [key, c] : counts) {
      const double x = chi_square(c);
      rejections[key] += x >= critical_01(c.size() - 1);
      mean_stat[key] += (x / static_cast<double>(c.size() - 1)) / repeats;
      dof[key] = static_cast<double>(c.size() - 1);
    }
  }
  for (const auto& [key, r] : rejections) {
    // Binomial(60, 0.01) exceeds 4 with probability below 3e-4
    EXPECT_LE(r, 4) << key;
    // the chi-square statistic over its degrees of freedom averages 1, sd sqrt(2 / df / repeats)
    EXPECT_NEAR(mean_stat[key], 1.0, 4.0 * std::sqrt(2.0 / dof[key] / repeats)) << key;
  }
}

TEST(Search, DegenerateGridEvaluatesExactlyThatConfig) {
  TempDir dir("degenerate");
  nlohmann::json j = small_config(dir);
  j["search"] = {{"kinds", {"online_adam"}}, {"space", {{"eta", {0.003}}, {"batch_size", {4}}}}};
  const ExperimentConfig c = experiment_from_json(j);
  const auto trials = run_search(c, 1, 1);
  ASSERT_EQ(trials.size(), 1u);
  EXPECT_EQ(trials[0].learner.kind, "online_adam");
  EXPECT_EQ(trials[0].learner.eta, 0.003);
  EXPECT_EQ(trials[0].learner.batch_size, 4);
  EXPECT_EQ(trials[0].accuracies.size(), 2u);
  EXPECT_FALSE(trials[0].gated);

  j["search"]["space"]["eta"] = nlohmann::json::array();
  EXPECT_THROW(run_search(experiment_from_json(j), 1, 1), ConfigError);
}

TEST(Search, ChanceLevelTrialsSkipTheSecondSeed) {
  TempDir dir("gate");
  nlohmann::json j = small_config(dir);
  // a network with zero weights and zero step size predicts one class: exactly
  // chance on balanced batches
  const ExperimentConfig base = experiment_from_json(j);
  ModelParams zero = init_params(net_spec(base));
  for (auto& layer : zero.layers) {
    layer.weight.setZero();
    layer.bias.setZero();
  }
  zero.log_inner_lr.setConstant(-INFINITY);
  save_checkpoint(dir / "zero.bin", zero);
  j["search"] = {{"kinds", {"maml", "online_adam"}},
                 {"pretrain_checkpoint", dir / "zero.bin"},
                 {"space", {{"eta", {0.003}}, {"batch_size", {4}}, {"inner_steps", {1}}}}};
  const ExperimentConfig c = experiment_from_json(j);
  const auto trials = cmd_search(c, 6, 2);
  bool saw_gate = false;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const Trial& t = trials[i];
    if (t.learner.kind == "maml") {
      saw_gate = true;
      EXPECT_TRUE(t.gated);
      ASSERT_EQ(t.accuracies.size(), 1u);
      EXPECT_NEAR(t.accuracies[0], 0.2, 1e-12);
    } else {
      EXPECT_FALSE(t.gated);
      EXPECT_EQ(t.accuracies.size(), 2u);
    }
    if (i > 0) EXPECT_FALSE(trials[i - 1].gated && !t.gated);
  }
  EXPECT_TRUE(saw_gate);

  const std::string csv = read_file(dir / "out/trials.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "rank,trial,kind,eta,batch_size,inner_lr_init,inner_steps,first_order,mc_samples,beta,sigma0,gamma,"
            "lambda,acc_seed1,acc_seed2,mean,gated,failed");
  const ExperimentConfig best = load_experiment(dir / "out/best_config.json");
  ASSERT_EQ(best.learners.size(), 1u);
  EXPECT_EQ(best.learners[0].kind, trials.front().learner.kind);
}

// -- pretrain and run ------------------------------------------------------------

TEST(Pretrain, RerunIsByteIdenticalAndLossDecreases) {
  TempDir dir("pretrain");
  const ExperimentConfig c = experiment_from_json(small_config(dir));
  cmd_pretrain(c);
  const std::string first = read_file(c.checkpoint);
  const std::string manifest = read_file(c.checkpoint + ".json");
  cmd_pretrain(c);
  EXPECT_EQ(read_file(c.checkpoint), first);
  EXPECT_EQ(read_file(c.checkpoint + ".json"), manifest);
  const auto m = nlohmann::json::parse(manifest);
  const auto losses = m.at("epoch_losses").get<std::vector<double>>();
  ASSERT_EQ(losses.size(), 3u);
  EXPECT_LT(losses.back(), losses.front());
  EXPECT_EQ(m.at("spec").at("input_dim"), 8);
}

TEST(Run, FileCountsAndParallelDeterminism) {
  TempDir dir("run");
  nlohmann::json j = small_config(dir);
  const ExperimentConfig serial = experiment_from_json(j);
  const RunOutput a = cmd_run(serial, 1);
  EXPECT_TRUE(a.all_completed);
  auto files_a = files_under(serial.output_dir);
  int traces = 0, summaries = 0;
  for (const auto& [name, _] : files_a) {
    traces += name.find("seed_") != std::string::npos;
    summaries += name.find("summary.json") != std::string::npos;
  }
  EXPECT_EQ(traces, 6);
  EXPECT_EQ(summaries, 2);

  j["output_dir"] = dir / "out_parallel";
  const ExperimentConfig parallel = experiment_from_json(j);
  cmd_run(parallel, 4);
  auto files_b = files_under(parallel.output_dir);
  // config.json records the output directory itself
  files_a.erase("config.json");
  files_b.erase("config.json");
  EXPECT_EQ(files_a, files_b);

  const auto summary = nlohmann::json::parse(files_a.at("cmaml/summary.json"));
  EXPECT_EQ(summary.at("stats").at("total").at("n"), 3);
  EXPECT_EQ(summary.at("runs").size(), 3u);
}

TEST(Run, MissingCheckpointFailsBeforeAnyEpisode) {
  TempDir dir("missing");
  nlohmann::json j = small_config(dir);
  j["learners"].push_back({{"kind", "maml"}});
  const ExperimentConfig c = experiment_from_json(j);
  EXPECT_THROW(cmd_run(c, 1), ConfigError);
  EXPECT_FALSE(fs::exists(c.output_dir));
}

// -- report ----------------------------------------------------------------------

TEST(Report, SmoothingWindowOneIsIdentity) {
  const std::vector<double> v{0.3, 1.0, 0.0, 0.7, 0.2};
  EXPECT_EQ(smooth(v, 1), v);
  const auto s = smooth(v, 2);
  EXPECT_DOUBLE_EQ(s[0], 0.3);
  EXPECT_DOUBLE_EQ(s[1], 0.65);
  EXPECT_DOUBLE_EQ(s[4], 0.45);
  EXPECT_THROW(smooth(v, 0), ConfigError);
}

TEST(Report, PerfectTraceGivesFlatCurve) {
  TempDir dir("perfect");
  fs::create_directories(dir.path / "oracle");
  EpisodeTrace tr;
  for (int t = 0; t < 250; ++t) {
    TraceRow r;
    r.t = t;
    r.acc = 1.0;
    r.family = t < 100 ? Family::pretrain : Family::ood_targets;
    tr.rows.push_back(r);
  }
  write_file(dir.path / "oracle" / "seed_0.csv", trace_csv(tr));
  const auto methods = collect(dir.path.string());
  ASSERT_EQ(methods.size(), 1u);
  for (double v : smooth(methods[0].curve, 100)) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(methods[0].stats.at("total").mean, 1.0);
  const std::string table = cmd_report(dir.path.string(), 100);
  EXPECT_NE(table.find("100.0 ± 0.0"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir.path / "curves.svg"));
  EXPECT_TRUE(fs::exists(dir.path / "pr.svg"));
}

TEST(Report, BoldOnlyWhenTheIntervalClearsEveryOtherMean) {
  auto method = [](double mean, double ci) {
    MethodStats m;
    m.stats["total"] = Stat{mean, 0.0, ci, 20};
    return m;
  };
  const std::vector<MethodStats> clear{method(0.8, 0.05), method(0.7, 0.05), method(0.6, 0.05)};
  EXPECT_TRUE(is_bold(clear, 0, "total"));
  EXPECT_FALSE(is_bold(clear, 1, "total"));
  EXPECT_FALSE(is_bold(clear, 2, "total"));
  const std::vector<MethodStats> close{method(0.8, 0.12), method(0.7, 0.05)};
  EXPECT_FALSE(is_bold(close, 0, "total"));
  EXPECT_FALSE(is_bold(close, 0, "f1"));
}

TEST(Report, MalformedTraceNamesFileAndLine) {
  TempDir dir("malformed");
  fs::create_directories(dir.path / "m");
  write_file(dir.path / "m" / "seed_1.csv",
             "t,loss,acc,context_id,family,true_boundary,detected_boundary,modulation\n0,1,1,0,pretrain,0,0,\n0,1\n");
  try {
    collect(dir.path.string());
    FAIL() << "expected ReportError";
  } catch (const ReportError& e) {
    EXPECT_NE(std::string(e.what()).find("seed_1.csv:3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(collect((dir.path / "nothing").string()), ReportError);
}

// -- command line ----------------------------------------------------------------

TEST(CommandLine, ExitCodes) {
  TempDir dir("exit");
  auto code = [&](const std::string& args) {
    const int status = std::system((std::string(OSAKA_BIN) + " " + args + " > " + (dir / "log") + " 2>&1").c_str());
    return WEXITSTATUS(status);
  };
  nlohmann::json j = small_config(dir);
  j["n_seeds"] = 2;
  write_file(dir / "ok.json", j.dump());
  EXPECT_EQ(code("run -c " + (dir / "ok.json")), 0);
  EXPECT_EQ(code("report " + (dir / "out") + " --smooth 5"), 0);
  EXPECT_EQ(code("run -c " + (dir / "absent.json")), 1);
  EXPECT_EQ(code("frobnicate"), 1);

  j["learners"].push_back({{"kind", "maml"}});
  write_file(dir / "needs_ckpt.json", j.dump());
  EXPECT_EQ(code("run -c " + (dir / "needs_ckpt.json")), 1);

  nlohmann::json bad = small_config(dir);
  // inputs overflow to infinity, so the very first loss is non-finite
  bad["stream"]["noise"] = 1.7e308;
  bad["learners"] = {{{"kind", "online_adam"}}};
  write_file(dir / "diverge.json", bad.dump());
  EXPECT_EQ(code("run -c " + (dir / "diverge.json")), 2);

  const std::string env_cmd = "OSAKA_SEED=abc " + std::string(OSAKA_BIN) + " run -c " + (dir / "ok.json") + " > " +
                              (dir / "log") + " 2>&1";
  EXPECT_EQ(WEXITSTATUS(std::system(env_cmd.c_str())), 1);
}
