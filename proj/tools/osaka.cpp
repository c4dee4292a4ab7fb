#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "experiment.hpp"
#include "osaka/errors.hpp"

using namespace osaka;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online continual-learning benchmark on synthetic task streams"};
  app.require_subcommand(1);

  std::string config_path;
  bool first_order = false;
  auto* pretrain = app.add_subcommand("pretrain", "MAML pre-training; writes a checkpoint and manifest");
  pretrain->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
  pretrain->add_flag("--first-order", first_order, "first-order meta-gradient");

  int jobs = 1;
  auto* run = app.add_subcommand("run", "one episode per (learner, seed)");
  run->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
  run->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);

  int budget = 0;
  auto* search = app.add_subcommand("search", "random hyperparameter search");
  search->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
  search->add_option("--budget", budget, "number of trials (default: search.budget)");
  search->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);

  std::string report_dir;
  int window = 100;
  auto* report = app.add_subcommand("report", "summary table and SVG plots for a run directory");
  report->add_option("dir", report_dir, "output directory of `osaka run`")->required();
  report->add_option("--smooth", window, "moving-average window in steps")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*report) {
      std::cout << cli::cmd_report(report_dir, window);
      return kOk;
    }
    cli::ExperimentConfig cfg = cli::load_experiment(config_path, cli::seed_from_env());
    if (*pretrain) {
      if (first_order) cfg.pretrain.first_order = true;
      const cli::PretrainOutput out = cli::cmd_pretrain(cfg);
      const auto& losses = out.result.epoch_losses;
      std::printf("wrote %s (%zu epochs", out.checkpoint_path.c_str(), losses.size());
      if (!losses.empty()) std::printf(", meta-loss %.4f -> %.4f", losses.front(), losses.back());
      std::printf(")\n");
      return kOk;
    }
    if (*run) {
      const cli::RunOutput out = cli::cmd_run(cfg, jobs);
      for (const auto& e : out.episodes)
        if (e.trace.failed) std::fprintf(stderr, "%s seed %llu failed: %s\n", e.learner.c_str(),
                                         static_cast<unsigned long long>(e.seed), e.trace.failure.c_str());
      std::printf("wrote %zu traces to %s\n", out.episodes.size(), cfg.output_dir.c_str());
      return out.all_completed ? kOk : kRuntimeError;
    }
    if (*search) {
      const auto trials = cli::cmd_search(cfg, budget > 0 ? budget : cfg.search.budget, jobs);
      const auto& best = trials.front();
      std::printf("best: trial %d (%s) mean accuracy %.4f; wrote %s/trials.csv and best_config.json\n", best.id,
                  best.learner.kind.c_str(), best.mean(), cfg.output_dir.c_str());
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntimeError;
  }
  return kOk;
}
