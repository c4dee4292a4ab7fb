#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <set>
#include <tuple>

#include <gtest/gtest.h>

#include "osaka/errors.hpp"
#include "osaka/stream.hpp"

using namespace osaka;

namespace {

StreamConfig default_cfg(std::uint64_t seed = 0) {
  StreamConfig c;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(NextContext, AlphaOneNeverSwitches) {
  StreamConfig cfg = default_cfg();
  cfg.alpha = 1.0;
  cfg.episode_length = 2000;
  const Pools pools = build_pools(cfg);
  Stream s(cfg, pools);
  std::set<int> ids;
  while (!s.done()) ids.insert(s.next().context_id);
  EXPECT_EQ(ids.size(), 1u);
}

TEST(NextContext, StayFractionMatchesAlpha) {
  StreamConfig cfg = default_cfg(3);
  const Pools pools = build_pools(cfg);
  ContextSampler sampler(cfg, pools);
  Rng rng(3);
  std::optional<int> prev;
  int stays = 0;
  const int T = 100000;
  for (int t = 0; t < T; ++t) {
    const int id = sampler.next_context(prev, rng);
    if (prev && *prev == id) ++stays;
    prev = id;
  }
  EXPECT_NEAR(static_cast<double>(stays) / (T - 1), 0.98, 0.005);
}

TEST(NextContext, FamilyFrequenciesFollowMixture) {
  StreamConfig cfg = default_cfg(4);
  const Pools pools = build_pools(cfg);
  ContextSampler sampler(cfg, pools);
  Rng rng(4);
  std::array<int, 3> counts{};
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(sampler.draw_fresh(rng).family)];
  EXPECT_NEAR(counts[0] / double(n), 0.5, 0.02);
  EXPECT_NEAR(counts[1] / double(n), 0.25, 0.02);
  EXPECT_NEAR(counts[2] / double(n), 0.25, 0.02);
}

TEST(SampleStep, NoiselessInputsEqualPrototypes) {
  StreamConfig cfg = default_cfg();
  cfg.noise = 0.0;
  cfg.pools.style_scale = 0.0;
  cfg.mixture = {0.5, 0.5, 0.0};
  const Pools pools = build_pools(cfg);
  ContextSampler sampler(cfg, pools);
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const ContextSpec& ctx = sampler.draw_fresh(rng);
    const StepBatch s = sample_step(ctx, pools, cfg, rng);
    ASSERT_EQ(s.batch.size(), cfg.samples_per_step);
    for (Eigen::Index i = 0; i < s.batch.size(); ++i) {
      const int label = s.batch.labels[static_cast<std::size_t>(i)];
      ASSERT_GE(label, 0);
      ASSERT_LT(label, cfg.ways);
      const auto pos = std::find(ctx.label_map.begin(), ctx.label_map.end(), label) - ctx.label_map.begin();
      const int proto = ctx.class_subset[static_cast<std::size_t>(pos)];
      EXPECT_EQ(s.batch.x.row(i), pools.of(ctx.family).row(proto));
    }
  }
}

TEST(SampleStep, NoiselessInputsDecomposeIntoPrototypeAndStyle) {
  StreamConfig cfg = default_cfg();
  cfg.noise = 0.0;
  const Pools pools = build_pools(cfg);
  ContextSampler sampler(cfg, pools);
  Rng rng(15);
  auto row_of = [](const Eigen::MatrixXd& m, const Eigen::RowVectorXd& r) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      if ((m.row(i) - r).cwiseAbs().maxCoeff() < 1e-12) return static_cast<int>(i);
    return -1;
  };
  for (Family f : kFamilies) {
    const ContextSpec& ctx = sampler.draw_fresh(f, rng);
    const StepBatch s = sample_step(ctx, pools, cfg, rng);
    for (Eigen::Index i = 0; i < s.batch.size(); ++i) {
      const auto pos = std::find(ctx.label_map.begin(), ctx.label_map.end(), s.batch.labels[static_cast<std::size_t>(i)]) -
                       ctx.label_map.begin();
      const int cls = ctx.class_subset[static_cast<std::size_t>(pos)];
      if (f == Family::ood_targets)
        EXPECT_GE(row_of(pools.pretrain, s.batch.x.row(i) - pools.styles.row(cls)), 0);
      else
        EXPECT_GE(row_of(pools.styles, s.batch.x.row(i) - pools.of(f).row(cls)), 0);
    }
  }
}

TEST(SampleStep, LabelHistogramIsUniform) {
  StreamConfig cfg = default_cfg();
  cfg.samples_per_step = 1000;
  cfg.balanced = false;
  const Pools pools = build_pools(cfg);
  ContextSampler sampler(cfg, pools);
  Rng rng(6);
  const ContextSpec& ctx = sampler.draw_fresh(Family::pretrain, rng);
  std::vector<int> counts(5, 0);
  const int n = 100000;
  for (int rep = 0; rep < n / cfg.samples_per_step; ++rep)
    for (int y : sample_step(ctx, pools, cfg, rng).batch.labels) ++counts[static_cast<std::size_t>(y)];
  const double p = 0.2, se = std::sqrt(n * p * (1 - p));
  for (int c : counts) EXPECT_NEAR(c, n * p, 3 * se);
}

TEST(SampleStep, BalancedBatchesHoldEveryClassEquallyOften) {
  StreamConfig cfg = default_cfg();
  const Pools pools = build_pools(cfg);
  ContextSampler sampler(cfg, pools);
  Rng rng(16);
  const ContextSpec& ctx = sampler.draw_fresh(Family::pretrain, rng);
  bool saw_unsorted = false;
  for (int rep = 0; rep < 50; ++rep) {
    const auto labels = sample_step(ctx, pools, cfg, rng).batch.labels;
    std::vector<int> counts(5, 0);
    for (int y : labels) ++counts[static_cast<std::size_t>(y)];
    for (int c : counts) EXPECT_EQ(c, 2);
    saw_unsorted |= !std::is_sorted(labels.begin(), labels.end());
  }
  EXPECT_TRUE(saw_unsorted);
  cfg.samples_per_step = 7;
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<int> counts(5, 0);
    for (int y : sample_step(ctx, pools, cfg, rng).batch.labels) ++counts[static_cast<std::size_t>(y)];
    EXPECT_EQ(std::count(counts.begin(), counts.end(), 2), 2);
    EXPECT_EQ(std::count(counts.begin(), counts.end(), 1), 3);
  }
}

TEST(SampleStep, OodTargetPrototypesAppearUnderEveryLabel) {
  StreamConfig cfg = default_cfg();
  cfg.noise = 0.0;
  cfg.pools.style_scale = 0.0;
  const Pools pools = build_pools(cfg);
  ContextSampler sampler(cfg, pools);
  Rng rng(17);
  const ContextSpec& ctx = sampler.draw_fresh(Family::ood_targets, rng);
  ASSERT_EQ(ctx.nuisance_subset.size(), 5u);
  std::map<int, std::set<int>> labels_of;
  for (int rep = 0; rep < 200; ++rep) {
    const StepBatch s = sample_step(ctx, pools, cfg, rng);
    for (Eigen::Index i = 0; i < s.batch.size(); ++i) {
      int proto = -1;
      for (int p : ctx.nuisance_subset)
        if (s.batch.x.row(i) == pools.pretrain.row(p)) proto = p;
      ASSERT_GE(proto, 0);
      labels_of[proto].insert(s.batch.labels[static_cast<std::size_t>(i)]);
    }
  }
  EXPECT_EQ(labels_of.size(), 5u);
  for (const auto& [proto, labels] : labels_of) EXPECT_EQ(labels.size(), 5u) << proto;
}

TEST(SampleStep, RelabelledContextSharesInputsOnly) {
  StreamConfig cfg = default_cfg();
  const Pools pools = build_pools(cfg);
  ContextSpec a;
  a.family = Family::pretrain;
  a.class_subset = {0, 1, 2, 3, 4};
  a.label_map = {0, 1, 2, 3, 4};
  a.noise = cfg.noise;
  ContextSpec b = a;
  b.label_map = {1, 2, 3, 4, 0};
  Rng ra(7), rb(7);
  const StepBatch sa = sample_step(a, pools, cfg, ra), sb = sample_step(b, pools, cfg, rb);
  EXPECT_EQ(sa.batch.x, sb.batch.x);
  for (std::size_t i = 0; i < sa.batch.labels.size(); ++i)
    EXPECT_EQ((sa.batch.labels[i] + 1) % 5, sb.batch.labels[i]);
}

TEST(PretrainEpisode, BoundarySplit) {
  StreamConfig cfg = default_cfg();
  const Pools pools = build_pools(cfg);
  ContextSampler sampler(cfg, pools);
  Rng rng(8);
  const PretrainEpisode ep = pretrain_episode(sampler, pools, cfg, 1, cfg.samples_per_step - 1, rng);
  ASSERT_EQ(ep.tasks.size(), 1u);
  EXPECT_EQ(ep.tasks[0].query.size(), 1);
  EXPECT_EQ(ep.tasks[0].support.size(), cfg.samples_per_step - 1);
  EXPECT_THROW(pretrain_episode(sampler, pools, cfg, 1, cfg.samples_per_step, rng), ContractError);
  EXPECT_THROW(pretrain_episode(sampler, pools, cfg, 1, 0, rng), ContractError);
}

TEST(PretrainEpisode, OnlyPretrainFamilyAndBalancedSupport) {
  StreamConfig cfg = default_cfg();
  const Pools pools = build_pools(cfg);
  ContextSampler sampler(cfg, pools);
  Rng rng(9);
  const PretrainEpisode ep = pretrain_episode(sampler, pools, cfg, 32, 5, rng);
  for (const auto& task : ep.tasks) {
    EXPECT_EQ(task.context.family, Family::pretrain);
    std::set<int> seen(task.support.labels.begin(), task.support.labels.end());
    EXPECT_EQ(seen.size(), 5u);
  }
}

TEST(PretrainEpisode, TenWayOneShot) {
  StreamConfig cfg = default_cfg();
  cfg.ways = 10;
  cfg.samples_per_step = 20;
  cfg.pools.n_pre = 100;
  cfg.pools.n_styles = 10;
  const Pools pools = build_pools(cfg);
  ContextSampler sampler(cfg, pools);
  Rng rng(10);
  const PretrainEpisode ep = pretrain_episode(sampler, pools, cfg, 4, 10, rng);
  for (const auto& task : ep.tasks) {
    std::set<int> seen(task.support.labels.begin(), task.support.labels.end());
    EXPECT_EQ(seen.size(), 10u);
  }
}

TEST(BuildPools, ZeroShiftPoolsAreStatisticallyAlike) {
  StreamConfig cfg = default_cfg();
  cfg.pools.n_pre = cfg.pools.n_ood = 4096;
  cfg.pools.mu_shift = 0.0;
  const Pools pools = build_pools(cfg);
  const double se = 1.0 / std::sqrt(4096.0 * cfg.dim);
  EXPECT_NEAR(pools.pretrain.mean(), 0.0, 4 * se);
  EXPECT_NEAR(pools.ood.mean(), 0.0, 4 * se);
}

TEST(BuildPools, ShiftedCentroidDistance) {
  StreamConfig cfg = default_cfg();
  cfg.pools.n_pre = cfg.pools.n_ood = 4096;
  const Pools pools = build_pools(cfg);
  const Eigen::RowVectorXd gap = pools.ood.colwise().mean() - pools.pretrain.colwise().mean();
  // each coordinate has standard error sqrt(2/4096); allow four of them on the norm
  EXPECT_NEAR(gap.norm(), 2.0 * std::sqrt(16.0), 4.0 * std::sqrt(2.0 / 4096.0) * std::sqrt(16.0));
}

TEST(BuildPools, PoolsAreDisjoint) {
  const StreamConfig cfg = default_cfg();
  const Pools pools = build_pools(cfg);
  for (Eigen::Index i = 0; i < pools.pretrain.rows(); ++i)
    for (Eigen::Index j = 0; j < pools.ood.rows(); ++j) ASSERT_NE(pools.pretrain.row(i), pools.ood.row(j));
}

TEST(BuildPools, OodTargetBijectionsNeverSeenInPretraining) {
  const StreamConfig cfg = default_cfg();
  const Pools pools = build_pools(cfg);
  ContextSampler sampler(cfg, pools);
  Rng rng(11);
  auto as_map = [](const ContextSpec& c) {
    // the label-bearing factor is part of the key: prototypes and styles are different objects
    std::set<std::tuple<bool, int, int>> m;
    for (std::size_t i = 0; i < c.class_subset.size(); ++i)
      m.emplace(c.family == Family::ood_targets, c.class_subset[i], c.label_map[i]);
    return m;
  };
  std::set<std::set<std::tuple<bool, int, int>>> pre, ood;
  for (int i = 0; i < 5000; ++i) {
    pre.insert(as_map(sampler.draw_fresh(Family::pretrain, rng)));
    ood.insert(as_map(sampler.draw_fresh(Family::ood_targets, rng)));
  }
  for (const auto& m : ood) EXPECT_EQ(pre.count(m), 0u);
  for (int i = 0; i < 200; ++i) {
    const ContextSpec& c = sampler.draw_fresh(Family::ood_targets, rng);
    const std::set<int> styles(c.class_subset.begin(), c.class_subset.end());
    EXPECT_EQ(styles.size(), 5u);
    EXPECT_LT(*styles.rbegin(), cfg.pools.n_styles);
  }
}

TEST(BuildPools, StylesSpanTheirRank) {
  const StreamConfig cfg = default_cfg();
  const Pools pools = build_pools(cfg);
  ASSERT_EQ(pools.styles.rows(), cfg.pools.n_styles);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(pools.styles);
  svd.setThreshold(1e-9);
  EXPECT_EQ(svd.rank(), cfg.pools.style_rank);
}

TEST(Stream, SameSeedSameBytes) {
  StreamConfig cfg = default_cfg(21);
  cfg.episode_length = 500;
  const Pools pools = build_pools(cfg);
  Stream a(cfg, pools), b(cfg, pools);
  while (!a.done()) {
    const StepBatch sa = a.next(), sb = b.next();
    ASSERT_EQ(sa.context_id, sb.context_id);
    ASSERT_EQ(std::memcmp(sa.batch.x.data(), sb.batch.x.data(), sizeof(double) * sa.batch.x.size()), 0);
    ASSERT_EQ(sa.batch.labels, sb.batch.labels);
  }
  EXPECT_TRUE(b.done());
  EXPECT_THROW(a.next(), ContractError);
  cfg.seed = 22;
  EXPECT_NE(ground_truth_csv(cfg, pools), ground_truth_csv(default_cfg(21), pools));
}

TEST(Stream, EmitsExactlyTBatches) {
  StreamConfig cfg = default_cfg(1);
  const Pools pools = build_pools(cfg);
  Stream s(cfg, pools);
  int n = 0;
  while (!s.done()) {
    EXPECT_EQ(s.next().t, n);
    ++n;
  }
  EXPECT_EQ(n, 10000);
  EXPECT_EQ(s.true_boundaries().size(), 10000u);
  EXPECT_FALSE(s.true_boundaries()[0]);
}

TEST(Stream, BoundaryCountIsBinomial) {
  StreamConfig cfg = default_cfg(2);
  cfg.alpha = 0.9;
  const Pools pools = build_pools(cfg);
  Stream s(cfg, pools);
  while (!s.done()) s.next();
  const auto& b = s.true_boundaries();
  const double count = static_cast<double>(std::count(b.begin(), b.end(), true));
  EXPECT_NEAR(count, 1000.0, 3.0 * std::sqrt(10000 * 0.9 * 0.1));
}

TEST(Stream, FixedListKernelAndRevisits) {
  StreamConfig cfg = default_cfg(5);
  cfg.alpha = 0.9;
  cfg.fixed_contexts = 4;
  cfg.episode_length = 100000;
  const Pools pools = build_pools(cfg);
  Stream s(cfg, pools);
  while (!s.done()) s.next();
  const auto& ids = s.context_ids();
  std::map<int, int> pos;
  for (int id : ids)
    if (!pos.count(id)) pos.emplace(id, static_cast<int>(pos.size()));
  ASSERT_EQ(pos.size(), 4u);
  Eigen::Matrix4d counts = Eigen::Matrix4d::Zero();
  for (std::size_t t = 1; t < ids.size(); ++t) counts(pos[ids[t - 1]], pos[ids[t]]) += 1;
  for (int i = 0; i < 4; ++i) {
    const double row = counts.row(i).sum();
    for (int j = 0; j < 4; ++j) {
      const double p = i == j ? 0.9 : 0.1 / 3;
      EXPECT_NEAR(counts(i, j) / row, p, 4 * std::sqrt(p * (1 - p) / row));
    }
  }
  // revisiting: some context is re-entered after leaving it
  std::set<int> left;
  bool revisit = false;
  for (std::size_t t = 1; t < ids.size() && !revisit; ++t)
    if (ids[t] != ids[t - 1]) {
      left.insert(ids[t - 1]);
      revisit = left.count(ids[t]) > 0;
    }
  EXPECT_TRUE(revisit);
}

TEST(Stream, GroundTruthCsvLayout) {
  StreamConfig cfg = default_cfg();
  cfg.episode_length = 3;
  const Pools pools = build_pools(cfg);
  const std::string csv = ground_truth_csv(cfg, pools);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "t,context_id,is_boundary");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(StreamConfig, JsonRoundTripAndValidation) {
  StreamConfig cfg = default_cfg(9);
  cfg.alpha = 0.9;
  cfg.pools.mu_shift = 1.5;
  const StreamConfig back = stream_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
  EXPECT_THROW(stream_config_from_json(nlohmann::json{{"alpah", 0.9}}), ConfigError);
  EXPECT_THROW(stream_config_from_json(nlohmann::json{{"mixture", {0.5, 0.3, 0.3}}}), ConfigError);
  EXPECT_THROW(stream_config_from_json(nlohmann::json{{"alpha", 0.0}}), ConfigError);
  EXPECT_THROW(stream_config_from_json(nlohmann::json{{"alpha", "high"}}), ConfigError);
  EXPECT_NO_THROW(stream_config_from_json(nlohmann::json{{"mixture", {0.5, 0.25, 0.25}}}));
}

TEST(Sinusoid, NoiselessTargetsFollowTheCurve) {
  StreamConfig cfg = default_cfg();
  cfg.task = TaskKind::sinusoid;
  cfg.dim = 1;
  cfg.noise = 0.0;
  const Pools pools = build_pools(cfg);
  ContextSampler sampler(cfg, pools);
  Rng rng(12);
  const ContextSpec& ctx = sampler.draw_fresh(Family::pretrain, rng);
  const StepBatch s = sample_step(ctx, pools, cfg, rng);
  ASSERT_EQ(s.batch.targets.rows(), cfg.samples_per_step);
  EXPECT_TRUE(s.batch.labels.empty());
  for (Eigen::Index i = 0; i < s.batch.size(); ++i)
    EXPECT_NEAR(s.batch.targets(i, 0), ctx.amplitude * std::sin(s.batch.x(i, 0) + ctx.phase), 1e-12);
}
