#include "osaka/stream.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "osaka/errors.hpp"
#include "osaka/json_util.hpp"

namespace osaka {

std::string to_string(Family f) {
  switch (f) {
    case Family::pretrain:
      return "pretrain";
    case Family::ood_inputs:
      return "ood_inputs";
    case Family::ood_targets:
      return "ood_targets";
  }
  return "?";
}

Family family_from_string(const std::string& s) {
  for (Family f : kFamilies)
    if (to_string(f) == s) return f;
  throw ConfigError("unknown family '" + s + "'");
}

void validate(const StreamConfig& c) {
  if (!(c.alpha > 0.0 && c.alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1]");
  if (c.episode_length < 1) throw ConfigError("episode_length must be >= 1");
  double total = 0.0;
  for (double m : c.mixture) {
    if (!(m >= 0.0)) throw ConfigError("mixture weights must be >= 0");
    total += m;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError("mixture must sum to 1");
  if (c.samples_per_step < 1) throw ConfigError("samples_per_step must be >= 1");
  if (!(c.noise >= 0.0)) throw ConfigError("noise must be >= 0");
  if (c.fixed_contexts < 0) throw ConfigError("fixed_contexts must be >= 0");
  if (c.task == TaskKind::sinusoid) {
    if (c.dim != 1) throw ConfigError("sinusoid task requires dim = 1");
    return;
  }
  if (c.ways < 2) throw ConfigError("ways must be >= 2");
  if (c.dim < 1) throw ConfigError("dim must be >= 1");
  if (c.pools.n_pre < c.ways || c.pools.n_ood < c.ways) throw ConfigError("each pool needs at least `ways` prototypes");
  if (c.pools.n_styles < 0 || c.pools.style_rank < 1 || c.pools.style_rank > c.dim || !(c.pools.style_scale >= 0.0))
    throw ConfigError("styles need n_styles >= 0, 1 <= style_rank <= dim and style_scale >= 0");
  if (c.mixture[2] > 0.0 && c.pools.n_styles < c.ways) throw ConfigError("ood_targets contexts need n_styles >= ways");
}

StreamConfig stream_config_from_json(const nlohmann::json& j) {
  const std::string where = "stream";
  jsonu::check_keys(j, {"alpha", "episode_length", "mixture", "ways", "samples_per_step", "dim", "noise", "pools", "seed",
                        "task", "fixed_contexts", "balanced"},
                    where);
  StreamConfig c;
  c.alpha = jsonu::get_or(j, "alpha", c.alpha, where);
  c.episode_length = jsonu::get_or(j, "episode_length", c.episode_length, where);
  if (j.contains("mixture")) {
    const auto m = jsonu::get_or<std::vector<double>>(j, "mixture", {}, where);
    if (m.size() != 3) throw ConfigError("stream: mixture needs three weights");
    std::copy(m.begin(), m.end(), c.mixture.begin());
  }
  c.ways = jsonu::get_or(j, "ways", c.ways, where);
  c.samples_per_step = jsonu::get_or(j, "samples_per_step", c.samples_per_step, where);
  c.dim = jsonu::get_or(j, "dim", c.dim, where);
  c.noise = jsonu::get_or(j, "noise", c.noise, where);
  c.seed = jsonu::get_or(j, "seed", c.seed, where);
  c.fixed_contexts = jsonu::get_or(j, "fixed_contexts", c.fixed_contexts, where);
  c.balanced = jsonu::get_or(j, "balanced", c.balanced, where);
  const auto task = jsonu::get_or<std::string>(j, "task", "classification", where);
  if (task == "classification")
    c.task = TaskKind::classification;
  else if (task == "sinusoid")
    c.task = TaskKind::sinusoid;
  else
    throw ConfigError("stream: unknown task '" + task + "'");
  if (j.contains("pools")) {
    const auto& p = j.at("pools");
    jsonu::check_keys(p, {"n_pre", "n_ood", "mu_shift", "seed", "n_styles", "style_rank", "style_scale"},
                      "stream.pools");
    c.pools.n_pre = jsonu::get_or(p, "n_pre", c.pools.n_pre, "stream.pools");
    c.pools.n_ood = jsonu::get_or(p, "n_ood", c.pools.n_ood, "stream.pools");
    c.pools.mu_shift = jsonu::get_or(p, "mu_shift", c.pools.mu_shift, "stream.pools");
    c.pools.seed = jsonu::get_or(p, "seed", c.pools.seed, "stream.pools");
    c.pools.n_styles = jsonu::get_or(p, "n_styles", c.pools.n_styles, "stream.pools");
    c.pools.style_rank = jsonu::get_or(p, "style_rank", c.pools.style_rank, "stream.pools");
    c.pools.style_scale = jsonu::get_or(p, "style_scale", c.pools.style_scale, "stream.pools");
  }
  validate(c);
  return c;
}

nlohmann::json to_json(const StreamConfig& c) {
  return {{"alpha", c.alpha},
          {"episode_length", c.episode_length},
          {"mixture", c.mixture},
          {"ways", c.ways},
          {"samples_per_step", c.samples_per_step},
          {"dim", c.dim},
          {"noise", c.noise},
          {"pools",
           {{"n_pre", c.pools.n_pre},
            {"n_ood", c.pools.n_ood},
            {"mu_shift", c.pools.mu_shift},
            {"seed", c.pools.seed},
            {"n_styles", c.pools.n_styles},
            {"style_rank", c.pools.style_rank},
            {"style_scale", c.pools.style_scale}}},
          {"seed", c.seed},
          {"task", c.task == TaskKind::sinusoid ? "sinusoid" : "classification"},
          {"fixed_contexts", c.fixed_contexts},
          {"balanced", c.balanced}};
}

// -- pools -------------------------------------------------------------------

Pools build_pools(const StreamConfig& cfg, Rng& rng) {
  Pools p;
  if (cfg.task == TaskKind::sinusoid) return p;
  p.pretrain = rng.normal_matrix(cfg.pools.n_pre, cfg.dim);
  p.ood = rng.normal_matrix(cfg.pools.n_ood, cfg.dim).array() + cfg.pools.mu_shift;
  if (cfg.pools.n_styles > 0) {
    // orthonormal basis of a random style_rank-dimensional subspace
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(rng.normal_matrix(cfg.dim, cfg.pools.style_rank));
    const Eigen::MatrixXd basis =
        (qr.householderQ() * Eigen::MatrixXd::Identity(cfg.dim, cfg.pools.style_rank)).transpose();
    p.styles = cfg.pools.style_scale * rng.normal_matrix(cfg.pools.n_styles, cfg.pools.style_rank) * basis;
  } else {
    p.styles = Eigen::MatrixXd::Zero(1, cfg.dim);
  }
  return p;
}

Pools build_pools(const StreamConfig& cfg) {
  Rng rng = Rng::derive(cfg.pools.seed, 0x706f6f6c);
  return build_pools(cfg, rng);
}

// -- contexts ----------------------------------------------------------------

ContextSampler::ContextSampler(const StreamConfig& cfg, const Pools& pools) : cfg_(cfg), pools_(&pools) {
  validate(cfg_);
  if (cfg_.fixed_contexts > 0) {
    Rng rng = Rng::derive(cfg_.seed, 0x6c697374);
    for (int attempt = 0; static_cast<int>(fixed_.size()) < cfg_.fixed_contexts; ++attempt) {
      if (attempt > 100 * cfg_.fixed_contexts) throw ConfigError("could not enumerate enough distinct contexts");
      const int id = draw_fresh(rng).id;
      if (std::find(fixed_.begin(), fixed_.end(), id) == fixed_.end()) fixed_.push_back(id);
    }
  }
}

Family ContextSampler::draw_family(Rng& rng) const {
  const double u = rng.uniform();
  if (u < cfg_.mixture[0]) return Family::pretrain;
  if (u < cfg_.mixture[0] + cfg_.mixture[1]) return Family::ood_inputs;
  return Family::ood_targets;
}

const ContextSpec& ContextSampler::draw_fresh(Rng& rng) { return draw_fresh(draw_family(rng), rng); }

namespace {

// Partial Fisher-Yates over 0..n-1: a uniform random k-subset in random order.
std::vector<int> random_subset(int n, int k, Rng& rng) {
  std::vector<int> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  for (int i = 0; i < k; ++i) std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(i + rng.uniform_int(n - i))]);
  ids.resize(static_cast<std::size_t>(k));
  return ids;
}

}  // namespace

const ContextSpec& ContextSampler::draw_fresh(Family family, Rng& rng) {
  ContextSpec c;
  c.family = family;
  c.noise = cfg_.noise;
  if (cfg_.task == TaskKind::sinusoid) {
    c.amplitude = rng.uniform(0.1, 5.0);
    c.phase = rng.uniform(0.0, std::numbers::pi);
    return intern(std::move(c));
  }
  const int ways = cfg_.ways;
  if (family == Family::ood_targets) {
    c.class_subset = random_subset(cfg_.pools.n_styles, ways, rng);
    c.nuisance_subset = random_subset(static_cast<int>(pools_->pretrain.rows()), ways, rng);
  } else {
    c.class_subset = random_subset(static_cast<int>(pools_->of(family).rows()), ways, rng);
  }
  c.label_map.resize(static_cast<std::size_t>(ways));
  for (int i = 0; i < ways; ++i) c.label_map[static_cast<std::size_t>(i)] = i;
  rng.shuffle(c.label_map);
  return intern(std::move(c));
}

const ContextSpec& ContextSampler::intern(ContextSpec spec) {
  std::vector<double> key{static_cast<double>(spec.family), spec.amplitude, spec.phase};
  key.insert(key.end(), spec.class_subset.begin(), spec.class_subset.end());
  key.insert(key.end(), spec.label_map.begin(), spec.label_map.end());
  key.insert(key.end(), spec.nuisance_subset.begin(), spec.nuisance_subset.end());
  const auto [it, inserted] = index_.try_emplace(std::move(key), static_cast<int>(contexts_.size()));
  if (inserted) {
    spec.id = it->second;
    contexts_.push_back(std::move(spec));
  }
  return contexts_[static_cast<std::size_t>(it->second)];
}

int ContextSampler::next_context(std::optional<int> prev, Rng& rng) {
  if (fixed_.empty()) {
    if (prev && rng.bernoulli(cfg_.alpha)) return *prev;
    return draw_fresh(rng).id;
  }
  const int n = static_cast<int>(fixed_.size());
  if (!prev) return fixed_[static_cast<std::size_t>(rng.uniform_int(n))];
  if (n == 1 || rng.bernoulli(cfg_.alpha)) return *prev;
  const auto pos = static_cast<int>(std::find(fixed_.begin(), fixed_.end(), *prev) - fixed_.begin());
  int j = rng.uniform_int(n - 1);
  if (j >= pos) ++j;
  return fixed_[static_cast<std::size_t>(j)];
}

// -- sampling ----------------------------------------------------------------

namespace {

void fill_example(const ContextSpec& ctx, const Pools& pools, const StreamConfig& cfg, int position, Batch& b,
                  Eigen::Index row, Rng& rng) {
  const int cls = ctx.class_subset[static_cast<std::size_t>(position)];
  int proto_id, style_id;
  if (ctx.family == Family::ood_targets) {
    style_id = cls;
    proto_id = ctx.nuisance_subset[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(ctx.nuisance_subset.size())))];
  } else {
    proto_id = cls;
    style_id = rng.uniform_int(static_cast<int>(pools.styles.rows()));
  }
  const auto& proto = pools.of(ctx.family).row(proto_id);
  const auto& style = pools.styles.row(style_id);
  for (int j = 0; j < cfg.dim; ++j) b.x(row, j) = proto(j) + style(j) + ctx.noise * rng.normal();
  b.labels[static_cast<std::size_t>(row)] = ctx.label_map[static_cast<std::size_t>(position)];
}

Batch sinusoid_batch(const ContextSpec& ctx, const StreamConfig& cfg, int n, Rng& rng) {
  Batch b;
  b.x.resize(n, 1);
  b.targets.resize(n, 1);
  const double shift = ctx.family == Family::ood_inputs ? 2.5 * cfg.pools.mu_shift : 0.0;
  const double sign = ctx.family == Family::ood_targets ? -1.0 : 1.0;
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform(-5.0, 5.0) + shift;
    b.x(i, 0) = x;
    b.targets(i, 0) = sign * ctx.amplitude * std::sin(x + ctx.phase) + ctx.noise * rng.normal();
  }
  return b;
}

// Class positions for n examples: i.i.d. uniform, or every class n / ways
// times plus a random distinct remainder, in shuffled order.
std::vector<int> class_positions(int n, int ways, bool balanced, Rng& rng) {
  std::vector<int> pos(static_cast<std::size_t>(n));
  if (!balanced) {
    for (auto& p : pos) p = rng.uniform_int(ways);
    return pos;
  }
  const int full = n - n % ways;
  for (int i = 0; i < full; ++i) pos[static_cast<std::size_t>(i)] = i % ways;
  if (full < n) {
    std::vector<int> classes(static_cast<std::size_t>(ways));
    std::iota(classes.begin(), classes.end(), 0);
    rng.shuffle(classes);
    std::copy(classes.begin(), classes.begin() + (n - full), pos.begin() + full);
  }
  rng.shuffle(pos);
  return pos;
}

Batch draw_batch(const ContextSpec& ctx, const Pools& pools, const StreamConfig& cfg, int n, Rng& rng) {
  if (cfg.task == TaskKind::sinusoid) return sinusoid_batch(ctx, cfg, n, rng);
  Batch b;
  b.x.resize(n, cfg.dim);
  b.labels.resize(static_cast<std::size_t>(n));
  const std::vector<int> pos = class_positions(n, static_cast<int>(ctx.class_subset.size()), cfg.balanced, rng);
  for (int i = 0; i < n; ++i) fill_example(ctx, pools, cfg, pos[static_cast<std::size_t>(i)], b, i, rng);
  return b;
}

}  // namespace

StepBatch sample_step(const ContextSpec& ctx, const Pools& pools, const StreamConfig& cfg, Rng& rng) {
  StepBatch s;
  s.batch = draw_batch(ctx, pools, cfg, cfg.samples_per_step, rng);
  s.context_id = ctx.id;
  s.family = ctx.family;
  return s;
}

PretrainEpisode pretrain_episode(ContextSampler& sampler, const Pools& pools, const StreamConfig& cfg, int batch_size,
                                 int shots, Rng& rng) {
  if (shots < 1 || shots >= cfg.samples_per_step)
    throw ContractError("pretrain_episode: shots must lie in [1, samples_per_step)");
  if (batch_size < 1) throw ContractError("pretrain_episode: batch size must be >= 1");
  PretrainEpisode ep;
  for (int i = 0; i < batch_size; ++i) {
    PretrainTask task;
    task.context = sampler.draw_fresh(Family::pretrain, rng);
    task.support = draw_batch(task.context, pools, cfg, shots, rng);
    task.query = draw_batch(task.context, pools, cfg, cfg.samples_per_step - shots, rng);
    ep.tasks.push_back(std::move(task));
  }
  return ep;
}

// -- episodes ----------------------------------------------------------------

Stream::Stream(const StreamConfig& cfg, const Pools& pools)
    : cfg_(cfg),
      pools_(&pools),
      sampler_(cfg, pools),
      context_rng_(Rng::derive(cfg.seed, 0x63747874)),
      sample_rng_(Rng::derive(cfg.seed, 0x64617461)) {
  boundaries_.reserve(static_cast<std::size_t>(cfg.episode_length));
  ids_.reserve(static_cast<std::size_t>(cfg.episode_length));
}

StepBatch Stream::next() {
  if (done()) throw ContractError("stream exhausted");
  const int id = sampler_.next_context(current_, context_rng_);
  boundaries_.push_back(current_.has_value() && *current_ != id);
  ids_.push_back(id);
  current_ = id;
  StepBatch s = sample_step(sampler_.context(id), *pools_, cfg_, sample_rng_);
  s.t = t_++;
  return s;
}

std::string ground_truth_csv(const StreamConfig& cfg, const Pools& pools) {
  Stream stream(cfg, pools);
  std::ostringstream out;
  out << "t,context_id,is_boundary\n";
  while (!stream.done()) {
    const StepBatch s = stream.next();
    out << s.t << ',' << s.context_id << ',' << (stream.true_boundaries().back() ? 1 : 0) << '\n';
  }
  return out.str();
}

}  // namespace osaka
