#include "osaka/algorithms.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "osaka/errors.hpp"
#include "osaka/json_util.hpp"

namespace osaka {

// -- optimizers --------------------------------------------------------------

Vector adam_step(AdamState& s, const Vector& params, const Vector& grads, double lr) {
  if (params.size() != grads.size()) throw DimensionError("adam_step: parameter and gradient sizes differ");
  if (!grads.allFinite()) throw StepError("adam_step: non-finite gradient");
  if (s.m.size() == 0) {
    s.m = Vector::Zero(params.size());
    s.v = Vector::Zero(params.size());
  }
  if (s.m.size() != params.size()) throw DimensionError("adam_step: state was built for a different parameter count");
  ++s.step;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grads;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grads.cwiseProduct(grads);
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  const Vector m_hat = s.m / c1;
  const Vector v_hat = s.v / c2;
  return params.array() - lr * m_hat.array() / (v_hat.array().sqrt() + s.eps);
}

double update_modulation(double loss, double lambda, double slope) {
  if (!(lambda > 0.0)) throw ContractError("update_modulation: lambda must be > 0");
  return 1.0 / (1.0 + std::exp(-slope * (loss - lambda)));
}

BgdState make_bgd_state(const Vector& mu, double sigma0, int mc_samples, double beta) {
  if (mc_samples < 1) throw ContractError("bgd: mc_samples must be >= 1");
  if (!(sigma0 > 0.0)) throw ContractError("bgd: sigma0 must be > 0");
  return BgdState{mu, Vector::Constant(mu.size(), sigma0), mc_samples, beta};
}

void bgd_step(BgdState& s, const GradFn& grad_fn, Rng& rng) {
  if (s.mc_samples < 1) throw ContractError("bgd_step: mc_samples must be >= 1");
  const Eigen::Index n = s.mu.size();
  Vector e_g = Vector::Zero(n), e_ge = Vector::Zero(n);
  Vector eps(n);
  for (int k = 0; k < s.mc_samples; ++k) {
    for (Eigen::Index i = 0; i < n; ++i) eps(i) = rng.normal();
    const Vector g = grad_fn(s.mu + s.sigma.cwiseProduct(eps));
    if (g.size() != n) throw DimensionError("bgd_step: gradient has the wrong size");
    e_g += g;
    e_ge += g.cwiseProduct(eps);
  }
  e_g /= s.mc_samples;
  e_ge /= s.mc_samples;
  if (!e_g.allFinite() || !e_ge.allFinite()) throw StepError("bgd_step: non-finite expectation");
  s.mu -= s.beta * s.sigma.cwiseProduct(s.sigma).cwiseProduct(e_g);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double half = 0.5 * s.sigma(i) * e_ge(i);
    const double next = s.sigma(i) * std::sqrt(std::max(0.0, 1.0 + half)) - half;
    s.sigma(i) = std::max(next, kMinSigma);
  }
}

// -- helpers -----------------------------------------------------------------

namespace {

struct LossGrad {
  double loss;
  double accuracy;
  Vector grad;
};

LossGrad loss_and_gradient(const ModelParams& p, const Batch& b, LossKind kind) {
  nd::Tape tape;
  const TrackedParams t = track(tape, p);
  const nd::Tensor out = forward(t, nd::Tensor(b.x));
  const nd::Tensor loss = batch_loss(out, b, kind);
  return {loss.item(), accuracy(out.value(), b, kind), flat_gradient(loss, t)};
}

StepDiagnostics score(const ModelParams& p, const Batch& b, LossKind kind) {
  const Matrix out = forward(p, b.x);
  StepDiagnostics d;
  d.loss = loss_value(out, b, kind);
  d.accuracy = accuracy(out, b, kind);
  return d;
}

nd::GradMode mode_of(bool first_order) { return first_order ? nd::GradMode::first_order : nd::GradMode::exact; }

LossKind loss_kind(const StreamConfig& s) {
  return s.task == TaskKind::sinusoid ? LossKind::mse : LossKind::cross_entropy;
}

}  // namespace

// -- meta-training -----------------------------------------------------------

PretrainConfig pretrain_config_from_json(const nlohmann::json& j) {
  const std::string where = "pretrain";
  jsonu::check_keys(j, {"epochs", "iterations_per_epoch", "batch_size", "shots", "outer_lr", "inner_steps",
                        "first_order", "head_only", "freeze_inner_lr", "seed"},
                    where);
  PretrainConfig c;
  c.epochs = jsonu::get_or(j, "epochs", c.epochs, where);
  c.iterations_per_epoch = jsonu::get_or(j, "iterations_per_epoch", c.iterations_per_epoch, where);
  c.batch_size = jsonu::get_or(j, "batch_size", c.batch_size, where);
  c.shots = jsonu::get_or(j, "shots", c.shots, where);
  c.outer_lr = jsonu::get_or(j, "outer_lr", c.outer_lr, where);
  c.inner_steps = jsonu::get_or(j, "inner_steps", c.inner_steps, where);
  c.first_order = jsonu::get_or(j, "first_order", c.first_order, where);
  c.head_only = jsonu::get_or(j, "head_only", c.head_only, where);
  c.freeze_inner_lr = jsonu::get_or(j, "freeze_inner_lr", c.freeze_inner_lr, where);
  c.seed = jsonu::get_or(j, "seed", c.seed, where);
  if (c.epochs < 0 || c.iterations_per_epoch < 1 || c.batch_size < 1 || c.shots < 1 || c.inner_steps < 1 ||
      !(c.outer_lr >= 0.0))
    throw ConfigError("pretrain: counts must be positive and outer_lr >= 0");
  return c;
}

nlohmann::json to_json(const PretrainConfig& c) {
  return {{"epochs", c.epochs},           {"iterations_per_epoch", c.iterations_per_epoch},
          {"batch_size", c.batch_size},   {"shots", c.shots},
          {"outer_lr", c.outer_lr},       {"inner_steps", c.inner_steps},
          {"first_order", c.first_order}, {"head_only", c.head_only},
          {"freeze_inner_lr", c.freeze_inner_lr}, {"seed", c.seed}};
}

PretrainResult pretrain_maml(const NetSpec& spec, const StreamConfig& stream, const Pools& pools,
                             const PretrainConfig& cfg) {
  PretrainResult result{init_params(spec), {}};
  ModelParams& phi = result.params;
  ContextSampler sampler(stream, pools);
  Rng rng = Rng::derive(cfg.seed, 0x7072652d);
  AdamState adam;
  const AdaptOptions opts{cfg.inner_steps, cfg.head_only, mode_of(cfg.first_order), loss_kind(stream)};

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    for (int it = 0; it < cfg.iterations_per_epoch; ++it) {
      const PretrainEpisode ep = pretrain_episode(sampler, pools, stream, cfg.batch_size, cfg.shots, rng);
      nd::Tape tape;
      const TrackedParams phi_t = track(tape, phi);
      nd::Tensor meta;
      TrackedParams adapted;
      try {
        for (const PretrainTask& task : ep.tasks) {
          adapted = inner_adapt(phi_t, task.support, opts);
          const nd::Tensor q = batch_loss(forward(adapted, nd::Tensor(task.query.x)), task.query, opts.loss);
          meta = meta.size() == 0 ? q : nd::add(meta, q);
        }
      } catch (const Error& e) {
        throw TrainingError(static_cast<std::size_t>(epoch), e.what());
      }
      meta = nd::scale(meta, 1.0 / static_cast<double>(ep.tasks.size()));
      const double value = meta.item();
      if (!std::isfinite(value) || value > 1e3)
        throw TrainingError(static_cast<std::size_t>(epoch), "meta-loss diverged (" + std::to_string(value) + ")");
      total += value;
      Vector grad;
      try {
        grad = meta_gradient(meta, phi_t, adapted, opts.mode);
      } catch (const NonFiniteError& e) {
        throw TrainingError(static_cast<std::size_t>(epoch), e.what());
      }
      const Vector frozen = phi.log_inner_lr;
      unflatten(phi, adam_step(adam, flatten(phi), grad, cfg.outer_lr));
      if (cfg.freeze_inner_lr) phi.log_inner_lr = frozen;
    }
    result.epoch_losses.push_back(total / cfg.iterations_per_epoch);
  }
  return result;
}

double post_adaptation_accuracy(const ModelParams& params, const StreamConfig& stream, const Pools& pools, int tasks,
                                int shots, const AdaptOptions& opts, std::uint64_t seed) {
  if (tasks < 1) throw ContractError("post_adaptation_accuracy: tasks must be >= 1");
  ContextSampler sampler(stream, pools);
  Rng rng = Rng::derive(seed, 0x6576616c);
  double hits = 0.0;
  for (int i = 0; i < tasks; ++i) {
    const PretrainEpisode ep = pretrain_episode(sampler, pools, stream, 1, shots, rng);
    const PretrainTask& task = ep.tasks[0];
    const ModelParams theta = inner_adapt(params, task.support, opts);
    hits += accuracy(forward(theta, task.query.x), task.query, opts.loss);
  }
  return hits / tasks;
}

// -- learner configuration -----------------------------------------------------

namespace {

const std::vector<std::string> kKinds{"online_adam", "fine_tuning", "maml", "anil",
                                      "bgd",         "meta_bgd",    "cmaml", "cmaml_no_pap"};

double parse_gamma(const nlohmann::json& v) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    if (s == "inf" || s == "+inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
  }
  throw ConfigError("learner: gamma must be a number, \"inf\" or \"-inf\"");
}

}  // namespace

bool requires_checkpoint(const std::string& kind) {
  return kind == "fine_tuning" || kind == "maml" || kind == "anil" || kind == "meta_bgd";
}

void validate(const LearnerConfig& c) {
  if (std::find(kKinds.begin(), kKinds.end(), c.kind) == kKinds.end())
    throw ConfigError("unknown learner kind '" + c.kind + "'");
  if (!(c.eta >= 0.0)) throw ConfigError("learner: eta must be >= 0");
  if (!(c.inner_lr_init >= 0.0)) throw ConfigError("learner: inner_lr_init must be >= 0");
  if (c.inner_steps < 1) throw ConfigError("learner: inner_steps must be >= 1");
  if (!(c.gamma > 0.0 || std::isinf(c.gamma))) throw ConfigError("learner: gamma must be > 0 (or +/-inf)");
  if (!(c.lambda > 0.0)) throw ConfigError("learner: lambda must be > 0");
  if (!(c.slope > 0.0)) throw ConfigError("learner: slope must be > 0");
  if (c.mc_samples < 1) throw ConfigError("learner: mc_samples must be >= 1");
  if (!(c.beta > 0.0)) throw ConfigError("learner: beta must be > 0");
  if (!(c.sigma0 > 0.0)) throw ConfigError("learner: sigma0 must be > 0");
}

LearnerConfig learner_config_from_json(const nlohmann::json& j) {
  const std::string where = "learner";
  jsonu::check_keys(j, {"kind", "name", "eta", "inner_lr_init", "inner_steps", "gamma", "lambda", "slope",
                        "first_order", "mc_samples", "beta", "sigma0", "pretrain_checkpoint", "um", "pap",
                        "batch_size"},
                    where);
  LearnerConfig c;
  c.kind = jsonu::get_or(j, "kind", c.kind, where);
  c.name = jsonu::get_or(j, "name", c.name, where);
  c.eta = jsonu::get_or(j, "eta", c.eta, where);
  c.inner_lr_init = jsonu::get_or(j, "inner_lr_init", c.inner_lr_init, where);
  c.inner_steps = jsonu::get_or(j, "inner_steps", c.inner_steps, where);
  if (j.contains("gamma")) c.gamma = parse_gamma(j.at("gamma"));
  c.lambda = jsonu::get_or(j, "lambda", c.lambda, where);
  c.slope = jsonu::get_or(j, "slope", c.slope, where);
  c.first_order = jsonu::get_or(j, "first_order", c.first_order, where);
  c.mc_samples = jsonu::get_or(j, "mc_samples", c.mc_samples, where);
  c.beta = jsonu::get_or(j, "beta", c.beta, where);
  c.sigma0 = jsonu::get_or(j, "sigma0", c.sigma0, where);
  c.pretrain_checkpoint = jsonu::get_or(j, "pretrain_checkpoint", c.pretrain_checkpoint, where);
  c.um = jsonu::get_or(j, "um", c.um, where);
  c.pap = jsonu::get_or(j, "pap", c.pap, where);
  c.batch_size = jsonu::get_or(j, "batch_size", c.batch_size, where);
  validate(c);
  return c;
}

nlohmann::json to_json(const LearnerConfig& c) {
  nlohmann::json j{{"kind", c.kind},
                   {"eta", c.eta},
                   {"inner_lr_init", c.inner_lr_init},
                   {"inner_steps", c.inner_steps},
                   {"lambda", c.lambda},
                   {"slope", c.slope},
                   {"first_order", c.first_order},
                   {"mc_samples", c.mc_samples},
                   {"beta", c.beta},
                   {"sigma0", c.sigma0},
                   {"um", c.um},
                   {"pap", c.pap}};
  if (std::isinf(c.gamma))
    j["gamma"] = c.gamma > 0 ? "inf" : "-inf";
  else
    j["gamma"] = c.gamma;
  if (!c.name.empty()) j["name"] = c.name;
  if (!c.pretrain_checkpoint.empty()) j["pretrain_checkpoint"] = c.pretrain_checkpoint;
  if (c.batch_size > 0) j["batch_size"] = c.batch_size;
  return j;
}

std::unique_ptr<Learner> make_learner(const LearnerConfig& cfg, const std::optional<ModelParams>& checkpoint,
                                      NetSpec net, LossKind loss, std::uint64_t seed) {
  validate(cfg);
  if (requires_checkpoint(cfg.kind) && !checkpoint)
    throw ConfigError("learner '" + cfg.display_name() + "' (" + cfg.kind + ") needs a pre-trained checkpoint");
  if (cfg.kind == "online_adam" && checkpoint)
    throw ConfigError("online_adam trains from scratch; use fine_tuning with a checkpoint");
  if (checkpoint &&
      (checkpoint->spec.input_dim != net.input_dim || checkpoint->spec.output_dim != net.output_dim))
    throw ConfigError("checkpoint dimensions do not match the stream");
  net.seed = Rng::derive(seed, 0x6e6574).engine()();
  net.inner_lr_init = cfg.inner_lr_init;
  const ModelParams init = checkpoint ? *checkpoint : init_params(net);
  const std::uint64_t learner_seed = Rng::derive(seed, 0x6c726e).engine()();
  const AdaptOptions opts{cfg.inner_steps, cfg.kind == "anil", mode_of(cfg.first_order), loss};

  if (cfg.kind == "online_adam" || cfg.kind == "fine_tuning") return std::make_unique<AdamLearner>(init, cfg.eta, loss);
  if (cfg.kind == "maml" || cfg.kind == "anil") return std::make_unique<MamlLearner>(init, opts);
  if (cfg.kind == "bgd")
    return std::make_unique<BgdLearner>(init, cfg.sigma0, cfg.mc_samples, cfg.beta, loss, learner_seed);
  if (cfg.kind == "meta_bgd") {
    AdaptOptions fo = opts;
    fo.mode = nd::GradMode::first_order;
    return std::make_unique<MetaBgdLearner>(init, cfg.sigma0, cfg.mc_samples, cfg.beta, fo, learner_seed);
  }
  CmamlConfig cc;
  cc.eta = cfg.eta;
  cc.inner_steps = cfg.inner_steps;
  cc.gamma = cfg.gamma;
  cc.lambda = cfg.lambda;
  cc.slope = cfg.slope;
  cc.first_order = cfg.first_order;
  cc.um = cfg.um;
  cc.loss = loss;
  return std::make_unique<CmamlLearner>(init, cc, cfg.kind == "cmaml" && cfg.pap, learner_seed);
}

// -- baselines -----------------------------------------------------------------

AdamLearner::AdamLearner(ModelParams init, double lr, LossKind loss)
    : params_(std::move(init)), lr_(lr), loss_(loss) {}

Matrix AdamLearner::predict(const Matrix& x) const { return forward(params_, x); }

StepDiagnostics AdamLearner::update(const Batch& batch) {
  const LossGrad lg = loss_and_gradient(params_, batch, loss_);
  const Eigen::Index nw = params_.weight_count();
  Vector flat = flatten(params_);
  flat.head(nw) = adam_step(adam_, flat.head(nw), lg.grad.head(nw), lr_);
  unflatten(params_, flat);
  StepDiagnostics d;
  d.loss = lg.loss;
  d.accuracy = lg.accuracy;
  return d;
}

MamlLearner::MamlLearner(ModelParams phi, AdaptOptions opts) : phi_(std::move(phi)), theta_(phi_), opts_(opts) {}

Matrix MamlLearner::predict(const Matrix& x) const { return forward(theta_, x); }

StepDiagnostics MamlLearner::update(const Batch& batch) {
  const StepDiagnostics d = score(theta_, batch, opts_.loss);
  theta_ = inner_adapt(phi_, batch, opts_);
  return d;
}

BgdLearner::BgdLearner(ModelParams init, double sigma0, int mc_samples, double beta, LossKind loss,
                       std::uint64_t seed)
    : shape_(std::move(init)), loss_(loss), rng_(seed) {
  bgd_ = make_bgd_state(flatten(shape_).head(shape_.weight_count()), sigma0, mc_samples, beta);
}

ModelParams BgdLearner::mean_params() const {
  ModelParams p = shape_;
  Vector flat = flatten(p);
  flat.head(bgd_.mu.size()) = bgd_.mu;
  unflatten(p, flat);
  return p;
}

Matrix BgdLearner::predict(const Matrix& x) const { return forward(mean_params(), x); }

StepDiagnostics BgdLearner::update(const Batch& batch) {
  const StepDiagnostics d = score(mean_params(), batch, loss_);
  ModelParams scratch = shape_;
  Vector flat = flatten(scratch);
  const Eigen::Index nw = bgd_.mu.size();
  bgd_step(
      bgd_,
      [&](const Vector& w) {
        flat.head(nw) = w;
        unflatten(scratch, flat);
        return Vector(loss_and_gradient(scratch, batch, loss_).grad.head(nw));
      },
      rng_);
  return d;
}

MetaBgdLearner::MetaBgdLearner(ModelParams init, double sigma0, int mc_samples, double beta, AdaptOptions opts,
                               std::uint64_t seed)
    : shape_(std::move(init)), opts_(opts), theta_(shape_), rng_(seed) {
  bgd_ = make_bgd_state(flatten(shape_).head(shape_.weight_count()), sigma0, mc_samples, beta);
}

ModelParams MetaBgdLearner::with_weights(const Vector& w) const {
  ModelParams p = shape_;
  Vector flat = flatten(p);
  flat.head(w.size()) = w;
  unflatten(p, flat);
  return p;
}

Matrix MetaBgdLearner::predict(const Matrix& x) const { return forward(theta_, x); }

StepDiagnostics MetaBgdLearner::update(const Batch& batch) {
  const StepDiagnostics d = score(theta_, batch, opts_.loss);
  const Eigen::Index nw = bgd_.mu.size();
  bgd_step(
      bgd_,
      [&](const Vector& w) {
        ModelParams p = with_weights(w);
        // first-order: the gradient at the adapted weights stands in for the one at phi
        if (previous_) p = inner_adapt(p, *previous_, opts_);
        return Vector(loss_and_gradient(p, batch, opts_.loss).grad.head(nw));
      },
      rng_);
  theta_ = inner_adapt(with_weights(bgd_.mu), batch, opts_);
  previous_ = batch;
  return d;
}

// -- Continual-MAML ------------------------------------------------------------

CmamlState make_cmaml_state(ModelParams phi, std::uint64_t seed) {
  CmamlState s{phi, phi, {}, {}, std::nullopt, Rng(seed)};
  return s;
}

namespace {

AdaptOptions adapt_options(const CmamlConfig& c) {
  return AdaptOptions{c.inner_steps, false, mode_of(c.first_order), c.loss};
}

void apply_slow_update(CmamlState& s, const CmamlConfig& c, const Vector& grad, double gate) {
  unflatten(s.phi, adam_step(s.adam, flatten(s.phi), grad, c.eta * gate));
}

}  // namespace

bool boundary_detected(double incurred_loss, double fresh_loss, double gamma) {
  if (std::isinf(gamma)) return gamma < 0;
  return !(incurred_loss - fresh_loss < gamma);
}

StepDiagnostics cmaml_step(CmamlState& s, const CmamlConfig& c, const Batch& batch) {
  const AdaptOptions opts = adapt_options(c);
  StepDiagnostics d = score(s.theta, batch, c.loss);

  double virtual_loss = 0.0;
  if (!std::isinf(c.gamma))
    virtual_loss = loss_value(forward(inner_adapt(s.phi, batch, opts), batch.x), batch, c.loss);
  const bool shift = boundary_detected(d.loss, virtual_loss, c.gamma);

  if (!shift) {
    AdaptOptions one = opts;
    one.steps = 1;
    s.theta = inner_adapt(s.theta, batch, one);
    s.buffer.push_back(batch);
    return d;
  }

  d.detected_boundary = true;
  const Batch pool = concat(s.buffer);
  const auto n = static_cast<int>(pool.size());
  if (n >= 2) {
    std::vector<int> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), 0);
    s.rng.shuffle(rows);
    const int n_train = std::clamp(static_cast<int>(std::lround(c.split_fraction * n)), 1, n - 1);
    const Batch train = select_rows(pool, std::vector<int>(rows.begin(), rows.begin() + n_train));
    const Batch test = select_rows(pool, std::vector<int>(rows.begin() + n_train, rows.end()));

    nd::Tape tape;
    const TrackedParams phi_t = track(tape, s.phi);
    const TrackedParams adapted = inner_adapt(phi_t, train, opts);
    const nd::Tensor outer = batch_loss(forward(adapted, nd::Tensor(test.x)), test, c.loss);
    const double gate = c.um ? update_modulation(outer.item(), c.lambda, c.slope) : 1.0;
    d.modulation = gate;
    apply_slow_update(s, c, meta_gradient(outer, phi_t, adapted, opts.mode), gate);
  }
  s.buffer.clear();
  s.theta = inner_adapt(s.phi, batch, opts);
  return d;
}

StepDiagnostics cmaml_no_pap_step(CmamlState& s, const CmamlConfig& c, const Batch& batch) {
  const AdaptOptions opts = adapt_options(c);
  StepDiagnostics d = score(s.theta, batch, c.loss);
  const ModelParams reset = inner_adapt(s.phi, batch, opts);

  const bool boundary = boundary_detected(
      d.loss, std::isinf(c.gamma) ? 0.0 : loss_value(forward(reset, batch.x), batch, c.loss), c.gamma);

  if (!boundary) {
    const double gate = c.um ? update_modulation(d.loss, c.lambda, c.slope) : 1.0;
    d.modulation = gate;
    nd::Tape tape;
    const TrackedParams phi_t = track(tape, s.phi);
    Vector grad;
    if (s.previous) {
      const TrackedParams adapted = inner_adapt(phi_t, *s.previous, opts);
      const nd::Tensor outer = batch_loss(forward(adapted, nd::Tensor(batch.x)), batch, c.loss);
      grad = meta_gradient(outer, phi_t, adapted, opts.mode);
    } else {
      grad = flat_gradient(batch_loss(forward(phi_t, nd::Tensor(batch.x)), batch, c.loss), phi_t);
    }
    apply_slow_update(s, c, grad, gate);
  }
  d.detected_boundary = boundary;
  s.theta = reset;
  s.previous = batch;
  return d;
}

CmamlLearner::CmamlLearner(ModelParams phi, CmamlConfig cfg, bool pap, std::uint64_t seed)
    : state_(make_cmaml_state(std::move(phi), seed)), cfg_(cfg), pap_(pap) {}

Matrix CmamlLearner::predict(const Matrix& x) const { return forward(state_.theta, x); }

StepDiagnostics CmamlLearner::update(const Batch& batch) {
  return pap_ ? cmaml_step(state_, cfg_, batch) : cmaml_no_pap_step(state_, cfg_, batch);
}

}  // namespace osaka
