#include "osaka/models.hpp"

#include <cmath>

#include "osaka/errors.hpp"
#include "osaka/rng.hpp"

namespace osaka {

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + s + "' (expected relu or tanh)");
}

int NetSpec::layer_in(std::size_t l) const { return l == 0 ? input_dim : hidden_dims[l - 1]; }

int NetSpec::layer_out(std::size_t l) const { return l == hidden_dims.size() ? output_dim : hidden_dims[l]; }

void validate(const NetSpec& spec) {
  if (spec.input_dim < 1 || spec.output_dim < 1) throw ConfigError("network dimensions must be >= 1");
  for (int h : spec.hidden_dims)
    if (h < 1) throw ConfigError("hidden dimensions must be >= 1");
  if (!(spec.inner_lr_init >= 0.0)) throw ConfigError("inner_lr_init must be >= 0");
}

Eigen::Index ModelParams::weight_count() const {
  Eigen::Index n = 0;
  for (const Layer& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

double ModelParams::inner_lr(std::size_t layer) const { return std::exp(log_inner_lr(static_cast<Eigen::Index>(lr_index(layer)))); }

ModelParams init_params(const NetSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  ModelParams p;
  p.spec = spec;
  for (std::size_t l = 0; l < spec.num_layers(); ++l) {
    const int in = spec.layer_in(l), out = spec.layer_out(l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Layer layer{Matrix(in, out), RowVector::Zero(out)};
    for (int i = 0; i < in; ++i)
      for (int j = 0; j < out; ++j) layer.weight(i, j) = rng.uniform(-bound, bound);
    p.layers.push_back(std::move(layer));
  }
  p.log_inner_lr = Vector::Constant(static_cast<Eigen::Index>(spec.num_inner_lrs()), std::log(spec.inner_lr_init));
  return p;
}

namespace {

void apply_activation(Matrix& h, Activation a) {
  if (a == Activation::relu)
    h = h.cwiseMax(0.0);
  else
    h = h.array().tanh().matrix();
}

}  // namespace

Matrix forward(const ModelParams& params, const Matrix& x) {
  if (x.cols() != params.spec.input_dim)
    throw DimensionError("forward: input has " + std::to_string(x.cols()) + " features, network expects " +
                         std::to_string(params.spec.input_dim));
  Matrix h = x;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    Matrix z = h * params.layers[l].weight;
    z.rowwise() += params.layers[l].bias;
    if (l + 1 < params.layers.size()) apply_activation(z, params.spec.activation);
    h = std::move(z);
  }
  return h;
}

Vector flatten(const ModelParams& params) {
  Vector flat(params.size());
  Eigen::Index k = 0;
  for (const Layer& l : params.layers) {
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) flat(k++) = l.weight(i, j);
    for (Eigen::Index j = 0; j < l.bias.size(); ++j) flat(k++) = l.bias(j);
  }
  for (Eigen::Index i = 0; i < params.log_inner_lr.size(); ++i) flat(k++) = params.log_inner_lr(i);
  return flat;
}

void unflatten(ModelParams& params, const Vector& flat) {
  if (flat.size() != params.size())
    throw DimensionError("unflatten: " + std::to_string(flat.size()) + " values for " +
                         std::to_string(params.size()) + " parameters");
  Eigen::Index k = 0;
  for (Layer& l : params.layers) {
    for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
      for (Eigen::Index j = 0; j < l.weight.cols(); ++j) l.weight(i, j) = flat(k++);
    for (Eigen::Index j = 0; j < l.bias.size(); ++j) l.bias(j) = flat(k++);
  }
  for (Eigen::Index i = 0; i < params.log_inner_lr.size(); ++i) params.log_inner_lr(i) = flat(k++);
}

double param_distance(const ModelParams& a, const ModelParams& b) {
  if (!(a.spec.input_dim == b.spec.input_dim && a.spec.hidden_dims == b.spec.hidden_dims &&
        a.spec.output_dim == b.spec.output_dim && a.spec.shared_inner_lr == b.spec.shared_inner_lr))
    throw ContractError("param_distance: parameter specs differ");
  // Identical entries contribute nothing, including log(0) step sizes.
  const Vector fa = flatten(a), fb = flatten(b);
  return fa.binaryExpr(fb, [](double x, double y) { return x == y ? 0.0 : x - y; }).norm();
}

// -- losses ------------------------------------------------------------------

double loss_value(const Matrix& out, const Batch& batch, LossKind kind) {
  return batch_loss(nd::Tensor(out), batch, kind).item();
}

double accuracy(const Matrix& out, const Batch& batch, LossKind kind) {
  if (out.rows() == 0) throw DimensionError("accuracy: empty batch");
  double hits = 0.0;
  if (kind == LossKind::cross_entropy) {
    if (static_cast<Eigen::Index>(batch.labels.size()) != out.rows())
      throw DimensionError("accuracy: label count does not match predictions");
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
      Eigen::Index arg = 0;
      out.row(i).maxCoeff(&arg);
      if (arg == batch.labels[static_cast<std::size_t>(i)]) hits += 1.0;
    }
  } else {
    if (batch.targets.rows() != out.rows() || batch.targets.cols() != out.cols())
      throw DimensionError("accuracy: target shape does not match predictions");
    for (Eigen::Index i = 0; i < out.rows(); ++i)
      if ((out.row(i) - batch.targets.row(i)).cwiseAbs().maxCoeff() < 0.5) hits += 1.0;
  }
  return hits / static_cast<double>(out.rows());
}

nd::Tensor batch_loss(const nd::Tensor& out, const Batch& batch, LossKind kind) {
  if (kind == LossKind::cross_entropy) return nd::softmax_cross_entropy(out, batch.labels);
  return nd::mean_squared_error(out, batch.targets);
}

// -- tracked parameters ------------------------------------------------------

std::vector<nd::Tensor> TrackedParams::all() const {
  std::vector<nd::Tensor> v;
  v.reserve(weights.size() + biases.size() + log_lr.size());
  v.insert(v.end(), weights.begin(), weights.end());
  v.insert(v.end(), biases.begin(), biases.end());
  v.insert(v.end(), log_lr.begin(), log_lr.end());
  return v;
}

nd::Tensor TrackedParams::step_size(std::size_t layer) const {
  return nd::exp(log_lr[spec.shared_inner_lr ? 0 : layer]);
}

TrackedParams track(nd::Tape& tape, const ModelParams& params) {
  TrackedParams t;
  t.spec = params.spec;
  for (const Layer& l : params.layers) {
    t.weights.push_back(tape.parameter(l.weight));
    t.biases.push_back(tape.parameter(Matrix(l.bias)));
  }
  for (Eigen::Index i = 0; i < params.log_inner_lr.size(); ++i)
    t.log_lr.push_back(tape.parameter(Matrix::Constant(1, 1, params.log_inner_lr(i))));
  return t;
}

ModelParams values(const TrackedParams& params) {
  ModelParams p;
  p.spec = params.spec;
  for (std::size_t l = 0; l < params.weights.size(); ++l)
    p.layers.push_back(Layer{params.weights[l].value(), RowVector(params.biases[l].value().row(0))});
  p.log_inner_lr.resize(static_cast<Eigen::Index>(params.log_lr.size()));
  for (std::size_t i = 0; i < params.log_lr.size(); ++i)
    p.log_inner_lr(static_cast<Eigen::Index>(i)) = params.log_lr[i].item();
  return p;
}

nd::Tensor forward(const TrackedParams& params, const nd::Tensor& x) {
  if (x.cols() != params.spec.input_dim)
    throw DimensionError("forward: input has " + std::to_string(x.cols()) + " features, network expects " +
                         std::to_string(params.spec.input_dim));
  nd::Tensor h = x;
  const std::size_t n = params.weights.size();
  for (std::size_t l = 0; l < n; ++l) {
    h = nd::add_row(nd::matmul(h, params.weights[l]), params.biases[l]);
    if (l + 1 < n) h = params.spec.activation == Activation::relu ? nd::relu(h) : nd::tanh(h);
  }
  return h;
}

TrackedParams inner_adapt(const TrackedParams& phi, const Batch& batch, const AdaptOptions& opts) {
  if (opts.steps < 1) throw ContractError("inner_adapt: steps must be >= 1");
  TrackedParams theta = phi;
  const std::size_t n = phi.weights.size();
  const std::size_t first = opts.head_only ? n - 1 : 0;
  const nd::Tensor x(batch.x);
  for (int step = 0; step < opts.steps; ++step) {
    nd::Tensor loss;
    try {
      loss = batch_loss(forward(theta, x), batch, opts.loss);
    } catch (const NonFiniteError& e) {
      throw AdaptationError(static_cast<std::size_t>(step), e.what());
    }
    std::vector<nd::Tensor> moving, sizes;
    for (std::size_t l = first; l < n; ++l) {
      const nd::Tensor s = theta.step_size(l);
      moving.push_back(theta.weights[l]);
      sizes.push_back(s);
      moving.push_back(theta.biases[l]);
      sizes.push_back(s);
    }
    nd::UpdateRecord rec;
    try {
      rec = nd::gradient_step(loss, moving, sizes, opts.mode);
    } catch (const NonFiniteError& e) {
      throw AdaptationError(static_cast<std::size_t>(step), e.what());
    }
    for (std::size_t l = first, k = 0; l < n; ++l) {
      theta.weights[l] = rec.params[k++];
      theta.biases[l] = rec.params[k++];
    }
  }
  // A single first-order step anywhere in the chain makes the whole chain first order.
  if (phi.update_mode == nd::GradMode::first_order || opts.mode == nd::GradMode::first_order)
    theta.update_mode = nd::GradMode::first_order;
  else
    theta.update_mode = nd::GradMode::exact;
  return theta;
}

ModelParams inner_adapt(const ModelParams& phi, const Batch& batch, const AdaptOptions& opts) {
  nd::Tape tape;
  AdaptOptions first_order = opts;
  first_order.mode = nd::GradMode::first_order;
  return values(inner_adapt(track(tape, phi), batch, first_order));
}

namespace {

Vector flatten_grads(const TrackedParams& like, const std::vector<nd::Tensor>& grads) {
  const std::size_t n = like.weights.size();
  Eigen::Index total = 0;
  for (const auto& g : grads) total += g.size();
  Vector flat(total);
  Eigen::Index k = 0;
  auto put = [&](const nd::Tensor& g) {
    const Matrix& m = g.value();
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) flat(k++) = m(i, j);
  };
  for (std::size_t l = 0; l < n; ++l) {
    put(grads[l]);
    put(grads[n + l]);
  }
  for (std::size_t i = 2 * n; i < grads.size(); ++i) put(grads[i]);
  return flat;
}

}  // namespace

Vector flat_gradient(const nd::Tensor& loss, const TrackedParams& params) {
  return flatten_grads(params, nd::grad(loss, params.all()));
}

Vector meta_gradient(const nd::Tensor& outer_loss, const TrackedParams& phi, const TrackedParams& adapted,
                     nd::GradMode requested) {
  nd::UpdateRecord record;
  record.mode = adapted.update_mode.value_or(requested);
  const auto wrt = phi.all();
  return flatten_grads(phi, nd::backward_through_update(outer_loss, record, wrt, requested));
}

}  // namespace osaka
