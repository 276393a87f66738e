#include "sifg/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sifg/rng.hpp"

namespace sifg::nn {

namespace {

Eigen::Index chunk_count(Eigen::Index n) { return (n + kChunkSize - 1) / kChunkSize; }

// Repeat every column of m `times` times: [a b] -> [a a a b b b].
Matrix expand_columns(const Matrix& m, Eigen::Index times) {
  Matrix out(m.rows(), m.cols() * times);
  for (Eigen::Index i = 0; i < m.cols(); ++i) {
    out.middleCols(i * times, times) = m.col(i).replicate(1, times);
  }
  return out;
}

struct ForwardTrace {
  std::vector<Matrix> pre;   // pre[l] = W_l post[l] + b_l
  std::vector<Matrix> post;  // post[0] = input, post[l] = act(pre[l-1])
};

void forward_trace(const ScoreNet& net, const Matrix& x, ForwardTrace& trace) {
  const std::size_t depth = net.params.layers.size();
  trace.pre.resize(depth);
  trace.post.resize(depth);
  trace.post[0] = x;
  for (std::size_t l = 0; l < depth; ++l) {
    const DenseLayer& layer = net.params.layers[l];
    trace.pre[l].noalias() = layer.weight * trace.post[l];
    trace.pre[l].colwise() += layer.bias;
    if (l + 1 < depth) trace.post[l + 1] = net.activation.value(trace.pre[l]);
  }
}

// Accumulates the parameter gradient of sum_i <g_i, f(x_i)> into `grads`.
void backprop(const ScoreNet& net, const ForwardTrace& trace, Matrix g, ParamStore& grads) {
  for (std::size_t l = net.params.layers.size(); l-- > 0;) {
    grads.layers[l].weight.noalias() += g * trace.post[l].transpose();
    grads.layers[l].bias += g.rowwise().sum();
    if (l > 0) {
      Matrix upstream = net.params.layers[l].weight.transpose() * g;
      g = upstream.cwiseProduct(net.activation.derivative(trace.pre[l - 1]));
    }
  }
}

void check_batch(const ScoreNet& net, const Matrix& x) {
  if (x.cols() == 0) throw UsageError("empty batch");
  if (x.rows() != net.input_dim()) {
    throw ConfigError("batch dimension " + std::to_string(x.rows()) +
                      " does not match network input width " + std::to_string(net.input_dim()));
  }
}

// Evaluates `chunk_fn(begin, count, grads) -> partial loss` over fixed chunks
// and reduces in chunk order.
template <class ChunkFn>
LossAndGrad reduce_chunks(const ScoreNet& net, Eigen::Index n, ChunkFn&& chunk_fn) {
  const Eigen::Index chunks = chunk_count(n);
  std::vector<ParamStore> partial_grads(static_cast<std::size_t>(chunks));
  std::vector<double> partial_loss(static_cast<std::size_t>(chunks), 0.0);
#pragma omp parallel for schedule(static)
  for (Eigen::Index c = 0; c < chunks; ++c) {
    const Eigen::Index begin = c * kChunkSize;
    const Eigen::Index count = std::min(kChunkSize, n - begin);
    auto& g = partial_grads[static_cast<std::size_t>(c)];
    g = net.params.zeros_like();
    partial_loss[static_cast<std::size_t>(c)] = chunk_fn(begin, count, g);
  }
  LossAndGrad out{0.0, std::move(partial_grads[0])};
  out.loss = partial_loss[0];
  for (std::size_t c = 1; c < partial_grads.size(); ++c) {
    out.loss += partial_loss[c];
    out.grads += partial_grads[c];
  }
  return out;
}

}  // namespace

Matrix Activation::value(const Matrix& a) const {
  if (kind == ActivationKind::tanh) return a.array().tanh().matrix();
  return a.unaryExpr([s = slope](double v) { return v >= 0.0 ? v : s * v; });
}

Matrix Activation::derivative(const Matrix& a) const {
  if (kind == ActivationKind::tanh) {
    return a.unaryExpr([](double v) {
      const double t = std::tanh(v);
      return 1.0 - t * t;
    });
  }
  return a.unaryExpr([s = slope](double v) { return v >= 0.0 ? 1.0 : s; });
}

Matrix Activation::second_derivative(const Matrix& a) const {
  if (kind == ActivationKind::tanh) {
    return a.unaryExpr([](double v) {
      const double t = std::tanh(v);
      return -2.0 * t * (1.0 - t * t);
    });
  }
  return Matrix::Zero(a.rows(), a.cols());
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers) n += layer.weight.size() + layer.bias.size();
  return n;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore out;
  out.layers.reserve(layers.size());
  for (const auto& layer : layers) {
    out.layers.push_back({Matrix::Zero(layer.weight.rows(), layer.weight.cols()),
                          Vector::Zero(layer.bias.size())});
  }
  return out;
}

void ParamStore::set_zero() {
  for (auto& layer : layers) {
    layer.weight.setZero();
    layer.bias.setZero();
  }
}

bool ParamStore::all_finite() const {
  return std::all_of(layers.begin(), layers.end(), [](const DenseLayer& l) {
    return l.weight.allFinite() && l.bias.allFinite();
  });
}

Vector ParamStore::flatten() const {
  Vector flat(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index at = 0;
  for (const auto& layer : layers) {
    flat.segment(at, layer.weight.size()) = layer.weight.reshaped();
    at += layer.weight.size();
    flat.segment(at, layer.bias.size()) = layer.bias;
    at += layer.bias.size();
  }
  return flat;
}

void ParamStore::assign_flat(const Vector& flat) {
  if (flat.size() != static_cast<Eigen::Index>(parameter_count())) {
    throw UsageError("flat parameter vector has wrong length");
  }
  Eigen::Index at = 0;
  for (auto& layer : layers) {
    layer.weight.reshaped() = flat.segment(at, layer.weight.size());
    at += layer.weight.size();
    layer.bias = flat.segment(at, layer.bias.size());
    at += layer.bias.size();
  }
}

ParamStore& ParamStore::operator+=(const ParamStore& other) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].weight += other.layers[l].weight;
    layers[l].bias += other.layers[l].bias;
  }
  return *this;
}

std::vector<int> ScoreNet::layer_dims() const {
  std::vector<int> dims;
  if (params.layers.empty()) return dims;
  dims.push_back(static_cast<int>(params.layers.front().weight.cols()));
  for (const auto& layer : params.layers) dims.push_back(static_cast<int>(layer.weight.rows()));
  return dims;
}

int ScoreNet::input_dim() const {
  return params.layers.empty() ? 0 : static_cast<int>(params.layers.front().weight.cols());
}

int ScoreNet::output_dim() const {
  return params.layers.empty() ? 0 : static_cast<int>(params.layers.back().weight.rows());
}

void validate_layer_dims(std::span<const int> layer_dims) {
  if (layer_dims.size() < 2) throw ConfigError("layer_dims needs at least an input and an output width");
  for (int w : layer_dims) {
    if (w <= 0) throw ConfigError("layer widths must be positive");
  }
  if (layer_dims.front() != layer_dims.back()) {
    throw ConfigError("output width " + std::to_string(layer_dims.back()) +
                      " must equal input width " + std::to_string(layer_dims.front()));
  }
}

ScoreNet net_init(std::span<const int> layer_dims, Activation activation, std::uint64_t seed) {
  validate_layer_dims(layer_dims);
  ScoreNet net;
  net.activation = activation;
  rng::Stream stream(seed, rng::Purpose::net_init);
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
    const int fan_in = layer_dims[l];
    const int fan_out = layer_dims[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    DenseLayer layer{Matrix(fan_out, fan_in), Vector::Zero(fan_out)};
    for (Eigen::Index k = 0; k < layer.weight.size(); ++k) {
      layer.weight.data()[k] = bound * (2.0 * stream.uniform() - 1.0);
    }
    net.params.layers.push_back(std::move(layer));
  }
  return net;
}

Vector net_forward(const ScoreNet& net, const Vector& x) {
  Matrix batch = x;
  return net_forward_batch(net, batch).col(0);
}

Matrix net_forward_batch(const ScoreNet& net, const Matrix& x) {
  check_batch(net, x);
  Matrix out(net.output_dim(), x.cols());
  const Eigen::Index chunks = chunk_count(x.cols());
#pragma omp parallel for schedule(static)
  for (Eigen::Index c = 0; c < chunks; ++c) {
    const Eigen::Index begin = c * kChunkSize;
    const Eigen::Index count = std::min(kChunkSize, x.cols() - begin);
    ForwardTrace trace;
    forward_trace(net, x.middleCols(begin, count), trace);
    out.middleCols(begin, count) = trace.pre.back();
  }
  return out;
}

namespace {

// Forward pass carrying one tangent per input coordinate. Column i*d + j of
// the tangent matrices is the derivative of sample i along input axis j.
struct TangentTrace {
  ForwardTrace primal;
  std::vector<Matrix> tan_pre;   // d pre[l] / d x
  std::vector<Matrix> tan_post;  // d post[l] / d x, l >= 1
};

void tangent_trace(const ScoreNet& net, const Matrix& x, TangentTrace& t) {
  const std::size_t depth = net.params.layers.size();
  const Eigen::Index d = x.rows();
  const Eigen::Index c = x.cols();
  forward_trace(net, x, t.primal);
  t.tan_pre.resize(depth);
  t.tan_post.resize(depth);
  t.tan_pre[0] = net.params.layers[0].weight.replicate(1, c);
  for (std::size_t l = 1; l < depth; ++l) {
    t.tan_post[l] = t.tan_pre[l - 1].cwiseProduct(
        expand_columns(net.activation.derivative(t.primal.pre[l - 1]), d));
    t.tan_pre[l].noalias() = net.params.layers[l].weight * t.tan_post[l];
  }
}

Vector trace_of_tangent(const Matrix& tan_out, Eigen::Index d, Eigen::Index c) {
  Vector div(c);
  for (Eigen::Index i = 0; i < c; ++i) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) s += tan_out(j, i * d + j);
    div[i] = s;
  }
  return div;
}

}  // namespace

Vector net_divergence(const ScoreNet& net, const Matrix& x) {
  check_batch(net, x);
  const Eigen::Index d = x.rows();
  Vector div(x.cols());
  const Eigen::Index chunks = chunk_count(x.cols());
#pragma omp parallel for schedule(static)
  for (Eigen::Index c = 0; c < chunks; ++c) {
    const Eigen::Index begin = c * kChunkSize;
    const Eigen::Index count = std::min(kChunkSize, x.cols() - begin);
    TangentTrace t;
    tangent_trace(net, x.middleCols(begin, count), t);
    div.segment(begin, count) = trace_of_tangent(t.tan_pre.back(), d, count);
  }
  return div;
}

LossAndGrad dsm_loss_and_grad(const ScoreNet& net, const Matrix& x, const Matrix& z, double sigma,
                              DsmSign sign) {
  if (!(sigma > 0.0)) throw ConfigError("sigma must be > 0");
  check_batch(net, x);
  if (z.rows() != x.rows() || z.cols() != x.cols()) throw UsageError("x and z batches differ in shape");
  const double batch = static_cast<double>(x.cols());
  const double coef = (sign == DsmSign::derivation ? 1.0 : -1.0) / (sigma * sigma);
  const double scale = 2.0 / batch;

  LossAndGrad out = reduce_chunks(net, x.cols(), [&](Eigen::Index begin, Eigen::Index count, ParamStore& g) {
    ForwardTrace trace;
    const auto xc = x.middleCols(begin, count);
    forward_trace(net, xc, trace);
    const Matrix residual = trace.pre.back() + coef * (xc - z.middleCols(begin, count));
    backprop(net, trace, scale * residual, g);
    return residual.squaredNorm();
  });
  out.loss /= batch;
  return out;
}

LossAndGrad stein_loss_and_grad(const ScoreNet& net, const Matrix& x, const Matrix& target_score) {
  check_batch(net, x);
  if (target_score.rows() != x.rows() || target_score.cols() != x.cols()) {
    throw UsageError("target score batch differs in shape from x");
  }
  const Eigen::Index d = x.rows();
  const double batch = static_cast<double>(x.cols());
  const double scale = 1.0 / batch;
  const std::size_t depth = net.params.layers.size();

  LossAndGrad out = reduce_chunks(net, x.cols(), [&](Eigen::Index begin, Eigen::Index c, ParamStore& g) {
    TangentTrace t;
    tangent_trace(net, x.middleCols(begin, c), t);
    const Matrix& y = t.primal.pre.back();
    const auto s = target_score.middleCols(begin, c);
    const Vector div = trace_of_tangent(t.tan_pre.back(), d, c);

    const double loss = -(s.cwiseProduct(y)).sum() - div.sum() + 0.5 * y.squaredNorm();

    Matrix g_primal = scale * (y - s);
    Matrix g_tangent = Matrix::Zero(d, c * d);
    for (Eigen::Index i = 0; i < c; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) g_tangent(j, i * d + j) = -scale;
    }

    for (std::size_t l = depth; l-- > 0;) {
      const Matrix& w = net.params.layers[l].weight;
      g.layers[l].weight.noalias() += g_primal * t.primal.post[l].transpose();
      g.layers[l].bias += g_primal.rowwise().sum();
      if (l == 0) {
        // tan_pre[0] is W_0 tiled, so each tile feeds back into W_0 directly
        for (Eigen::Index i = 0; i < c; ++i) g.layers[0].weight += g_tangent.middleCols(i * d, d);
        break;
      }
      g.layers[l].weight.noalias() += g_tangent * t.tan_post[l].transpose();

      const Matrix g_post = w.transpose() * g_primal;
      const Matrix g_tan_post = w.transpose() * g_tangent;
      const Matrix act1 = net.activation.derivative(t.primal.pre[l - 1]);
      const Matrix act2 = net.activation.second_derivative(t.primal.pre[l - 1]);

      const Matrix weighted = g_tan_post.cwiseProduct(t.tan_pre[l - 1]);
      Matrix contraction(weighted.rows(), c);
      for (Eigen::Index i = 0; i < c; ++i) contraction.col(i) = weighted.middleCols(i * d, d).rowwise().sum();

      g_tangent = g_tan_post.cwiseProduct(expand_columns(act1, d));
      g_primal = g_post.cwiseProduct(act1) + contraction.cwiseProduct(act2);
    }
    return loss;
  });
  out.loss /= batch;
  return out;
}

OptimizerState optimizer_init(const OptimizerSpec& spec, const ScoreNet& net) {
  OptimizerState state;
  state.spec = spec;
  if (spec.kind != OptimizerKind::sgd) state.first = net.params.zeros_like();
  if (spec.kind == OptimizerKind::adam) state.second = net.params.zeros_like();
  return state;
}

namespace {

bool same_shape(const ParamStore& a, const ParamStore& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    if (a.layers[l].weight.rows() != b.layers[l].weight.rows() ||
        a.layers[l].weight.cols() != b.layers[l].weight.cols() ||
        a.layers[l].bias.size() != b.layers[l].bias.size()) {
      return false;
    }
  }
  return true;
}

template <class Update>
void for_each_param(ParamStore& params, const ParamStore& grads, ParamStore* first, ParamStore* second,
                    Update&& update) {
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto visit = [&](auto member) {
      auto& p = params.layers[l].*member;
      const auto& g = grads.layers[l].*member;
      double* m = first ? (first->layers[l].*member).data() : nullptr;
      double* v = second ? (second->layers[l].*member).data() : nullptr;
      for (Eigen::Index k = 0; k < p.size(); ++k) {
        update(p.data()[k], g.data()[k], m ? m[k] : p.data()[k], v ? v[k] : p.data()[k]);
      }
    };
    visit(&DenseLayer::weight);
    visit(&DenseLayer::bias);
  }
}

}  // namespace

void apply_optimizer_step(ScoreNet& net, const ParamStore& grads, OptimizerState& state, double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!same_shape(net.params, grads)) throw UsageError("gradient store does not match network shape");
  const OptimizerSpec& spec = state.spec;
  if (spec.kind != OptimizerKind::sgd && !same_shape(net.params, state.first)) {
    throw UsageError("optimizer state does not match network shape");
  }
  if (spec.kind == OptimizerKind::adam && !same_shape(net.params, state.second)) {
    throw UsageError("optimizer state does not match network shape");
  }
  ++state.step_count;

  switch (spec.kind) {
    case OptimizerKind::sgd:
      for_each_param(net.params, grads, nullptr, nullptr,
                     [lr](double& p, double g, double&, double&) { p -= lr * g; });
      break;
    case OptimizerKind::sgd_momentum: {
      const double beta = spec.momentum;
      const bool nesterov = spec.nesterov;
      for_each_param(net.params, grads, &state.first, nullptr, [=](double& p, double g, double& buf, double&) {
        buf = beta * buf + g;
        p -= lr * (nesterov ? g + beta * buf : buf);
      });
      break;
    }
    case OptimizerKind::adam: {
      const double t = static_cast<double>(state.step_count);
      const double correction1 = 1.0 - std::pow(spec.beta1, t);
      const double correction2 = 1.0 - std::pow(spec.beta2, t);
      for_each_param(net.params, grads, &state.first, &state.second,
                     [&spec, lr, correction1, correction2](double& p, double g, double& m, double& v) {
                       m = spec.beta1 * m + (1.0 - spec.beta1) * g;
                       v = spec.beta2 * v + (1.0 - spec.beta2) * g * g;
                       p -= lr * (m / correction1) / (std::sqrt(v / correction2) + spec.epsilon);
                     });
      break;
    }
  }
  if (!net.params.all_finite()) throw NumericalError("non-finite network parameters after optimizer step");
}

std::pair<ScoreNet, OptimizerState> optimizer_step(ScoreNet net, const ParamStore& grads,
                                                   OptimizerState state, double lr) {
  apply_optimizer_step(net, grads, state, lr);
  return {std::move(net), std::move(state)};
}

}  // namespace sifg::nn
