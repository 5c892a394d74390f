#include "ella/model.hpp"

#include <cmath>
#include <random>

namespace ella {

namespace {

Matrix apply_activation(Activation act, const Matrix& z) {
  switch (act) {
    case Activation::kIdentity:
      return z;
    case Activation::kTanh:
      return z.array().tanh().matrix();
    case Activation::kRelu:
      return z.cwiseMax(0.0);
  }
  throw std::logic_error("unknown activation");
}

// Derivative evaluated from pre-activation z and post-activation h.
Matrix activation_grad(Activation act, const Matrix& z, const Matrix& h) {
  switch (act) {
    case Activation::kIdentity:
      return Matrix::Ones(z.rows(), z.cols());
    case Activation::kTanh:
      return (1.0 - h.array().square()).matrix();
    case Activation::kRelu:
      return (z.array() > 0.0).cast<double>().matrix();
  }
  throw std::logic_error("unknown activation");
}

struct ForwardCache {
  std::vector<Matrix> pre;   // z per layer
  std::vector<Matrix> post;  // h per layer
};

Matrix forward_impl(const FrozenModel& model, const AdapterSet& adapters, const Matrix& x,
                    ForwardCache* cache) {
  if (x.rows() != model.input_dim()) {
    throw std::invalid_argument("forward: input has dimension " + std::to_string(x.rows()) +
                                ", model expects " + std::to_string(model.input_dim()));
  }
  Matrix h = x;
  for (int l = 0; l < model.num_layers(); ++l) {
    const Layer& layer = model.layer(l);
    Matrix z = layer.w_init * h;
    const auto it = adapters.entries.find(l);
    if (it != adapters.entries.end()) {
      z += it->second.A * (it->second.B * h);
    }
    z.colwise() += layer.bias;
    h = apply_activation(layer.activation, z);
    if (cache) {
      cache->pre.push_back(z);
      cache->post.push_back(h);
    }
  }
  return h;
}

void validate_batch(const FrozenModel& model, const Dataset& batch) {
  if (batch.size() == 0) throw std::invalid_argument("task_loss: empty batch");
  if (batch.features.cols() != static_cast<Index>(batch.labels.size())) {
    throw std::invalid_argument("task_loss: features/labels length mismatch");
  }
  for (std::size_t i = 0; i < batch.labels.size(); ++i) {
    if (batch.labels[i] < 0 || batch.labels[i] >= model.num_classes()) {
      throw std::invalid_argument("task_loss: label " + std::to_string(batch.labels[i]) +
                                  " at sample " + std::to_string(i) + " outside [0, " +
                                  std::to_string(model.num_classes()) + ")");
    }
  }
}

// Column-wise softmax probabilities, computed stably.
Matrix softmax_columns(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Index c = 0; c < logits.cols(); ++c) {
    const double m = logits.col(c).maxCoeff();
    p.col(c) = (logits.col(c).array() - m).exp();
    p.col(c) /= p.col(c).sum();
  }
  return p;
}

double nll_from_logits(const Matrix& logits, const std::vector<int>& labels) {
  double loss = 0.0;
  for (Index c = 0; c < logits.cols(); ++c) {
    const double m = logits.col(c).maxCoeff();
    const double lse = m + std::log((logits.col(c).array() - m).exp().sum());
    loss += lse - logits(labels[static_cast<std::size_t>(c)], c);
  }
  return loss / static_cast<double>(logits.cols());
}

double penalty_sum(const AdapterSet& adapters, const PastAccumulator& past) {
  double sum = 0.0;
  for (const auto& [l, factors] : adapters.entries) {
    if (const Matrix* w_past = past.find(l)) {
      sum += penalty(factors.product(), *w_past);
    }
  }
  return sum;
}

}  // namespace

FrozenModel::FrozenModel(std::vector<Layer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw std::invalid_argument("FrozenModel: no layers");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    if (layer.bias.size() != layer.w_init.rows()) {
      throw std::invalid_argument("FrozenModel: layer " + std::to_string(l) + " bias size " +
                                  std::to_string(layer.bias.size()) + " vs " +
                                  std::to_string(layer.w_init.rows()) + " rows");
    }
    if (l > 0 && layer.w_init.cols() != layers_[l - 1].w_init.rows()) {
      throw std::invalid_argument("FrozenModel: layer " + std::to_string(l) + " expects " +
                                  std::to_string(layer.w_init.cols()) +
                                  " inputs but previous layer emits " +
                                  std::to_string(layers_[l - 1].w_init.rows()));
    }
  }
}

AdapterSet init_adapters(const FrozenModel& model, const std::vector<int>& layers, Index rank,
                         std::uint64_t seed) {
  if (rank < 1) throw std::invalid_argument("init_adapters: rank must be >= 1");
  std::vector<int> which = layers;
  if (which.empty()) {
    for (int l = 0; l < model.num_layers(); ++l) which.push_back(l);
  }

  AdapterSet set;
  set.rank = rank;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 0.02);
  for (int l : which) {
    if (l < 0 || l >= model.num_layers()) {
      throw std::invalid_argument("init_adapters: layer index " + std::to_string(l) +
                                  " out of range");
    }
    if (set.entries.count(l) != 0) {
      throw std::invalid_argument("init_adapters: duplicate layer index " + std::to_string(l));
    }
    const Index d = model.layer(l).w_init.rows();
    const Index k = model.layer(l).w_init.cols();
    if (rank > std::min(d, k)) {
      throw std::invalid_argument("init_adapters: rank " + std::to_string(rank) +
                                  " exceeds min dimension of layer " + std::to_string(l));
    }
    Matrix a(d, rank);
    for (Index i = 0; i < d; ++i) {
      for (Index j = 0; j < rank; ++j) a(i, j) = gauss(rng);
    }
    set.entries.emplace(l, LowRankFactors(std::move(a), Matrix::Zero(rank, k)));
  }
  return set;
}

std::map<int, Matrix> adapter_deltas(const AdapterSet& adapters) {
  std::map<int, Matrix> deltas;
  for (const auto& [l, factors] : adapters.entries) deltas.emplace(l, factors.product());
  return deltas;
}

FrozenModel merge_past(const FrozenModel& base, const PastAccumulator& past) {
  std::vector<Layer> layers = base.layers();
  for (const auto& [l, w_past] : past.per_layer()) {
    if (l < 0 || l >= base.num_layers()) {
      throw std::invalid_argument("merge_past: layer index " + std::to_string(l) +
                                  " out of range");
    }
    require_same_shape("merge_past", layers[static_cast<std::size_t>(l)].w_init, w_past);
    layers[static_cast<std::size_t>(l)].w_init += w_past;
  }
  return FrozenModel(std::move(layers));
}

Matrix adapted_forward(const FrozenModel& model, const AdapterSet& adapters, const Matrix& x) {
  return forward_impl(model, adapters, x, nullptr);
}

Vector adapted_forward(const FrozenModel& model, const AdapterSet& adapters, const Vector& x) {
  return forward_impl(model, adapters, x, nullptr).col(0);
}

double task_loss(const FrozenModel& model, const AdapterSet& adapters, const Dataset& batch) {
  validate_batch(model, batch);
  return nll_from_logits(forward_impl(model, adapters, batch.features, nullptr), batch.labels);
}

double total_loss(const FrozenModel& model, const AdapterSet& adapters, const Dataset& batch,
                  double lambda, const PastAccumulator& past) {
  if (lambda < 0.0) throw std::invalid_argument("total_loss: lambda must be >= 0");
  const double task = task_loss(model, adapters, batch);
  if (lambda == 0.0 || past.empty()) return task;
  return task + lambda * penalty_sum(adapters, past);
}

GradientMap backward(const FrozenModel& model, const AdapterSet& adapters, const Dataset& batch,
                     double lambda, const PastAccumulator& past) {
  if (lambda < 0.0) throw std::invalid_argument("backward: lambda must be >= 0");
  validate_batch(model, batch);

  ForwardCache cache;
  const Matrix logits = forward_impl(model, adapters, batch.features, &cache);
  const Index n = batch.features.cols();
  const int num_layers = model.num_layers();

  // d(mean NLL)/d(logits) = (softmax - onehot) / n
  Matrix d_out = softmax_columns(logits);
  for (Index c = 0; c < n; ++c) {
    d_out(batch.labels[static_cast<std::size_t>(c)], c) -= 1.0;
  }
  d_out /= static_cast<double>(n);

  GradientMap grads;
  for (int l = num_layers - 1; l >= 0; --l) {
    const Layer& layer = model.layer(l);
    const Matrix dz =
        d_out.cwiseProduct(activation_grad(layer.activation, cache.pre[static_cast<std::size_t>(l)],
                                           cache.post[static_cast<std::size_t>(l)]));
    const Matrix& h_in =
        l == 0 ? batch.features : cache.post[static_cast<std::size_t>(l - 1)];

    const auto it = adapters.entries.find(l);
    if (it != adapters.entries.end()) {
      const LowRankFactors& f = it->second;
      const Matrix dw = dz * h_in.transpose();
      FactorGrads g{dw * f.B.transpose(), f.A.transpose() * dw};
      if (lambda > 0.0) {
        if (const Matrix* w_past = past.find(l)) {
          auto [pa, pb] = penalty_grad_factors(f, *w_past);
          g.a += lambda * pa;
          g.b += lambda * pb;
        }
      }
      grads.emplace(l, std::move(g));
    }

    if (l > 0) {
      Matrix w_eff = layer.w_init;
      if (it != adapters.entries.end()) w_eff += it->second.product();
      d_out = w_eff.transpose() * dz;
    }
  }
  return grads;
}

OptimizerState::OptimizerState(OptimizerConfig cfg, const AdapterSet& adapters) : cfg_(cfg) {
  if (!(cfg_.learning_rate >= 0.0)) {
    throw std::invalid_argument("optimizer: learning_rate must be >= 0");
  }
  for (const auto& [l, f] : adapters.entries) {
    Slot slot;
    slot.m_a = Matrix::Zero(f.A.rows(), f.A.cols());
    slot.m_b = Matrix::Zero(f.B.rows(), f.B.cols());
    if (cfg_.kind == OptimizerKind::kAdam) {
      slot.v_a = Matrix::Zero(f.A.rows(), f.A.cols());
      slot.v_b = Matrix::Zero(f.B.rows(), f.B.cols());
    }
    slots_.emplace(l, std::move(slot));
  }
}

void OptimizerState::apply(Matrix& param, Matrix& m, Matrix& v, const Matrix& grad) {
  if (cfg_.kind == OptimizerKind::kSgd) {
    if (cfg_.momentum == 0.0) {
      param -= cfg_.learning_rate * grad;
    } else {
      m = cfg_.momentum * m + grad;
      param -= cfg_.learning_rate * m;
    }
    return;
  }
  // adam-style with bias correction
  const double t = static_cast<double>(step_count_);
  m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * grad;
  v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
  const double mc = 1.0 - std::pow(cfg_.beta1, t);
  const double vc = 1.0 - std::pow(cfg_.beta2, t);
  param -= cfg_.learning_rate *
           ((m / mc).array() / ((v / vc).array().sqrt() + cfg_.eps)).matrix();
}

void OptimizerState::step(AdapterSet& adapters, const GradientMap& grads) {
  ++step_count_;
  for (auto& [l, f] : adapters.entries) {
    const auto git = grads.find(l);
    if (git == grads.end()) {
      throw std::invalid_argument("optimizer: missing gradient for layer " + std::to_string(l));
    }
    const FactorGrads& g = git->second;
    require_same_shape("optimizer: gradA", f.A, g.a);
    require_same_shape("optimizer: gradB", f.B, g.b);
    if (!g.a.allFinite() || !g.b.allFinite()) {
      throw TrainingDiverged("non-finite gradient at layer " + std::to_string(l) + ", step " +
                             std::to_string(step_count_));
    }
    Slot& slot = slots_.at(l);
    apply(f.A, slot.m_a, slot.v_a, g.a);
    apply(f.B, slot.m_b, slot.v_b, g.b);
  }
}

int predict_class(const Vector& logits) {
  int best = 0;
  for (Index r = 1; r < logits.size(); ++r) {
    if (logits(r) > logits(best)) best = static_cast<int>(r);
  }
  return best;
}

double accuracy(const FrozenModel& model, const AdapterSet& adapters, const Dataset& test) {
  validate_batch(model, test);
  const Matrix logits = forward_impl(model, adapters, test.features, nullptr);
  Index correct = 0;
  for (Index c = 0; c < logits.cols(); ++c) {
    if (predict_class(logits.col(c)) == test.labels[static_cast<std::size_t>(c)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.cols());
}

double accuracy(const FrozenModel& model, const Dataset& test) {
  return accuracy(model, AdapterSet{}, test);
}

}  // namespace ella
