#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <vector>

#include "ella/linalg.hpp"
#include "ella/regularizer.hpp"
#include "ella/task_stream.hpp"

namespace ella {

enum class Activation { kIdentity, kTanh, kRelu };

struct Layer {
  Matrix w_init;  // out x in
  Vector bias;    // out
  Activation activation = Activation::kIdentity;
};

// Immutable layer stack; only adapters ever train on top of it.
class FrozenModel {
 public:
  explicit FrozenModel(std::vector<Layer> layers);

  Index input_dim() const { return layers_.front().w_init.cols(); }
  Index num_classes() const { return layers_.back().w_init.rows(); }
  int num_layers() const { return static_cast<int>(layers_.size()); }
  const Layer& layer(int i) const { return layers_[static_cast<std::size_t>(i)]; }
  const std::vector<Layer>& layers() const { return layers_; }

 private:
  std::vector<Layer> layers_;
};

// Per-task trainable state: one factor pair per adapted layer, uniform rank.
struct AdapterSet {
  std::map<int, LowRankFactors> entries;
  Index rank = 0;
};

/// Fresh adapters for a task: A ~ N(0, 0.02^2), B = 0, so the carried
/// update starts at exactly zero. `layers` empty means all layers.
AdapterSet init_adapters(const FrozenModel& model, const std::vector<int>& layers, Index rank,
                         std::uint64_t seed);

/// Per-layer delta matrices A*B of the adapter set.
std::map<int, Matrix> adapter_deltas(const AdapterSet& adapters);

/// Copy of `base` with each accumulated past update folded into the
/// corresponding frozen weight.
FrozenModel merge_past(const FrozenModel& base, const PastAccumulator& past);

/// Batch forward: x is d x n, result is num_classes x n. Adapted layers
/// compute act(W h + A (B h) + bias); other layers omit the low-rank term.
Matrix adapted_forward(const FrozenModel& model, const AdapterSet& adapters, const Matrix& x);
Vector adapted_forward(const FrozenModel& model, const AdapterSet& adapters, const Vector& x);

/// Mean negative log-likelihood of the labels under softmax logits.
double task_loss(const FrozenModel& model, const AdapterSet& adapters, const Dataset& batch);

/// task_loss + lambda * sum over adapted layers of the alignment penalty
/// against the accumulated past update of that layer.
double total_loss(const FrozenModel& model, const AdapterSet& adapters, const Dataset& batch,
                  double lambda, const PastAccumulator& past);

struct FactorGrads {
  Matrix a;
  Matrix b;
};
using GradientMap = std::map<int, FactorGrads>;

/// Analytic gradient of total_loss with respect to every adapter factor.
GradientMap backward(const FrozenModel& model, const AdapterSet& adapters, const Dataset& batch,
                     double lambda, const PastAccumulator& past);

struct TrainingDiverged : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgd;
  double learning_rate = 0.1;
  double momentum = 0.0;  // sgd
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Deterministic first-order optimizer over an adapter set. Moment buffers
// mirror the adapter shapes; sgd keeps a velocity per factor, adam keeps
// bias-corrected first/second moments.
class OptimizerState {
 public:
  OptimizerState(OptimizerConfig cfg, const AdapterSet& adapters);

  // One update step. Throws TrainingDiverged on any non-finite gradient.
  void step(AdapterSet& adapters, const GradientMap& grads);

  std::int64_t step_count() const { return step_count_; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  struct Slot {
    Matrix m_a, v_a, m_b, v_b;
  };
  void apply(Matrix& param, Matrix& m, Matrix& v, const Matrix& grad);

  OptimizerConfig cfg_;
  std::int64_t step_count_ = 0;
  std::map<int, Slot> slots_;
};

/// Argmax with ties broken toward the lowest class index.
int predict_class(const Vector& logits);

double accuracy(const FrozenModel& model, const AdapterSet& adapters, const Dataset& test);
double accuracy(const FrozenModel& model, const Dataset& test);  // zero adapters

}  // namespace ella
