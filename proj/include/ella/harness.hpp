#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ella/model.hpp"
#include "ella/regularizer.hpp"
#include "ella/task_stream.hpp"

namespace ella {

enum class Method { kElla, kSeqLora, kOrthoBaseline };

// Full provenance of one experiment: stream, schedule, model geometry,
// optimizer, seeds.
struct RunConfig {
  StreamOrder stream;
  std::vector<double> lambda_schedule;  // one per task; first entry 0 by convention

  std::vector<Index> hidden_dims = {32};
  Activation hidden_activation = Activation::kTanh;
  double w_init_scale = 1.0;
  std::vector<int> adapted_layers;  // empty = all layers
  Index rank = 4;

  OptimizerConfig optimizer;
  int steps_per_task = 150;

  double epsilon = 1e-8;
  std::uint64_t seed = 1;
  Method method = Method::kElla;
  double ortho_coeff = 0.1;  // ortho-baseline only

  std::vector<TaskSpec> unseen_tasks;

  int diagnostic_batches = 32;
  double histogram_bin_width = 0.1;
};

void validate_config(const RunConfig& config);

// a(i, j) = test accuracy on task j after training through task i.
// Upper-triangle entries (j > i) are zero-shot evaluations on tasks not
// yet trained. baseline holds single-task accuracies a0 when populated.
struct AccMatrix {
  Matrix a;
  Vector baseline;  // size T or 0
};

struct LossDelta {
  int after_task;  // 0-based task whose training caused the change
  int past_task;
  int batch_index;
  double delta;  // loss_after - loss_before on one held-out batch
};

inline constexpr const char* kOpposingFormulaVersion =
    "sum_layers sum_ij |dW_t| where sign(dW_t) opposes sign(dW_prev) / v1";

struct DiagnosticsRecord {
  std::vector<LossDelta> loss_deltas;
  std::vector<double> opposing_magnitudes;  // entry t-1 covers transition t-1 -> t
  std::vector<double> task_seconds;
  std::string opposing_formula = kOpposingFormulaVersion;
};

enum class RunStatus { kCompleted, kAborted };

struct RunResult {
  AccMatrix acc;
  DiagnosticsRecord diagnostics;
  FrozenModel base;    // untouched frozen model
  FrozenModel merged;  // base + all accumulated updates
  PastAccumulator past;
  RunStatus status = RunStatus::kCompleted;
  std::string abort_reason;
  int completed_tasks = 0;
};

// Invoked after each task with that task's per-layer update matrices.
using TaskObserver = std::function<void(int task_index, const std::map<int, Matrix>& delta)>;

FrozenModel build_frozen_model(const RunConfig& config, Index input_dim, int num_classes);

/// Sequential training over the stream: per task, fresh adapters are
/// trained against the running past accumulation, then merged into it;
/// the merged model is evaluated on every task after each one. Divergence
/// aborts the run and flags the partial result.
RunResult run_sequence(const RunConfig& config, const TaskObserver& on_task = {});

/// Accuracy of fresh adapters trained on task `task_index` alone from the
/// frozen base, with the same optimizer and step budget as the sequence.
double single_task_baseline(const RunConfig& config, int task_index);
Vector all_single_task_baselines(const RunConfig& config);

struct Metrics {
  double oa = 0.0;
  std::optional<double> fwt;  // absent without baselines
  std::optional<double> bwt;  // absent for T = 1
};

Metrics compute_metrics(const AccMatrix& m);

struct GeneralAbility {
  double ga;
  double delta_ga;
};

/// Mean accuracy of the merged model over the unseen tasks, and its change
/// against the unadapted base. Absent when `unseen` is empty.
std::optional<GeneralAbility> general_ability(const FrozenModel& merged, const FrozenModel& base,
                                              const std::vector<TaskSpec>& unseen);

struct Histogram {
  double bin_width = 0.1;
  std::map<int, int> counts;  // bin index = floor(delta / bin_width)
  int total = 0;
};

/// Fixed-width histograms of the recorded loss deltas, one per past task.
std::map<int, Histogram> loss_change_histogram(const DiagnosticsRecord& rec, double bin_width);

/// Total magnitude of the current update on coordinates where it points
/// against the previous task's update.
double opposing_update_magnitude(const std::map<int, Matrix>& delta_t,
                                 const std::map<int, Matrix>& delta_prev);

/// Orthogonality-penalty comparator: sum over layers and stored past
/// factors of ||A_i^T A_t||_F^2.
double ortho_penalty(const AdapterSet& current, const std::map<int, std::vector<Matrix>>& past_a);

struct SweepRow {
  double lambda;
  double oa;
  std::optional<double> bwt;
};

/// One full run per lambda value (schedule 0 on the first task, lambda on
/// the rest), same stream and seed throughout; rows sorted by lambda.
std::vector<SweepRow> lambda_sweep(const RunConfig& config, std::vector<double> lambdas);

std::string method_name(Method m);

}  // namespace ella
