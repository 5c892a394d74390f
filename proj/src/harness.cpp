#include "ella/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

namespace ella {

namespace {

// Feature dimension and class count shared by every task in the stream.
std::pair<Index, int> stream_dims(const std::vector<TaskData>& data) {
  const Index d = data.front().train.dim();
  int num_classes = 0;
  for (const auto& task : data) {
    for (int label : task.train.labels) num_classes = std::max(num_classes, label + 1);
    for (int label : task.test.labels) num_classes = std::max(num_classes, label + 1);
  }
  return {d, num_classes};
}

double effective_lambda(const RunConfig& config, int task) {
  if (config.method != Method::kElla) return 0.0;
  return config.lambda_schedule[static_cast<std::size_t>(task)];
}

Dataset slice_columns(const Dataset& ds, Index begin, Index end) {
  Dataset out;
  out.split = ds.split;
  out.features = ds.features.middleCols(begin, end - begin);
  out.labels.assign(ds.labels.begin() + begin, ds.labels.begin() + end);
  return out;
}

// Fixed partition of a test set into `count` near-equal contiguous batches,
// frozen for the lifetime of the run.
std::vector<Dataset> fixed_batches(const Dataset& test, int count) {
  const Index n = test.size();
  const Index batches = std::min<Index>(count, n);
  std::vector<Dataset> out;
  out.reserve(static_cast<std::size_t>(batches));
  for (Index b = 0; b < batches; ++b) {
    const Index begin = b * n / batches;
    const Index end = (b + 1) * n / batches;
    out.push_back(slice_columns(test, begin, end));
  }
  return out;
}

void add_ortho_grads(GradientMap& grads, const AdapterSet& adapters,
                     const std::map<int, std::vector<Matrix>>& past_a, double coeff) {
  if (coeff == 0.0 || past_a.empty()) return;
  for (auto& [l, g] : grads) {
    const auto it = past_a.find(l);
    if (it == past_a.end()) continue;
    const Matrix& a_t = adapters.entries.at(l).A;
    for (const Matrix& a_i : it->second) {
      g.a += coeff * 2.0 * (a_i * (a_i.transpose() * a_t));
    }
  }
}

// Shared by sequence training and the single-task baseline so both paths
// are bit-identical when past state is empty.
AdapterSet train_task(const FrozenModel& current, const RunConfig& config, const Dataset& train,
                      double lambda, const PastAccumulator& past,
                      const std::map<int, std::vector<Matrix>>& past_a,
                      std::uint64_t adapter_seed, int task_index) {
  AdapterSet adapters = init_adapters(current, config.adapted_layers, config.rank, adapter_seed);
  OptimizerState opt(config.optimizer, adapters);
  const bool use_ortho = config.method == Method::kOrthoBaseline;
  for (int step = 0; step < config.steps_per_task; ++step) {
    double loss = total_loss(current, adapters, train, lambda, past);
    if (use_ortho) loss += config.ortho_coeff * ortho_penalty(adapters, past_a);
    if (!std::isfinite(loss)) {
      throw TrainingDiverged("non-finite loss at task " + std::to_string(task_index + 1) +
                             ", step " + std::to_string(step + 1));
    }
    GradientMap grads = backward(current, adapters, train, lambda, past);
    if (use_ortho) add_ortho_grads(grads, adapters, past_a, config.ortho_coeff);
    opt.step(adapters, grads);
  }
  return adapters;
}

}  // namespace

void validate_config(const RunConfig& config) {
  const std::size_t num_tasks = config.stream.tasks.size();
  if (num_tasks == 0) throw std::invalid_argument("config: stream has no tasks");
  if (config.lambda_schedule.size() != num_tasks) {
    throw std::invalid_argument("config: lambda_schedule length " +
                                std::to_string(config.lambda_schedule.size()) +
                                " does not match task count " + std::to_string(num_tasks));
  }
  for (double lambda : config.lambda_schedule) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("config: lambda values must be >= 0");
  }
  if (config.method != Method::kElla) {
    for (double lambda : config.lambda_schedule) {
      if (lambda != 0.0) {
        throw std::invalid_argument("config: method " + method_name(config.method) +
                                    " forces an all-zero lambda_schedule");
      }
    }
  }
  if (!(config.epsilon > 0.0)) throw std::invalid_argument("config: epsilon must be > 0");
  if (config.rank < 1) throw std::invalid_argument("config: rank must be >= 1");
  if (config.steps_per_task < 1) throw std::invalid_argument("config: steps_per_task must be >= 1");
  if (config.hidden_dims.empty()) throw std::invalid_argument("config: hidden_dims is empty");
  if (!(config.w_init_scale > 0.0)) throw std::invalid_argument("config: w_init_scale must be > 0");
  if (config.diagnostic_batches < 1) {
    throw std::invalid_argument("config: diagnostic_batches must be >= 1");
  }
  if (!(config.histogram_bin_width > 0.0)) {
    throw std::invalid_argument("config: histogram_bin_width must be > 0");
  }
  if (!(config.ortho_coeff >= 0.0)) throw std::invalid_argument("config: ortho_coeff must be >= 0");
}

FrozenModel build_frozen_model(const RunConfig& config, Index input_dim, int num_classes) {
  std::mt19937_64 rng(mix_seed(config.seed, 17));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Layer> layers;
  Index in = input_dim;
  auto push_layer = [&](Index out, Activation act) {
    Matrix w(out, in);
    const double scale = config.w_init_scale / std::sqrt(static_cast<double>(in));
    for (Index i = 0; i < out; ++i) {
      for (Index j = 0; j < in; ++j) w(i, j) = scale * gauss(rng);
    }
    layers.push_back(Layer{std::move(w), Vector::Zero(out), act});
    in = out;
  };
  for (Index h : config.hidden_dims) push_layer(h, config.hidden_activation);
  push_layer(num_classes, Activation::kIdentity);
  return FrozenModel(std::move(layers));
}

RunResult run_sequence(const RunConfig& config, const TaskObserver& on_task) {
  validate_config(config);
  const auto data = make_stream(config.stream);
  const int num_tasks = static_cast<int>(data.size());
  const auto [input_dim, num_classes] = stream_dims(data);

  FrozenModel base = build_frozen_model(config, input_dim, num_classes);

  std::vector<std::vector<Dataset>> diag_batches;
  diag_batches.reserve(data.size());
  for (const auto& task : data) {
    diag_batches.push_back(fixed_batches(task.test, config.diagnostic_batches));
  }

  Matrix acc = Matrix::Zero(num_tasks, num_tasks);
  DiagnosticsRecord rec;
  PastAccumulator past;
  std::map<int, std::vector<Matrix>> past_a;
  std::map<int, Matrix> prev_delta;
  RunStatus status = RunStatus::kCompleted;
  std::string abort_reason;
  int completed = 0;

  for (int t = 0; t < num_tasks; ++t) {
    const auto started = std::chrono::steady_clock::now();
    const FrozenModel current = merge_past(base, past);

    std::vector<std::vector<double>> before(static_cast<std::size_t>(t));
    for (int p = 0; p < t; ++p) {
      for (const Dataset& batch : diag_batches[static_cast<std::size_t>(p)]) {
        before[static_cast<std::size_t>(p)].push_back(task_loss(current, AdapterSet{}, batch));
      }
    }

    AdapterSet adapters;
    try {
      adapters = train_task(current, config, data[static_cast<std::size_t>(t)].train,
                            effective_lambda(config, t), past, past_a,
                            mix_seed(config.seed, 1000 + static_cast<std::uint64_t>(t)), t);
    } catch (const TrainingDiverged& e) {
      status = RunStatus::kAborted;
      abort_reason = e.what();
      break;
    }

    std::map<int, Matrix> delta = adapter_deltas(adapters);
    if (on_task) on_task(t, delta);
    for (const auto& [l, d] : delta) past.accumulate(l, d);
    past.finish_task();
    if (config.method == Method::kOrthoBaseline) {
      for (const auto& [l, f] : adapters.entries) past_a[l].push_back(f.A);
    }

    const FrozenModel merged = merge_past(base, past);
    for (int j = 0; j < num_tasks; ++j) {
      acc(t, j) = accuracy(merged, data[static_cast<std::size_t>(j)].test);
    }
    for (int p = 0; p < t; ++p) {
      const auto& batches = diag_batches[static_cast<std::size_t>(p)];
      for (std::size_t b = 0; b < batches.size(); ++b) {
        const double after = task_loss(merged, AdapterSet{}, batches[b]);
        rec.loss_deltas.push_back(LossDelta{t, p, static_cast<int>(b),
                                            after - before[static_cast<std::size_t>(p)][b]});
      }
    }
    if (t > 0) rec.opposing_magnitudes.push_back(opposing_update_magnitude(delta, prev_delta));
    prev_delta = std::move(delta);
    completed = t + 1;
    rec.task_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
  }

  return RunResult{AccMatrix{std::move(acc), Vector()},
                   std::move(rec),
                   base,
                   merge_past(base, past),
                   std::move(past),
                   status,
                   std::move(abort_reason),
                   completed};
}

double single_task_baseline(const RunConfig& config, int task_index) {
  validate_config(config);
  if (task_index < 0 || task_index >= static_cast<int>(config.stream.tasks.size())) {
    throw std::invalid_argument("single_task_baseline: task index " +
                                std::to_string(task_index) + " out of range");
  }
  const auto data = make_stream(config.stream);
  const auto [input_dim, num_classes] = stream_dims(data);
  FrozenModel base = build_frozen_model(config, input_dim, num_classes);

  const PastAccumulator no_past;
  const std::map<int, std::vector<Matrix>> no_past_a;
  AdapterSet adapters =
      train_task(base, config, data[static_cast<std::size_t>(task_index)].train, 0.0, no_past,
                 no_past_a, mix_seed(config.seed, 1000 + static_cast<std::uint64_t>(task_index)),
                 task_index);
  return accuracy(base, adapters, data[static_cast<std::size_t>(task_index)].test);
}

Vector all_single_task_baselines(const RunConfig& config) {
  const int num_tasks = static_cast<int>(config.stream.tasks.size());
  Vector baseline(num_tasks);
  for (int t = 0; t < num_tasks; ++t) baseline(t) = single_task_baseline(config, t);
  return baseline;
}

Metrics compute_metrics(const AccMatrix& m) {
  const Index num_tasks = m.a.rows();
  if (num_tasks == 0 || m.a.cols() != num_tasks) {
    throw std::invalid_argument("compute_metrics: accuracy matrix must be square and non-empty");
  }
  for (Index i = 0; i < num_tasks; ++i) {
    for (Index j = 0; j < num_tasks; ++j) {
      if (!(m.a(i, j) >= 0.0 && m.a(i, j) <= 1.0)) {
        throw std::invalid_argument("compute_metrics: accuracy out of [0, 1] at (" +
                                    std::to_string(i) + ", " + std::to_string(j) + ")");
      }
    }
  }
  if (m.baseline.size() != 0 && m.baseline.size() != num_tasks) {
    throw std::invalid_argument("compute_metrics: baseline length mismatch");
  }

  Metrics out;
  out.oa = m.a.row(num_tasks - 1).sum() / static_cast<double>(num_tasks);
  if (m.baseline.size() == num_tasks) {
    double fwt = 0.0;
    for (Index t = 0; t < num_tasks; ++t) fwt += m.a(t, t) - m.baseline(t);
    out.fwt = fwt / static_cast<double>(num_tasks);
  }
  if (num_tasks >= 2) {
    double bwt = 0.0;
    for (Index t = 0; t + 1 < num_tasks; ++t) bwt += m.a(num_tasks - 1, t) - m.a(t, t);
    out.bwt = bwt / static_cast<double>(num_tasks - 1);
  }
  return out;
}

std::optional<GeneralAbility> general_ability(const FrozenModel& merged, const FrozenModel& base,
                                              const std::vector<TaskSpec>& unseen) {
  if (unseen.empty()) return std::nullopt;
  double ga = 0.0;
  double ga_base = 0.0;
  for (const auto& spec : unseen) {
    const TaskData data = generate_task(spec);
    ga += accuracy(merged, data.test);
    ga_base += accuracy(base, data.test);
  }
  ga /= static_cast<double>(unseen.size());
  ga_base /= static_cast<double>(unseen.size());
  return GeneralAbility{ga, ga - ga_base};
}

std::map<int, Histogram> loss_change_histogram(const DiagnosticsRecord& rec, double bin_width) {
  if (!(bin_width > 0.0)) {
    throw std::invalid_argument("loss_change_histogram: bin_width must be > 0");
  }
  std::map<int, Histogram> out;
  for (const auto& d : rec.loss_deltas) {
    Histogram& h = out.try_emplace(d.past_task, Histogram{bin_width, {}, 0}).first->second;
    ++h.counts[static_cast<int>(std::floor(d.delta / bin_width))];
    ++h.total;
  }
  return out;
}

double opposing_update_magnitude(const std::map<int, Matrix>& delta_t,
                                 const std::map<int, Matrix>& delta_prev) {
  if (delta_t.size() != delta_prev.size()) {
    throw std::invalid_argument("opposing_update_magnitude: layer sets differ");
  }
  double sum = 0.0;
  for (const auto& [l, cur] : delta_t) {
    const auto it = delta_prev.find(l);
    if (it == delta_prev.end()) {
      throw std::invalid_argument("opposing_update_magnitude: layer " + std::to_string(l) +
                                  " missing from previous update");
    }
    require_same_shape("opposing_update_magnitude", cur, it->second);
    sum += ((cur.array() * it->second.array() < 0.0).cast<double>() * cur.array().abs()).sum();
  }
  return sum;
}

double ortho_penalty(const AdapterSet& current, const std::map<int, std::vector<Matrix>>& past_a) {
  double sum = 0.0;
  for (const auto& [l, f] : current.entries) {
    const auto it = past_a.find(l);
    if (it == past_a.end()) continue;
    for (const Matrix& a_i : it->second) {
      if (a_i.rows() != f.A.rows()) {
        throw std::invalid_argument("ortho_penalty: stored factor for layer " + std::to_string(l) +
                                    " has " + std::to_string(a_i.rows()) + " rows, current has " +
                                    std::to_string(f.A.rows()));
      }
      sum += (a_i.transpose() * f.A).squaredNorm();
    }
  }
  return sum;
}

std::vector<SweepRow> lambda_sweep(const RunConfig& config, std::vector<double> lambdas) {
  if (lambdas.empty()) throw std::invalid_argument("lambda_sweep: no lambda values");
  std::sort(lambdas.begin(), lambdas.end());
  std::vector<SweepRow> rows;
  rows.reserve(lambdas.size());
  for (double lambda : lambdas) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda_sweep: lambda must be >= 0");
    RunConfig point = config;
    point.method = Method::kElla;
    point.lambda_schedule.assign(config.stream.tasks.size(), lambda);
    point.lambda_schedule.front() = 0.0;
    const RunResult result = run_sequence(point);
    if (result.status != RunStatus::kCompleted) {
      throw TrainingDiverged("lambda_sweep: run at lambda " + std::to_string(lambda) +
                             " aborted: " + result.abort_reason);
    }
    const Metrics metrics = compute_metrics(result.acc);
    rows.push_back(SweepRow{lambda, metrics.oa, metrics.bwt});
  }
  return rows;
}

std::string method_name(Method m) {
  switch (m) {
    case Method::kElla:
      return "ella";
    case Method::kSeqLora:
      return "seqlora";
    case Method::kOrthoBaseline:
      return "ortho-baseline";
  }
  throw std::logic_error("unknown method");
}

}  // namespace ella
