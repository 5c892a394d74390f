#include "ella/task_stream.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

namespace ella {

namespace {

void validate_geometry(const GaussianGeometry& g) {
  if (g.feature_dim < 2) throw std::invalid_argument("task geometry: feature_dim must be >= 2");
  if (g.num_classes < 2) throw std::invalid_argument("task geometry: num_classes must be >= 2");
  if (g.train_per_class < 1 || g.test_per_class < 1) {
    throw std::invalid_argument("task geometry: samples per class must be >= 1");
  }
  if (!(g.variance > 0.0)) throw std::invalid_argument("task geometry: variance must be > 0");
  if (!g.base_angles.empty() && static_cast<int>(g.base_angles.size()) != g.num_classes) {
    throw std::invalid_argument("task geometry: base_angles has " +
                                std::to_string(g.base_angles.size()) + " entries for " +
                                std::to_string(g.num_classes) + " classes");
  }
}

Dataset draw_gaussians(const GaussianGeometry& geom, double rotation, std::uint64_t seed,
                       int per_class, Split split) {
  const auto means = class_means(geom, rotation);
  const Index d = geom.feature_dim;
  const Index n = static_cast<Index>(geom.num_classes) * per_class;
  const double stddev = std::sqrt(geom.variance);

  Dataset out;
  out.features.resize(d, n);
  out.labels.resize(static_cast<std::size_t>(n));
  out.split = split;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Index col = 0;
  for (int c = 0; c < geom.num_classes; ++c) {
    for (int s = 0; s < per_class; ++s, ++col) {
      for (Index i = 0; i < d; ++i) {
        out.features(i, col) = means[static_cast<std::size_t>(c)](i) + stddev * noise(rng);
      }
      out.labels[static_cast<std::size_t>(col)] = c;
    }
  }
  return out;
}

std::vector<Index> seeded_permutation(Index n, std::uint64_t seed) {
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

void permute_features(Dataset& ds, const std::vector<Index>& perm) {
  Matrix permuted(ds.features.rows(), ds.features.cols());
  for (Index i = 0; i < ds.features.rows(); ++i) {
    permuted.row(i) = ds.features.row(perm[static_cast<std::size_t>(i)]);
  }
  ds.features = std::move(permuted);
}

void remap_labels(Dataset& ds, const std::vector<Index>& perm) {
  for (auto& label : ds.labels) {
    label = static_cast<int>(perm[static_cast<std::size_t>(label)]);
  }
}

[[noreturn]] void csv_fail(const std::string& path, std::size_t row, const std::string& what) {
  throw std::runtime_error("csv " + path + ": row " + std::to_string(row) + ": " + what);
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    std::string field = line.substr(start, comma == std::string::npos ? comma : comma - start);
    // trim surrounding blanks
    const auto first = field.find_first_not_of(" \t\r");
    const auto last = field.find_last_not_of(" \t\r");
    fields.push_back(first == std::string::npos ? std::string{}
                                                : field.substr(first, last - first + 1));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return fields;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::vector<Vector> class_means(const GaussianGeometry& geom, double rotation) {
  validate_geometry(geom);
  std::vector<Vector> means;
  means.reserve(static_cast<std::size_t>(geom.num_classes));
  for (int c = 0; c < geom.num_classes; ++c) {
    const double base = geom.base_angles.empty()
                            ? 2.0 * std::numbers::pi * c / geom.num_classes
                            : geom.base_angles[static_cast<std::size_t>(c)];
    Vector mean = Vector::Zero(geom.feature_dim);
    mean(0) = geom.radius * std::cos(base + rotation);
    mean(1) = geom.radius * std::sin(base + rotation);
    means.push_back(std::move(mean));
  }
  return means;
}

TaskData generate_task(const TaskSpec& spec) {
  if (spec.kind == TaskKind::kCsv) {
    return {load_csv_dataset(spec.train_csv, Split::kTrain),
            load_csv_dataset(spec.test_csv, Split::kTest)};
  }

  TaskData data{
      draw_gaussians(spec.geom, spec.rotation_angle, mix_seed(spec.seed, 0),
                     spec.geom.train_per_class, Split::kTrain),
      draw_gaussians(spec.geom, spec.rotation_angle, mix_seed(spec.seed, 1),
                     spec.geom.test_per_class, Split::kTest),
  };

  if (spec.kind == TaskKind::kPermutedFeatures) {
    const auto perm = seeded_permutation(spec.geom.feature_dim, spec.permutation_seed);
    permute_features(data.train, perm);
    permute_features(data.test, perm);
  } else if (spec.kind == TaskKind::kLabelRemap) {
    const auto perm = seeded_permutation(spec.geom.num_classes, spec.remap_seed);
    remap_labels(data.train, perm);
    remap_labels(data.test, perm);
  }
  return data;
}

std::vector<TaskData> make_stream(const StreamOrder& order) {
  if (order.tasks.empty()) throw std::invalid_argument("make_stream: empty task order");
  std::vector<TaskData> stream;
  stream.reserve(order.tasks.size());
  for (const auto& spec : order.tasks) stream.push_back(generate_task(spec));

  const Index d = stream.front().train.dim();
  for (const auto& task : stream) {
    if (task.train.dim() != d || task.test.dim() != d) {
      throw std::invalid_argument("make_stream: tasks disagree on feature dimension");
    }
  }
  return stream;
}

Dataset load_csv_dataset(const std::string& path, Split split) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("csv " + path + ": cannot open file");

  std::string line;
  if (!std::getline(in, line)) csv_fail(path, 1, "missing header row");
  const std::size_t num_cols = split_fields(line).size();
  if (num_cols < 2) csv_fail(path, 1, "need at least one feature column and a label column");
  const Index d = static_cast<Index>(num_cols - 1);

  std::vector<double> values;
  std::vector<int> labels;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_fields(line);
    if (fields.size() != num_cols) {
      csv_fail(path, row,
               "expected " + std::to_string(num_cols) + " columns, got " +
                   std::to_string(fields.size()));
    }
    for (std::size_t c = 0; c + 1 < fields.size(); ++c) {
      double v = 0.0;
      const auto& f = fields[c];
      const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
      if (res.ec != std::errc{} || res.ptr != f.data() + f.size()) {
        csv_fail(path, row, "column " + std::to_string(c + 1) + ": not a number: '" + f + "'");
      }
      values.push_back(v);
    }
    int label = 0;
    const auto& f = fields.back();
    const auto res = std::from_chars(f.data(), f.data() + f.size(), label);
    if (res.ec != std::errc{} || res.ptr != f.data() + f.size() || label < 0) {
      csv_fail(path, row,
               "column " + std::to_string(num_cols) + ": not a class index: '" + f + "'");
    }
    labels.push_back(label);
  }
  if (labels.empty()) csv_fail(path, row, "no data rows");

  Dataset out;
  out.split = split;
  out.labels = std::move(labels);
  out.features.resize(d, static_cast<Index>(out.labels.size()));
  for (Index col = 0; col < out.features.cols(); ++col) {
    for (Index i = 0; i < d; ++i) {
      out.features(i, col) = values[static_cast<std::size_t>(col * d + i)];
    }
  }
  return out;
}

}  // namespace ella
