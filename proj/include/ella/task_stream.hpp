#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ella/linalg.hpp"

namespace ella {

enum class Split { kTrain, kTest };

// Column-per-sample feature block with integer class labels.
struct Dataset {
  Matrix features;          // d x n
  std::vector<int> labels;  // size n
  Split split = Split::kTrain;

  Index size() const { return features.cols(); }
  Index dim() const { return features.rows(); }
};

enum class TaskKind { kRotatedGaussians, kPermutedFeatures, kLabelRemap, kCsv };

// Gaussian class blobs placed on a circle in the first two feature
// coordinates; the remaining coordinates carry noise only.
struct GaussianGeometry {
  Index feature_dim = 16;
  int num_classes = 4;
  int train_per_class = 200;
  int test_per_class = 100;
  double variance = 0.5;
  double radius = 2.0;
  std::vector<double> base_angles;  // one per class (radians); empty = evenly spaced
};

// Everything needed to regenerate one task bit-for-bit.
struct TaskSpec {
  TaskKind kind = TaskKind::kRotatedGaussians;
  std::string name;
  GaussianGeometry geom;
  double rotation_angle = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t permutation_seed = 0;  // permuted-features only
  std::uint64_t remap_seed = 0;        // label-remap only
  std::string train_csv;               // csv only
  std::string test_csv;
};

struct StreamOrder {
  std::vector<TaskSpec> tasks;
  std::string name;
};

struct TaskData {
  Dataset train;
  Dataset test;
};

// splitmix64-style mixer used to derive independent sub-seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

// Class means of the geometry after rotating the circle by `rotation`.
std::vector<Vector> class_means(const GaussianGeometry& geom, double rotation);

// Deterministic per (kind, params, seed); train and test come from
// separate draws.
TaskData generate_task(const TaskSpec& spec);

std::vector<TaskData> make_stream(const StreamOrder& order);

// Header row, numeric feature columns, final integer label column.
// UTF-8, comma separated, '.' decimal point.
Dataset load_csv_dataset(const std::string& path, Split split);

}  // namespace ella
