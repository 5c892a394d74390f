#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>

#include "ella/linalg.hpp"

namespace ella {

// Running elementwise sum of the low-rank updates of all finished tasks,
// one matrix per adapted layer. Single-writer: the sequential task loop
// owns all mutation.
class PastAccumulator {
 public:
  // Adds delta into the running sum for `layer` (creates the entry on
  // first use). Summation order is arrival order.
  void accumulate(int layer, const Matrix& delta) {
    auto it = per_layer_.find(layer);
    if (it == per_layer_.end()) {
      per_layer_.emplace(layer, delta);
      return;
    }
    require_same_shape("PastAccumulator::accumulate", it->second, delta);
    it->second += delta;
  }

  // Called once by the driver after each task's updates are accumulated.
  void finish_task() { ++task_count_; }

  int task_count() const { return task_count_; }
  bool empty() const { return per_layer_.empty(); }

  const Matrix* find(int layer) const {
    auto it = per_layer_.find(layer);
    return it == per_layer_.end() ? nullptr : &it->second;
  }

  const std::map<int, Matrix>& per_layer() const { return per_layer_; }

 private:
  std::map<int, Matrix> per_layer_;
  int task_count_ = 0;
};

// Per-coordinate energy of past updates, E_ij = |w_past_ij| + epsilon.
// The floor keeps every entry strictly positive so the elementwise
// reciprocal is well defined.
struct EnergyMatrix {
  Matrix values;
  double epsilon = 0.0;
};

inline EnergyMatrix energy(const Matrix& w_past, double epsilon) {
  if (!(epsilon > 0.0)) {
    throw std::invalid_argument("energy: epsilon must be > 0, got " + std::to_string(epsilon));
  }
  return EnergyMatrix{(w_past.array().abs() + epsilon).matrix(), epsilon};
}

/// Alignment penalty ||delta_w ⊙ w_past||_F^2.
inline double penalty(const Matrix& delta_w, const Matrix& w_past) {
  require_same_shape("penalty", delta_w, w_past);
  return delta_w.cwiseProduct(w_past).squaredNorm();
}

/// d penalty / d delta_w = 2 (w_past ⊙ w_past) ⊙ delta_w.
inline Matrix penalty_grad(const Matrix& delta_w, const Matrix& w_past) {
  require_same_shape("penalty_grad", delta_w, w_past);
  return 2.0 * w_past.cwiseProduct(w_past).cwiseProduct(delta_w);
}

/// Penalty gradient pushed through the factorization delta_w = A * B:
/// with M = penalty_grad(A*B, w_past), gradA = M * B^T and gradB = A^T * M.
inline std::pair<Matrix, Matrix> penalty_grad_factors(const LowRankFactors& f,
                                                      const Matrix& w_past) {
  Matrix m = penalty_grad(f.product(), w_past);
  return {m * f.B.transpose(), f.A.transpose() * m};
}

// One shrinkage instance: the unconstrained gradient step to stay close
// to, the energy of past updates, and the trade-off strength.
struct ShrinkageProblem {
  Matrix grad;
  EnergyMatrix past_energy;
  double lambda = 0.0;

  ShrinkageProblem(Matrix g, EnergyMatrix e, double l)
      : grad(std::move(g)), past_energy(std::move(e)), lambda(l) {
    require_same_shape("ShrinkageProblem", grad, past_energy.values);
    if (lambda < 0.0) {
      throw std::invalid_argument("ShrinkageProblem: lambda must be >= 0, got " +
                                  std::to_string(lambda));
    }
  }
};

/// Closed-form anisotropic shrinkage: out_ij = g_ij / (1 + lambda * E_ij^2).
/// Shrinks each coordinate toward zero in proportion to accumulated past
/// energy; sign is preserved and |out_ij| <= |g_ij|.
inline Matrix shrinkage_solve(const ShrinkageProblem& p) {
  return (p.grad.array() / (1.0 + p.lambda * p.past_energy.values.array().square())).matrix();
}

/// Scalar objective 0.5*(z - g)^2 + 0.5*lambda*e^2*z^2 whose minimizer the
/// closed form solves coordinatewise.
inline double percoord_objective(double z, double g, double e, double lambda) {
  const double d = z - g;
  return 0.5 * d * d + 0.5 * lambda * e * e * z * z;
}

/// Brute-force 1-D minimizer of percoord_objective via golden-section
/// search on [-2|g|, 2|g|], accurate to tol. Kept independent of the
/// closed form so it can serve as its oracle.
inline double percoord_oracle(double g, double e, double lambda, double tol = 1e-9) {
  if (!(tol > 0.0)) {
    throw std::invalid_argument("percoord_oracle: tol must be > 0");
  }
  double lo = -2.0 * std::abs(g);
  double hi = 2.0 * std::abs(g);
  if (hi - lo <= tol) return 0.5 * (lo + hi);

  constexpr double kInvPhi = 0.6180339887498949;
  constexpr int kMaxIter = 200;
  double x1 = hi - kInvPhi * (hi - lo);
  double x2 = lo + kInvPhi * (hi - lo);
  double f1 = percoord_objective(x1, g, e, lambda);
  double f2 = percoord_objective(x2, g, e, lambda);
  for (int it = 0; it < kMaxIter; ++it) {
    if (f1 < f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - kInvPhi * (hi - lo);
      f1 = percoord_objective(x1, g, e, lambda);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + kInvPhi * (hi - lo);
      f2 = percoord_objective(x2, g, e, lambda);
    }
    if (hi - lo <= tol) return 0.5 * (lo + hi);
  }
  throw std::runtime_error("percoord_oracle: no convergence after " + std::to_string(kMaxIter) +
                           " iterations, bracket width " + std::to_string(hi - lo));
}

/// Signed overlap <delta_w, w_past>_F between an update and the past sum.
inline double interference(const Matrix& delta_w, const Matrix& w_past) {
  return frob_inner(delta_w, w_past);
}

/// Upper bound on |interference(shrinkage_solve(p), w_past)|:
/// ||G||_F / (2 sqrt(lambda)) * ||E^{-1} ⊙ w_past||_F. Undefined at
/// lambda = 0.
inline double interference_bound(const ShrinkageProblem& p, const Matrix& w_past) {
  if (!(p.lambda > 0.0)) {
    throw std::invalid_argument("interference_bound: lambda must be > 0");
  }
  require_same_shape("interference_bound", p.past_energy.values, w_past);
  const double g_norm = std::sqrt(frob_norm_sq(p.grad));
  const double weighted =
      std::sqrt((w_past.array() / p.past_energy.values.array()).square().sum());
  return g_norm / (2.0 * std::sqrt(p.lambda)) * weighted;
}

struct PenaltyEnergySplit {
  double achieved;  // ||E ⊙ shrinkage_solve(p)||_F^2
  double bound;     // ||G||_F^2 / (4 lambda)
};

/// Energy-weighted norm of the optimal update against its cap. The cap is
/// attained exactly when E_ij^2 = 1/lambda on every coordinate.
inline PenaltyEnergySplit penalty_energy_bound(const ShrinkageProblem& p) {
  if (!(p.lambda > 0.0)) {
    throw std::invalid_argument("penalty_energy_bound: lambda must be > 0");
  }
  const Matrix sol = shrinkage_solve(p);
  const double achieved = p.past_energy.values.cwiseProduct(sol).squaredNorm();
  const double bound = frob_norm_sq(p.grad) / (4.0 * p.lambda);
  return {achieved, bound};
}

}  // namespace ella
