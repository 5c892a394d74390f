#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <stdexcept>
#include <string>
#include <utility>

namespace ella {

// Dense row-major storage. Everything in this library is desk scale
// (<= 512x512) and 64-bit; no sparse or blocked formats.
template <typename Scalar>
using DenseMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = DenseMatrix<double>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

template <typename Derived>
std::string shape_of(const Eigen::MatrixBase<Derived>& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

template <typename A, typename B>
void require_same_shape(const char* op, const Eigen::MatrixBase<A>& a,
                        const Eigen::MatrixBase<B>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_of(a) + " vs " +
                                shape_of(b));
  }
}

/// Matrix product, evaluated eagerly into a fresh matrix.
template <typename A, typename B>
DenseMatrix<typename A::Scalar> matmul(const Eigen::MatrixBase<A>& lhs,
                                       const Eigen::MatrixBase<B>& rhs) {
  if (lhs.cols() != rhs.rows()) {
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_of(lhs) + " * " +
                                shape_of(rhs));
  }
  return lhs * rhs;
}

/// Elementwise product (a ⊙ b)_ij = a_ij * b_ij.
template <typename A, typename B>
DenseMatrix<typename A::Scalar> hadamard(const Eigen::MatrixBase<A>& a,
                                         const Eigen::MatrixBase<B>& b) {
  require_same_shape("hadamard", a, b);
  return a.cwiseProduct(b);
}

/// Squared Frobenius norm, sum_ij m_ij^2.
template <typename D>
typename D::Scalar frob_norm_sq(const Eigen::MatrixBase<D>& m) {
  return m.squaredNorm();
}

/// Frobenius inner product <a, b> = sum_ij a_ij * b_ij.
template <typename A, typename B>
typename A::Scalar frob_inner(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  require_same_shape("frob_inner", a, b);
  return a.cwiseProduct(b).sum();
}

// Trainable low-rank factor pair; the weight update it carries is the
// product A * B (d x r times r x k).
struct LowRankFactors {
  Matrix A;
  Matrix B;
  Index rank = 0;

  LowRankFactors() = default;

  LowRankFactors(Matrix a, Matrix b) : A(std::move(a)), B(std::move(b)), rank(A.cols()) {
    if (A.cols() != B.rows()) {
      throw std::invalid_argument("LowRankFactors: A is " + shape_of(A) + " but B is " +
                                  shape_of(B));
    }
    if (rank > std::min(A.rows(), B.cols())) {
      throw std::invalid_argument("LowRankFactors: rank " + std::to_string(rank) +
                                  " exceeds min(" + std::to_string(A.rows()) + ", " +
                                  std::to_string(B.cols()) + ")");
    }
  }

  Matrix product() const { return A * B; }
};

}  // namespace ella
