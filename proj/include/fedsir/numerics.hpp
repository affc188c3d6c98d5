#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>

#include "fedsir/rng.hpp"

namespace fedsir {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Eigendecomposition of a symmetric matrix with a fixed presentation:
/// values sorted descending, vectors stored as columns in matching order,
/// each column's first nonzero entry made positive.
struct EigenDecomp {
  VectorXd values;
  MatrixXd vectors;
};

inline double max_abs(const MatrixXd& a) {
  return a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff();
}

inline bool is_symmetric(const MatrixXd& a, double tol = 1e-12) {
  if (a.rows() != a.cols()) return false;
  const double scale = std::max(1.0, max_abs(a));
  return (a - a.transpose()).cwiseAbs().maxCoeff() <= tol * scale;
}

inline MatrixXd symmetrize(const MatrixXd& a) {
  return 0.5 * (a + a.transpose());
}

inline void require_symmetric(const MatrixXd& a, const char* where) {
  if (!is_symmetric(a, 1e-10)) {
    throw std::invalid_argument(std::string(where) +
                                ": matrix is not symmetric");
  }
}

inline void require_finite(const MatrixXd& a, const char* where) {
  if (!a.allFinite()) {
    throw std::invalid_argument(std::string(where) +
                                ": matrix has non-finite entries");
  }
}

/// Flips eigenvector columns so the first entry of magnitude above 1e-12 is
/// positive. Pins an otherwise arbitrary sign so runs are comparable.
inline void fix_eigenvector_signs(MatrixXd& vectors) {
  for (Eigen::Index j = 0; j < vectors.cols(); ++j) {
    for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
      const double v = vectors(i, j);
      if (std::abs(v) > 1e-12) {
        if (v < 0.0) vectors.col(j) = -vectors.col(j);
        break;
      }
    }
  }
}

/// Symmetric eigendecomposition, values descending, deterministic signs.
inline EigenDecomp sym_eigen(const MatrixXd& a) {
  require_finite(a, "sym_eigen");
  require_symmetric(a, "sym_eigen");
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(symmetrize(a));
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("sym_eigen: eigensolver failed to converge");
  }
  const Eigen::Index d = a.rows();
  EigenDecomp out;
  out.values = solver.eigenvalues().reverse();
  out.vectors = solver.eigenvectors().rowwise().reverse();
  (void)d;
  fix_eigenvector_signs(out.vectors);
  return out;
}

/// Symmetric PSD square root. Eigenvalues below zero are clamped to zero, so
/// near-PSD inputs (for example sample covariances with -1e-14 noise
/// eigenvalues) do not produce NaN.
inline MatrixXd sym_sqrt(const MatrixXd& a) {
  EigenDecomp eig = sym_eigen(a);
  VectorXd roots = eig.values.cwiseMax(0.0).cwiseSqrt();
  return symmetrize(eig.vectors * roots.asDiagonal() *
                    eig.vectors.transpose());
}

/// Elementwise soft threshold: sign(x) * max(|x| - t, 0).
inline MatrixXd soft_threshold(const MatrixXd& a, double t) {
  if (!(t >= 0.0)) {
    throw std::invalid_argument("soft_threshold: threshold must be >= 0");
  }
  return a.unaryExpr([t](double x) {
    const double shrunk = std::abs(x) - t;
    return shrunk > 0.0 ? (x > 0.0 ? shrunk : -shrunk) : 0.0;
  });
}

/// Haar-distributed orthogonal matrix: QR of an iid standard Gaussian matrix
/// with columns rescaled by the signs of R's diagonal (sign(0) taken as +1),
/// which makes the factorization unique and the law exactly Haar.
inline MatrixXd haar_orthogonal(int dim, std::uint64_t seed) {
  if (dim < 1) throw std::invalid_argument("haar_orthogonal: dim must be >= 1");
  std::mt19937_64 rng = seeded_rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  MatrixXd g(dim, dim);
  for (Eigen::Index j = 0; j < dim; ++j)
    for (Eigen::Index i = 0; i < dim; ++i) g(i, j) = gauss(rng);
  Eigen::HouseholderQR<MatrixXd> qr(g);
  MatrixXd q = qr.householderQ() * MatrixXd::Identity(dim, dim);
  const MatrixXd& packed = qr.matrixQR();
  for (Eigen::Index j = 0; j < dim; ++j) {
    if (packed(j, j) < 0.0) q.col(j) = -q.col(j);
  }
  return q;
}

/// Orthogonal projection onto the column span of b: P = B (B^T B)^{-1} B^T,
/// computed from a thin SVD. Requires full column rank.
inline MatrixXd span_projection(const MatrixXd& b) {
  if (b.rows() < 1 || b.cols() < 1 || b.rows() < b.cols()) {
    throw std::invalid_argument("span_projection: need d x k with d >= k >= 1");
  }
  require_finite(b, "span_projection");
  Eigen::JacobiSVD<MatrixXd> svd(b, Eigen::ComputeThinU);
  if (svd.singularValues().minCoeff() <= 1e-10) {
    throw std::invalid_argument("span_projection: rank-deficient basis");
  }
  const MatrixXd& u = svd.matrixU();
  return symmetrize(u * u.transpose());
}

}  // namespace fedsir
