#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "fedsir/numerics.hpp"

namespace fedsir {

/// A client's shard after double masking: P X Psi with P shared by the
/// server and Psi private to the client. Orthogonal masks preserve the
/// Frobenius norm and the pooled second moment, nothing else is recoverable
/// without P.
struct MaskedBlock {
  MatrixXd x_masked;  // d x n_i
  int client_id = 0;
};

inline bool is_orthogonal(const MatrixXd& p, double tol = 1e-10) {
  if (p.rows() != p.cols() || p.rows() == 0) return false;
  return max_abs(p.transpose() * p - MatrixXd::Identity(p.rows(), p.cols())) <=
         tol;
}

/// Client-side masking. `centered_cols` holds samples as columns (d x n_i)
/// with each coordinate's mean over samples already removed. The private
/// right mask is drawn from (seed) alone so the client never shares its
/// randomness.
inline MaskedBlock mask_client(const MatrixXd& centered_cols, const MatrixXd& p,
                               std::uint64_t seed, int client_id = 0) {
  const Eigen::Index d = centered_cols.rows();
  const Eigen::Index n = centered_cols.cols();
  if (n < 1) throw std::invalid_argument("mask_client: empty block");
  require_finite(centered_cols, "mask_client");
  if (p.rows() != d || !is_orthogonal(p)) {
    throw std::invalid_argument("mask_client: p must be d x d orthogonal");
  }
  const double scale = std::max(1.0, max_abs(centered_cols));
  if (centered_cols.rowwise().mean().cwiseAbs().maxCoeff() > 1e-8 * scale) {
    throw std::invalid_argument("mask_client: block is not centered");
  }
  MatrixXd psi = haar_orthogonal(static_cast<int>(n), seed);
  MaskedBlock out;
  out.client_id = client_id;
  out.x_masked = p * centered_cols * psi;
  return out;
}

/// Server-side pooled covariance from masked blocks. Concatenates the blocks,
/// takes a thin SVD, unrotates the left factor with P^T, and rebuilds
/// (1/N) U D^2 U^T. Orthogonal masks drop out exactly, so this equals the
/// pooled covariance of the raw centered blocks up to floating-point error.
inline MatrixXd fedsvd_covariance(const std::vector<MaskedBlock>& blocks,
                                  const MatrixXd& p) {
  if (blocks.empty()) {
    throw std::invalid_argument("fedsvd_covariance: no blocks");
  }
  const Eigen::Index d = blocks.front().x_masked.rows();
  if (p.rows() != d || !is_orthogonal(p)) {
    throw std::invalid_argument("fedsvd_covariance: p must be d x d orthogonal");
  }
  Eigen::Index n_total = 0;
  for (const MaskedBlock& block : blocks) {
    if (block.x_masked.rows() != d) {
      throw std::invalid_argument("fedsvd_covariance: dimension mismatch");
    }
    n_total += block.x_masked.cols();
  }
  MatrixXd concat(d, n_total);
  Eigen::Index at = 0;
  for (const MaskedBlock& block : blocks) {
    concat.middleCols(at, block.x_masked.cols()) = block.x_masked;
    at += block.x_masked.cols();
  }
  Eigen::BDCSVD<MatrixXd> svd(concat, Eigen::ComputeThinU);
  MatrixXd u = p.transpose() * svd.matrixU();
  VectorXd d2 = svd.singularValues().array().square();
  return symmetrize(u * d2.asDiagonal() * u.transpose() /
                    static_cast<double>(n_total));
}

/// Reference the masked route must reproduce: the pooled second moment of
/// the raw centered blocks, (1/N) sum_i X_i X_i^T. Kept independent of the
/// SVD path so the two can be compared in tests.
inline MatrixXd pooled_covariance_oracle(const std::vector<MatrixXd>& raw_cols) {
  if (raw_cols.empty()) {
    throw std::invalid_argument("pooled_covariance_oracle: no blocks");
  }
  const Eigen::Index d = raw_cols.front().rows();
  MatrixXd sum = MatrixXd::Zero(d, d);
  Eigen::Index n_total = 0;
  for (const MatrixXd& x : raw_cols) {
    if (x.rows() != d) {
      throw std::invalid_argument("pooled_covariance_oracle: dimension mismatch");
    }
    sum.noalias() += x * x.transpose();
    n_total += x.cols();
  }
  return symmetrize(sum / static_cast<double>(n_total));
}

}  // namespace fedsir
