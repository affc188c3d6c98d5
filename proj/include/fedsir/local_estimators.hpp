#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "fedsir/numerics.hpp"

namespace fedsir {

/// One client's shard. Rows of `covariates` are samples.
struct SampleBlock {
  MatrixXd covariates;
  VectorXd response;
  int client_id = 0;

  Eigen::Index n() const { return covariates.rows(); }
  Eigen::Index d() const { return covariates.cols(); }
};

inline void require_block(const SampleBlock& block, const char* where) {
  if (block.covariates.rows() != block.response.size() ||
      block.covariates.rows() < 1) {
    throw std::invalid_argument(std::string(where) +
                                ": covariate rows and response length differ");
  }
  if (!block.covariates.allFinite() || !block.response.allFinite()) {
    throw std::invalid_argument(std::string(where) + ": non-finite sample");
  }
}

/// Subtracts the per-coordinate sample mean. Returns the centered block and
/// the mean that was removed.
inline std::pair<SampleBlock, VectorXd> center(const SampleBlock& block) {
  require_block(block, "center");
  VectorXd mean = block.covariates.colwise().mean();
  SampleBlock out = block;
  out.covariates.rowwise() -= mean.transpose();
  return {std::move(out), std::move(mean)};
}

/// Sample covariance with divisor n (not n - 1): (1/n) X^T X on a centered
/// block. The population-style divisor matches the downstream weighting
/// where client contributions are combined as n_i / N.
inline MatrixXd sample_covariance(const MatrixXd& centered) {
  const Eigen::Index n = centered.rows();
  if (n < 2) {
    throw std::invalid_argument("sample_covariance: need at least 2 samples");
  }
  return symmetrize(centered.transpose() * centered / static_cast<double>(n));
}

/// Stable ascending sort by response. Ties keep their original order so the
/// concomitant sequence is reproducible.
inline SampleBlock sort_by_response(const SampleBlock& block) {
  require_block(block, "sort_by_response");
  const Eigen::Index n = block.n();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) {
                     return block.response(a) < block.response(b);
                   });
  SampleBlock out;
  out.client_id = block.client_id;
  out.covariates.resize(n, block.d());
  out.response.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.covariates.row(i) = block.covariates.row(order[static_cast<std::size_t>(i)]);
    out.response(i) = block.response(order[static_cast<std::size_t>(i)]);
  }
  return out;
}

/// Conditional covariance estimate from adjacent concomitant pairs:
/// (1/n) * sum over k of (x_(2k) - x_(2k-1)) (x_(2k) - x_(2k-1))^T.
/// Expects the block sorted by response. With odd n the last sample is
/// unused. Differences cancel the mean, so centering is not required here.
inline MatrixXd cov_conditional_two_slice(const SampleBlock& sorted) {
  require_block(sorted, "cov_conditional_two_slice");
  const Eigen::Index n = sorted.n();
  if (n < 2) {
    throw std::invalid_argument(
        "cov_conditional_two_slice: need at least 2 samples");
  }
  const Eigen::Index d = sorted.d();
  MatrixXd q = MatrixXd::Zero(d, d);
  for (Eigen::Index k = 0; 2 * k + 1 < n; ++k) {
    VectorXd diff =
        sorted.covariates.row(2 * k + 1) - sorted.covariates.row(2 * k);
    q.noalias() += diff * diff.transpose();
  }
  q /= static_cast<double>(n);
  return symmetrize(q);
}

/// Contiguous response-ordered slices of nominal size `slice_size`. A
/// remainder of one sample is merged into the previous slice; a remainder of
/// two or more forms its own short slice.
inline std::vector<Eigen::Index> slice_sizes(Eigen::Index n,
                                             Eigen::Index slice_size) {
  std::vector<Eigen::Index> sizes;
  const Eigen::Index full = n / slice_size;
  const Eigen::Index rem = n % slice_size;
  for (Eigen::Index h = 0; h < full; ++h) sizes.push_back(slice_size);
  if (rem == 1 && full > 0) {
    sizes.back() += 1;
  } else if (rem >= 1) {
    sizes.push_back(rem);
  }
  return sizes;
}

/// Conditional covariance estimate averaging within-slice covariances:
/// (1/H) * sum over slices of the slice covariance (divisor n_h, centered at
/// the slice mean). Expects the block sorted by response.
inline MatrixXd cov_conditional_sliced(const SampleBlock& sorted,
                                       Eigen::Index slice_size) {
  require_block(sorted, "cov_conditional_sliced");
  const Eigen::Index n = sorted.n();
  if (slice_size < 2) {
    throw std::invalid_argument("cov_conditional_sliced: slice_size must be >= 2");
  }
  if (n < 4) {
    throw std::invalid_argument("cov_conditional_sliced: need at least 4 samples");
  }
  const Eigen::Index d = sorted.d();
  const std::vector<Eigen::Index> sizes = slice_sizes(n, std::min(slice_size, n));
  MatrixXd q = MatrixXd::Zero(d, d);
  Eigen::Index start = 0;
  for (Eigen::Index nh : sizes) {
    auto slice = sorted.covariates.middleRows(start, nh);
    Eigen::RowVectorXd mean = slice.colwise().mean();
    MatrixXd centered = slice.rowwise() - mean;
    q.noalias() +=
        centered.transpose() * centered / static_cast<double>(nh);
    start += nh;
  }
  q /= static_cast<double>(sizes.size());
  return symmetrize(q);
}

/// T = sym(Sigma - Q), the matrix whose top eigenspace estimates the
/// reduction directions.
inline MatrixXd t_matrix(const MatrixXd& sigma_hat, const MatrixXd& q_hat) {
  if (sigma_hat.rows() != q_hat.rows() || sigma_hat.cols() != q_hat.cols()) {
    throw std::invalid_argument("t_matrix: shape mismatch");
  }
  return symmetrize(sigma_hat - q_hat);
}

/// Default BIC penalty scale: sqrt(n) + log(n) / 2.
inline double bic_penalty_scale(Eigen::Index n) {
  return std::sqrt(static_cast<double>(n)) +
         0.5 * std::log(static_cast<double>(n));
}

struct BicVote {
  int k = 1;
  bool degenerate = false;
  std::vector<double> scores;
};

/// Per-client dimension vote. Maximizes, over k in [1, d-1],
///   n * (sum of top-k squared eigenvalues of T) / (sum of all squared
///   eigenvalues) - c_n * k (k + 1) / 2.
/// Exact score ties take the smaller k. An all-zero spectrum returns k = 1
/// with the degenerate flag set.
inline BicVote local_bic_dimension(const MatrixXd& t_hat, Eigen::Index n,
                                   double c_n) {
  require_finite(t_hat, "local_bic_dimension");
  require_symmetric(t_hat, "local_bic_dimension");
  const Eigen::Index d = t_hat.rows();
  if (d < 2) {
    throw std::invalid_argument("local_bic_dimension: need d >= 2");
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(symmetrize(t_hat),
                                                 Eigen::EigenvaluesOnly);
  VectorXd values = solver.eigenvalues().reverse();
  VectorXd squares = values.array().square();
  const double total = squares.sum();
  BicVote vote;
  if (total <= 0.0) {
    vote.k = 1;
    vote.degenerate = true;
    return vote;
  }
  double cumulative = 0.0;
  double best = -std::numeric_limits<double>::infinity();
  vote.scores.reserve(static_cast<std::size_t>(d - 1));
  for (Eigen::Index k = 1; k <= d - 1; ++k) {
    cumulative += squares(k - 1);
    const double score = static_cast<double>(n) * cumulative / total -
                         c_n * static_cast<double>(k) *
                             static_cast<double>(k + 1) / 2.0;
    vote.scores.push_back(score);
    if (score > best) {
      best = score;
      vote.k = static_cast<int>(k);
    }
  }
  return vote;
}

inline BicVote local_bic_dimension(const MatrixXd& t_hat, Eigen::Index n) {
  return local_bic_dimension(t_hat, n, bic_penalty_scale(n));
}

/// Per-client step-size bound for the linearized update:
/// alpha = 4 * nu * lambda_max(Sigma)^2.
inline double linearization_alpha(const MatrixXd& sigma_hat, double nu) {
  require_finite(sigma_hat, "linearization_alpha");
  require_symmetric(sigma_hat, "linearization_alpha");
  if (!(nu > 0.0)) {
    throw std::invalid_argument("linearization_alpha: nu must be > 0");
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(symmetrize(sigma_hat),
                                                 Eigen::EigenvaluesOnly);
  const double lambda_max = solver.eigenvalues().maxCoeff();
  if (!(lambda_max > 0.0)) {
    throw std::invalid_argument(
        "linearization_alpha: covariance has no positive eigenvalue");
  }
  return 4.0 * nu * lambda_max * lambda_max;
}

enum class QEstimator { TwoSlice, Sliced };

struct SummaryOptions {
  QEstimator q_estimator = QEstimator::TwoSlice;
  Eigen::Index slice_size = 20;
  double nu = 1.0;
};

/// Everything a client contributes to the protocol, computed from its
/// centered shard in one pass.
struct LocalSummaries {
  MatrixXd sigma_hat;
  MatrixXd q_hat;
  MatrixXd t_hat;
  double alpha = 0.0;
  BicVote vote;
  Eigen::Index n = 0;
  int client_id = 0;
};

inline LocalSummaries local_summaries(const SampleBlock& centered,
                                      const SummaryOptions& opts) {
  LocalSummaries out;
  out.client_id = centered.client_id;
  out.n = centered.n();
  out.sigma_hat = sample_covariance(centered.covariates);
  SampleBlock sorted = sort_by_response(centered);
  out.q_hat = opts.q_estimator == QEstimator::TwoSlice
                  ? cov_conditional_two_slice(sorted)
                  : cov_conditional_sliced(sorted, opts.slice_size);
  out.t_hat = t_matrix(out.sigma_hat, out.q_hat);
  out.alpha = linearization_alpha(out.sigma_hat, opts.nu);
  out.vote = local_bic_dimension(out.t_hat, out.n);
  return out;
}

}  // namespace fedsir
