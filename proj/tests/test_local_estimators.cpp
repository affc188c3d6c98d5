#include <catch2/catch_amalgamated.hpp>

#include "fedsir/local_estimators.hpp"

using Catch::Approx;
using fedsir::MatrixXd;
using fedsir::SampleBlock;
using fedsir::VectorXd;

namespace {

SampleBlock random_block(int n, int d, std::uint64_t seed) {
  std::mt19937_64 rng = fedsir::seeded_rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  SampleBlock block;
  block.covariates.resize(n, d);
  block.response.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) block.covariates(i, j) = gauss(rng);
    block.response(i) = gauss(rng);
  }
  return block;
}

// Brute-force covariance oracle: accumulate rank-one terms sample by sample.
MatrixXd covariance_oracle(const MatrixXd& centered) {
  const int n = static_cast<int>(centered.rows());
  const int d = static_cast<int>(centered.cols());
  MatrixXd out = MatrixXd::Zero(d, d);
  for (int i = 0; i < n; ++i) {
    for (int a = 0; a < d; ++a)
      for (int b = 0; b < d; ++b) out(a, b) += centered(i, a) * centered(i, b);
  }
  return out / n;
}

}  // namespace

TEST_CASE("center removes the sample mean and reports it") {
  SampleBlock block;
  block.covariates.resize(3, 2);
  block.covariates << 1.0, 10.0, 2.0, 20.0, 6.0, 30.0;
  block.response.resize(3);
  block.response << 1.0, 2.0, 3.0;

  auto [centered, mean] = fedsir::center(block);
  REQUIRE(mean(0) == Approx(3.0));
  REQUIRE(mean(1) == Approx(20.0));
  REQUIRE(centered.covariates.colwise().mean().cwiseAbs().maxCoeff() < 1e-14);
  REQUIRE(centered.covariates(2, 0) == Approx(3.0));
  REQUIRE((centered.response - block.response).norm() == 0.0);
}

TEST_CASE("sample_covariance uses divisor n and matches a brute-force oracle") {
  MatrixXd x(2, 2);
  x << 1.0, -1.0, -1.0, 1.0;
  MatrixXd sigma = fedsir::sample_covariance(x);
  REQUIRE(sigma(0, 0) == Approx(1.0));
  REQUIRE(sigma(0, 1) == Approx(-1.0));
  REQUIRE(sigma(1, 1) == Approx(1.0));

  SampleBlock block = random_block(37, 5, 11);
  auto [centered, mean] = fedsir::center(block);
  MatrixXd fast = fedsir::sample_covariance(centered.covariates);
  MatrixXd slow = covariance_oracle(centered.covariates);
  REQUIRE(fedsir::max_abs(fast - slow) < 1e-12);

  MatrixXd bessel = slow * (37.0 / 36.0);
  REQUIRE(fedsir::max_abs(fast - bessel) > 1e-4);

  MatrixXd one_row(1, 3);
  one_row.setZero();
  REQUIRE_THROWS_AS(fedsir::sample_covariance(one_row), std::invalid_argument);
}

TEST_CASE("sample_covariance of repeated identical rows is zero") {
  MatrixXd x = MatrixXd::Zero(4, 3);
  REQUIRE(fedsir::max_abs(fedsir::sample_covariance(x)) == 0.0);
}

TEST_CASE("sort_by_response sorts ascending and keeps ties stable") {
  SampleBlock block;
  block.covariates.resize(5, 1);
  block.covariates << 10.0, 20.0, 30.0, 40.0, 50.0;
  block.response.resize(5);
  block.response << 2.0, 1.0, 2.0, 1.0, 0.0;

  SampleBlock sorted = fedsir::sort_by_response(block);
  VectorXd want_y(5), want_x(5);
  want_y << 0.0, 1.0, 1.0, 2.0, 2.0;
  want_x << 50.0, 20.0, 40.0, 10.0, 30.0;
  REQUIRE((sorted.response - want_y).norm() == 0.0);
  REQUIRE((sorted.covariates.col(0) - want_x).norm() == 0.0);
}

TEST_CASE("cov_conditional_two_slice matches hand-computed pair sums") {
  // Sorted 1-d samples 0, 2, 5, 9: pairs give (2-0)^2 + (9-5)^2 = 20,
  // divided by n = 4.
  SampleBlock sorted;
  sorted.covariates.resize(4, 1);
  sorted.covariates << 0.0, 2.0, 5.0, 9.0;
  sorted.response.resize(4);
  sorted.response << 1.0, 2.0, 3.0, 4.0;
  MatrixXd q = fedsir::cov_conditional_two_slice(sorted);
  REQUIRE(q(0, 0) == Approx(5.0));

  // Odd n: the 5th sample is dropped from pairing but still counts in the
  // divisor: 20 / 5 = 4.
  SampleBlock odd;
  odd.covariates.resize(5, 1);
  odd.covariates << 0.0, 2.0, 5.0, 9.0, 100.0;
  odd.response.resize(5);
  odd.response << 1.0, 2.0, 3.0, 4.0, 5.0;
  REQUIRE(fedsir::cov_conditional_two_slice(odd)(0, 0) == Approx(4.0));
}

TEST_CASE("cov_conditional_two_slice is shift-invariant") {
  SampleBlock block = random_block(40, 4, 21);
  SampleBlock sorted = fedsir::sort_by_response(block);
  MatrixXd q1 = fedsir::cov_conditional_two_slice(sorted);
  SampleBlock shifted = sorted;
  shifted.covariates.rowwise() += Eigen::RowVector4d(5.0, -3.0, 0.5, 9.0);
  MatrixXd q2 = fedsir::cov_conditional_two_slice(shifted);
  REQUIRE(fedsir::max_abs(q1 - q2) < 1e-12);
}

TEST_CASE("slice_sizes merges singleton remainders") {
  using sizes_t = std::vector<Eigen::Index>;
  REQUIRE(fedsir::slice_sizes(45, 20) == sizes_t{20, 20, 5});
  REQUIRE(fedsir::slice_sizes(41, 20) == sizes_t{20, 21});
  REQUIRE(fedsir::slice_sizes(40, 20) == sizes_t{20, 20});
  REQUIRE(fedsir::slice_sizes(7, 3) == sizes_t{3, 4});
  REQUIRE(fedsir::slice_sizes(5, 2) == sizes_t{2, 3});
}

TEST_CASE("cov_conditional_sliced matches hand-computed slice averages") {
  // Sorted 1-d samples 0, 2, 5, 9 with slice size 2: slice variances are 1
  // and 4 (divisor n_h = 2), averaged over H = 2 slices.
  SampleBlock sorted;
  sorted.covariates.resize(4, 1);
  sorted.covariates << 0.0, 2.0, 5.0, 9.0;
  sorted.response.resize(4);
  sorted.response << 1.0, 2.0, 3.0, 4.0;
  MatrixXd q = fedsir::cov_conditional_sliced(sorted, 2);
  REQUIRE(q(0, 0) == Approx(2.5));
}

TEST_CASE("cov_conditional_sliced agrees with a bookkeeping oracle") {
  SampleBlock block = random_block(45, 3, 33);
  SampleBlock sorted = fedsir::sort_by_response(block);
  MatrixXd fast = fedsir::cov_conditional_sliced(sorted, 20);

  // Independent bookkeeping: slices 0..19, 20..39, 40..44.
  MatrixXd slow = MatrixXd::Zero(3, 3);
  const int bounds[4] = {0, 20, 40, 45};
  for (int h = 0; h < 3; ++h) {
    const int nh = bounds[h + 1] - bounds[h];
    MatrixXd slice = sorted.covariates.middleRows(bounds[h], nh);
    Eigen::RowVectorXd mean = slice.colwise().mean();
    MatrixXd centered = slice.rowwise() - mean;
    slow += covariance_oracle(centered);
  }
  slow /= 3.0;
  REQUIRE(fedsir::max_abs(fast - slow) < 1e-12);
}

TEST_CASE("cov_conditional_sliced with one covering slice equals the sample covariance") {
  SampleBlock block = random_block(12, 4, 44);
  auto [centered, mean] = fedsir::center(block);
  SampleBlock sorted = fedsir::sort_by_response(centered);
  MatrixXd q = fedsir::cov_conditional_sliced(sorted, 50);
  MatrixXd sigma = fedsir::sample_covariance(centered.covariates);
  REQUIRE(fedsir::max_abs(q - sigma) < 1e-12);
}

TEST_CASE("cov_conditional_sliced validates inputs") {
  SampleBlock block = random_block(10, 2, 5);
  REQUIRE_THROWS_AS(fedsir::cov_conditional_sliced(block, 1),
                    std::invalid_argument);
  SampleBlock tiny = random_block(3, 2, 6);
  REQUIRE_THROWS_AS(fedsir::cov_conditional_sliced(tiny, 2),
                    std::invalid_argument);
}

TEST_CASE("t_matrix symmetrizes the difference") {
  MatrixXd sigma(2, 2), q(2, 2);
  sigma << 4.0, 1.0, 1.0, 3.0;
  q << 1.0, 0.5, 0.3, 1.0;
  MatrixXd t = fedsir::t_matrix(sigma, q);
  REQUIRE(fedsir::is_symmetric(t, 1e-15));
  REQUIRE(t(0, 0) == Approx(3.0));
  REQUIRE(t(0, 1) == Approx(0.6));
  REQUIRE(t(1, 1) == Approx(2.0));
}

TEST_CASE("local_bic_dimension reproduces the worked spectrum example") {
  // Spectrum (4, 1, 0, 0, 0, 0) at n = 100 with penalty scale
  // c = 10 + log(100)/2: score(1) = 100 * 16/17 - c, score(2) = 100 - 3c.
  const int d = 6;
  MatrixXd v = fedsir::haar_orthogonal(d, 77);
  VectorXd w = VectorXd::Zero(d);
  w(0) = 4.0;
  w(1) = 1.0;
  MatrixXd t = fedsir::symmetrize(v * w.asDiagonal() * v.transpose());

  fedsir::BicVote vote = fedsir::local_bic_dimension(t, 100);
  const double c = 10.0 + 0.5 * std::log(100.0);
  REQUIRE(vote.k == 1);
  REQUIRE_FALSE(vote.degenerate);
  REQUIRE(vote.scores[0] == Approx(100.0 * 16.0 / 17.0 - c).epsilon(1e-9));
  REQUIRE(vote.scores[0] == Approx(81.8151).epsilon(1e-4));
  REQUIRE(vote.scores[1] == Approx(100.0 - 3.0 * c).epsilon(1e-9));
  REQUIRE(vote.scores[1] == Approx(63.0871).epsilon(1e-4));
}

TEST_CASE("local_bic_dimension flags an all-zero spectrum") {
  MatrixXd t = MatrixXd::Zero(5, 5);
  fedsir::BicVote vote = fedsir::local_bic_dimension(t, 50);
  REQUIRE(vote.k == 1);
  REQUIRE(vote.degenerate);
}

TEST_CASE("linearization_alpha scales with the squared top eigenvalue") {
  REQUIRE(fedsir::linearization_alpha(MatrixXd::Identity(4, 4), 1.0) ==
          Approx(4.0));
  MatrixXd sigma = MatrixXd::Zero(3, 3);
  sigma.diagonal() << 3.0, 1.0, 0.5;
  REQUIRE(fedsir::linearization_alpha(sigma, 2.0) == Approx(72.0));
  REQUIRE_THROWS_AS(fedsir::linearization_alpha(MatrixXd::Zero(3, 3), 1.0),
                    std::invalid_argument);
}

TEST_CASE("t_hat concentrates near zero when the response is independent") {
  // With y independent of x the conditional covariance matches the
  // marginal one, so T should vanish at rate sqrt(log d / n).
  const int n = 2000;
  const int d = 10;
  SampleBlock block = random_block(n, d, 314159);
  auto [centered, mean] = fedsir::center(block);
  fedsir::SummaryOptions opts;
  fedsir::LocalSummaries summaries = fedsir::local_summaries(centered, opts);
  const double bound = 5.0 * std::sqrt(std::log(static_cast<double>(d)) / n);
  REQUIRE(fedsir::max_abs(summaries.t_hat) < bound);
}

TEST_CASE("local_summaries bundles the per-client pieces consistently") {
  SampleBlock block = random_block(60, 4, 99);
  block.client_id = 3;
  auto [centered, mean] = fedsir::center(block);
  fedsir::SummaryOptions opts;
  opts.q_estimator = fedsir::QEstimator::Sliced;
  opts.slice_size = 10;
  fedsir::LocalSummaries summaries = fedsir::local_summaries(centered, opts);

  REQUIRE(summaries.client_id == 3);
  REQUIRE(summaries.n == 60);
  REQUIRE(fedsir::max_abs(summaries.sigma_hat -
                          fedsir::sample_covariance(centered.covariates)) == 0.0);
  SampleBlock sorted = fedsir::sort_by_response(centered);
  REQUIRE(fedsir::max_abs(summaries.q_hat -
                          fedsir::cov_conditional_sliced(sorted, 10)) == 0.0);
  REQUIRE(fedsir::max_abs(summaries.t_hat -
                          fedsir::t_matrix(summaries.sigma_hat,
                                           summaries.q_hat)) == 0.0);
  REQUIRE(summaries.alpha ==
          Approx(fedsir::linearization_alpha(summaries.sigma_hat, 1.0)));

  // The sliced rank diagnostic: record how many eigenvalues stand clearly
  // above noise level. Informational only.
  fedsir::EigenDecomp eig = fedsir::sym_eigen(summaries.t_hat);
  int dominant = 0;
  for (int j = 0; j < 4; ++j)
    if (std::abs(eig.values(j)) > 0.1 * std::abs(eig.values(0))) ++dominant;
  INFO("dominant t_hat eigenvalues: " << dominant);
  SUCCEED();
}
