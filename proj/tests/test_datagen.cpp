#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "fedsir/datagen.hpp"

using Catch::Approx;
using fedsir::MatrixXd;
using fedsir::VectorXd;

TEST_CASE("ar1_covariance matches hand values") {
  MatrixXd sigma = fedsir::ar1_covariance(3, 0.5);
  MatrixXd want(3, 3);
  want << 1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0;
  REQUIRE(fedsir::max_abs(sigma - want) < 1e-15);
  REQUIRE_THROWS_AS(fedsir::ar1_covariance(3, 1.0), std::invalid_argument);
}

TEST_CASE("link evaluates the four response models") {
  REQUIRE(fedsir::link(1, 2.0, 0.0, 0.5) == Approx(2.5));
  REQUIRE(fedsir::link(2, std::sqrt(3.0), 0.0, 0.2) == Approx(std::exp(1.2)));
  REQUIRE(fedsir::link(3, 1.0, 0.0, 0.0) == Approx(1.0 / 2.75));
  REQUIRE(fedsir::link(4, -2.0, 1.0, 0.0) == Approx(-1.0 / 3.0));
  REQUIRE(fedsir::link(4, 0.0, 1.0, 0.25) == Approx(0.25));
  REQUIRE_THROWS_AS(fedsir::link(5, 0.0, 0.0, 0.0), std::invalid_argument);
  REQUIRE_THROWS_AS(fedsir::link(4, 1.0, -2.0, 0.0), std::invalid_argument);
}

TEST_CASE("ground_truth exposes the generating directions per setting") {
  for (int setting : {1, 2, 5}) {
    fedsir::GroundTruth truth = fedsir::ground_truth(setting, 8);
    REQUIRE(truth.k == 1);
    REQUIRE(truth.active == std::vector<int>{1, 2, 3});
    REQUIRE(truth.b.cols() == 1);
    REQUIRE(truth.b.col(0).head(3).sum() == Approx(3.0));
    REQUIRE(truth.b.col(0).tail(5).cwiseAbs().sum() == Approx(0.0));
  }
  for (int setting : {3, 4, 6}) {
    fedsir::GroundTruth truth = fedsir::ground_truth(setting, 8);
    REQUIRE(truth.k == 2);
    REQUIRE(truth.active == std::vector<int>{1, 2, 3, 4, 5});
    REQUIRE(truth.b.cols() == 2);
    REQUIRE(truth.b(3, 1) == Approx(1.0));
    REQUIRE(truth.b(3, 0) == Approx(0.0));
  }
}

TEST_CASE("gen_setting produces the requested shapes deterministically") {
  std::vector<int> sizes{7, 4, 9};
  fedsir::FederatedDataset a = fedsir::gen_setting(1, 3, sizes, 6, 42);
  REQUIRE(a.clients.size() == 3);
  for (int i = 0; i < 3; ++i) {
    REQUIRE(a.clients[static_cast<std::size_t>(i)].n() == sizes[static_cast<std::size_t>(i)]);
    REQUIRE(a.clients[static_cast<std::size_t>(i)].d() == 6);
    REQUIRE(a.clients[static_cast<std::size_t>(i)].client_id == i);
  }

  fedsir::FederatedDataset b = fedsir::gen_setting(1, 3, sizes, 6, 42);
  for (int i = 0; i < 3; ++i) {
    REQUIRE((a.clients[static_cast<std::size_t>(i)].covariates -
             b.clients[static_cast<std::size_t>(i)].covariates).norm() == 0.0);
    REQUIRE((a.clients[static_cast<std::size_t>(i)].response -
             b.clients[static_cast<std::size_t>(i)].response).norm() == 0.0);
  }

  fedsir::FederatedDataset c = fedsir::gen_setting(1, 3, sizes, 6, 43);
  REQUIRE((a.clients[0].covariates - c.clients[0].covariates).norm() > 1e-6);
}

TEST_CASE("gen_setting client substreams do not depend on the client count") {
  std::vector<int> two{6, 5};
  std::vector<int> three{6, 5, 8};
  fedsir::FederatedDataset a = fedsir::gen_setting(5, 2, two, 6, 7);
  fedsir::FederatedDataset b = fedsir::gen_setting(5, 3, three, 6, 7);
  for (int i = 0; i < 2; ++i) {
    REQUIRE((a.clients[static_cast<std::size_t>(i)].covariates -
             b.clients[static_cast<std::size_t>(i)].covariates).norm() == 0.0);
    REQUIRE((a.clients[static_cast<std::size_t>(i)].response -
             b.clients[static_cast<std::size_t>(i)].response).norm() == 0.0);
  }
}

TEST_CASE("setting 1 clients have AR(1) scatter around a shifted location") {
  fedsir::FederatedDataset data = fedsir::gen_setting(1, 1, 5000, 5, 11);
  auto [centered, mean] = fedsir::center(data.clients[0]);
  MatrixXd sigma_hat = fedsir::sample_covariance(centered.covariates);
  MatrixXd sigma = fedsir::ar1_covariance(5, 0.5);
  REQUIRE(fedsir::max_abs(sigma_hat - sigma) < 0.15);
}

TEST_CASE("setting 1 client means spread with variance alpha + 1") {
  // Client means estimate v_i ~ N(0, (alpha + 1) I). With 150 clients the
  // per-coordinate variance of the means should sit near 2 for alpha = 1.
  const int m = 150;
  fedsir::FederatedDataset data =
      fedsir::gen_setting(1, m, std::vector<int>(m, 400), 5, 19);
  MatrixXd means(m, 3);
  for (int i = 0; i < m; ++i) {
    means.row(i) = data.clients[static_cast<std::size_t>(i)].covariates.colwise().mean();
  }
  means.rowwise() -= means.colwise().mean().eval();
  VectorXd var = means.array().square().colwise().mean();
  for (int j = 0; j < 3; ++j) {
    REQUIRE(var(j) > 1.3);
    REQUIRE(var(j) < 2.9);
  }
}

TEST_CASE("setting 5 draws are mean-zero with model mixing across clients") {
  const int m = 60;
  fedsir::FederatedDataset data =
      fedsir::gen_setting(5, m, std::vector<int>(m, 50), 6, 23);
  std::set<int> models(data.client_models.begin(), data.client_models.end());
  REQUIRE(models == std::set<int>{1, 2});

  MatrixXd all(60 * 50, 6);
  for (int i = 0; i < m; ++i)
    all.middleRows(i * 50, 50) = data.clients[static_cast<std::size_t>(i)].covariates;
  REQUIRE(all.colwise().mean().cwiseAbs().maxCoeff() < 0.1);

  fedsir::FederatedDataset pure = fedsir::gen_setting(1, m, std::vector<int>(m, 5), 6, 23);
  REQUIRE(std::set<int>(pure.client_models.begin(), pure.client_models.end()) ==
          std::set<int>{1});
}

TEST_CASE("setting 5 response variance matches the linear model arithmetic") {
  // Model 1 with x ~ N(0, Sigma): var(y) = beta1' Sigma beta1 + 1 = 6.5 for
  // the AR(1) matrix at gamma = 0.5 (3 diagonal ones + 4 * 0.5 + 2 * 0.25).
  const int m = 8;
  fedsir::FederatedDataset data =
      fedsir::gen_setting(1, m, std::vector<int>(m, 4000), 10, 31);
  double pooled = 0.0;
  int used = 0;
  for (const fedsir::SampleBlock& block : data.clients) {
    const double mean = block.response.mean();
    // Setting 1 adds a client shift to y through beta1' v_i; remove the
    // within-client mean so only the AR(1) + noise part remains.
    pooled += (block.response.array() - mean).square().mean();
    used += 1;
  }
  pooled /= used;
  REQUIRE(pooled == Approx(6.5).margin(0.6));
}

TEST_CASE("non-Gaussian variant adds a Bernoulli component") {
  const int m = 6;
  fedsir::FederatedDataset data = fedsir::gen_non_gaussian(
      5, m, std::vector<int>(m, 4000), 5, 37);
  MatrixXd all(6 * 4000, 5);
  for (int i = 0; i < m; ++i)
    all.middleRows(i * 4000, 4000) = data.clients[static_cast<std::size_t>(i)].covariates;
  // Mean shifts to 1/2 and the variance grows by 1/4 per coordinate.
  REQUIRE(all.colwise().mean().minCoeff() > 0.4);
  REQUIRE(all.colwise().mean().maxCoeff() < 0.6);
  Eigen::RowVectorXd mean = all.colwise().mean();
  all.rowwise() -= mean;
  VectorXd var = all.array().square().colwise().mean();
  for (int j = 0; j < 5; ++j) REQUIRE(var(j) == Approx(1.25).margin(0.08));
}

TEST_CASE("dirichlet_multinomial_split partitions the total across clients") {
  fedsir::SplitResult split = fedsir::dirichlet_multinomial_split(2000, 10, 1.0, 5);
  REQUIRE(split.sizes.size() == 10);
  int total = 0;
  for (int n : split.sizes) {
    REQUIRE(n > 0);
    total += n;
  }
  REQUIRE(total == 2000);
  REQUIRE(split.weights.sum() == Approx(1.0));
  REQUIRE(split.weights.minCoeff() > 0.0);

  fedsir::SplitResult again = fedsir::dirichlet_multinomial_split(2000, 10, 1.0, 5);
  REQUIRE(split.sizes == again.sizes);
}

TEST_CASE("dirichlet concentration controls imbalance") {
  // Large alpha concentrates omega near uniform; small alpha spreads it.
  fedsir::SplitResult flat = fedsir::dirichlet_multinomial_split(5000, 10, 1000.0, 9);
  int lo = *std::min_element(flat.sizes.begin(), flat.sizes.end());
  int hi = *std::max_element(flat.sizes.begin(), flat.sizes.end());
  REQUIRE(hi - lo < 150);

  double spread_small = 0.0, spread_large = 0.0;
  for (std::uint64_t s = 0; s < 30; ++s) {
    spread_small += fedsir::dirichlet_multinomial_split(5000, 10, 0.3, 100 + s)
                        .weights.maxCoeff();
    spread_large += fedsir::dirichlet_multinomial_split(5000, 10, 50.0, 100 + s)
                        .weights.maxCoeff();
  }
  REQUIRE(spread_small > spread_large);
}

TEST_CASE("dirichlet_multinomial_split never returns an empty client") {
  for (std::uint64_t s = 0; s < 200; ++s) {
    fedsir::SplitResult split =
        fedsir::dirichlet_multinomial_split(35, 30, 0.05, s);
    int total = 0;
    for (int n : split.sizes) {
      REQUIRE(n >= 1);
      total += n;
    }
    REQUIRE(total == 35);
  }
  REQUIRE_THROWS_AS(fedsir::dirichlet_multinomial_split(5, 10, 1.0, 1),
                    std::invalid_argument);
}
