#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "fedsir/local_estimators.hpp"
#include "fedsir/rng.hpp"

namespace fedsir {

/// The generating subspace basis and its active rows (1-based).
struct GroundTruth {
  MatrixXd b;
  std::vector<int> active;
  int k = 0;
};

struct FederatedDataset {
  std::vector<SampleBlock> clients;
  GroundTruth truth;
  std::vector<int> client_models;
  int setting = 0;
  int d = 0;
  std::uint64_t seed = 0;
};

struct DatasetOptions {
  double alpha = 1.0;        // scale of the per-client location shift
  double gamma = 0.5;        // AR(1) correlation decay
  bool non_gaussian = false; // add an entrywise Bernoulli(0.5) component
};

/// AR(1) covariance: entry (j, k) equals gamma^|j-k|.
inline MatrixXd ar1_covariance(int d, double gamma) {
  if (d < 1 || std::abs(gamma) >= 1.0) {
    throw std::invalid_argument("ar1_covariance: need d >= 1 and |gamma| < 1");
  }
  MatrixXd sigma(d, d);
  for (int j = 0; j < d; ++j)
    for (int k = 0; k < d; ++k) sigma(j, k) = std::pow(gamma, std::abs(j - k));
  return sigma;
}

/// First direction: ones on coordinates 1..3.
inline VectorXd beta_one(int d) {
  VectorXd b = VectorXd::Zero(d);
  b.head(3).setOnes();
  return b;
}

/// Second direction: ones on coordinates 4..5.
inline VectorXd beta_two(int d) {
  VectorXd b = VectorXd::Zero(d);
  b(3) = 1.0;
  b(4) = 1.0;
  return b;
}

/// Response links. u1 and u2 are the projections beta1^T x and beta2^T x.
///   model 1: u1 + eps
///   model 2: exp(u1 / sqrt(3) + eps)
///   model 3: u1 / (0.5 + (u2 + 1.5)^2) + eps
///   model 4: sgn(u1) * |2 + u2|^{-1} + eps
inline double link(int model, double u1, double u2, double eps) {
  switch (model) {
    case 1:
      return u1 + eps;
    case 2:
      return std::exp(u1 / std::sqrt(3.0) + eps);
    case 3:
      return u1 / (0.5 + (u2 + 1.5) * (u2 + 1.5)) + eps;
    case 4: {
      const double s = u1 > 0.0 ? 1.0 : (u1 < 0.0 ? -1.0 : 0.0);
      const double denom = std::abs(2.0 + u2);
      if (denom == 0.0) {
        throw std::invalid_argument("link: model 4 hit |2 + u2| == 0");
      }
      return s / denom + eps;
    }
    default:
      throw std::invalid_argument("link: model must be in 1..4");
  }
}

inline bool setting_has_two_directions(int setting) {
  return setting == 3 || setting == 4 || setting == 6;
}

inline GroundTruth ground_truth(int setting, int d) {
  if (setting < 1 || setting > 6) {
    throw std::invalid_argument("ground_truth: setting must be in 1..6");
  }
  if (d < 5) throw std::invalid_argument("ground_truth: need d >= 5");
  GroundTruth truth;
  if (setting_has_two_directions(setting)) {
    truth.k = 2;
    truth.b.resize(d, 2);
    truth.b.col(0) = beta_one(d);
    truth.b.col(1) = beta_two(d);
    truth.active = {1, 2, 3, 4, 5};
  } else {
    truth.k = 1;
    truth.b = beta_one(d);
    truth.active = {1, 2, 3};
  }
  return truth;
}

/// Draws one federated dataset.
///
/// Settings 1-4 (covariate shift): per client, a location A_i ~ N(0, alpha I)
/// and v_i ~ N(A_i, I); samples x ~ N(v_i, Sigma) with Sigma AR(1); the
/// response follows model 1-4 respectively.
///
/// Settings 5-6 (concept shift): x ~ N(0, Sigma); a per-client coin b_i
/// selects model 1 vs 2 (setting 5) or model 3 vs 4 (setting 6).
///
/// Each client consumes an independent substream derived from (seed, client),
/// so the draw does not depend on generation order.
inline FederatedDataset gen_setting(int setting, int m,
                                    const std::vector<int>& sizes, int d,
                                    std::uint64_t seed,
                                    const DatasetOptions& opts = {}) {
  if (m < 1 || static_cast<int>(sizes.size()) != m) {
    throw std::invalid_argument("gen_setting: sizes must list one n per client");
  }
  for (int n : sizes) {
    if (n < 1) throw std::invalid_argument("gen_setting: client sizes must be >= 1");
  }
  FederatedDataset data;
  data.setting = setting;
  data.d = d;
  data.seed = seed;
  data.truth = ground_truth(setting, d);

  MatrixXd sigma = ar1_covariance(d, opts.gamma);
  Eigen::LLT<MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success) {
    throw std::runtime_error("gen_setting: covariance factorization failed");
  }
  MatrixXd chol = llt.matrixL();
  const VectorXd b1 = beta_one(d);
  const VectorXd b2 = beta_two(d);
  const bool covariate_shift = setting >= 1 && setting <= 4;

  data.clients.reserve(static_cast<std::size_t>(m));
  data.client_models.reserve(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    std::mt19937_64 rng =
        seeded_rng(mix_seed(seed, stream::datagen, static_cast<std::uint64_t>(i)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);

    VectorXd shift = VectorXd::Zero(d);
    int model = setting;
    if (covariate_shift) {
      const double root_alpha = std::sqrt(opts.alpha);
      VectorXd a(d), v(d);
      for (int j = 0; j < d; ++j) a(j) = root_alpha * gauss(rng);
      for (int j = 0; j < d; ++j) v(j) = a(j) + gauss(rng);
      shift = v;
    } else {
      const bool heads = coin(rng);
      if (setting == 5) model = heads ? 1 : 2;
      else model = heads ? 3 : 4;
    }

    const int n = sizes[static_cast<std::size_t>(i)];
    SampleBlock block;
    block.client_id = i;
    block.covariates.resize(n, d);
    block.response.resize(n);
    VectorXd z(d);
    for (int r = 0; r < n; ++r) {
      for (int j = 0; j < d; ++j) z(j) = gauss(rng);
      VectorXd x = shift + chol * z;
      if (opts.non_gaussian) {
        for (int j = 0; j < d; ++j) x(j) += coin(rng) ? 1.0 : 0.0;
      }
      const double eps = gauss(rng);
      block.covariates.row(r) = x.transpose();
      block.response(r) = link(model, b1.dot(x), b2.dot(x), eps);
    }
    data.clients.push_back(std::move(block));
    data.client_models.push_back(model);
  }
  return data;
}

inline FederatedDataset gen_setting(int setting, int m, int n_per_client, int d,
                                    std::uint64_t seed,
                                    const DatasetOptions& opts = {}) {
  return gen_setting(setting, m, std::vector<int>(static_cast<std::size_t>(m),
                                                  n_per_client),
                     d, seed, opts);
}

/// Same draw with the sub-Gaussian (but non-Gaussian) covariate variant.
inline FederatedDataset gen_non_gaussian(int setting, int m,
                                         const std::vector<int>& sizes, int d,
                                         std::uint64_t seed,
                                         DatasetOptions opts = {}) {
  opts.non_gaussian = true;
  return gen_setting(setting, m, sizes, d, seed, opts);
}

struct SplitResult {
  VectorXd weights;
  std::vector<int> sizes;
};

/// Uneven client sizes: omega ~ Dirichlet_m(alpha), counts ~
/// Multinomial(n_total, omega). A draw containing an empty client is redrawn
/// up to 100 times; if zeros persist, the largest client donates one sample
/// per empty client.
inline SplitResult dirichlet_multinomial_split(int n_total, int m, double alpha,
                                               std::uint64_t seed) {
  if (m < 1 || n_total < m || !(alpha > 0.0)) {
    throw std::invalid_argument(
        "dirichlet_multinomial_split: need m >= 1, n_total >= m, alpha > 0");
  }
  std::mt19937_64 rng = seeded_rng(seed);
  std::gamma_distribution<double> gamma_draw(alpha, 1.0);

  SplitResult out;
  out.weights.resize(m);
  double total = 0.0;
  for (int i = 0; i < m; ++i) {
    out.weights(i) = gamma_draw(rng);
    total += out.weights(i);
  }
  if (total <= 0.0) out.weights.setConstant(1.0 / m);
  else out.weights /= total;

  std::vector<double> probs(out.weights.data(), out.weights.data() + m);
  std::discrete_distribution<int> categorical(probs.begin(), probs.end());
  std::vector<int> counts;
  for (int attempt = 0; attempt < 100; ++attempt) {
    counts.assign(static_cast<std::size_t>(m), 0);
    for (int s = 0; s < n_total; ++s) counts[static_cast<std::size_t>(categorical(rng))]++;
    if (std::all_of(counts.begin(), counts.end(), [](int c) { return c > 0; }))
      break;
  }
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] == 0) {
      auto largest = std::max_element(counts.begin(), counts.end());
      *largest -= 1;
      counts[i] = 1;
    }
  }
  out.sizes = std::move(counts);
  return out;
}

}  // namespace fedsir
