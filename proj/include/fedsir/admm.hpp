#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsir/numerics.hpp"

namespace fedsir {

/// Sign applied to the dual term inside the projection argument. The
/// derivation gives S + Gamma; the printed update sometimes circulates as
/// S - Gamma, so the variant is kept selectable for comparison runs.
enum class GammaSign { Plus, Minus };

/// One client's share of the objective: its T matrix, aggregation weight
/// n_i / N, and linearization constant alpha_i.
struct ClientObjective {
  MatrixXd t_hat;
  double weight = 1.0;
  double alpha = 1.0;
};

/// Iterates the server carries between rounds.
struct AdmmState {
  MatrixXd pi;
  MatrixXd h;
  MatrixXd gamma;
  MatrixXd m_lin;
  MatrixXd sigma_half;
  int iter = 0;
  std::vector<double> pi_deltas;
  std::vector<double> primal_residuals;
};

struct DivergenceError : std::runtime_error {
  int iteration;
  explicit DivergenceError(int iter)
      : std::runtime_error("solver diverged at iteration " +
                           std::to_string(iter)),
        iteration(iter) {}
};

/// Round zero: Pi = H = I, Gamma = 0, M = Sigma^2 - Sigma, and the cached
/// square root of Sigma.
inline AdmmState admm_init(const MatrixXd& sigma_hat) {
  require_finite(sigma_hat, "admm_init");
  require_symmetric(sigma_hat, "admm_init");
  const Eigen::Index d = sigma_hat.rows();
  AdmmState state;
  state.pi = MatrixXd::Identity(d, d);
  state.h = MatrixXd::Identity(d, d);
  state.gamma = MatrixXd::Zero(d, d);
  state.m_lin = symmetrize(sigma_hat * sigma_hat - sigma_hat);
  state.sigma_half = sym_sqrt(sigma_hat);
  return state;
}

/// Client half-step: soft threshold of the linearized gradient step,
/// ST(Pi + T / alpha - nu M / alpha, rho / alpha).
inline MatrixXd client_pi_update(const MatrixXd& pi, const MatrixXd& m_lin,
                                 const ClientObjective& client, double rho,
                                 double nu) {
  if (!(client.alpha > 0.0)) {
    throw std::invalid_argument("client_pi_update: alpha must be > 0");
  }
  if (!(rho >= 0.0)) {
    throw std::invalid_argument("client_pi_update: rho must be >= 0");
  }
  const double inv_alpha = 1.0 / client.alpha;
  MatrixXd arg = pi + inv_alpha * client.t_hat - (nu * inv_alpha) * m_lin;
  return soft_threshold(arg, rho * inv_alpha);
}

/// Server consensus step: the n_i / N weighted average of client updates,
/// symmetrized to shed accumulated asymmetry.
inline MatrixXd aggregate_pi(const std::vector<MatrixXd>& updates,
                             const std::vector<double>& weights) {
  if (updates.empty() || updates.size() != weights.size()) {
    throw std::invalid_argument("aggregate_pi: updates and weights mismatch");
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) {
      throw std::invalid_argument("aggregate_pi: weights must be positive");
    }
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("aggregate_pi: weights must sum to 1");
  }
  MatrixXd sum = weights[0] * updates[0];
  for (std::size_t i = 1; i < updates.size(); ++i) {
    if (updates[i].rows() != sum.rows() || updates[i].cols() != sum.cols()) {
      throw std::invalid_argument("aggregate_pi: shape mismatch");
    }
    sum.noalias() += weights[i] * updates[i];
  }
  return symmetrize(sum);
}

/// Smallest gamma >= 0 such that f(gamma) = sum_j clip(w_j - gamma, 0, 1)
/// drops to at most k. f is piecewise linear and non-increasing with
/// breakpoints at w_j and w_j - 1, so the crossing is solved exactly on the
/// bracketing segment instead of by iteration.
inline double gamma_star(const VectorXd& w, int k) {
  if (k < 1) throw std::invalid_argument("gamma_star: k must be >= 1");
  const auto f = [&w](double g) {
    double sum = 0.0;
    for (Eigen::Index j = 0; j < w.size(); ++j) {
      sum += std::min(1.0, std::max(w(j) - g, 0.0));
    }
    return sum;
  };
  const double target = static_cast<double>(k);
  if (f(0.0) <= target) return 0.0;

  std::vector<double> breaks;
  breaks.reserve(static_cast<std::size_t>(2 * w.size()));
  for (Eigen::Index j = 0; j < w.size(); ++j) {
    if (w(j) > 0.0) breaks.push_back(w(j));
    if (w(j) - 1.0 > 0.0) breaks.push_back(w(j) - 1.0);
  }
  std::sort(breaks.begin(), breaks.end());

  double prev = 0.0;
  double f_prev = f(0.0);
  for (double b : breaks) {
    const double f_b = f(b);
    if (f_b <= target) {
      // Linear between prev and b; f_prev > target >= f_b.
      return prev + (f_prev - target) * (b - prev) / (f_prev - f_b);
    }
    prev = b;
    f_prev = f_b;
  }
  // f reaches 0 at the largest breakpoint, so the loop always returns.
  throw std::runtime_error("gamma_star: crossing not found");
}

/// Euclidean projection onto {H : 0 <= H <= I, trace(H) <= k}: shift the
/// eigenvalues down by gamma_star and clip them to [0, 1].
inline MatrixXd fantope_project(const MatrixXd& w, int k) {
  EigenDecomp eig = sym_eigen(symmetrize(w));
  const double g = gamma_star(eig.values, k);
  VectorXd clipped =
      (eig.values.array() - g).cwiseMax(0.0).cwiseMin(1.0);
  return symmetrize(eig.vectors * clipped.asDiagonal() *
                    eig.vectors.transpose());
}

/// Server bookkeeping after aggregation: project the sqrt-sandwiched
/// iterate, advance the dual, and refresh the linearization matrix
///   S       = Sigma^{1/2} Pi Sigma^{1/2}
///   H       = project(S + Gamma)          (or S - Gamma under Minus)
///   Gamma   = Gamma + S - H
///   M       = Sigma^{1/2} (S - H + Gamma) Sigma^{1/2}.
inline void server_update(AdmmState& state, const MatrixXd& pi_next, int k,
                          GammaSign sign = GammaSign::Plus) {
  state.pi = pi_next;
  MatrixXd s = symmetrize(state.sigma_half * state.pi * state.sigma_half);
  MatrixXd projected_arg = sign == GammaSign::Plus ? MatrixXd(s + state.gamma)
                                                   : MatrixXd(s - state.gamma);
  state.h = fantope_project(projected_arg, k);
  state.gamma += s - state.h;
  state.m_lin = symmetrize(state.sigma_half * (s - state.h + state.gamma) *
                           state.sigma_half);
  state.primal_residuals.push_back((s - state.h).norm());
  state.iter += 1;
}

struct IterationInfo {
  int iter = 0;
  const AdmmState& state;
  const std::vector<MatrixXd>& client_updates;
  double pi_delta = 0.0;
  double primal_residual = 0.0;
};

struct FitOptions {
  int k = 1;
  double rho = 0.0;
  std::vector<double> rho_per_client;  // empty: use rho for every client
  double nu = 1.0;
  double eps = 1e-4;
  int max_iter = 2000;
  // Averaging per-client soft-thresholded updates leaves off-support rows of
  // B̂ with norms around 1e-4..2e-2 (each column of B̂ has unit norm), while
  // genuinely active rows carry a visible share of the column mass. 0.05
  // sits above the residue band with a wide margin on both sides.
  double support_tol = 0.05;
  GammaSign gamma_sign = GammaSign::Plus;
  std::function<void(const IterationInfo&)> observer;
};

struct FitResult {
  MatrixXd pi;
  MatrixXd directions;
  std::vector<int> support;
  int iterations = 0;
  bool converged = false;
  double final_delta = std::numeric_limits<double>::quiet_NaN();
  double final_primal = std::numeric_limits<double>::quiet_NaN();
  int k_used = 0;
  double rho_used = 0.0;
};

struct Directions {
  MatrixXd b;
  std::vector<int> support;
};

/// Top-k eigenvectors of the solution and the rows that carry mass. Support
/// indices are 1-based to match the covariate naming x1..xd.
inline Directions extract_directions(const MatrixXd& pi, int k,
                                     double support_tol = 0.05) {
  if (k < 1 || k > pi.rows()) {
    throw std::invalid_argument("extract_directions: k out of range");
  }
  EigenDecomp eig = sym_eigen(symmetrize(pi));
  Directions out;
  out.b = eig.vectors.leftCols(k);
  for (Eigen::Index row = 0; row < out.b.rows(); ++row) {
    if (out.b.row(row).norm() > support_tol) {
      out.support.push_back(static_cast<int>(row) + 1);
    }
  }
  return out;
}

/// Full solver loop. Clients take linearized soft-threshold steps against
/// the shared (Pi, M) state; the server averages, projects, and advances the
/// dual until the Pi iterate moves less than eps in Frobenius norm.
inline FitResult fit_fedssir(const std::vector<ClientObjective>& clients,
                             const MatrixXd& sigma_hat,
                             const FitOptions& opts) {
  if (clients.empty()) {
    throw std::invalid_argument("fit_fedssir: no clients");
  }
  if (opts.k < 1 || opts.k > sigma_hat.rows()) {
    throw std::invalid_argument("fit_fedssir: k out of range");
  }
  if (!(opts.eps >= 0.0) || opts.max_iter < 1) {
    throw std::invalid_argument("fit_fedssir: bad eps or max_iter");
  }
  if (!opts.rho_per_client.empty() &&
      opts.rho_per_client.size() != clients.size()) {
    throw std::invalid_argument("fit_fedssir: rho_per_client size mismatch");
  }
  std::vector<double> weights;
  weights.reserve(clients.size());
  for (const ClientObjective& client : clients) {
    require_finite(client.t_hat, "fit_fedssir");
    weights.push_back(client.weight);
  }

  AdmmState state = admm_init(sigma_hat);
  std::vector<MatrixXd> updates(clients.size());
  FitResult result;
  result.k_used = opts.k;
  result.rho_used = opts.rho;

  for (int t = 0; t < opts.max_iter; ++t) {
    for (std::size_t i = 0; i < clients.size(); ++i) {
      const double rho_i =
          opts.rho_per_client.empty() ? opts.rho : opts.rho_per_client[i];
      updates[i] =
          client_pi_update(state.pi, state.m_lin, clients[i], rho_i, opts.nu);
    }
    MatrixXd pi_next = aggregate_pi(updates, weights);
    const double delta = (pi_next - state.pi).norm();
    if (!pi_next.allFinite()) throw DivergenceError(t + 1);
    server_update(state, pi_next, opts.k, opts.gamma_sign);
    if (!state.m_lin.allFinite() || !state.gamma.allFinite()) {
      throw DivergenceError(t + 1);
    }
    state.pi_deltas.push_back(delta);
    result.iterations = t + 1;
    result.final_delta = delta;
    result.final_primal = state.primal_residuals.back();
    if (opts.observer) {
      IterationInfo info{t + 1, state, updates, delta,
                         state.primal_residuals.back()};
      opts.observer(info);
    }
    if (delta <= opts.eps) {
      result.converged = true;
      break;
    }
  }

  result.pi = state.pi;
  Directions dirs = extract_directions(state.pi, opts.k, opts.support_tol);
  result.directions = std::move(dirs.b);
  result.support = std::move(dirs.support);
  return result;
}

}  // namespace fedsir
