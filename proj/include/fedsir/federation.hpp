#pragma once

// In-process simulation of the server/client protocol: clients hold their
// samples privately, compute local summaries, and exchange only masked blocks
// and solver state with the server. The pipeline wires together the masked
// covariance round, the per-client dimension vote, hold-out tuning of the
// sparsity level, and the final federated fit, while recording every exchange
// in an auditable message log.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fedsir/admm.hpp"
#include "fedsir/datagen.hpp"
#include "fedsir/fedsvd.hpp"
#include "fedsir/local_estimators.hpp"
#include "fedsir/rng.hpp"

namespace fedsir {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct FederationConfig {
  double nu = 1.0;
  double eps = 1e-4;
  int max_iter = 2000;
  std::optional<double> rho;     // unset: choose by hold-out validation
  std::vector<double> rho_grid;  // empty: default grid derived from (d, N)
  std::optional<int> k;          // unset: per-client BIC vote, then mode
  QEstimator q_estimator = QEstimator::Sliced;
  Eigen::Index slice_size = 20;
  double validation_fraction = 0.5;
  std::uint64_t seed = 0;
  GammaSign gamma_sign = GammaSign::Plus;
  double support_tol = 0.05;
  bool retain_payloads = false;  // keep message payloads (audits / debugging)
};

inline void validate_federation_config(const FederationConfig& config) {
  if (!(config.nu > 0.0) || !std::isfinite(config.nu)) {
    throw std::invalid_argument("federation config: nu must be positive");
  }
  if (!(config.eps > 0.0) || !std::isfinite(config.eps)) {
    throw std::invalid_argument("federation config: eps must be positive");
  }
  if (config.max_iter < 1) {
    throw std::invalid_argument("federation config: max_iter must be >= 1");
  }
  if (!(config.validation_fraction > 0.0) ||
      config.validation_fraction > 0.9) {
    throw std::invalid_argument(
        "federation config: validation_fraction must lie in (0, 0.9]");
  }
  if (config.slice_size < 2) {
    throw std::invalid_argument("federation config: slice_size must be >= 2");
  }
  if (config.support_tol < 0.0 || !std::isfinite(config.support_tol)) {
    throw std::invalid_argument(
        "federation config: support_tol must be finite and >= 0");
  }
  if (config.rho && (!(*config.rho >= 0.0) || !std::isfinite(*config.rho))) {
    throw std::invalid_argument("federation config: rho must be >= 0");
  }
  if (config.k && *config.k < 1) {
    throw std::invalid_argument("federation config: k must be >= 1");
  }
  for (double g : config.rho_grid) {
    if (!(g >= 0.0) || !std::isfinite(g)) {
      throw std::invalid_argument(
          "federation config: rho_grid entries must be finite and >= 0");
    }
  }
}

/// Log-spaced candidate grid bracketing the (log d / N)^{1/2} rate the
/// sparsity level should track; multipliers 0.25..1.0 put the reference
/// point 0.5 * (log d / N)^{1/2} at the grid's log-midpoint with a factor
/// of two on either side. The hold-out objective is nearly flat in rho, so
/// a top end far above the reference rate lets the occasional draw run off
/// to a severely over-shrunken fit; capping at twice the reference bounds
/// that loss while the low end still admits near-dense fits.
inline std::vector<double> default_rho_grid(Eigen::Index d,
                                            Eigen::Index n_total,
                                            int points = 10) {
  if (d < 2) throw std::invalid_argument("default_rho_grid: d must be >= 2");
  if (n_total < 2) {
    throw std::invalid_argument("default_rho_grid: n_total must be >= 2");
  }
  if (points < 1) {
    throw std::invalid_argument("default_rho_grid: points must be >= 1");
  }
  const double base =
      std::sqrt(std::log(static_cast<double>(d)) / static_cast<double>(n_total));
  const double lo = 0.25;
  const double hi = 1.0;
  std::vector<double> grid;
  grid.reserve(static_cast<std::size_t>(points));
  if (points == 1) {
    grid.push_back(base);
    return grid;
  }
  for (int g = 0; g < points; ++g) {
    grid.push_back(base * lo *
                   std::pow(hi / lo, static_cast<double>(g) / (points - 1)));
  }
  return grid;
}

/// Smallest shard the conditional-covariance estimator can summarize. A
/// client below this cannot produce an objective or a dimension vote; it
/// still adds its masked block to the covariance round and receives results.
inline Eigen::Index min_summary_samples(QEstimator est) {
  return est == QEstimator::Sliced ? 4 : 2;
}

/// Whether a client of n samples can take part in hold-out tuning: the
/// validation shard needs at least one sample and the training shard must
/// still be summarizable. Smaller clients abstain from the tuning round.
inline bool can_tune(Eigen::Index n, double validation_fraction,
                     QEstimator est) {
  const auto n_val = static_cast<Eigen::Index>(
      std::floor(static_cast<double>(n) * validation_fraction));
  const Eigen::Index n_train = n - n_val;
  return n_val >= 1 &&
         n_train >= std::max<Eigen::Index>(2, min_summary_samples(est));
}

namespace detail {

inline std::string trim_copy(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_real(const std::string& value, const std::string& key) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(value, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("federation config: bad number for '" + key +
                                "': " + value);
  }
  if (used != value.size()) {
    throw std::invalid_argument("federation config: trailing text for '" +
                                key + "': " + value);
  }
  return out;
}

inline long long parse_integer(const std::string& value,
                               const std::string& key) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(value, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("federation config: bad integer for '" + key +
                                "': " + value);
  }
  if (used != value.size()) {
    throw std::invalid_argument("federation config: trailing text for '" +
                                key + "': " + value);
  }
  return out;
}

inline bool parse_flag(const std::string& value, const std::string& key) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw std::invalid_argument("federation config: bad flag for '" + key +
                              "': " + value);
}

}  // namespace detail

/// Flat key=value parser ('#' starts a comment, blank lines skipped).
/// Keys mirror FederationConfig fields; "auto" for rho / k clears the fixed
/// value so the pipeline selects them from data.
inline FederationConfig parse_federation_config(std::istream& in) {
  FederationConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim_copy(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("federation config line " +
                                  std::to_string(line_no) +
                                  ": expected key = value");
    }
    std::string key = detail::trim_copy(line.substr(0, eq));
    std::string value = detail::trim_copy(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw std::invalid_argument("federation config line " +
                                  std::to_string(line_no) +
                                  ": empty key or value");
    }
    if (key == "nu") {
      cfg.nu = detail::parse_real(value, key);
    } else if (key == "eps") {
      cfg.eps = detail::parse_real(value, key);
    } else if (key == "max_iter") {
      cfg.max_iter = static_cast<int>(detail::parse_integer(value, key));
    } else if (key == "rho") {
      if (value == "auto") {
        cfg.rho.reset();
      } else {
        cfg.rho = detail::parse_real(value, key);
      }
    } else if (key == "rho_grid") {
      cfg.rho_grid.clear();
      std::stringstream parts(value);
      std::string item;
      while (std::getline(parts, item, ',')) {
        item = detail::trim_copy(item);
        if (item.empty()) continue;
        cfg.rho_grid.push_back(detail::parse_real(item, key));
      }
      if (cfg.rho_grid.empty()) {
        throw std::invalid_argument(
            "federation config: rho_grid needs at least one value");
      }
    } else if (key == "k") {
      if (value == "auto") {
        cfg.k.reset();
      } else {
        cfg.k = static_cast<int>(detail::parse_integer(value, key));
      }
    } else if (key == "q_estimator") {
      if (value == "two-slice") {
        cfg.q_estimator = QEstimator::TwoSlice;
      } else if (value == "sliced") {
        cfg.q_estimator = QEstimator::Sliced;
      } else {
        throw std::invalid_argument(
            "federation config: q_estimator must be 'two-slice' or 'sliced'");
      }
    } else if (key == "slice_size") {
      cfg.slice_size =
          static_cast<Eigen::Index>(detail::parse_integer(value, key));
    } else if (key == "validation_fraction") {
      cfg.validation_fraction = detail::parse_real(value, key);
    } else if (key == "seed") {
      cfg.seed = static_cast<std::uint64_t>(detail::parse_integer(value, key));
    } else if (key == "gamma_sign") {
      if (value == "plus") {
        cfg.gamma_sign = GammaSign::Plus;
      } else if (value == "minus") {
        cfg.gamma_sign = GammaSign::Minus;
      } else {
        throw std::invalid_argument(
            "federation config: gamma_sign must be 'plus' or 'minus'");
      }
    } else if (key == "support_tol") {
      cfg.support_tol = detail::parse_real(value, key);
    } else if (key == "retain_payloads") {
      cfg.retain_payloads = detail::parse_flag(value, key);
    } else {
      throw std::invalid_argument("federation config: unknown key '" + key +
                                  "'");
    }
  }
  validate_federation_config(cfg);
  return cfg;
}

inline FederationConfig parse_federation_config(const std::string& text) {
  std::istringstream in(text);
  return parse_federation_config(in);
}

// ---------------------------------------------------------------------------
// Message log
// ---------------------------------------------------------------------------

enum class MessageKind {
  BroadcastP,      // server -> client: shared orthogonal mask
  MaskedBlock,     // client -> server: masked, centered sample block
  BroadcastState,  // server -> client: solver state (Pi, M) or directions
  PiUpdate,        // client -> server: soft-thresholded local update
  Result,          // either direction: scalar bundles (votes, errors, choices)
};

inline const char* to_string(MessageKind kind) {
  switch (kind) {
    case MessageKind::BroadcastP: return "broadcast-P";
    case MessageKind::MaskedBlock: return "masked-block";
    case MessageKind::BroadcastState: return "broadcast-state";
    case MessageKind::PiUpdate: return "pi-update";
    case MessageKind::Result: return "result";
  }
  return "unknown";
}

constexpr int kServerId = -1;

struct Message {
  MessageKind kind = MessageKind::Result;
  int sender = kServerId;
  int receiver = kServerId;
  int round = 0;        // position within the (sender, receiver) channel
  const char* note = "";
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  MatrixXd payload;     // populated only when the log retains payloads
};

class MessageLog {
 public:
  MessageLog() = default;
  explicit MessageLog(bool retain_payloads) : retain_(retain_payloads) {}

  bool retains_payloads() const { return retain_; }

  void record(MessageKind kind, int sender, int receiver, const char* note,
              const MatrixXd& payload) {
    Message& msg = push(kind, sender, receiver, note);
    msg.rows = payload.rows();
    msg.cols = payload.cols();
    if (retain_) msg.payload = payload;
  }

  /// Shape-only variant for high-frequency traffic where materializing the
  /// payload just to measure it would dominate the run.
  void record_shape(MessageKind kind, int sender, int receiver,
                    const char* note, Eigen::Index rows, Eigen::Index cols) {
    Message& msg = push(kind, sender, receiver, note);
    msg.rows = rows;
    msg.cols = cols;
  }

  void record_scalar(MessageKind kind, int sender, int receiver,
                     const char* note, double value) {
    MatrixXd payload(1, 1);
    payload(0, 0) = value;
    record(kind, sender, receiver, note, payload);
  }

  const std::vector<Message>& messages() const { return messages_; }
  std::size_t size() const { return messages_.size(); }

  std::size_t count(MessageKind kind) const {
    std::size_t n = 0;
    for (const Message& msg : messages_) {
      if (msg.kind == kind) ++n;
    }
    return n;
  }

 private:
  Message& push(MessageKind kind, int sender, int receiver, const char* note) {
    Message msg;
    msg.kind = kind;
    msg.sender = sender;
    msg.receiver = receiver;
    msg.note = note;
    msg.round = next_round_[{sender, receiver}]++;
    messages_.push_back(std::move(msg));
    return messages_.back();
  }

  bool retain_ = false;
  std::vector<Message> messages_;
  std::map<std::pair<int, int>, int> next_round_;
};

// ---------------------------------------------------------------------------
// Pipeline errors
// ---------------------------------------------------------------------------

/// Module errors annotated with the pipeline stage they surfaced in.
/// `numerical()` distinguishes solver breakdowns from invalid inputs.
class PipelineError : public std::runtime_error {
 public:
  PipelineError(const char* stage, const std::string& message, bool numerical)
      : std::runtime_error(std::string("pipeline stage '") + stage +
                           "': " + message),
        stage_(stage),
        numerical_(numerical) {}

  const char* stage() const noexcept { return stage_; }
  bool numerical() const noexcept { return numerical_; }

 private:
  const char* stage_;
  bool numerical_;
};

namespace detail {

template <typename F>
auto pipeline_stage(const char* name, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const PipelineError&) {
    throw;
  } catch (const DivergenceError& e) {
    throw PipelineError(name, e.what(), true);
  } catch (const std::exception& e) {
    throw PipelineError(name, e.what(), false);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dimension vote
// ---------------------------------------------------------------------------

/// Mode of the per-client dimension votes; a multi-way tie is broken
/// uniformly at random from the run seed, so reruns reproduce the choice.
inline int select_dimension(const std::vector<int>& votes,
                            std::uint64_t run_seed) {
  if (votes.empty()) {
    throw std::invalid_argument("select_dimension: no votes");
  }
  std::map<int, int> frequency;
  for (int v : votes) ++frequency[v];
  int best = 0;
  for (const auto& [value, count] : frequency) {
    (void)value;
    best = std::max(best, count);
  }
  std::vector<int> modes;
  for (const auto& [value, count] : frequency) {
    if (count == best) modes.push_back(value);  // ascending: map order
  }
  if (modes.size() == 1) return modes.front();
  auto rng = seeded_rng(mix_seed(run_seed, stream::dimension_tie));
  std::uniform_int_distribution<std::size_t> pick(0, modes.size() - 1);
  return modes[pick(rng)];
}

// ---------------------------------------------------------------------------
// Conditional-mean prediction
// ---------------------------------------------------------------------------

struct Prediction {
  double value = 0.0;
  bool fallback = false;  // every kernel weight underflowed to zero
};

/// Gaussian-kernel estimate of E[y | x = x_query] in the reduced coordinates
/// R(x) = directionsᵀ x. Location shifts of x cancel inside the kernel, so
/// raw and centered covariates give the same prediction.
inline Prediction conditional_mean_predict(const SampleBlock& train,
                                           const MatrixXd& directions,
                                           const VectorXd& x_query) {
  require_block(train, "conditional_mean_predict");
  if (directions.rows() != train.d() || directions.cols() < 1) {
    throw std::invalid_argument(
        "conditional_mean_predict: directions must be d x K");
  }
  if (x_query.size() != train.d()) {
    throw std::invalid_argument(
        "conditional_mean_predict: x_query has wrong dimension");
  }
  const VectorXd r_query = directions.transpose() * x_query;
  const MatrixXd r_train = train.covariates * directions;  // n x K
  double weight_sum = 0.0;
  double value_sum = 0.0;
  for (Eigen::Index j = 0; j < train.n(); ++j) {
    const double w = std::exp(
        -0.5 * (r_train.row(j).transpose() - r_query).squaredNorm());
    weight_sum += w;
    value_sum += w * train.response(j);
  }
  if (!(weight_sum > 0.0)) {
    return {train.response.mean(), true};
  }
  return {value_sum / weight_sum, false};
}

// ---------------------------------------------------------------------------
// Hold-out split
// ---------------------------------------------------------------------------

struct HoldoutShards {
  SampleBlock train;
  SampleBlock validation;
};

/// Seeded uniform permutation split; the validation shard takes
/// floor(n * validation_fraction) samples. Each client's permutation is
/// derived from the run seed and its id, so splits are reproducible and
/// independent across clients.
inline HoldoutShards split_holdout(const SampleBlock& block,
                                   double validation_fraction,
                                   std::uint64_t run_seed) {
  require_block(block, "split_holdout");
  if (!(validation_fraction > 0.0) || validation_fraction > 0.9) {
    throw std::invalid_argument(
        "split_holdout: validation_fraction must lie in (0, 0.9]");
  }
  const Eigen::Index n = block.n();
  const Eigen::Index n_val =
      static_cast<Eigen::Index>(std::floor(n * validation_fraction));
  const Eigen::Index n_train = n - n_val;
  if (n_val < 1 || n_train < 2) {
    throw std::invalid_argument(
        "split_holdout: block too small for the requested split");
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  auto rng = seeded_rng(mix_seed(run_seed, stream::holdout_split,
                                 static_cast<std::uint64_t>(block.client_id)));
  std::shuffle(order.begin(), order.end(), rng);

  HoldoutShards shards;
  shards.train.client_id = block.client_id;
  shards.train.covariates.resize(n_train, block.d());
  shards.train.response.resize(n_train);
  shards.validation.client_id = block.client_id;
  shards.validation.covariates.resize(n_val, block.d());
  shards.validation.response.resize(n_val);
  for (Eigen::Index j = 0; j < n_train; ++j) {
    shards.train.covariates.row(j) = block.covariates.row(order[j]);
    shards.train.response(j) = block.response(order[j]);
  }
  for (Eigen::Index j = 0; j < n_val; ++j) {
    shards.validation.covariates.row(j) =
        block.covariates.row(order[n_train + j]);
    shards.validation.response(j) = block.response(order[n_train + j]);
  }
  return shards;
}

// ---------------------------------------------------------------------------
// Hold-out selection of the sparsity level
// ---------------------------------------------------------------------------

struct RhoSelection {
  double rho = 0.0;
  int k_used = 1;
  std::vector<double> grid;    // ascending, deduplicated
  std::vector<double> errors;  // summed per-client mean validation error
  int fallback_predictions = 0;
};

namespace detail {

inline FitOptions fit_options_from(const FederationConfig& config, int k,
                                   double rho) {
  FitOptions opts;
  opts.k = k;
  opts.rho = rho;
  opts.nu = config.nu;
  opts.eps = config.eps;
  opts.max_iter = config.max_iter;
  opts.support_tol = config.support_tol;
  opts.gamma_sign = config.gamma_sign;
  return opts;
}

/// Observer that mirrors one solver round into the message log: the server
/// broadcast of (Pi, M) to every client and each client's update back.
inline std::function<void(const IterationInfo&)> round_logger(
    MessageLog* log, std::vector<int> client_ids, const char* phase) {
  if (log == nullptr) return {};
  return [log, ids = std::move(client_ids), phase](const IterationInfo& info) {
    const Eigen::Index d = info.state.pi.rows();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (log->retains_payloads()) {
        MatrixXd bundle(d, 2 * d);
        bundle << info.state.pi, info.state.m_lin;
        log->record(MessageKind::BroadcastState, kServerId, ids[i], phase,
                    bundle);
      } else {
        log->record_shape(MessageKind::BroadcastState, kServerId, ids[i],
                          phase, d, 2 * d);
      }
      if (log->retains_payloads()) {
        log->record(MessageKind::PiUpdate, ids[i], kServerId, phase,
                    info.client_updates[i]);
      } else {
        log->record_shape(MessageKind::PiUpdate, ids[i], kServerId, phase, d,
                          d);
      }
    }
  };
}

/// One masked-covariance round: every client masks its centered block with
/// the shared P and a private orthogonal draw, the server rebuilds the
/// weighted covariance from the concatenated masked blocks.
inline MatrixXd fedsvd_round(const std::vector<SampleBlock>& centered,
                             const MatrixXd& p, std::uint64_t run_seed,
                             std::uint64_t mask_stream, MessageLog* log,
                             const char* note) {
  std::vector<MaskedBlock> blocks;
  blocks.reserve(centered.size());
  for (const SampleBlock& block : centered) {
    MaskedBlock masked = mask_client(
        block.covariates.transpose(), p,
        mix_seed(run_seed, mask_stream,
                 static_cast<std::uint64_t>(block.client_id)),
        block.client_id);
    if (log != nullptr) {
      log->record(MessageKind::MaskedBlock, block.client_id, kServerId, note,
                  masked.x_masked);
    }
    blocks.push_back(std::move(masked));
  }
  return fedsvd_covariance(blocks, p);
}

struct TuneResult {
  RhoSelection selection;
};

/// Grid search on per-client hold-out shards: fit on the training halves,
/// score squared prediction error on the validation halves (unweighted sum
/// of per-client means), keep the smallest rho on ties. Clients too small to
/// split into a summarizable training shard plus a nonempty validation shard
/// abstain from the tuning round.
inline TuneResult tune_rho(const std::vector<SampleBlock>& raw_clients,
                           int k_hat, std::vector<double> grid,
                           const MatrixXd& p, const FederationConfig& config,
                           MessageLog* log) {
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  if (grid.empty()) {
    throw std::invalid_argument("tune_rho: empty candidate grid");
  }
  for (double g : grid) {
    if (!(g >= 0.0) || !std::isfinite(g)) {
      throw std::invalid_argument("tune_rho: grid entries must be >= 0");
    }
  }

  SummaryOptions sopts;
  sopts.q_estimator = config.q_estimator;
  sopts.slice_size = config.slice_size;
  sopts.nu = config.nu;

  std::vector<HoldoutShards> shards;
  std::vector<SampleBlock> centered_train;
  std::vector<LocalSummaries> train_summaries;
  std::vector<int> client_ids;
  Eigen::Index n_train_total = 0;
  shards.reserve(raw_clients.size());
  for (const SampleBlock& raw : raw_clients) {
    if (!can_tune(raw.n(), config.validation_fraction, config.q_estimator)) {
      continue;
    }
    shards.push_back(
        split_holdout(raw, config.validation_fraction, config.seed));
    auto [centered, mean] = center(shards.back().train);
    (void)mean;
    train_summaries.push_back(local_summaries(centered, sopts));
    centered_train.push_back(std::move(centered));
    client_ids.push_back(raw.client_id);
    n_train_total += train_summaries.back().n;
  }
  if (shards.empty()) {
    throw std::invalid_argument(
        "tune_rho: no client has enough samples to split for hold-out "
        "tuning");
  }

  const MatrixXd sigma_train =
      fedsvd_round(centered_train, p, config.seed, stream::train_mask, log,
                   "masked-train-shard");

  std::vector<ClientObjective> objectives;
  objectives.reserve(train_summaries.size());
  for (const LocalSummaries& s : train_summaries) {
    objectives.push_back({s.t_hat,
                          static_cast<double>(s.n) /
                              static_cast<double>(n_train_total),
                          s.alpha});
  }

  TuneResult out;
  out.selection.k_used = k_hat;
  out.selection.grid = grid;
  double best_error = std::numeric_limits<double>::infinity();
  for (double rho : grid) {
    FitOptions opts = fit_options_from(config, k_hat, rho);
    opts.observer = round_logger(log, client_ids, "tuning-round");
    FitResult fit = fit_fedssir(objectives, sigma_train, opts);
    double total_error = 0.0;
    for (std::size_t i = 0; i < shards.size(); ++i) {
      const SampleBlock& train = shards[i].train;
      const SampleBlock& validation = shards[i].validation;
      double client_error = 0.0;
      for (Eigen::Index j = 0; j < validation.n(); ++j) {
        Prediction pred = conditional_mean_predict(
            train, fit.directions, validation.covariates.row(j).transpose());
        if (pred.fallback) ++out.selection.fallback_predictions;
        const double gap = validation.response(j) - pred.value;
        client_error += gap * gap;
      }
      client_error /= static_cast<double>(validation.n());
      if (log != nullptr) {
        log->record_scalar(MessageKind::Result, client_ids[i], kServerId,
                           "validation-error", client_error);
      }
      total_error += client_error;
    }
    out.selection.errors.push_back(total_error);
    if (total_error < best_error) {  // strict: ties keep the smaller rho
      best_error = total_error;
      out.selection.rho = rho;
    }
  }
  return out;
}

}  // namespace detail

/// Standalone hold-out selection. Resolves K the same way the pipeline does
/// (fixed value from the config, otherwise the BIC vote), then scores the
/// grid on per-client splits. An empty grid argument falls back to the
/// config grid, then to the default grid for the dataset's shape.
inline RhoSelection select_rho(const FederatedDataset& dataset,
                               const FederationConfig& config,
                               std::vector<double> grid = {},
                               MessageLog* log = nullptr) {
  validate_federation_config(config);
  if (dataset.clients.empty()) {
    throw std::invalid_argument("select_rho: dataset has no clients");
  }
  const Eigen::Index d = dataset.clients.front().d();
  Eigen::Index n_total = 0;
  for (const SampleBlock& block : dataset.clients) {
    if (block.d() != d) {
      throw std::invalid_argument("select_rho: clients disagree on dimension");
    }
    n_total += block.n();
  }
  int k_hat = 0;
  if (config.k) {
    k_hat = *config.k;
  } else {
    SummaryOptions sopts;
    sopts.q_estimator = config.q_estimator;
    sopts.slice_size = config.slice_size;
    sopts.nu = config.nu;
    std::vector<int> votes;
    votes.reserve(dataset.clients.size());
    const Eigen::Index floor_n = min_summary_samples(config.q_estimator);
    for (const SampleBlock& block : dataset.clients) {
      if (block.n() < floor_n) continue;  // too small to vote
      auto [centered, mean] = center(block);
      (void)mean;
      votes.push_back(local_summaries(centered, sopts).vote.k);
    }
    if (votes.empty()) {
      throw std::invalid_argument(
          "select_rho: no client has enough samples to vote on the "
          "dimension");
    }
    k_hat = select_dimension(votes, config.seed);
  }
  if (grid.empty()) grid = config.rho_grid;
  if (grid.empty()) grid = default_rho_grid(d, n_total);
  const MatrixXd p =
      haar_orthogonal(d, mix_seed(config.seed, stream::server_mask));
  if (log != nullptr) {
    for (const SampleBlock& block : dataset.clients) {
      log->record(MessageKind::BroadcastP, kServerId, block.client_id,
                  "orthogonal-mask", p);
    }
  }
  return detail::tune_rho(dataset.clients, k_hat, std::move(grid), p, config,
                          log)
      .selection;
}

// ---------------------------------------------------------------------------
// End-to-end pipeline
// ---------------------------------------------------------------------------

struct PipelineResult {
  FitResult fit;
  int k_hat = 1;
  bool k_from_vote = false;
  std::vector<int> votes;  // per-client dimension votes (empty if k fixed)
  double rho_used = 0.0;
  bool rho_from_holdout = false;
  RhoSelection selection;  // populated when rho came from hold-out
  std::vector<int> active_clients;  // ids that contributed summaries
  std::uint64_t seed = 0;
  MessageLog log;
};

/// Full protocol on one federated dataset:
///   center + local summaries -> masked covariance round -> dimension vote ->
///   hold-out rho selection -> federated fit.
/// Every exchange lands in the message log; all randomness (masks, splits,
/// tie-breaks) derives from config.seed, so identical inputs reproduce the
/// result bit for bit. Clients too small to summarize still join the masked
/// covariance round and receive results, but abstain from the vote and the
/// fit objective (their weight redistributes over the active clients).
inline PipelineResult run_pipeline(const FederatedDataset& dataset,
                                   const FederationConfig& config) {
  validate_federation_config(config);
  if (dataset.clients.empty()) {
    throw std::invalid_argument("run_pipeline: dataset has no clients");
  }

  PipelineResult out;
  out.seed = config.seed;
  out.log = MessageLog(config.retain_payloads);
  MessageLog* log = &out.log;

  SummaryOptions sopts;
  sopts.q_estimator = config.q_estimator;
  sopts.slice_size = config.slice_size;
  sopts.nu = config.nu;

  // --- client-side: center shards, build local summaries.
  const Eigen::Index d = dataset.clients.front().d();
  const Eigen::Index floor_n = min_summary_samples(config.q_estimator);
  std::vector<SampleBlock> centered;
  std::vector<LocalSummaries> summaries;
  std::vector<int> client_ids;  // every client, covariance-round order
  Eigen::Index n_total = 0;     // samples across every client
  Eigen::Index n_active = 0;    // samples across summarizing clients
  detail::pipeline_stage("local-summaries", [&] {
    centered.reserve(dataset.clients.size());
    summaries.reserve(dataset.clients.size());
    for (const SampleBlock& block : dataset.clients) {
      if (block.d() != d) {
        throw std::invalid_argument("clients disagree on dimension");
      }
      auto [shard, mean] = center(block);
      (void)mean;
      if (block.n() >= floor_n) {
        summaries.push_back(local_summaries(shard, sopts));
        out.active_clients.push_back(block.client_id);
        n_active += block.n();
      }
      centered.push_back(std::move(shard));
      client_ids.push_back(block.client_id);
      n_total += block.n();
    }
    if (summaries.empty()) {
      throw std::invalid_argument(
          "no client has enough samples to summarize");
    }
    return 0;
  });

  // --- masked covariance round.
  MatrixXd p;
  MatrixXd sigma;
  detail::pipeline_stage("masked-covariance", [&] {
    p = haar_orthogonal(d, mix_seed(config.seed, stream::server_mask));
    for (int id : client_ids) {
      log->record(MessageKind::BroadcastP, kServerId, id, "orthogonal-mask",
                  p);
    }
    sigma = detail::fedsvd_round(centered, p, config.seed, stream::client_mask,
                                 log, "masked-shard");
    return 0;
  });

  // --- dimension vote.
  detail::pipeline_stage("dimension-vote", [&] {
    if (config.k) {
      out.k_hat = *config.k;
      out.k_from_vote = false;
      return 0;
    }
    for (std::size_t i = 0; i < summaries.size(); ++i) {
      out.votes.push_back(summaries[i].vote.k);
      log->record_scalar(MessageKind::Result, out.active_clients[i],
                         kServerId, "k-vote",
                         static_cast<double>(summaries[i].vote.k));
    }
    out.k_hat = select_dimension(out.votes, config.seed);
    out.k_from_vote = true;
    return 0;
  });

  // --- sparsity level.
  detail::pipeline_stage("rho-selection", [&] {
    if (config.rho) {
      out.rho_used = *config.rho;
      out.rho_from_holdout = false;
      return 0;
    }
    std::vector<double> grid = config.rho_grid;
    if (grid.empty()) grid = default_rho_grid(d, n_total);
    detail::TuneResult tuned = detail::tune_rho(
        dataset.clients, out.k_hat, std::move(grid), p, config, log);
    out.selection = std::move(tuned.selection);
    out.rho_used = out.selection.rho;
    out.rho_from_holdout = true;
    for (int id : client_ids) {
      log->record_scalar(MessageKind::Result, kServerId, id, "selected-rho",
                         out.rho_used);
    }
    return 0;
  });

  // --- federated fit on the full shards.
  detail::pipeline_stage("federated-fit", [&] {
    std::vector<ClientObjective> objectives;
    objectives.reserve(summaries.size());
    for (const LocalSummaries& s : summaries) {
      objectives.push_back({s.t_hat,
                            static_cast<double>(s.n) /
                                static_cast<double>(n_active),
                            s.alpha});
    }
    FitOptions opts = detail::fit_options_from(config, out.k_hat, out.rho_used);
    opts.observer = detail::round_logger(log, out.active_clients, "fit-round");
    out.fit = fit_fedssir(objectives, sigma, opts);
    for (int id : client_ids) {
      log->record(MessageKind::Result, kServerId, id, "fit-directions",
                  out.fit.directions);
    }
    return 0;
  });

  return out;
}

// ---------------------------------------------------------------------------
// Privacy audit
// ---------------------------------------------------------------------------

struct AuditReport {
  bool clean = true;
  std::size_t messages_scanned = 0;
  std::size_t payloads_compared = 0;
  std::vector<std::string> violations;
};

/// Scans a message log against the artifacts that must never leave a client:
/// raw and centered covariate blocks (either orientation), raw responses,
/// and the per-client covariance summaries. Payload comparisons need a log
/// recorded with retain_payloads; metadata-only logs still get the kind scan.
inline AuditReport privacy_audit(const MessageLog& log,
                                 const FederatedDataset& dataset,
                                 const FederationConfig& config) {
  AuditReport report;
  report.messages_scanned = log.size();

  struct Artifact {
    MatrixXd value;
    const char* label;
    int client_id;
  };
  std::vector<Artifact> artifacts;
  SummaryOptions sopts;
  sopts.q_estimator = config.q_estimator;
  sopts.slice_size = config.slice_size;
  sopts.nu = config.nu;
  for (const SampleBlock& block : dataset.clients) {
    auto [centered, mean] = center(block);
    (void)mean;
    artifacts.push_back({block.covariates, "raw-covariates", block.client_id});
    artifacts.push_back(
        {block.covariates.transpose(), "raw-covariates-t", block.client_id});
    artifacts.push_back(
        {centered.covariates, "centered-covariates", block.client_id});
    artifacts.push_back({centered.covariates.transpose(),
                         "centered-covariates-t", block.client_id});
    artifacts.push_back({block.response, "raw-response", block.client_id});
    artifacts.push_back(
        {block.response.transpose(), "raw-response-t", block.client_id});
    if (block.n() >= min_summary_samples(config.q_estimator)) {
      LocalSummaries s = local_summaries(centered, sopts);
      artifacts.push_back({s.sigma_hat, "client-covariance", block.client_id});
      artifacts.push_back(
          {s.q_hat, "client-conditional-covariance", block.client_id});
      artifacts.push_back({s.t_hat, "client-t-matrix", block.client_id});
    }
  }

  for (const Message& msg : log.messages()) {
    if (msg.payload.size() == 0) continue;
    ++report.payloads_compared;
    for (const Artifact& artifact : artifacts) {
      if (artifact.value.rows() != msg.payload.rows() ||
          artifact.value.cols() != msg.payload.cols()) {
        continue;
      }
      const double scale = std::max(1.0, max_abs(artifact.value));
      if (max_abs(msg.payload - artifact.value) <= 1e-9 * scale) {
        std::ostringstream what;
        what << to_string(msg.kind) << " message (" << msg.sender << " -> "
             << msg.receiver << ", round " << msg.round << ", note '"
             << msg.note << "') matches " << artifact.label << " of client "
             << artifact.client_id;
        report.violations.push_back(what.str());
      }
    }
  }
  report.clean = report.violations.empty();
  return report;
}

}  // namespace fedsir
