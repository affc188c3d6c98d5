#pragma once

// Evaluation harness: subspace-recovery metrics, repeated benchmark runs over
// the synthetic generators with CSV export, and the summary statistics used
// to study how the error scales with (d, N) and the federation shape.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedsir/datagen.hpp"
#include "fedsir/federation.hpp"
#include "fedsir/numerics.hpp"

namespace fedsir {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Frobenius distance between the orthogonal projections onto the column
/// spans of a and b. Zero iff the spans agree; invariant to any change of
/// basis within each span; at most sqrt(rank(a) + rank(b)).
inline double subspace_distance(const MatrixXd& a, const MatrixXd& b) {
  if (a.rows() != b.rows()) {
    throw std::invalid_argument(
        "subspace_distance: bases live in different ambient dimensions");
  }
  return (span_projection(a) - span_projection(b)).norm();
}

struct SupportMetrics {
  double tpr = 0.0;  // recovered fraction of the active rows
  double fpr = 0.0;  // flagged fraction of the inactive rows
};

/// Row-support confusion rates. Both index lists are 1-based; `active` is the
/// generating truth, `estimated` the rows selected by the fit.
inline SupportMetrics support_metrics(const std::vector<int>& estimated,
                                      const std::vector<int>& active,
                                      Eigen::Index d) {
  if (active.empty()) {
    throw std::invalid_argument("support_metrics: active set is empty");
  }
  if (d < static_cast<Eigen::Index>(active.size())) {
    throw std::invalid_argument("support_metrics: d smaller than active set");
  }
  std::set<int> truth(active.begin(), active.end());
  std::set<int> chosen(estimated.begin(), estimated.end());
  for (int idx : chosen) {
    if (idx < 1 || idx > d) {
      throw std::invalid_argument(
          "support_metrics: estimated index out of range");
    }
  }
  for (int idx : truth) {
    if (idx < 1 || idx > d) {
      throw std::invalid_argument("support_metrics: active index out of range");
    }
  }
  std::size_t hits = 0;
  std::size_t false_hits = 0;
  for (int idx : chosen) {
    if (truth.count(idx)) ++hits;
    else ++false_hits;
  }
  SupportMetrics out;
  out.tpr = static_cast<double>(hits) / static_cast<double>(truth.size());
  const auto inactive = static_cast<double>(d) -
                        static_cast<double>(truth.size());
  out.fpr = inactive > 0.0 ? static_cast<double>(false_hits) / inactive : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Summary statistics
// ---------------------------------------------------------------------------

struct Summary {
  double mean = 0.0;
  double se = 0.0;  // standard error of the mean (n - 1 divisor)
  std::size_t count = 0;
};

inline Summary summarize(const std::vector<double>& values) {
  Summary out;
  out.count = values.size();
  if (values.empty()) return out;
  double total = 0.0;
  for (double v : values) total += v;
  out.mean = total / static_cast<double>(values.size());
  if (values.size() < 2) return out;
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  const double var = ss / static_cast<double>(values.size() - 1);
  out.se = std::sqrt(var / static_cast<double>(values.size()));
  return out;
}

/// Spearman rank correlation (average ranks on ties). Needs >= 2 points and
/// some variation in each input.
inline double spearman_rank_correlation(const std::vector<double>& x,
                                        const std::vector<double>& y) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("spearman: length mismatch");
  }
  if (x.size() < 2) {
    throw std::invalid_argument("spearman: need at least two points");
  }
  auto ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = 0.5 * (static_cast<double>(i) +
                                static_cast<double>(j)) + 1.0;
      for (std::size_t t = i; t <= j; ++t) r[order[t]] = avg;
      i = j + 1;
    }
    return r;
  };
  std::vector<double> rx = ranks(x);
  std::vector<double> ry = ranks(y);
  Summary sx = summarize(rx);
  Summary sy = summarize(ry);
  double cov = 0.0, vx = 0.0, vy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    cov += (rx[i] - sx.mean) * (ry[i] - sy.mean);
    vx += (rx[i] - sx.mean) * (rx[i] - sx.mean);
    vy += (ry[i] - sy.mean) * (ry[i] - sy.mean);
  }
  if (vx <= 0.0 || vy <= 0.0) {
    throw std::invalid_argument("spearman: an input is constant");
  }
  return cov / std::sqrt(vx * vy);
}

// ---------------------------------------------------------------------------
// Benchmark runner
// ---------------------------------------------------------------------------

struct BenchmarkPlan {
  int setting = 1;
  int m = 10;                  // clients
  std::vector<int> n_values;   // per-client sample sizes (one pass per value)
  int d = 150;
  int reps = 20;
  std::uint64_t master_seed = 1;
  FederationConfig config;     // template; the per-rep seed overrides .seed
  // When set, client sizes are an uneven multinomial split of m * n with
  // this Dirichlet concentration instead of the balanced n per client.
  std::optional<double> size_concentration;
  DatasetOptions data_opts;
  bool non_gaussian = false;
};

struct RepRow {
  int setting = 0;
  int m = 0;
  int n = 0;  // per-client size (balanced) or average size (uneven split)
  int d = 0;
  int rep = 0;
  double tpr = 0.0;
  double fpr = 0.0;
  double dist = 0.0;
  int k_hat = 0;
  double rho = 0.0;
  int iters = 0;
  double seconds = 0.0;
  bool ok = false;
  std::string error;
};

struct BenchmarkResult {
  std::vector<RepRow> rows;            // one per (n, rep), failures included
  std::vector<std::string> failures;   // human-readable failure records
};

inline void validate_benchmark_plan(const BenchmarkPlan& plan) {
  if (plan.setting < 1 || plan.setting > 6) {
    throw std::invalid_argument("benchmark plan: setting must be 1..6");
  }
  if (plan.m < 1) throw std::invalid_argument("benchmark plan: m must be >= 1");
  if (plan.n_values.empty()) {
    throw std::invalid_argument("benchmark plan: n_values is empty");
  }
  for (int n : plan.n_values) {
    if (n < 4) throw std::invalid_argument("benchmark plan: n must be >= 4");
  }
  if (plan.d < 5) throw std::invalid_argument("benchmark plan: d must be >= 5");
  if (plan.reps < 1) {
    throw std::invalid_argument("benchmark plan: reps must be >= 1");
  }
  if (plan.size_concentration && !(*plan.size_concentration > 0.0)) {
    throw std::invalid_argument(
        "benchmark plan: size concentration must be > 0");
  }
  validate_federation_config(plan.config);
}

/// Seed for one repetition. Shared across the n_values of a plan so that
/// rows with the same rep index are paired draws, differing only in size.
inline std::uint64_t rep_seed(std::uint64_t master_seed, int rep) {
  return mix_seed(master_seed, stream::benchmark,
                  static_cast<std::uint64_t>(rep));
}

/// Runs the full pipeline `reps` times per sample size and scores each fit
/// against the generating truth. A failing repetition is recorded and the
/// run continues; successful rows carry support rates, subspace distance,
/// the selected (K, rho), iteration count, and wall time.
inline BenchmarkResult run_benchmark(const BenchmarkPlan& plan) {
  validate_benchmark_plan(plan);
  BenchmarkResult result;
  result.rows.reserve(plan.n_values.size() *
                      static_cast<std::size_t>(plan.reps));
  for (int n : plan.n_values) {
    for (int rep = 0; rep < plan.reps; ++rep) {
      const std::uint64_t seed = rep_seed(plan.master_seed, rep);
      RepRow row;
      row.setting = plan.setting;
      row.m = plan.m;
      row.n = n;
      row.d = plan.d;
      row.rep = rep;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        std::vector<int> sizes;
        if (plan.size_concentration) {
          sizes = dirichlet_multinomial_split(n * plan.m, plan.m,
                                              *plan.size_concentration, seed)
                      .sizes;
        } else {
          sizes.assign(static_cast<std::size_t>(plan.m), n);
        }
        DatasetOptions opts = plan.data_opts;
        opts.non_gaussian = plan.non_gaussian;
        FederatedDataset data =
            gen_setting(plan.setting, plan.m, sizes, plan.d, seed, opts);
        FederationConfig cfg = plan.config;
        cfg.seed = seed;
        PipelineResult fit = run_pipeline(data, cfg);
        SupportMetrics sm =
            support_metrics(fit.fit.support, data.truth.active, plan.d);
        row.tpr = sm.tpr;
        row.fpr = sm.fpr;
        row.dist = subspace_distance(fit.fit.directions, data.truth.b);
        row.k_hat = fit.k_hat;
        row.rho = fit.rho_used;
        row.iters = fit.fit.iterations;
        row.ok = true;
      } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
        result.failures.push_back("setting " + std::to_string(plan.setting) +
                                  " n " + std::to_string(n) + " rep " +
                                  std::to_string(rep) + ": " + e.what());
      }
      const auto t1 = std::chrono::steady_clock::now();
      row.seconds = std::chrono::duration<double>(t1 - t0).count();
      result.rows.push_back(std::move(row));
    }
  }
  return result;
}

/// Collects one metric from the successful rows matching a sample size.
inline std::vector<double> collect_metric(const BenchmarkResult& result, int n,
                                          double RepRow::* field) {
  std::vector<double> values;
  for (const RepRow& row : result.rows) {
    if (row.ok && row.n == n) values.push_back(row.*field);
  }
  return values;
}

// ---------------------------------------------------------------------------
// CSV export
// ---------------------------------------------------------------------------

inline const char* benchmark_csv_header() {
  return "setting,m,n,d,rep,tpr,fpr,dist,k_hat,rho,iters,seconds";
}

/// Fixed-format row serialization so identical rows always produce identical
/// bytes. Failed repetitions are skipped (they carry no metrics).
inline void write_benchmark_csv(const std::vector<RepRow>& rows,
                                std::ostream& out) {
  out << benchmark_csv_header() << '\n';
  char line[256];
  for (const RepRow& row : rows) {
    if (!row.ok) continue;
    std::snprintf(line, sizeof(line),
                  "%d,%d,%d,%d,%d,%.4f,%.4f,%.6f,%d,%.6g,%d,%.3f",
                  row.setting, row.m, row.n, row.d, row.rep, row.tpr, row.fpr,
                  row.dist, row.k_hat, row.rho, row.iters, row.seconds);
    out << line << '\n';
  }
}

// ---------------------------------------------------------------------------
// Scaling with the theoretical rate
// ---------------------------------------------------------------------------

struct ScalingPoint {
  int d = 0;
  int n_total = 0;
  double abscissa = 0.0;   // s * sqrt(log d / N)
  double mean_dist = 0.0;
  double se = 0.0;
  std::size_t count = 0;
};

inline double scaling_abscissa(int d, int n_total, double s = 3.0) {
  if (d < 2 || n_total < 1) {
    throw std::invalid_argument("scaling_abscissa: need d >= 2, n_total >= 1");
  }
  return s * std::sqrt(std::log(static_cast<double>(d)) /
                       static_cast<double>(n_total));
}

struct ScalingStudy {
  std::vector<ScalingPoint> points;
  double spearman = 0.0;  // rank correlation of mean distance vs abscissa
};

/// Orders the points by abscissa and checks the error grows with the rate:
/// a monotone relation gives Spearman correlation 1. Requires >= 2 points.
inline ScalingStudy analyze_scaling(std::vector<ScalingPoint> points) {
  if (points.size() < 2) {
    throw std::invalid_argument(
        "analyze_scaling: need at least two (d, N) configurations");
  }
  std::sort(points.begin(), points.end(),
            [](const ScalingPoint& a, const ScalingPoint& b) {
              return a.abscissa < b.abscissa;
            });
  std::vector<double> xs, ys;
  xs.reserve(points.size());
  ys.reserve(points.size());
  for (const ScalingPoint& p : points) {
    xs.push_back(p.abscissa);
    ys.push_back(p.mean_dist);
  }
  ScalingStudy study;
  study.spearman = spearman_rank_correlation(xs, ys);
  study.points = std::move(points);
  return study;
}

}  // namespace fedsir
