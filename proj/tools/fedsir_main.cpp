// fedsir command-line tool.
//
// Subcommands:
//   gen         draw a synthetic federated dataset bundle (CSV + manifest)
//   fit         run the full federated pipeline on a bundle
//   select-k    per-client dimension votes and their mode
//   select-rho  hold-out search for the sparsity level
//   bench       repeated benchmark runs scored against the generating truth
//   scaling     mean error versus the (log d / N)^{1/2} rate over (d, N) cells
//
// Exit codes: 0 success, 1 configuration/input error, 2 numerical failure.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "fedsir/datagen.hpp"
#include "fedsir/evaluation.hpp"
#include "fedsir/federation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fedsir;

namespace {

constexpr const char* kToolVersion = "1.0.0";

json version_block() {
  std::ostringstream eigen;
  eigen << EIGEN_WORLD_VERSION << '.' << EIGEN_MAJOR_VERSION << '.'
        << EIGEN_MINOR_VERSION;
  return json{{"tool", kToolVersion}, {"eigen", eigen.str()}};
}

// ---------------------------------------------------------------------------
// Small file helpers
// ---------------------------------------------------------------------------

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open " + path.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot write " + path.string());
  }
  out << text;
  out.flush();
  if (!out) {
    throw std::runtime_error("short write to " + path.string());
  }
}

void write_json_file(const fs::path& path, const json& value) {
  write_text_file(path, value.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// JSON (de)serialization of matrices and configs
// ---------------------------------------------------------------------------

json matrix_to_json(const MatrixXd& m) {
  json data = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    data.push_back(std::move(row));
  }
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

MatrixXd matrix_from_json(const json& value) {
  const auto rows = value.at("rows").get<Eigen::Index>();
  const auto cols = value.at("cols").get<Eigen::Index>();
  const json& data = value.at("data");
  if (rows < 0 || cols < 0 ||
      static_cast<Eigen::Index>(data.size()) != rows) {
    throw std::runtime_error("malformed matrix block");
  }
  MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const json& row = data.at(static_cast<std::size_t>(r));
    if (static_cast<Eigen::Index>(row.size()) != cols) {
      throw std::runtime_error("malformed matrix row");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
    }
  }
  return m;
}

json config_to_json(const FederationConfig& cfg) {
  json out;
  out["nu"] = cfg.nu;
  out["eps"] = cfg.eps;
  out["max_iter"] = cfg.max_iter;
  out["rho"] = cfg.rho ? json(*cfg.rho) : json("auto");
  out["rho_grid"] = cfg.rho_grid;
  out["k"] = cfg.k ? json(*cfg.k) : json("auto");
  out["q_estimator"] =
      cfg.q_estimator == QEstimator::TwoSlice ? "two-slice" : "sliced";
  out["slice_size"] = cfg.slice_size;
  out["validation_fraction"] = cfg.validation_fraction;
  out["seed"] = cfg.seed;
  out["gamma_sign"] = cfg.gamma_sign == GammaSign::Plus ? "plus" : "minus";
  out["support_tol"] = cfg.support_tol;
  out["retain_payloads"] = cfg.retain_payloads;
  return out;
}

json message_counts(const MessageLog& log) {
  json out;
  for (MessageKind kind :
       {MessageKind::BroadcastP, MessageKind::MaskedBlock,
        MessageKind::BroadcastState, MessageKind::PiUpdate,
        MessageKind::Result}) {
    out[to_string(kind)] = log.count(kind);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset bundles: one CSV per client plus a JSON manifest
// ---------------------------------------------------------------------------

std::string client_file_name(int client_id) {
  char name[32];
  std::snprintf(name, sizeof(name), "client_%03d.csv", client_id);
  return name;
}

void save_bundle(const FederatedDataset& data, const json& generator,
                 const fs::path& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["kind"] = "fedsir-dataset";
  manifest["setting"] = data.setting;
  manifest["m"] = static_cast<int>(data.clients.size());
  manifest["d"] = data.d;
  manifest["seed"] = data.seed;
  json sizes = json::array();
  json files = json::array();
  for (const SampleBlock& block : data.clients) {
    sizes.push_back(block.n());
    files.push_back(client_file_name(block.client_id));
  }
  manifest["sizes"] = std::move(sizes);
  manifest["files"] = std::move(files);
  manifest["client_models"] = data.client_models;
  manifest["generator"] = generator;
  manifest["truth"] = json{{"k", data.truth.k},
                           {"active", data.truth.active},
                           {"b", matrix_to_json(data.truth.b)}};
  manifest["versions"] = version_block();
  write_json_file(dir / "manifest.json", manifest);

  char cell[40];
  for (const SampleBlock& block : data.clients) {
    std::string text;
    text.reserve(static_cast<std::size_t>(block.n()) *
                 static_cast<std::size_t>(block.d() + 1) * 12);
    for (Eigen::Index j = 0; j < block.d(); ++j) {
      text += "x" + std::to_string(j + 1) + ",";
    }
    text += "y\n";
    for (Eigen::Index r = 0; r < block.n(); ++r) {
      for (Eigen::Index j = 0; j < block.d(); ++j) {
        std::snprintf(cell, sizeof(cell), "%.17g,", block.covariates(r, j));
        text += cell;
      }
      std::snprintf(cell, sizeof(cell), "%.17g\n", block.response(r));
      text += cell;
    }
    write_text_file(dir / client_file_name(block.client_id), text);
  }
}

std::vector<double> parse_csv_line(const std::string& line,
                                   const fs::path& file, int line_no) {
  std::vector<double> values;
  std::size_t begin = 0;
  while (begin <= line.size()) {
    std::size_t end = line.find(',', begin);
    if (end == std::string::npos) end = line.size();
    const std::string field = line.substr(begin, end - begin);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(field, &used);
    } catch (const std::exception&) {
      used = std::string::npos;
    }
    if (used != field.size()) {
      throw std::runtime_error(file.string() + ":" + std::to_string(line_no) +
                               ": bad numeric field '" + field + "'");
    }
    values.push_back(v);
    begin = end + 1;
    if (end == line.size()) break;
  }
  return values;
}

struct LoadedBundle {
  FederatedDataset data;
  bool has_truth = false;
};

LoadedBundle load_bundle(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  json manifest = json::parse(read_text_file(manifest_path));
  if (manifest.value("kind", "") != "fedsir-dataset") {
    throw std::runtime_error(manifest_path.string() +
                             ": not a dataset bundle manifest");
  }
  LoadedBundle out;
  out.data.setting = manifest.value("setting", 0);
  out.data.d = manifest.at("d").get<int>();
  out.data.seed = manifest.value("seed", std::uint64_t{0});
  if (manifest.contains("client_models")) {
    out.data.client_models =
        manifest["client_models"].get<std::vector<int>>();
  }
  if (manifest.contains("truth")) {
    const json& truth = manifest["truth"];
    out.data.truth.k = truth.at("k").get<int>();
    out.data.truth.active = truth.at("active").get<std::vector<int>>();
    out.data.truth.b = matrix_from_json(truth.at("b"));
    out.has_truth = true;
  }
  const auto files = manifest.at("files").get<std::vector<std::string>>();
  const int d = out.data.d;
  int client_id = 0;
  for (const std::string& file : files) {
    const fs::path path = dir / file;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) {
      throw std::runtime_error(path.string() + ": empty file");
    }
    std::vector<std::vector<double>> rows;
    int line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      std::vector<double> values = parse_csv_line(line, path, line_no);
      if (static_cast<int>(values.size()) != d + 1) {
        throw std::runtime_error(path.string() + ":" +
                                 std::to_string(line_no) + ": expected " +
                                 std::to_string(d + 1) + " fields, got " +
                                 std::to_string(values.size()));
      }
      rows.push_back(std::move(values));
    }
    if (rows.empty()) {
      throw std::runtime_error(path.string() + ": no samples");
    }
    SampleBlock block;
    block.client_id = client_id++;
    block.covariates.resize(static_cast<Eigen::Index>(rows.size()), d);
    block.response.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (int j = 0; j < d; ++j) {
        block.covariates(static_cast<Eigen::Index>(r), j) = rows[r][j];
      }
      block.response(static_cast<Eigen::Index>(r)) =
          rows[r][static_cast<std::size_t>(d)];
    }
    out.data.clients.push_back(std::move(block));
  }
  if (out.data.clients.empty()) {
    throw std::runtime_error(dir.string() + ": bundle lists no clients");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shared CLI plumbing
// ---------------------------------------------------------------------------

FederationConfig load_config(const std::string& config_path) {
  if (config_path.empty()) return FederationConfig{};
  return parse_federation_config(read_text_file(config_path));
}

struct Overrides {
  std::optional<double> rho;
  std::vector<double> grid;
  std::optional<int> k;
  std::optional<std::uint64_t> seed;
  std::string gamma_sign;
};

void apply_overrides(FederationConfig& cfg, const Overrides& o) {
  if (o.rho) cfg.rho = *o.rho;
  if (!o.grid.empty()) {
    cfg.rho_grid = o.grid;
    cfg.rho.reset();
  }
  if (o.k) cfg.k = *o.k;
  if (o.seed) cfg.seed = *o.seed;
  if (o.gamma_sign == "plus") cfg.gamma_sign = GammaSign::Plus;
  else if (o.gamma_sign == "minus") cfg.gamma_sign = GammaSign::Minus;
  else if (!o.gamma_sign.empty()) {
    throw std::invalid_argument("gamma-sign must be 'plus' or 'minus'");
  }
  validate_federation_config(cfg);
}

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

struct GenArgs {
  int setting = 1;
  int m = 10;
  int n = 100;
  std::vector<int> sizes;
  int d = 150;
  std::uint64_t seed = 1;
  double alpha = 1.0;
  double gamma = 0.5;
  bool non_gaussian = false;
  double dirichlet = 0.0;  // > 0: uneven multinomial split of m * n
  std::string out;
};

int run_gen(const GenArgs& args) {
  DatasetOptions opts;
  opts.alpha = args.alpha;
  opts.gamma = args.gamma;
  opts.non_gaussian = args.non_gaussian;

  std::vector<int> sizes = args.sizes;
  json size_rule;
  if (!sizes.empty()) {
    if (static_cast<int>(sizes.size()) != args.m) {
      throw std::invalid_argument("--sizes must list one value per client");
    }
    size_rule = json{{"mode", "explicit"}};
  } else if (args.dirichlet > 0.0) {
    sizes = dirichlet_multinomial_split(args.n * args.m, args.m,
                                        args.dirichlet, args.seed)
                .sizes;
    size_rule = json{{"mode", "dirichlet"},
                     {"concentration", args.dirichlet},
                     {"n_total", args.n * args.m}};
  } else {
    sizes.assign(static_cast<std::size_t>(args.m), args.n);
    size_rule = json{{"mode", "balanced"}, {"n", args.n}};
  }

  FederatedDataset data =
      gen_setting(args.setting, args.m, sizes, args.d, args.seed, opts);
  json generator;
  generator["setting"] = args.setting;
  generator["alpha"] = args.alpha;
  generator["gamma"] = args.gamma;
  generator["non_gaussian"] = args.non_gaussian;
  generator["sizes"] = size_rule;
  save_bundle(data, generator, args.out);
  std::cout << "wrote bundle: " << args.out << " (m=" << args.m
            << ", d=" << args.d << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

struct FitArgs {
  std::string data;
  std::string config;
  std::string out;
  Overrides overrides;
  int threads = 1;
};

int run_fit(const FitArgs& args) {
  const auto t0 = std::chrono::steady_clock::now();
  Eigen::setNbThreads(args.threads);
  FederationConfig cfg = load_config(args.config);
  apply_overrides(cfg, args.overrides);
  LoadedBundle bundle = load_bundle(args.data);

  PipelineResult res = run_pipeline(bundle.data, cfg);

  json result;
  result["k_hat"] = res.k_hat;
  result["k_from_vote"] = res.k_from_vote;
  result["votes"] = res.votes;
  result["rho"] = res.rho_used;
  result["rho_from_holdout"] = res.rho_from_holdout;
  result["grid"] = res.selection.grid;
  result["validation_errors"] = res.selection.errors;
  result["support"] = res.fit.support;
  result["directions"] = matrix_to_json(res.fit.directions);
  result["iterations"] = res.fit.iterations;
  result["converged"] = res.fit.converged;
  result["final_delta"] = res.fit.final_delta;
  result["message_counts"] = message_counts(res.log);
  if (bundle.has_truth) {
    result["distance"] =
        subspace_distance(res.fit.directions, bundle.data.truth.b);
    SupportMetrics sm = support_metrics(
        res.fit.support, bundle.data.truth.active, bundle.data.d);
    result["tpr"] = sm.tpr;
    result["fpr"] = sm.fpr;
  }

  fs::create_directories(args.out);
  write_json_file(fs::path(args.out) / "result.json", result);
  json manifest;
  manifest["command"] = "fit";
  manifest["data"] = args.data;
  manifest["config"] = config_to_json(cfg);
  manifest["versions"] = version_block();
  manifest["wall_seconds"] = seconds_since(t0);
  write_json_file(fs::path(args.out) / "manifest.json", manifest);

  std::cout << "k_hat=" << res.k_hat << " rho=" << res.rho_used
            << " iterations=" << res.fit.iterations
            << " converged=" << (res.fit.converged ? "yes" : "no") << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// select-k
// ---------------------------------------------------------------------------

struct SelectKArgs {
  std::string data;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int run_select_k(const SelectKArgs& args) {
  FederationConfig cfg = load_config(args.config);
  if (args.seed) cfg.seed = *args.seed;
  validate_federation_config(cfg);
  LoadedBundle bundle = load_bundle(args.data);

  SummaryOptions sopts;
  sopts.q_estimator = cfg.q_estimator;
  sopts.slice_size = cfg.slice_size;
  sopts.nu = cfg.nu;
  std::vector<int> votes;
  const Eigen::Index floor_n = min_summary_samples(cfg.q_estimator);
  for (const SampleBlock& block : bundle.data.clients) {
    if (block.n() < floor_n) continue;  // too small to vote
    auto [centered, mean] = center(block);
    (void)mean;
    votes.push_back(local_summaries(centered, sopts).vote.k);
  }
  if (votes.empty()) {
    throw std::invalid_argument(
        "select-k: no client has enough samples to vote");
  }
  const int k_hat = select_dimension(votes, cfg.seed);

  json result;
  result["votes"] = votes;
  result["k_hat"] = k_hat;
  fs::create_directories(args.out);
  write_json_file(fs::path(args.out) / "result.json", result);
  json manifest;
  manifest["command"] = "select-k";
  manifest["data"] = args.data;
  manifest["config"] = config_to_json(cfg);
  manifest["versions"] = version_block();
  write_json_file(fs::path(args.out) / "manifest.json", manifest);
  std::cout << "k_hat=" << k_hat << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// select-rho
// ---------------------------------------------------------------------------

struct SelectRhoArgs {
  std::string data;
  std::string config;
  std::string out;
  Overrides overrides;
};

int run_select_rho(const SelectRhoArgs& args) {
  FederationConfig cfg = load_config(args.config);
  apply_overrides(cfg, args.overrides);
  cfg.rho.reset();  // this command always searches
  LoadedBundle bundle = load_bundle(args.data);

  RhoSelection sel = select_rho(bundle.data, cfg);

  json result;
  result["rho"] = sel.rho;
  result["k_used"] = sel.k_used;
  result["grid"] = sel.grid;
  result["errors"] = sel.errors;
  result["fallback_predictions"] = sel.fallback_predictions;
  fs::create_directories(args.out);
  write_json_file(fs::path(args.out) / "result.json", result);
  json manifest;
  manifest["command"] = "select-rho";
  manifest["data"] = args.data;
  manifest["config"] = config_to_json(cfg);
  manifest["versions"] = version_block();
  write_json_file(fs::path(args.out) / "manifest.json", manifest);
  std::cout << "rho=" << sel.rho << " (k=" << sel.k_used << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchArgs {
  int setting = 1;
  int m = 10;
  std::vector<int> n_values{100};
  int d = 150;
  int reps = 20;
  std::uint64_t seed = 1;
  std::string config;
  std::string out;
  Overrides overrides;
  double dirichlet = 0.0;
  double alpha = 1.0;
  bool non_gaussian = false;
  int threads = 1;
};

json summary_to_json(const Summary& s) {
  return json{{"mean", s.mean}, {"se", s.se}, {"count", s.count}};
}

int run_bench(const BenchArgs& args) {
  const auto t0 = std::chrono::steady_clock::now();
  Eigen::setNbThreads(args.threads);
  BenchmarkPlan plan;
  plan.setting = args.setting;
  plan.m = args.m;
  plan.n_values = args.n_values;
  plan.d = args.d;
  plan.reps = args.reps;
  plan.master_seed = args.seed;
  plan.config = load_config(args.config);
  apply_overrides(plan.config, args.overrides);
  if (args.dirichlet > 0.0) plan.size_concentration = args.dirichlet;
  plan.data_opts.alpha = args.alpha;
  plan.non_gaussian = args.non_gaussian;
  validate_benchmark_plan(plan);

  BenchmarkResult result = run_benchmark(plan);

  fs::create_directories(args.out);
  std::ostringstream csv;
  write_benchmark_csv(result.rows, csv);
  write_text_file(fs::path(args.out) / "bench.csv", csv.str());

  json summary = json::array();
  for (int n : plan.n_values) {
    json cell;
    cell["n"] = n;
    cell["tpr"] = summary_to_json(
        summarize(collect_metric(result, n, &RepRow::tpr)));
    cell["fpr"] = summary_to_json(
        summarize(collect_metric(result, n, &RepRow::fpr)));
    cell["dist"] = summary_to_json(
        summarize(collect_metric(result, n, &RepRow::dist)));
    summary.push_back(std::move(cell));
  }
  json manifest;
  manifest["command"] = "bench";
  manifest["plan"] = json{{"setting", plan.setting},
                          {"m", plan.m},
                          {"n_values", plan.n_values},
                          {"d", plan.d},
                          {"reps", plan.reps},
                          {"master_seed", plan.master_seed},
                          {"dirichlet", args.dirichlet},
                          {"alpha", args.alpha},
                          {"non_gaussian", args.non_gaussian}};
  manifest["config"] = config_to_json(plan.config);
  manifest["summary"] = std::move(summary);
  manifest["failures"] = result.failures;
  manifest["versions"] = version_block();
  manifest["wall_seconds"] = seconds_since(t0);
  write_json_file(fs::path(args.out) / "manifest.json", manifest);

  for (const std::string& failure : result.failures) {
    std::cerr << "warning: " << failure << "\n";
  }
  std::cout << "wrote " << (fs::path(args.out) / "bench.csv").string() << " ("
            << result.rows.size() << " rows, " << result.failures.size()
            << " failures)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// scaling
// ---------------------------------------------------------------------------

struct ScalingArgs {
  int setting = 1;
  int m = 10;
  std::vector<std::string> cells;  // "d:n_total"
  int k = 1;
  double rho_mult = 0.5;
  double dirichlet = 5.0;
  int reps = 20;
  double s = 3.0;
  std::uint64_t seed = 1;
  std::string out;
  int threads = 1;
};

std::pair<int, int> parse_cell(const std::string& cell) {
  const std::size_t colon = cell.find(':');
  if (colon == std::string::npos) {
    throw std::invalid_argument("cell '" + cell + "' must look like d:N");
  }
  const int d = static_cast<int>(std::stoll(cell.substr(0, colon)));
  const int n_total = static_cast<int>(std::stoll(cell.substr(colon + 1)));
  if (d < 5 || n_total < 10) {
    throw std::invalid_argument("cell '" + cell + "' is out of range");
  }
  return {d, n_total};
}

int run_scaling(const ScalingArgs& args) {
  const auto t0 = std::chrono::steady_clock::now();
  Eigen::setNbThreads(args.threads);
  if (args.cells.size() < 2) {
    throw std::invalid_argument("scaling needs at least two --cells");
  }
  std::vector<ScalingPoint> points;
  json failures = json::array();
  for (const std::string& cell : args.cells) {
    auto [d, n_total] = parse_cell(cell);
    std::vector<double> dists;
    for (int rep = 0; rep < args.reps; ++rep) {
      const std::uint64_t seed = rep_seed(args.seed, rep);
      try {
        std::vector<int> sizes =
            dirichlet_multinomial_split(n_total, args.m, args.dirichlet, seed)
                .sizes;
        FederatedDataset data =
            gen_setting(args.setting, args.m, sizes, d, seed);
        FederationConfig cfg;
        cfg.k = args.k;
        cfg.rho = args.rho_mult * std::sqrt(std::log(double(d)) /
                                            double(n_total));
        cfg.seed = seed;
        PipelineResult res = run_pipeline(data, cfg);
        dists.push_back(subspace_distance(res.fit.directions, data.truth.b));
      } catch (const std::exception& e) {
        failures.push_back(cell + " rep " + std::to_string(rep) + ": " +
                           e.what());
      }
    }
    Summary s = summarize(dists);
    ScalingPoint point;
    point.d = d;
    point.n_total = n_total;
    point.abscissa = scaling_abscissa(d, n_total, args.s);
    point.mean_dist = s.mean;
    point.se = s.se;
    point.count = s.count;
    points.push_back(point);
  }
  ScalingStudy study = analyze_scaling(points);

  fs::create_directories(args.out);
  std::string csv = "d,n_total,abscissa,mean_dist,se,count\n";
  char line[128];
  for (const ScalingPoint& p : study.points) {
    std::snprintf(line, sizeof(line), "%d,%d,%.6f,%.6f,%.6f,%zu\n", p.d,
                  p.n_total, p.abscissa, p.mean_dist, p.se, p.count);
    csv += line;
  }
  write_text_file(fs::path(args.out) / "scaling.csv", csv);

  json result;
  result["spearman"] = study.spearman;
  result["s"] = args.s;
  json jpoints = json::array();
  for (const ScalingPoint& p : study.points) {
    jpoints.push_back(json{{"d", p.d},
                           {"n_total", p.n_total},
                           {"abscissa", p.abscissa},
                           {"mean_dist", p.mean_dist},
                           {"se", p.se},
                           {"count", p.count}});
  }
  result["points"] = std::move(jpoints);
  write_json_file(fs::path(args.out) / "result.json", result);

  json manifest;
  manifest["command"] = "scaling";
  manifest["setting"] = args.setting;
  manifest["m"] = args.m;
  manifest["k"] = args.k;
  manifest["rho_mult"] = args.rho_mult;
  manifest["dirichlet"] = args.dirichlet;
  manifest["reps"] = args.reps;
  manifest["master_seed"] = args.seed;
  manifest["failures"] = std::move(failures);
  manifest["versions"] = version_block();
  manifest["wall_seconds"] = seconds_since(t0);
  write_json_file(fs::path(args.out) / "manifest.json", manifest);

  std::cout << "spearman=" << study.spearman << " over "
            << study.points.size() << " cells\n";
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// main
// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
  CLI::App app{"federated sparse sufficient dimension reduction"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  GenArgs gen_args;
  CLI::App* gen = app.add_subcommand("gen", "draw a synthetic dataset bundle");
  gen->add_option("--setting", gen_args.setting, "generator setting (1-6)")
      ->check(CLI::Range(1, 6));
  gen->add_option("--m", gen_args.m, "number of clients");
  gen->add_option("--n", gen_args.n, "samples per client (balanced)");
  gen->add_option("--sizes", gen_args.sizes,
                  "explicit per-client sizes (overrides --n)")
      ->delimiter(',');
  gen->add_option("--d", gen_args.d, "covariate dimension");
  gen->add_option("--seed", gen_args.seed, "dataset seed");
  gen->add_option("--alpha", gen_args.alpha, "client location-shift scale");
  gen->add_option("--gamma", gen_args.gamma, "AR(1) correlation decay");
  gen->add_flag("--non-gaussian", gen_args.non_gaussian,
                "sub-Gaussian covariate variant");
  gen->add_option("--dirichlet", gen_args.dirichlet,
                  "uneven split concentration (0 = balanced)");
  gen->add_option("--out", gen_args.out, "output bundle directory")
      ->required();

  FitArgs fit_args;
  CLI::App* fit = app.add_subcommand("fit", "run the federated pipeline");
  fit->add_option("--data", fit_args.data, "dataset bundle directory")
      ->required();
  fit->add_option("--config", fit_args.config, "key=value config file");
  fit->add_option("--out", fit_args.out, "output directory")->required();
  fit->add_option("--rho", fit_args.overrides.rho, "fixed sparsity level");
  fit->add_option("--grid", fit_args.overrides.grid,
                  "candidate sparsity grid (forces hold-out search)")
      ->delimiter(',');
  fit->add_option("--k", fit_args.overrides.k, "fixed target dimension");
  fit->add_option("--seed", fit_args.overrides.seed, "run seed");
  fit->add_option("--gamma-sign", fit_args.overrides.gamma_sign,
                  "dual update sign: plus | minus");
  fit->add_option("--threads", fit_args.threads, "matrix-kernel threads");

  SelectKArgs k_args;
  CLI::App* selk = app.add_subcommand("select-k", "per-client dimension vote");
  selk->add_option("--data", k_args.data, "dataset bundle directory")
      ->required();
  selk->add_option("--config", k_args.config, "key=value config file");
  selk->add_option("--seed", k_args.seed, "run seed (tie breaking)");
  selk->add_option("--out", k_args.out, "output directory")->required();

  SelectRhoArgs rho_args;
  CLI::App* selr =
      app.add_subcommand("select-rho", "hold-out sparsity-level search");
  selr->add_option("--data", rho_args.data, "dataset bundle directory")
      ->required();
  selr->add_option("--config", rho_args.config, "key=value config file");
  selr->add_option("--grid", rho_args.overrides.grid, "candidate grid")
      ->delimiter(',');
  selr->add_option("--k", rho_args.overrides.k, "fixed target dimension");
  selr->add_option("--seed", rho_args.overrides.seed, "run seed");
  selr->add_option("--out", rho_args.out, "output directory")->required();

  BenchArgs bench_args;
  CLI::App* bench =
      app.add_subcommand("bench", "repeated scored benchmark runs");
  bench->add_option("--setting", bench_args.setting, "generator setting")
      ->check(CLI::Range(1, 6));
  bench->add_option("--m", bench_args.m, "number of clients");
  bench->add_option("--n", bench_args.n_values, "per-client sizes")
      ->delimiter(',');
  bench->add_option("--d", bench_args.d, "covariate dimension");
  bench->add_option("--reps", bench_args.reps, "repetitions per size");
  bench->add_option("--seed", bench_args.seed, "master seed");
  bench->add_option("--config", bench_args.config, "key=value config file");
  bench->add_option("--rho", bench_args.overrides.rho, "fixed sparsity level");
  bench->add_option("--grid", bench_args.overrides.grid, "candidate grid")
      ->delimiter(',');
  bench->add_option("--k", bench_args.overrides.k, "fixed target dimension");
  bench->add_option("--gamma-sign", bench_args.overrides.gamma_sign,
                    "dual update sign: plus | minus");
  bench->add_option("--dirichlet", bench_args.dirichlet,
                    "uneven split concentration (0 = balanced)");
  bench->add_option("--alpha", bench_args.alpha,
                    "client location-shift scale");
  bench->add_flag("--non-gaussian", bench_args.non_gaussian,
                  "sub-Gaussian covariate variant");
  bench->add_option("--threads", bench_args.threads, "matrix-kernel threads");
  bench->add_option("--out", bench_args.out, "output directory")->required();

  ScalingArgs scaling_args;
  CLI::App* scaling = app.add_subcommand(
      "scaling", "error versus the square-root rate over (d, N) cells");
  scaling->add_option("--setting", scaling_args.setting, "generator setting")
      ->check(CLI::Range(1, 6));
  scaling->add_option("--m", scaling_args.m, "number of clients");
  scaling->add_option("--cells", scaling_args.cells,
                      "comma-separated d:N pairs, e.g. 100:2000,150:2000")
      ->delimiter(',')
      ->required();
  scaling->add_option("--k", scaling_args.k, "target dimension");
  scaling->add_option("--rho-mult", scaling_args.rho_mult,
                      "rho as a multiple of sqrt(log d / N)");
  scaling->add_option("--dirichlet", scaling_args.dirichlet,
                      "uneven split concentration");
  scaling->add_option("--reps", scaling_args.reps, "repetitions per cell");
  scaling->add_option("--s", scaling_args.s, "abscissa scale factor");
  scaling->add_option("--seed", scaling_args.seed, "master seed");
  scaling->add_option("--threads", scaling_args.threads,
                      "matrix-kernel threads");
  scaling->add_option("--out", scaling_args.out, "output directory")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return run_gen(gen_args);
    if (fit->parsed()) return run_fit(fit_args);
    if (selk->parsed()) return run_select_k(k_args);
    if (selr->parsed()) return run_select_rho(rho_args);
    if (bench->parsed()) return run_bench(bench_args);
    if (scaling->parsed()) return run_scaling(scaling_args);
  } catch (const PipelineError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.numerical() ? 2 : 1;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
