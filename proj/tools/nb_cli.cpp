// nb: batch front end for the Normal-Block toolkit.
//
// Subcommands: simulate, fit, select, stars, metrics. Everything is a file:
// CSV matrices in, model/truth JSON and network exports out. Exit codes:
// 0 success (a flagged non-convergence is still success), 2 usage or input
// error, 1 internal error. NB_LOG={error|info|debug} controls stderr noise.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nb/nb.hpp>

namespace fs = std::filesystem;
using namespace nb;

namespace {

// ---------------------------------------------------------------------------
// Logging.

enum class LogLevel { error = 0, info = 1, debug = 2 };

LogLevel log_threshold() {
  static const LogLevel lv = [] {
    const char* env = std::getenv("NB_LOG");
    if (env == nullptr) return LogLevel::info;
    const std::string v(env);
    if (v == "error") return LogLevel::error;
    if (v == "info") return LogLevel::info;
    if (v == "debug") return LogLevel::debug;
    std::cerr << "[nb] unknown NB_LOG value '" << v << "', using info\n";
    return LogLevel::info;
  }();
  return lv;
}

void log_at(LogLevel lv, const std::string& msg) {
  if (static_cast<int>(lv) <= static_cast<int>(log_threshold()))
    std::cerr << "[nb] " << msg << "\n";
}

void log_error(const std::string& m) { log_at(LogLevel::error, m); }
void log_info(const std::string& m) { log_at(LogLevel::info, m); }
void log_debug(const std::string& m) { log_at(LogLevel::debug, m); }

// ---------------------------------------------------------------------------
// Flag parsing helpers.

GraphStructure structure_of(const std::string& name) {
  if (name == "er" || name == "erdos_renyi") return GraphStructure::erdos_renyi;
  if (name == "pa" || name == "preferential_attachment")
    return GraphStructure::preferential_attachment;
  if (name == "community") return GraphStructure::community;
  throw InvalidArgument("unknown --structure '" + name +
                        "' (er|pa|community)");
}

std::string canonical_structure(GraphStructure s) {
  switch (s) {
    case GraphStructure::erdos_renyi: return "er";
    case GraphStructure::preferential_attachment: return "pa";
    case GraphStructure::community: return "community";
  }
  return "er";
}

NoiseKind noise_of(const std::string& name) {
  if (name == "diagonal") return NoiseKind::diagonal;
  if (name == "spherical") return NoiseKind::spherical;
  throw InvalidArgument("unknown --noise '" + name +
                        "' (diagonal|spherical)");
}

Criterion criterion_of(const std::string& name) {
  if (name == "bic") return Criterion::bic;
  if (name == "ebic") return Criterion::ebic;
  if (name == "icl") return Criterion::icl;
  throw InvalidArgument("unknown --criterion '" + name + "' (bic|ebic|icl)");
}

std::vector<double> parse_lambda_list(const std::string& text) {
  std::vector<double> out;
  std::istringstream in(text);
  std::string cell;
  while (std::getline(in, cell, ',')) {
    char* end = nullptr;
    const double v = std::strtod(cell.c_str(), &end);
    if (end == cell.c_str() || *end != '\0' || v < 0.0)
      throw InvalidArgument("bad --lambdas entry '" + cell + "'");
    out.push_back(v);
  }
  if (out.empty()) throw InvalidArgument("--lambdas parsed to an empty list");
  return out;
}

// Y.csv always; X defaults to an intercept-only design when no file is given.
Dataset load_dataset(const std::string& ypath, const std::string& xpath) {
  Matrix Y = read_csv_matrix(ypath);
  Matrix X = xpath.empty() ? Matrix::Ones(Y.rows(), 1).eval()
                           : read_csv_matrix(xpath);
  if (X.rows() != Y.rows())
    throw IoError("row count mismatch: " + ypath + " has " +
                  std::to_string(Y.rows()) + " rows, " +
                  (xpath.empty() ? std::string("intercept design") : xpath) +
                  " has " + std::to_string(X.rows()));
  return Dataset::validated(std::move(Y), std::move(X));
}

ClusterAssignment load_clusters(const std::string& path, int q,
                                const Dataset& data,
                                const std::string& ypath) {
  ClusterAssignment c = read_clusters_csv(path, q);
  if (c.p() != data.p())
    throw IoError("column count mismatch: " + path + " has " +
                  std::to_string(c.p()) + " labels, " + ypath + " has " +
                  std::to_string(data.p()) + " columns");
  return c;
}

void write_network_files(const fs::path& dir, const NetworkEstimate& net) {
  write_edgelist_tsv((dir / "network.edgelist.tsv").string(), net);
  write_dot((dir / "network.dot").string(), net);
  log_info("wrote " + (dir / "network.edgelist.tsv").string() + " (" +
           std::to_string(net.edge_count()) + " edges) and " +
           (dir / "network.dot").string());
}

void write_model_files(const fs::path& dir, const FitResult& fit) {
  save_model((dir / "model.json").string(), fit);
  log_info("wrote " + (dir / "model.json").string());
  write_network_files(dir, fit.network);
  if (!fit.converged)
    log_info("fit did not converge within " +
             std::to_string(fit.iterations) +
             " iterations; results saved with converged=false");
}

ordered_json support_to_json(const BoolMatrix& s) {
  ordered_json rows = ordered_json::array();
  for (Index i = 0; i < s.rows(); ++i) {
    ordered_json row = ordered_json::array();
    for (Index j = 0; j < s.cols(); ++j) row.push_back(s(i, j) ? 1 : 0);
    rows.push_back(std::move(row));
  }
  return rows;
}

BoolMatrix support_from_json(const ordered_json& rows) {
  const Index q = static_cast<Index>(rows.size());
  BoolMatrix s(q, q);
  for (Index i = 0; i < q; ++i) {
    const auto& row = rows[static_cast<std::size_t>(i)];
    if (static_cast<Index>(row.size()) != q)
      throw IoError("path json: ragged support matrix");
    for (Index j = 0; j < q; ++j)
      s(i, j) = row[static_cast<std::size_t>(j)].get<int>() != 0;
  }
  return s;
}

int support_edge_count(const BoolMatrix& s) {
  int e = 0;
  for (Index l = 1; l < s.cols(); ++l)
    for (Index k = 0; k < l; ++k) e += s(k, l) ? 1 : 0;
  return e;
}

// ---------------------------------------------------------------------------
// simulate.

struct SimArgs {
  std::string out = ".";
  std::string structure = "er";
  int n = 0;
  int p = 0;
  int q = 0;
  int dcov = 2;
  double edge_prob = 0.2;
  double attach_power = 1.0;
  int communities = 3;
  double within_prob = 0.6;
  double between_prob = 0.05;
  std::string noise = "diagonal";
  double noise_lo = 0.5;
  double noise_hi = 1.5;
  double b_scale = 1.0;
  double zi_mean = 0.0;
  bool zi = false;  // set when --zi-mean was passed
  bool emit_clusters = false;
  std::uint64_t seed = 0;
};

int cmd_simulate(const SimArgs& a) {
  if (a.n < 1 || a.p < 1 || a.q < 1)
    throw InvalidArgument("--n, --p, --q must be positive");
  if (a.dcov < 1) throw InvalidArgument("--dcov must be positive");
  if (!(a.noise_lo > 0.0) || a.noise_hi < a.noise_lo)
    throw InvalidArgument("need 0 < --noise-lo <= --noise-hi");
  const NoiseKind kind = noise_of(a.noise);

  GraphSpec gspec;
  gspec.structure = structure_of(a.structure);
  gspec.q = a.q;
  gspec.edge_prob = a.edge_prob;
  gspec.attach_power = a.attach_power;
  gspec.communities = a.communities;
  gspec.within_prob = a.within_prob;
  gspec.between_prob = a.between_prob;
  gspec.seed = a.seed + 1;

  const Matrix adjacency = generate_graph(gspec);

  Rng rng(a.seed);
  ModelParams par;
  par.set_precision(graph_to_precision(adjacency));
  par.B = Matrix(a.dcov, a.p);
  for (Index i = 0; i < par.B.rows(); ++i)
    for (Index j = 0; j < par.B.cols(); ++j)
      par.B(i, j) = rng.normal(0.0, a.b_scale);
  if (kind == NoiseKind::diagonal) {
    Vector d(a.p);
    for (Index j = 0; j < a.p; ++j) d(j) = rng.uniform(a.noise_lo, a.noise_hi);
    par.noise = Noise::diagonal(std::move(d));
  } else {
    par.noise = Noise::spherical(rng.uniform(a.noise_lo, a.noise_hi), a.p);
  }
  if (a.zi) par.kappa = truncated_kappa(a.p, a.zi_mean, rng);

  const ClusterAssignment clustering = balanced_clustering(a.p, a.q, rng);
  const Dataset data = a.zi ? simulate_zi(par, clustering, a.n, a.seed + 2)
                            : simulate(par, clustering, a.n, a.seed + 2);

  const fs::path dir(a.out);
  std::error_code ec;
  fs::create_directories(dir, ec);

  write_csv_matrix((dir / "Y.csv").string(), data.Y, "y");
  write_csv_matrix((dir / "X.csv").string(), data.X, "x");

  SimTruth truth;
  truth.params = par;
  truth.clustering = clustering;
  truth.adjacency = adjacency;
  truth.structure = canonical_structure(gspec.structure);
  truth.seed = a.seed;
  save_truth((dir / "truth.json").string(), truth);

  if (a.emit_clusters)
    write_clusters_csv((dir / "clusters.csv").string(), clustering);

  if (a.zi) {
    const double zero_rate =
        1.0 - static_cast<double>((data.Y.array() != 0.0).count()) /
                  static_cast<double>(data.Y.size());
    log_info("zero-inflated simulation: empirical zero rate " +
             std::to_string(zero_rate));
  }
  log_info("wrote " + (dir / "Y.csv").string() + ", " +
           (dir / "X.csv").string() + ", " + (dir / "truth.json").string() +
           (a.emit_clusters ? ", " + (dir / "clusters.csv").string() : ""));
  return 0;
}

// ---------------------------------------------------------------------------
// fit.

struct FitArgs {
  std::string y;
  std::string x;
  std::string clusters;
  std::string out = ".";
  std::string method = "vem";
  std::string noise = "diagonal";
  std::string cluster_method = "kmeans";
  int q = 0;
  double lambda = 0.0;
  bool zi = false;
  double tol = 1e-6;
  int max_iter = 500;
  std::uint64_t seed = 0;
};

TwoStepClustering two_step_method_of(const std::string& name) {
  if (name == "kmeans") return TwoStepClustering::residual_kmeans;
  if (name == "spectral") return TwoStepClustering::covariance_spectral;
  throw InvalidArgument("unknown --cluster-method '" + name +
                        "' (kmeans|spectral)");
}

FitResult dispatch_fit(const FitArgs& a, const Dataset& data,
                       const std::optional<ClusterAssignment>& clusters) {
  const NoiseKind kind = noise_of(a.noise);
  if (a.zi && kind != NoiseKind::diagonal)
    throw InvalidArgument("zero-inflated fits support --noise diagonal only");
  FitOptions opts;
  opts.tol = a.tol;
  opts.max_iter = a.max_iter;
  opts.seed = a.seed;

  if (a.method == "vem") {
    const int q = a.q > 0 ? a.q : (clusters ? clusters->q() : 0);
    if (q < 1) throw InvalidArgument("--method vem needs --q (or --clusters)");
    VemInit init;
    init.clustering = clusters;
    return a.zi ? fit_zi_vem(data, q, a.lambda, std::move(init), opts)
                : fit_vem(data, q, a.lambda, std::move(init), opts, kind);
  }
  if (a.method == "em") {
    if (!clusters)
      throw InvalidArgument("--method em needs --clusters (observed labels)");
    return a.zi ? fit_zi_em_observed(data, *clusters, a.lambda, opts)
                : fit_em_observed(data, *clusters, kind, a.lambda, {}, opts);
  }
  if (a.method == "two-step") {
    if (clusters)
      return a.zi ? zi_two_step_fit(data, *clusters, a.lambda, opts.glasso)
                  : two_step_fit(data, *clusters, a.lambda, opts.glasso);
    if (a.q < 1)
      throw InvalidArgument("--method two-step needs --q or --clusters");
    const TwoStepClustering method = two_step_method_of(a.cluster_method);
    return a.zi ? zi_two_step_fit(data, a.q, a.lambda, method, a.seed,
                                  opts.glasso)
                : two_step_fit(data, a.q, a.lambda, method, a.seed,
                               opts.glasso);
  }
  throw InvalidArgument("unknown --method '" + a.method +
                        "' (vem|em|two-step)");
}

int cmd_fit(const FitArgs& a) {
  const Dataset data = load_dataset(a.y, a.x);
  std::optional<ClusterAssignment> clusters;
  if (!a.clusters.empty())
    clusters = load_clusters(a.clusters, a.q, data, a.y);

  const FitResult fit = dispatch_fit(a, data, clusters);

  const fs::path dir(a.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  write_model_files(dir, fit);
  return 0;
}

// ---------------------------------------------------------------------------
// select.

struct SelectArgs {
  std::string y;
  std::string x;
  std::string out = ".";
  int q = 0;
  int q_min = 0;
  int q_max = 0;
  double lambda = 0.0;
  std::string lambdas_text;
  std::string criterion = "bic";
  std::string noise = "diagonal";
  bool zi = false;
  double tol = 1e-6;
  int max_iter = 500;
  std::uint64_t seed = 0;
  int jobs = 0;
};

int cmd_select(const SelectArgs& a) {
  const Dataset data = load_dataset(a.y, a.x);
  const Criterion crit = criterion_of(a.criterion);

  int q_lo = a.q_min, q_hi = a.q_max;
  if (a.q > 0) q_lo = q_hi = a.q;
  if (q_lo < 1 || q_hi < q_lo)
    throw InvalidArgument("need --q, or --q-min <= --q-max (both >= 1)");

  const std::vector<double> lambdas = a.lambdas_text.empty()
                                          ? std::vector<double>{a.lambda}
                                          : parse_lambda_list(a.lambdas_text);

  SelectConfig cfg;
  cfg.noise = noise_of(a.noise);
  cfg.zero_inflated = a.zi;
  cfg.fit.tol = a.tol;
  cfg.fit.max_iter = a.max_iter;
  cfg.fit.seed = a.seed;
  cfg.jobs = a.jobs;
  if (a.zi && cfg.noise != NoiseKind::diagonal)
    throw InvalidArgument("zero-inflated fits support --noise diagonal only");

  struct Cell {
    int q;
    CandidateRecord rec;
  };
  std::vector<Cell> cells;
  std::optional<FitResult> best;
  double best_value = 0.0;
  int best_q = -1;
  std::vector<double> best_path_lambdas;
  std::vector<BoolMatrix> best_path_supports;

  auto criterion_value = [&](const CandidateRecord& r) {
    switch (crit) {
      case Criterion::bic: return r.bic;
      case Criterion::ebic: return r.ebic;
      case Criterion::icl: return r.icl;
    }
    return r.bic;
  };

  for (int q = q_lo; q <= q_hi; ++q) {
    std::vector<std::optional<FitResult>> fits;
    const CriterionReport report =
        select_lambda(data, q, lambdas, crit, cfg, &fits);
    for (const CandidateRecord& rec : report.records) {
      cells.push_back({q, rec});
      if (rec.failed) log_debug("cell q=" + std::to_string(q) + " lambda=" +
                                std::to_string(rec.value) + " failed: " +
                                rec.error);
    }
    if (report.chosen >= 0) {
      const CandidateRecord& rec =
          report.records[static_cast<std::size_t>(report.chosen)];
      if (best_q < 0 || criterion_value(rec) > best_value) {
        best_value = criterion_value(rec);
        best_q = q;
        best_path_lambdas.clear();
        best_path_supports.clear();
        for (std::size_t i = 0; i < fits.size(); ++i)
          if (fits[i]) {
            best_path_lambdas.push_back(lambdas[i]);
            best_path_supports.push_back(fits[i]->network.support);
          }
        best = std::move(fits[static_cast<std::size_t>(report.chosen)]);
      }
    }
  }

  const fs::path dir(a.out);
  std::error_code ec;
  fs::create_directories(dir, ec);

  {
    std::ofstream out((dir / "criteria.csv").string(), std::ios::binary);
    if (!out)
      throw IoError("cannot open for writing: " +
                    (dir / "criteria.csv").string());
    out << "q,lambda,objective,n_params,bic,ebic,icl,converged,failed\n";
    for (const Cell& cell : cells)
      out << cell.q << "," << detail::format_double(cell.rec.value) << ","
          << detail::format_double(cell.rec.objective) << ","
          << cell.rec.n_params << "," << detail::format_double(cell.rec.bic)
          << "," << detail::format_double(cell.rec.ebic) << ","
          << detail::format_double(cell.rec.icl) << ","
          << (cell.rec.converged ? 1 : 0) << "," << (cell.rec.failed ? 1 : 0)
          << "\n";
  }
  log_info("wrote " + (dir / "criteria.csv").string() + " (" +
           std::to_string(cells.size()) + " cells)");

  if (!best) {
    log_error("every candidate fit failed; no model written");
    return 1;
  }

  ordered_json chosen;
  chosen["schema_version"] = 1;
  chosen["criterion"] = a.criterion;
  chosen["q"] = best_q;
  chosen["lambda"] = best->network.lambda;
  save_json((dir / "selection.json").string(), chosen);

  ordered_json path;
  path["schema_version"] = 1;
  path["q"] = best_q;
  path["lambdas"] = best_path_lambdas;
  ordered_json supports = ordered_json::array();
  for (const BoolMatrix& s : best_path_supports)
    supports.push_back(support_to_json(s));
  path["supports"] = std::move(supports);
  save_json((dir / "path.json").string(), path);

  log_info("chosen q=" + std::to_string(best_q) + " lambda=" +
           detail::format_double(best->network.lambda) + " by " + a.criterion);
  write_model_files(dir, *best);
  return 0;
}

// ---------------------------------------------------------------------------
// stars.

struct StarsArgs {
  std::string y;
  std::string x;
  std::string clusters;
  std::string out = ".";
  int q = 0;
  std::string lambdas_text;
  int grid_points = 0;
  double threshold = 0.8;
  double ratio = 0.8;
  int subsamples = 20;
  std::string noise = "diagonal";
  bool zi = false;
  double tol = 1e-6;
  int max_iter = 500;
  std::uint64_t seed = 0;
  int jobs = 0;
};

int cmd_stars(const StarsArgs& a) {
  const Dataset data = load_dataset(a.y, a.x);
  const NoiseKind kind = noise_of(a.noise);
  if (a.zi && kind != NoiseKind::diagonal)
    throw InvalidArgument("zero-inflated fits support --noise diagonal only");

  FitOptions opts;
  opts.tol = a.tol;
  opts.max_iter = a.max_iter;
  opts.seed = a.seed;

  std::optional<ClusterAssignment> clustering;
  if (!a.clusters.empty()) {
    clustering = load_clusters(a.clusters, a.q, data, a.y);
  } else {
    if (a.q < 1) throw InvalidArgument("need --clusters or --q");
    log_info("no --clusters given; clustering via an unpenalized latent fit");
    const FitResult pre =
        a.zi ? fit_zi_vem(data, a.q, 0.0, {}, opts)
             : fit_vem(data, a.q, 0.0, {}, opts, kind);
    clustering = pre.clustering;
  }

  std::vector<double> lambdas;
  if (!a.lambdas_text.empty()) {
    lambdas = parse_lambda_list(a.lambdas_text);
  } else if (a.grid_points >= 2) {
    const FitResult base =
        a.zi ? zi_two_step_fit(data, *clustering, 0.0)
             : two_step_fit(data, *clustering, 0.0);
    lambdas = lambda_grid(base.params.sigma, a.grid_points);
    log_info("lambda grid from aggregated covariance: [" +
             detail::format_double(lambdas.front()) + " .. " +
             detail::format_double(lambdas.back()) + "], " +
             std::to_string(lambdas.size()) + " points");
  } else {
    throw InvalidArgument("need --lambdas or --grid >= 2");
  }

  StarsConfig cfg;
  cfg.n_subsamples = a.subsamples;
  cfg.subsample_ratio = a.ratio;
  cfg.threshold = a.threshold;
  cfg.seed = a.seed;
  cfg.jobs = a.jobs;
  cfg.zero_inflated = a.zi;
  cfg.noise = kind;
  cfg.fit = opts;

  const StarsResult result = stars(data, *clustering, lambdas, cfg);

  const fs::path dir(a.out);
  std::error_code ec;
  fs::create_directories(dir, ec);

  {
    std::ofstream out((dir / "stability.csv").string(), std::ios::binary);
    if (!out)
      throw IoError("cannot open for writing: " +
                    (dir / "stability.csv").string());
    out << "lambda,edge_count,min_selected_frequency,qualified,"
           "failed_subsamples,full_fit_failed\n";
    for (const StabilityPoint& pt : result.curve)
      out << detail::format_double(pt.lambda) << ","
          << support_edge_count(pt.support) << ","
          << detail::format_double(pt.min_selected_frequency) << ","
          << (pt.qualified ? 1 : 0) << "," << pt.failed_subsamples << ","
          << (pt.full_fit_failed ? 1 : 0) << "\n";
  }
  log_info("wrote " + (dir / "stability.csv").string());

  ordered_json summary;
  summary["schema_version"] = 1;
  summary["threshold"] = a.threshold;
  summary["chosen_lambda"] = result.chosen_lambda;
  summary["chosen_index"] = result.chosen_index;
  summary["any_qualified"] = result.any_qualified;
  save_json((dir / "stars.json").string(), summary);
  log_info("chosen lambda " + detail::format_double(result.chosen_lambda) +
           (result.any_qualified ? "" : " (no grid point qualified)"));

  const FitResult fit =
      a.zi ? fit_zi_em_observed(data, *clustering, result.chosen_lambda, opts)
           : fit_em_observed(data, *clustering, kind, result.chosen_lambda, {},
                             opts);
  write_model_files(dir, fit);
  return 0;
}

// ---------------------------------------------------------------------------
// metrics.

struct MetricsArgs {
  std::string model;
  std::string truth;
  std::string y;
  std::string x;
  std::string path_json;
  std::string out = ".";
};

Matrix fitted_values(const FitResult& fit, const Dataset& data) {
  const Matrix C = one_hot(fit.clustering);
  if (fit.params.zero_inflated()) {
    const ZiMasks masks = ZiMasks::from(data.Y);
    const ZiPosterior post =
        zi_e_step_observed(fit.params, fit.clustering, data, masks);
    // Observed zeros are predicted as structural zeros.
    return (data.X * fit.params.B + post.mu * C.transpose())
        .cwiseProduct(masks.ones);
  }
  const PosteriorMoments mom = e_step(fit.params, fit.clustering, data);
  return data.X * fit.params.B + mom.mu * C.transpose();
}

int cmd_metrics(const MetricsArgs& a) {
  const FitResult fit = load_model(a.model);
  const SimTruth truth = load_truth(a.truth);
  const Dataset data = load_dataset(a.y, a.x);

  if (fit.params.p() != data.p())
    throw IoError("column count mismatch: " + a.model + " has p=" +
                  std::to_string(fit.params.p()) + ", " + a.y + " has p=" +
                  std::to_string(data.p()));
  if (fit.params.B.rows() != data.dcov())
    throw IoError("covariate mismatch: " + a.model + " expects " +
                  std::to_string(fit.params.B.rows()) + " columns, design has " +
                  std::to_string(data.dcov()));
  if (truth.params.p() != fit.params.p())
    throw IoError("column count mismatch between " + a.model + " and " +
                  a.truth);

  std::vector<std::pair<std::string, double>> rows;
  rows.emplace_back("ari", ari(fit.clustering, truth.clustering));

  if (fit.params.B.rows() == truth.params.B.rows())
    rows.emplace_back("rmse_B", rmse(fit.params.B, truth.params.B));
  else
    log_info("skipping rmse_B: covariate dimensions differ");

  rows.emplace_back("rmse_D", rmse(fit.params.noise.d, truth.params.noise.d));

  if (fit.params.zero_inflated() && truth.params.zero_inflated())
    rows.emplace_back("rmse_kappa", rmse(fit.params.kappa, truth.params.kappa));

  rows.emplace_back("rmse_fit", rmse(fitted_values(fit, data), data.Y));

  const BoolMatrix truth_support =
      (truth.adjacency.array() != 0.0).matrix();
  if (fit.params.q() == truth.params.q()) {
    rows.emplace_back("f1", f1(fit.network.support, truth_support));
  } else {
    log_info("skipping f1: model has q=" + std::to_string(fit.params.q()) +
             ", truth has q=" + std::to_string(truth.params.q()));
  }

  if (!a.path_json.empty()) {
    const ordered_json pj = load_json(a.path_json);
    std::vector<BoolMatrix> path;
    try {
      for (const auto& s : pj.at("supports")) path.push_back(support_from_json(s));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed path json " + a.path_json + ": " + e.what());
    }
    if (path.empty() || path.front().rows() != truth_support.rows()) {
      log_info("skipping auc: path networks do not match the truth dimension");
    } else {
      const int edges = support_edge_count(truth_support);
      const int all = static_cast<int>(truth_support.rows() *
                                       (truth_support.rows() - 1) / 2);
      if (edges == 0 || edges == all)
        log_info("skipping auc: degenerate truth graph");
      else
        rows.emplace_back("auc", roc_auc(truth_support, path).auc);
    }
  }

  const fs::path dir(a.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path file = dir / "metrics.csv";
  std::ofstream out(file.string(), std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + file.string());
  out << "metric,value\n";
  for (const auto& [name, value] : rows)
    out << name << "," << detail::format_double(value) << "\n";
  log_info("wrote " + file.string());
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
  CLI::App app{"Normal-Block models: clustered Gaussian graphical inference"};
  app.require_subcommand(1);

  SimArgs sim_args;
  CLI::App* sim = app.add_subcommand(
      "simulate", "Generate a synthetic dataset (Y.csv, X.csv, truth.json)");
  sim->add_option("--out", sim_args.out, "output directory");
  sim->add_option("--structure", sim_args.structure, "er|pa|community");
  sim->add_option("--n", sim_args.n, "observations")->required();
  sim->add_option("--p", sim_args.p, "variables")->required();
  sim->add_option("--q", sim_args.q, "clusters")->required();
  sim->add_option("--dcov", sim_args.dcov, "covariates (default 2)");
  sim->add_option("--edge-prob", sim_args.edge_prob, "ER edge probability");
  sim->add_option("--attach-power", sim_args.attach_power, "PA exponent");
  sim->add_option("--communities", sim_args.communities, "community count");
  sim->add_option("--within-prob", sim_args.within_prob,
                  "within-community edge probability");
  sim->add_option("--between-prob", sim_args.between_prob,
                  "between-community edge probability");
  sim->add_option("--noise", sim_args.noise, "diagonal|spherical");
  sim->add_option("--noise-lo", sim_args.noise_lo, "noise variance lower bound");
  sim->add_option("--noise-hi", sim_args.noise_hi, "noise variance upper bound");
  sim->add_option("--b-scale", sim_args.b_scale, "sd of regression entries");
  CLI::Option* zi_mean_opt = sim->add_option(
      "--zi-mean", sim_args.zi_mean, "mean zero-inflation level (enables ZI)");
  sim->add_flag("--emit-clusters", sim_args.emit_clusters,
                "also write clusters.csv");
  sim->add_option("--seed", sim_args.seed, "RNG seed");

  FitArgs fit_args;
  CLI::App* fit = app.add_subcommand(
      "fit", "Fit one model (model.json + network exports)");
  fit->add_option("--y", fit_args.y, "response CSV")->required();
  fit->add_option("--x", fit_args.x, "covariate CSV (default: intercept)");
  fit->add_option("--clusters", fit_args.clusters, "known clustering CSV");
  fit->add_option("--out", fit_args.out, "output directory");
  fit->add_option("--method", fit_args.method, "vem|em|two-step");
  fit->add_option("--cluster-method", fit_args.cluster_method,
                  "two-step clustering: kmeans|spectral");
  fit->add_option("--q", fit_args.q, "cluster count");
  fit->add_option("--lambda", fit_args.lambda, "glasso penalty");
  fit->add_option("--noise", fit_args.noise, "diagonal|spherical");
  fit->add_flag("--zi", fit_args.zi, "zero-inflated model");
  fit->add_option("--tol", fit_args.tol, "convergence tolerance");
  fit->add_option("--max-iter", fit_args.max_iter, "iteration cap");
  fit->add_option("--seed", fit_args.seed, "RNG seed (initialization)");

  SelectArgs sel_args;
  CLI::App* sel = app.add_subcommand(
      "select", "Sweep q and/or lambda (criteria.csv + chosen model)");
  sel->add_option("--y", sel_args.y, "response CSV")->required();
  sel->add_option("--x", sel_args.x, "covariate CSV (default: intercept)");
  sel->add_option("--out", sel_args.out, "output directory");
  sel->add_option("--q", sel_args.q, "fixed cluster count");
  sel->add_option("--q-min", sel_args.q_min, "smallest q");
  sel->add_option("--q-max", sel_args.q_max, "largest q");
  sel->add_option("--lambda", sel_args.lambda, "fixed glasso penalty");
  sel->add_option("--lambdas", sel_args.lambdas_text,
                  "comma-separated penalty grid");
  sel->add_option("--criterion", sel_args.criterion, "bic|ebic|icl");
  sel->add_option("--noise", sel_args.noise, "diagonal|spherical");
  sel->add_flag("--zi", sel_args.zi, "zero-inflated model");
  sel->add_option("--tol", sel_args.tol, "convergence tolerance");
  sel->add_option("--max-iter", sel_args.max_iter, "iteration cap");
  sel->add_option("--seed", sel_args.seed, "RNG seed");
  sel->add_option("--jobs", sel_args.jobs, "worker threads (0 = all)");

  StarsArgs stars_args;
  CLI::App* sta = app.add_subcommand(
      "stars", "Stability selection of lambda (stability.csv + chosen model)");
  sta->add_option("--y", stars_args.y, "response CSV")->required();
  sta->add_option("--x", stars_args.x, "covariate CSV (default: intercept)");
  sta->add_option("--clusters", stars_args.clusters, "known clustering CSV");
  sta->add_option("--out", stars_args.out, "output directory");
  sta->add_option("--q", stars_args.q,
                  "cluster count (used when no --clusters)");
  sta->add_option("--lambdas", stars_args.lambdas_text,
                  "comma-separated penalty grid");
  sta->add_option("--grid", stars_args.grid_points,
                  "derive a log-spaced grid with this many points");
  sta->add_option("--threshold", stars_args.threshold,
                  "required edge stability");
  sta->add_option("--ratio", stars_args.ratio, "subsample fraction");
  sta->add_option("--subsamples", stars_args.subsamples, "subsample count");
  sta->add_option("--noise", stars_args.noise, "diagonal|spherical");
  sta->add_flag("--zi", stars_args.zi, "zero-inflated model");
  sta->add_option("--tol", stars_args.tol, "convergence tolerance");
  sta->add_option("--max-iter", stars_args.max_iter, "iteration cap");
  sta->add_option("--seed", stars_args.seed, "RNG seed");
  sta->add_option("--jobs", stars_args.jobs, "worker threads (0 = all)");

  MetricsArgs met_args;
  CLI::App* met = app.add_subcommand(
      "metrics", "Compare a fitted model against simulation truth");
  met->add_option("--model", met_args.model, "model.json")->required();
  met->add_option("--truth", met_args.truth, "truth.json")->required();
  met->add_option("--y", met_args.y, "response CSV")->required();
  met->add_option("--x", met_args.x, "covariate CSV (default: intercept)");
  met->add_option("--path", met_args.path_json,
                  "path.json from select (enables auc)");
  met->add_option("--out", met_args.out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  sim_args.zi = zi_mean_opt->count() > 0;

  try {
    if (sim->parsed()) return cmd_simulate(sim_args);
    if (fit->parsed()) return cmd_fit(fit_args);
    if (sel->parsed()) return cmd_select(sel_args);
    if (sta->parsed()) return cmd_stars(stars_args);
    if (met->parsed()) return cmd_metrics(met_args);
  } catch (const IoError& e) {
    log_error(e.what());
    return 2;
  } catch (const InvalidArgument& e) {
    log_error(e.what());
    return 2;
  } catch (const SingularInput& e) {
    log_error(e.what());
    return 2;
  } catch (const DegenerateRow& e) {
    log_error(e.what());
    return 2;
  } catch (const std::exception& e) {
    log_error(std::string("internal error: ") + e.what());
    return 1;
  }
  return 0;
}
