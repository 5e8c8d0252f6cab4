#pragma once

// File formats for the batch surface: CSV matrices (comma-separated, one
// header row, no index column, %.17g values so reads invert writes), cluster
// files (1-based labels), JSON archives for models and simulation truths
// (schema_version 1; reload-then-save is byte-identical), network exports
// (edge-list TSV and DOT), and the experiment results CSV.

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "types.hpp"

namespace nb {

class IoError : public Error {
 public:
  using Error::Error;
};

using ordered_json = nlohmann::ordered_json;

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  return out;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  return in;
}

inline std::vector<double> parse_csv_row(const std::string& line,
                                         const std::string& path) {
  std::vector<double> row;
  std::size_t at = 0;
  while (at <= line.size()) {
    const std::size_t comma = line.find(',', at);
    const std::string cell =
        line.substr(at, comma == std::string::npos ? comma : comma - at);
    char* end = nullptr;
    const double v = std::strtod(cell.c_str(), &end);
    if (end == cell.c_str() || *end != '\0')
      throw IoError("unparsable numeric cell '" + cell + "' in " + path);
    row.push_back(v);
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  return row;
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// CSV matrices.

inline void write_csv_matrix(const std::string& path, const Matrix& m,
                             const std::string& col_prefix) {
  std::ofstream out = detail::open_out(path);
  for (Index j = 0; j < m.cols(); ++j)
    out << (j ? "," : "") << col_prefix << j + 1;
  out << "\n";
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j)
      out << (j ? "," : "") << detail::format_double(m(i, j));
    out << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

inline Matrix read_csv_matrix(const std::string& path) {
  std::ifstream in = detail::open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty file: " + path);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    detail::strip_cr(line);
    if (line.empty()) continue;
    rows.push_back(detail::parse_csv_row(line, path));
    if (rows.back().size() != rows.front().size())
      throw IoError("ragged row " + std::to_string(rows.size()) + " in " +
                    path);
  }
  if (rows.empty()) throw IoError("no data rows in " + path);
  Matrix m(static_cast<Index>(rows.size()),
           static_cast<Index>(rows.front().size()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j)
      m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  return m;
}

// ---------------------------------------------------------------------------
// Cluster files: one 1-based label per variable under a "cluster" header.

inline void write_clusters_csv(const std::string& path,
                               const ClusterAssignment& c) {
  std::ofstream out = detail::open_out(path);
  out << "cluster\n";
  for (int j = 0; j < c.p(); ++j) out << c.label(j) + 1 << "\n";
  if (!out) throw IoError("write failed: " + path);
}

// q defaults to the largest label present; pass it explicitly when trailing
// clusters may be unused.
inline ClusterAssignment read_clusters_csv(const std::string& path,
                                           int q = 0) {
  std::ifstream in = detail::open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty file: " + path);
  std::vector<int> labels;
  int max_label = 0;
  while (std::getline(in, line)) {
    detail::strip_cr(line);
    if (line.empty()) continue;
    char* end = nullptr;
    const long v = std::strtol(line.c_str(), &end, 10);
    if (end == line.c_str() || *end != '\0' || v < 1)
      throw IoError("bad cluster label '" + line + "' in " + path);
    labels.push_back(static_cast<int>(v) - 1);
    max_label = std::max(max_label, static_cast<int>(v));
  }
  if (labels.empty()) throw IoError("no labels in " + path);
  if (q == 0) q = max_label;
  if (max_label > q)
    throw IoError("label " + std::to_string(max_label) + " exceeds q = " +
                  std::to_string(q) + " in " + path);
  return ClusterAssignment(std::move(labels), q);
}

// ---------------------------------------------------------------------------
// JSON helpers.

namespace detail {

inline ordered_json matrix_to_json(const Matrix& m) {
  ordered_json rows = ordered_json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    ordered_json row = ordered_json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const ordered_json& rows, const char* what) {
  if (!rows.is_array() || rows.empty())
    throw IoError(std::string("expected a non-empty array for ") + what);
  const Index r = static_cast<Index>(rows.size());
  const Index c = static_cast<Index>(rows.front().size());
  Matrix m(r, c);
  for (Index i = 0; i < r; ++i) {
    const auto& row = rows[static_cast<std::size_t>(i)];
    if (static_cast<Index>(row.size()) != c)
      throw IoError(std::string("ragged matrix for ") + what);
    for (Index j = 0; j < c; ++j)
      m(i, j) = row[static_cast<std::size_t>(j)].get<double>();
  }
  return m;
}

inline ordered_json vector_to_json(const Vector& v) {
  ordered_json arr = ordered_json::array();
  for (Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

inline Vector vector_from_json(const ordered_json& arr, const char* what) {
  if (!arr.is_array())
    throw IoError(std::string("expected an array for ") + what);
  Vector v(static_cast<Index>(arr.size()));
  for (Index i = 0; i < v.size(); ++i)
    v(i) = arr[static_cast<std::size_t>(i)].get<double>();
  return v;
}

inline ordered_json params_to_json(const ModelParams& par) {
  ordered_json j;
  j["B"] = matrix_to_json(par.B);
  j["omega"] = matrix_to_json(par.omega);
  j["sigma"] = matrix_to_json(par.sigma);
  j["noise"] = ordered_json{
      {"kind", par.noise.kind == NoiseKind::diagonal ? "diagonal" : "spherical"},
      {"d", vector_to_json(par.noise.d)},
      {"xi", par.noise.xi}};
  j["alpha"] = vector_to_json(par.alpha);
  j["kappa"] = vector_to_json(par.kappa);
  return j;
}

inline ModelParams params_from_json(const ordered_json& j) {
  ModelParams par;
  par.B = matrix_from_json(j.at("B"), "B");
  par.set_precision(matrix_from_json(j.at("omega"), "omega"),
                    matrix_from_json(j.at("sigma"), "sigma"));
  const auto& noise = j.at("noise");
  const std::string kind = noise.at("kind").get<std::string>();
  if (kind == "diagonal")
    par.noise = Noise::diagonal(vector_from_json(noise.at("d"), "noise.d"));
  else if (kind == "spherical")
    par.noise = Noise::spherical(noise.at("xi").get<double>(),
                                 static_cast<Index>(noise.at("d").size()));
  else
    throw IoError("unknown noise kind '" + kind + "'");
  par.alpha = vector_from_json(j.at("alpha"), "alpha");
  par.kappa = vector_from_json(j.at("kappa"), "kappa");
  return par;
}

inline ordered_json clustering_to_json(const ClusterAssignment& c) {
  ordered_json labels = ordered_json::array();
  for (int j = 0; j < c.p(); ++j) labels.push_back(c.label(j) + 1);
  return ordered_json{{"q", c.q()}, {"labels", std::move(labels)}};
}

inline ClusterAssignment clustering_from_json(const ordered_json& j) {
  std::vector<int> labels;
  for (const auto& l : j.at("labels"))
    labels.push_back(l.get<int>() - 1);
  return ClusterAssignment(std::move(labels), j.at("q").get<int>());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// model.json: everything needed to reuse or audit a fit.

inline ordered_json model_to_json(const FitResult& fit) {
  ordered_json j;
  j["schema_version"] = 1;
  j["model"] = ordered_json{{"latent", fit.params.latent()},
                            {"zero_inflated", fit.params.zero_inflated()}};
  j["params"] = detail::params_to_json(fit.params);
  j["clustering"] = detail::clustering_to_json(fit.clustering);
  j["criteria"] = ordered_json{{"log_like_bound", fit.criteria.log_like_bound},
                               {"bic", fit.criteria.bic},
                               {"ebic", fit.criteria.ebic},
                               {"icl", fit.criteria.icl},
                               {"n_params", fit.criteria.n_params}};
  j["lambda"] = fit.network.lambda;
  j["objective_trace"] = fit.objective_trace;
  j["converged"] = fit.converged;
  j["iterations"] = fit.iterations;
  return j;
}

inline FitResult model_from_json(const ordered_json& j) {
  if (!j.contains("schema_version") || j.at("schema_version").get<int>() != 1)
    throw IoError("model json: unsupported schema_version");
  ModelParams par = detail::params_from_json(j.at("params"));
  const auto& crit = j.at("criteria");
  NetworkEstimate net =
      extract_network(par.omega, j.at("lambda").get<double>());
  return FitResult{std::move(par),
                   std::nullopt,
                   detail::clustering_from_json(j.at("clustering")),
                   j.at("objective_trace").get<std::vector<double>>(),
                   FitCriteria{crit.at("log_like_bound").get<double>(),
                               crit.at("bic").get<double>(),
                               crit.at("ebic").get<double>(),
                               crit.at("icl").get<double>(),
                               crit.at("n_params").get<int>()},
                   std::move(net),
                   j.at("converged").get<bool>(),
                   j.at("iterations").get<int>()};
}

inline void save_json(const std::string& path, const ordered_json& j) {
  std::ofstream out = detail::open_out(path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

inline ordered_json load_json(const std::string& path) {
  std::ifstream in = detail::open_in(path);
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("cannot parse " + path + ": " + e.what());
  }
  return j;
}

inline void save_model(const std::string& path, const FitResult& fit) {
  save_json(path, model_to_json(fit));
}

inline FitResult load_model(const std::string& path) {
  try {
    return model_from_json(load_json(path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed model json " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// truth.json: generator-side record of a simulation.

struct SimTruth {
  ModelParams params;
  ClusterAssignment clustering{{0}, 1};
  Matrix adjacency;  // q x q 0/1 graph behind omega
  std::string structure;
  std::uint64_t seed = 0;
};

inline void save_truth(const std::string& path, const SimTruth& truth) {
  ordered_json j;
  j["schema_version"] = 1;
  j["structure"] = truth.structure;
  j["seed"] = truth.seed;
  j["params"] = detail::params_to_json(truth.params);
  j["clustering"] = detail::clustering_to_json(truth.clustering);
  j["adjacency"] = detail::matrix_to_json(truth.adjacency);
  save_json(path, j);
}

inline SimTruth load_truth(const std::string& path) {
  try {
    const ordered_json j = load_json(path);
    if (!j.contains("schema_version") ||
        j.at("schema_version").get<int>() != 1)
      throw IoError("truth json: unsupported schema_version");
    SimTruth truth;
    truth.structure = j.at("structure").get<std::string>();
    truth.seed = j.at("seed").get<std::uint64_t>();
    truth.params = detail::params_from_json(j.at("params"));
    truth.clustering = detail::clustering_from_json(j.at("clustering"));
    truth.adjacency = detail::matrix_from_json(j.at("adjacency"), "adjacency");
    return truth;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed truth json " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Network exports.

inline void write_edgelist_tsv(const std::string& path,
                               const NetworkEstimate& net) {
  std::ofstream out = detail::open_out(path);
  out << "cluster_a\tcluster_b\tpartial_correlation\n";
  for (Index l = 1; l < net.support.cols(); ++l)
    for (Index k = 0; k < l; ++k)
      if (net.support(k, l))
        out << k + 1 << "\t" << l + 1 << "\t"
            << detail::format_double(net.partial_corr(k, l)) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

// Undirected DOT graph, positive associations pink and negative ones blue.
inline void write_dot(const std::string& path, const NetworkEstimate& net) {
  std::ofstream out = detail::open_out(path);
  out << "graph clusters {\n  node [shape=circle];\n";
  for (Index k = 0; k < net.support.rows(); ++k) out << "  " << k + 1 << ";\n";
  for (Index l = 1; l < net.support.cols(); ++l)
    for (Index k = 0; k < l; ++k)
      if (net.support(k, l))
        out << "  " << k + 1 << " -- " << l + 1 << " [color="
            << (net.partial_corr(k, l) > 0.0 ? "pink" : "blue") << "];\n";
  out << "}\n";
  if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Experiment results CSV: one row per (replicate, config, method, metric).

struct ResultRow {
  int replicate = 0;
  std::string structure;
  int n = 0;
  int p = 0;
  int q = 0;
  std::string method;
  std::string metric;
  double value = 0.0;
};

inline void write_results_csv(const std::string& path,
                              const std::vector<ResultRow>& rows) {
  std::ofstream out = detail::open_out(path);
  out << "replicate,structure,n,p,q,method,metric,value\n";
  for (const ResultRow& r : rows)
    out << r.replicate << "," << r.structure << "," << r.n << "," << r.p << ","
        << r.q << "," << r.method << "," << r.metric << ","
        << detail::format_double(r.value) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace nb
