#pragma once

// Simulation protocol: adjacency draws (three named mechanisms), precision
// construction by eigenvalue shift, balanced clusterings, and Normal-Block
// data generation with an optional exact-zero masking layer.  Everything is
// deterministic given the seed it is handed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "common.hpp"
#include "types.hpp"

namespace nb {

enum class GraphStructure { erdos_renyi, preferential_attachment, community };

struct GraphSpec {
  GraphStructure structure = GraphStructure::erdos_renyi;
  int q = 0;
  double edge_prob = 0.2;     // erdos_renyi
  double attach_power = 1.0;  // preferential_attachment
  int communities = 3;        // community
  double within_prob = 0.6;
  double between_prob = 0.05;
  std::uint64_t seed = 0;
};

// Symmetric 0/1 adjacency with zero diagonal per the named mechanism.
inline Matrix generate_graph(const GraphSpec& spec) {
  require(spec.q >= 1, "generate_graph: q must be >= 1");
  const Index q = spec.q;
  Rng rng(spec.seed);
  Matrix g = Matrix::Zero(q, q);
  auto set_edge = [&](Index k, Index l) { g(k, l) = g(l, k) = 1.0; };

  switch (spec.structure) {
    case GraphStructure::erdos_renyi: {
      require(spec.edge_prob >= 0.0 && spec.edge_prob <= 1.0,
              "generate_graph: edge_prob must be in [0,1]");
      for (Index l = 1; l < q; ++l)
        for (Index k = 0; k < l; ++k)
          if (rng.bernoulli(spec.edge_prob)) set_edge(k, l);
      break;
    }
    case GraphStructure::preferential_attachment: {
      require(spec.attach_power >= 0.0,
              "generate_graph: attach_power must be >= 0");
      // Nodes arrive one at a time and attach a single edge to an existing
      // node with probability proportional to (degree + 1)^power, so the
      // result is a tree with q - 1 edges.
      std::vector<int> degree(static_cast<std::size_t>(q), 0);
      for (Index t = 1; t < q; ++t) {
        double total = 0.0;
        for (Index s = 0; s < t; ++s)
          total += std::pow(degree[static_cast<std::size_t>(s)] + 1.0,
                            spec.attach_power);
        double u = rng.uniform() * total;
        Index target = t - 1;
        for (Index s = 0; s < t; ++s) {
          u -= std::pow(degree[static_cast<std::size_t>(s)] + 1.0,
                        spec.attach_power);
          if (u <= 0.0) {
            target = s;
            break;
          }
        }
        set_edge(target, t);
        ++degree[static_cast<std::size_t>(target)];
        ++degree[static_cast<std::size_t>(t)];
      }
      break;
    }
    case GraphStructure::community: {
      require(spec.communities >= 1 && spec.communities <= spec.q,
              "generate_graph: communities must be in [1, q]");
      require(spec.within_prob >= 0.0 && spec.within_prob <= 1.0 &&
                  spec.between_prob >= 0.0 && spec.between_prob <= 1.0,
              "generate_graph: block probabilities must be in [0,1]");
      auto block = [&](Index k) {
        return static_cast<int>(k * spec.communities / q);
      };
      for (Index l = 1; l < q; ++l)
        for (Index k = 0; k < l; ++k) {
          const double prob =
              block(k) == block(l) ? spec.within_prob : spec.between_prob;
          if (rng.bernoulli(prob)) set_edge(k, l);
        }
      break;
    }
  }
  return g;
}

// Omega = G*v shifted by |min eigenvalue| + u on the diagonal: SPD by
// construction (its spectrum is bounded below by u) with off-diagonal
// support exactly G.
inline Matrix graph_to_precision(const Matrix& g, double u = 0.4,
                                 double v = 0.3) {
  require(g.rows() == g.cols(), "graph_to_precision: square input required");
  require(u > 0.0 && v > 0.0, "graph_to_precision: u and v must be positive");
  require((g.array() == g.transpose().array()).all(),
          "graph_to_precision: adjacency must be symmetric");
  require((g.diagonal().array() == 0.0).all(),
          "graph_to_precision: adjacency diagonal must be zero");
  require(((g.array() == 0.0) || (g.array() == 1.0)).all(),
          "graph_to_precision: adjacency entries must be 0 or 1");
  Matrix omega = g * v;
  const Eigen::SelfAdjointEigenSolver<Matrix> eig(omega,
                                                  Eigen::EigenvaluesOnly);
  omega.diagonal().array() += std::abs(eig.eigenvalues().minCoeff()) + u;
  return omega;
}

// Uniform labels repaired so no cluster ends up empty: each empty cluster
// takes one member from a largest cluster.
inline ClusterAssignment balanced_clustering(int p, int q, Rng& rng) {
  require(q >= 1, "balanced_clustering: q must be >= 1");
  require(p >= q, "balanced_clustering: need p >= q");
  std::vector<int> labels(static_cast<std::size_t>(p));
  for (int j = 0; j < p; ++j)
    labels[static_cast<std::size_t>(j)] = rng.uniform_int(0, q - 1);
  for (;;) {
    std::vector<int> sizes(static_cast<std::size_t>(q), 0);
    for (int l : labels) ++sizes[static_cast<std::size_t>(l)];
    const auto empty = std::find(sizes.begin(), sizes.end(), 0);
    if (empty == sizes.end()) break;
    const int donor = static_cast<int>(
        std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
    std::vector<int> members;
    for (int j = 0; j < p; ++j)
      if (labels[static_cast<std::size_t>(j)] == donor) members.push_back(j);
    const int moved =
        members[static_cast<std::size_t>(rng.uniform_int(
            0, static_cast<int>(members.size()) - 1))];
    labels[static_cast<std::size_t>(moved)] =
        static_cast<int>(empty - sizes.begin());
  }
  return ClusterAssignment(std::move(labels), q);
}

// Per-variable masking probabilities: Gaussian(mean, sd) redrawn until
// inside [lo, hi].
inline Vector truncated_kappa(int p, double mean, Rng& rng, double sd = 0.05,
                              double lo = 0.0, double hi = 0.9) {
  require(p >= 1, "truncated_kappa: p must be >= 1");
  require(sd > 0.0, "truncated_kappa: sd must be positive");
  require(lo >= 0.0 && hi < 1.0 && lo < hi,
          "truncated_kappa: need 0 <= lo < hi < 1");
  require(mean >= lo && mean <= hi,
          "truncated_kappa: mean must lie inside the truncation window");
  Vector kappa(p);
  for (int j = 0; j < p; ++j) {
    double k;
    do k = rng.normal(mean, sd);
    while (k < lo || k > hi);
    kappa(j) = k;
  }
  return kappa;
}

// Draws X ~ U(1,10), W ~ N(0, Omega^-1) row-wise, Y = XB + WC' + noise.
inline Dataset simulate(const ModelParams& par, const ClusterAssignment& c,
                        int n, std::uint64_t seed) {
  require(n >= 1, "simulate: n must be >= 1");
  require(par.p() == c.p() && par.q() == c.q(),
          "simulate: parameter/clustering shape mismatch");
  const Index p = par.p(), q = par.q(), d = par.B.rows();
  Rng rng(seed);

  Matrix x(n, d);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) x(i, j) = rng.uniform(1.0, 10.0);

  const Eigen::LLT<Matrix> chol = llt_spd(par.sigma, "simulate: sigma");
  Matrix w(n, q);
  for (Index i = 0; i < n; ++i)
    for (Index k = 0; k < q; ++k) w(i, k) = rng.normal();
  w = w * Matrix(chol.matrixL()).transpose();

  const Vector sd = par.noise.d.cwiseSqrt();
  Matrix y = x * par.B + w * one_hot(c).transpose();
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < p; ++j) y(i, j) += rng.normal(0.0, sd(j));
  return Dataset::validated(std::move(y), std::move(x));
}

// Same draw followed by a masking pass: entry (i,j) is zeroed with
// probability kappa_j.  At kappa = 0 the output matches simulate() exactly.
inline Dataset simulate_zi(const ModelParams& par, const ClusterAssignment& c,
                           int n, std::uint64_t seed) {
  require(par.kappa.size() == par.p(),
          "simulate_zi: params carry no kappa vector");
  require((par.kappa.array() >= 0.0).all() && (par.kappa.array() < 1.0).all(),
          "simulate_zi: kappa entries must be in [0,1)");
  Dataset data = simulate(par, c, n, seed);
  Rng rng(seed + 0x5bf03635u);
  for (Index i = 0; i < data.n(); ++i)
    for (Index j = 0; j < data.p(); ++j)
      if (rng.bernoulli(par.kappa(j))) data.Y(i, j) = 0.0;
  return data;
}

}  // namespace nb
