#pragma once

// Helpers shared by the test suites: random SPD matrices, random sparse
// precisions, random datasets and clusterings.

#include <nb/common.hpp>
#include <nb/types.hpp>

#include <vector>

namespace nbtest {

inline nb::Matrix random_matrix(nb::Rng& rng, nb::Index r, nb::Index c) {
  nb::Matrix m(r, c);
  for (nb::Index j = 0; j < c; ++j)
    for (nb::Index i = 0; i < r; ++i) m(i, j) = rng.normal();
  return m;
}

// Well-conditioned random SPD matrix.
inline nb::Matrix random_spd(nb::Rng& rng, nb::Index m, double ridge = 0.5) {
  nb::Matrix a = random_matrix(rng, m, m);
  nb::Matrix s = a * a.transpose() / static_cast<double>(m);
  s.diagonal().array() += ridge;
  return s;
}

// Random sparse SPD precision: symmetric support with given edge
// probability, made diagonally dominant.
inline nb::Matrix random_sparse_precision(nb::Rng& rng, nb::Index q,
                                          double edge_prob = 0.3,
                                          double strength = 0.3) {
  nb::Matrix om = nb::Matrix::Zero(q, q);
  for (nb::Index l = 1; l < q; ++l)
    for (nb::Index k = 0; k < l; ++k)
      if (rng.bernoulli(edge_prob)) {
        const double v = strength * (rng.bernoulli(0.5) ? 1.0 : -1.0);
        om(k, l) = om(l, k) = v;
      }
  for (nb::Index k = 0; k < q; ++k)
    om(k, k) = om.row(k).cwiseAbs().sum() - std::abs(om(k, k)) + 0.4;
  return om;
}

inline std::vector<int> random_labels(nb::Rng& rng, int p, int q) {
  std::vector<int> lab(static_cast<std::size_t>(p));
  for (int j = 0; j < p; ++j) lab[static_cast<std::size_t>(j)] = rng.uniform_int(0, q - 1);
  // Ensure no cluster is empty so cluster-resolved oracles stay well posed.
  for (int k = 0; k < q; ++k) lab[static_cast<std::size_t>(k % p)] = k;
  return lab;
}

// Draws a small synthetic instance of the block model with observed labels.
struct SmallInstance {
  nb::Dataset data{nb::Matrix(), nb::Matrix()};
  nb::ClusterAssignment clustering{{0}, 1};
  nb::ModelParams params;
};

// Fresh data at fixed parameters: Y = X B + W C' + noise, W ~ N(0, sigma).
inline nb::Dataset draw_data(const nb::ModelParams& par,
                             const nb::ClusterAssignment& clustering, int n,
                             nb::Rng& rng) {
  const int p = clustering.p();
  const nb::Index dcov = par.B.rows();
  nb::Matrix X(n, dcov);
  for (nb::Index i = 0; i < n; ++i)
    for (nb::Index c = 0; c < dcov; ++c) X(i, c) = rng.uniform(1.0, 10.0);

  const nb::Matrix C = nb::one_hot(clustering);
  const nb::Matrix L = nb::llt_spd(par.sigma, "draw_data").matrixL();
  nb::Matrix W = random_matrix(rng, n, par.q()) * L.transpose();
  nb::Matrix Y = X * par.B + W * C.transpose();
  for (nb::Index i = 0; i < n; ++i)
    for (int j = 0; j < p; ++j)
      Y(i, j) += rng.normal(0.0, std::sqrt(par.noise.d(j)));
  return nb::Dataset::validated(std::move(Y), std::move(X));
}

inline SmallInstance random_instance(nb::Rng& rng, int n, int p, int q,
                                     int dcov = 1) {
  SmallInstance inst;
  inst.clustering = nb::ClusterAssignment(random_labels(rng, p, q), q);

  nb::ModelParams par;
  par.B = random_matrix(rng, dcov, p);
  par.set_precision(random_sparse_precision(rng, q));
  nb::Vector d(p);
  for (int j = 0; j < p; ++j) d(j) = rng.uniform(0.4, 1.6);
  par.noise = nb::Noise::diagonal(d);
  inst.params = par;

  inst.data = draw_data(inst.params, inst.clustering, n, rng);
  return inst;
}

}  // namespace nbtest
