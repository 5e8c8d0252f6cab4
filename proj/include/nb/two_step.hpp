#pragma once

// Two-step baseline: multivariate regression, clustering of the residual
// structure (k-means on residual columns or spectral clustering of the
// residual covariance), aggregation to a cluster-level covariance and a
// final graphical lasso. Also provides the k-means used elsewhere.

#include <nb/criteria.hpp>
#include <nb/glasso.hpp>
#include <nb/types.hpp>

#include <limits>
#include <utility>
#include <vector>

namespace nb {

// ---------------------------------------------------------------------------
// Multivariate linear regression.

struct MlrFit {
  Matrix B;          // d_cov x p
  Matrix residuals;  // n x p
};

inline MlrFit mlr_fit(const Dataset& data) {
  Eigen::ColPivHouseholderQR<Matrix> qr(data.X);
  if (qr.rank() < data.dcov())
    throw SingularInput("mlr_fit: design matrix is rank deficient");
  MlrFit fit;
  fit.B = qr.solve(data.Y);
  fit.residuals = data.Y - data.X * fit.B;
  return fit;
}

// ---------------------------------------------------------------------------
// k-means with k-means++ seeding. Points are the *columns* of pts. Empty
// clusters are re-seeded from the point farthest from its current center.

struct KmeansResult {
  std::vector<int> labels;
  Matrix centers;  // dim x k
  double wcss = std::numeric_limits<double>::infinity();
};

namespace detail {

inline KmeansResult kmeans_once(const Matrix& pts, int k, Rng& rng,
                                int max_iter) {
  const Index dim = pts.rows(), N = pts.cols();
  Matrix centers(dim, k);

  // k-means++: first center uniform, then D^2 sampling.
  Vector d2 = Vector::Constant(N, std::numeric_limits<double>::infinity());
  centers.col(0) = pts.col(rng.uniform_int(0, static_cast<int>(N) - 1));
  for (int c = 1; c < k; ++c) {
    for (Index i = 0; i < N; ++i)
      d2(i) = std::min(d2(i), (pts.col(i) - centers.col(c - 1)).squaredNorm());
    const double total = d2.sum();
    Index pick = 0;
    if (total > 0.0) {
      double target = rng.uniform() * total, acc = 0.0;
      for (Index i = 0; i < N; ++i) {
        acc += d2(i);
        if (acc >= target) { pick = i; break; }
        pick = i;
      }
    } else {
      pick = rng.uniform_int(0, static_cast<int>(N) - 1);  // duplicated points
    }
    centers.col(c) = pts.col(pick);
  }

  std::vector<int> labels(static_cast<std::size_t>(N), 0);
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    std::fill(counts.begin(), counts.end(), 0);
    for (Index i = 0; i < N; ++i) {
      int best = 0;
      double bd = (pts.col(i) - centers.col(0)).squaredNorm();
      for (int c = 1; c < k; ++c) {
        const double d = (pts.col(i) - centers.col(c)).squaredNorm();
        if (d < bd) { bd = d; best = c; }
      }
      if (labels[static_cast<std::size_t>(i)] != best) {
        labels[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
      ++counts[static_cast<std::size_t>(best)];
    }

    // Re-seed empty clusters from the farthest point.
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      Index far = 0;
      double fd = -1.0;
      for (Index i = 0; i < N; ++i) {
        const double d =
            (pts.col(i) - centers.col(labels[static_cast<std::size_t>(i)]))
                .squaredNorm();
        if (d > fd &&
            counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] > 1) {
          fd = d;
          far = i;
        }
      }
      --counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(far)])];
      labels[static_cast<std::size_t>(far)] = c;
      ++counts[static_cast<std::size_t>(c)];
      centers.col(c) = pts.col(far);
      changed = true;
    }

    centers.setZero();
    for (Index i = 0; i < N; ++i)
      centers.col(labels[static_cast<std::size_t>(i)]) += pts.col(i);
    for (int c = 0; c < k; ++c)
      if (counts[static_cast<std::size_t>(c)] > 0)
        centers.col(c) /= counts[static_cast<std::size_t>(c)];

    if (!changed && it > 0) break;
  }

  KmeansResult res;
  res.labels = std::move(labels);
  res.centers = std::move(centers);
  res.wcss = 0.0;
  for (Index i = 0; i < N; ++i)
    res.wcss +=
        (pts.col(i) - res.centers.col(res.labels[static_cast<std::size_t>(i)]))
            .squaredNorm();
  return res;
}

}  // namespace detail

inline KmeansResult kmeans(const Matrix& pts, int k, std::uint64_t seed,
                           int restarts = 10, int max_iter = 300) {
  require(k >= 1, "kmeans: k must be >= 1");
  require(pts.cols() >= k, "kmeans: fewer points than clusters");
  KmeansResult best;
  for (int r = 0; r < restarts; ++r) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
    KmeansResult cand = detail::kmeans_once(pts, k, rng, max_iter);
    if (cand.wcss < best.wcss) best = std::move(cand);
  }
  return best;
}

// Cluster the columns of a matrix (residual columns as points in R^n).
inline ClusterAssignment kmeans_columns(const Matrix& m, int k,
                                        std::uint64_t seed, int restarts = 10,
                                        int max_iter = 300) {
  KmeansResult res = kmeans(m, k, seed, restarts, max_iter);
  return ClusterAssignment(std::move(res.labels), k);
}

// Spectral clustering of a covariance: embed on the top-q eigenvectors of
// the absolute covariance, row-normalize, k-means the rows.
inline ClusterAssignment spectral_cluster_covariance(const Matrix& gamma_hat,
                                                     int q,
                                                     std::uint64_t seed) {
  require(gamma_hat.rows() == gamma_hat.cols(),
          "spectral_cluster_covariance: square input required");
  require(q >= 1 && q <= gamma_hat.rows(),
          "spectral_cluster_covariance: q out of range");
  const Matrix A = gamma_hat.cwiseAbs();
  Eigen::SelfAdjointEigenSolver<Matrix> es(A);
  if (es.info() != Eigen::Success)
    throw SingularInput("spectral_cluster_covariance: eigensolver failed");
  Matrix U = es.eigenvectors().rightCols(q);  // eigenvalues ascend in Eigen
  for (Index j = 0; j < U.rows(); ++j) {
    const double norm = U.row(j).norm();
    if (norm > 0.0) U.row(j) /= norm;
  }
  return kmeans_columns(U.transpose(), q, seed);
}

// Cluster-aggregated covariance: simga_tilde_kl is the mean of gamma_hat over
// all ordered pairs (j1 in k, j2 in l), including j1 = j2.
inline Matrix aggregate_covariance(const Matrix& gamma_hat,
                                   const ClusterAssignment& clustering) {
  require(gamma_hat.rows() == clustering.p(),
          "aggregate_covariance: shape mismatch");
  const std::vector<int> sizes = clustering.sizes();
  for (int k = 0; k < clustering.q(); ++k)
    if (sizes[static_cast<std::size_t>(k)] == 0)
      throw InvalidArgument("aggregate_covariance: cluster " +
                            std::to_string(k + 1) + " is empty");
  const Matrix C = one_hot(clustering);
  Matrix st = C.transpose() * gamma_hat * C;
  for (int k = 0; k < clustering.q(); ++k)
    for (int l = 0; l < clustering.q(); ++l)
      st(k, l) /= static_cast<double>(sizes[static_cast<std::size_t>(k)]) *
                  static_cast<double>(sizes[static_cast<std::size_t>(l)]);
  return st;
}

// ---------------------------------------------------------------------------
// Full two-step pipeline.

enum class TwoStepClustering { residual_kmeans, covariance_spectral };

namespace detail {

inline FitResult two_step_assemble(const Dataset& data, MlrFit mlr,
                                   const Matrix& gamma_hat,
                                   ClusterAssignment clustering, double lambda,
                                   const GlassoConfig& gcfg) {
  const Matrix sigma_tilde = aggregate_covariance(gamma_hat, clustering);

  bool glasso_ok = true;
  GlassoResult gl;
  try {
    gl = glasso(sigma_tilde, lambda, gcfg);
  } catch (const GlassoNonConvergence& e) {
    gl = e.last;
    glasso_ok = false;
  }

  ModelParams par;
  par.B = std::move(mlr.B);
  par.set_precision(gl.omega, gl.sigma_hat);
  // D is not estimated by the two-step pipeline; expose the unexplained
  // residual variance, floored at a fraction of the marginal variance so it
  // stays a usable variance even when the aggregate overshoots.
  Vector d(data.p());
  for (Index j = 0; j < data.p(); ++j) {
    const int c = clustering.label(static_cast<int>(j));
    d(j) = std::max({gamma_hat(j, j) - sigma_tilde(c, c),
                     0.05 * gamma_hat(j, j), 1e-6});
  }
  par.noise = Noise::diagonal(std::move(d));

  FitResult fit{std::move(par),
                std::nullopt,
                std::move(clustering),
                {},
                {},
                extract_network(gl.omega, lambda),
                glasso_ok,
                1};
  const double llb = observed_loglik(fit.params, fit.clustering, data);
  fit.objective_trace.push_back(
      llb - l1_trace_penalty(fit.params.omega, lambda, data.n()));
  fill_criteria(fit, data.n(), llb);
  return fit;
}

}  // namespace detail

// Variant with a known clustering (skips the clustering step).
inline FitResult two_step_fit(const Dataset& data,
                              const ClusterAssignment& clustering,
                              double lambda, const GlassoConfig& gcfg = {}) {
  require(clustering.p() == data.p(), "two_step_fit: clustering size mismatch");
  MlrFit mlr = mlr_fit(data);
  const Matrix gamma_hat =
      mlr.residuals.transpose() * mlr.residuals / static_cast<double>(data.n());
  return detail::two_step_assemble(data, std::move(mlr), gamma_hat, clustering,
                                   lambda, gcfg);
}

inline FitResult two_step_fit(
    const Dataset& data, int q, double lambda,
    TwoStepClustering method = TwoStepClustering::residual_kmeans,
    std::uint64_t seed = 0, const GlassoConfig& gcfg = {}) {
  require(q >= 1 && q <= data.p(), "two_step_fit: q out of range [1, p]");
  MlrFit mlr = mlr_fit(data);
  const Matrix gamma_hat =
      mlr.residuals.transpose() * mlr.residuals / static_cast<double>(data.n());
  ClusterAssignment clustering =
      method == TwoStepClustering::residual_kmeans
          ? kmeans_columns(mlr.residuals, q, seed)
          : spectral_cluster_covariance(gamma_hat, q, seed);
  return detail::two_step_assemble(data, std::move(mlr), gamma_hat,
                                   std::move(clustering), lambda, gcfg);
}

}  // namespace nb
