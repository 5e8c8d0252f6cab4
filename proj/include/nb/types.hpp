#pragma once

// Core value types: data container, clustering, model parameters, the
// variational state and the fitted-network summary every fitter returns.

#include <nb/common.hpp>

#include <optional>
#include <utility>
#include <vector>

namespace nb {

// ---------------------------------------------------------------------------
// Dataset: n observations of p responses plus d_cov covariates. An all-ones
// column in X encodes an intercept-only design.

struct Dataset {
  Matrix Y;  // n x p
  Matrix X;  // n x d_cov

  Index n() const { return Y.rows(); }
  Index p() const { return Y.cols(); }
  Index dcov() const { return X.cols(); }

  static Dataset validated(Matrix Y, Matrix X) {
    require(Y.rows() >= 1 && Y.cols() >= 1, "Dataset: Y must be non-empty");
    require(X.rows() == Y.rows(),
            "Dataset: X and Y must have the same number of rows");
    require(X.cols() >= 1, "Dataset: X needs at least one column");
    require(Y.allFinite() && X.allFinite(),
            "Dataset: non-finite entries in Y or X");
    return Dataset{std::move(Y), std::move(X)};
  }
};

// ---------------------------------------------------------------------------
// ClusterAssignment: a map from the p variables to q clusters. Labels are
// 0-based internally; the I/O layer converts from/to the 1-based convention.
// Clusters may be empty (consumers that cannot cope check for themselves).

class ClusterAssignment {
 public:
  ClusterAssignment(std::vector<int> labels, int q)
      : labels_(std::move(labels)), q_(q) {
    require(q_ >= 1, "ClusterAssignment: q must be >= 1");
    require(!labels_.empty(), "ClusterAssignment: empty label vector");
    for (int l : labels_)
      require(l >= 0 && l < q_,
              "ClusterAssignment: label out of range [0, q)");
  }

  int q() const { return q_; }
  int p() const { return static_cast<int>(labels_.size()); }
  int label(int j) const { return labels_[static_cast<std::size_t>(j)]; }
  const std::vector<int>& labels() const { return labels_; }

  std::vector<int> sizes() const {
    std::vector<int> s(static_cast<std::size_t>(q_), 0);
    for (int l : labels_) ++s[static_cast<std::size_t>(l)];
    return s;
  }

  // Relabel clusters: k -> perm[k]. perm must be a permutation of 0..q-1.
  ClusterAssignment relabeled(const std::vector<int>& perm) const {
    require(static_cast<int>(perm.size()) == q_,
            "relabeled: permutation size mismatch");
    std::vector<int> out(labels_.size());
    for (std::size_t j = 0; j < labels_.size(); ++j)
      out[j] = perm[static_cast<std::size_t>(labels_[j])];
    return ClusterAssignment(std::move(out), q_);
  }

  bool operator==(const ClusterAssignment& o) const {
    return q_ == o.q_ && labels_ == o.labels_;
  }

 private:
  std::vector<int> labels_;
  int q_;
};

// p x q indicator matrix: row j is the one-hot encoding of label(j).
inline Matrix one_hot(const ClusterAssignment& c) {
  Matrix C = Matrix::Zero(c.p(), c.q());
  for (int j = 0; j < c.p(); ++j) C(j, c.label(j)) = 1.0;
  return C;
}

// ---------------------------------------------------------------------------
// Noise model: per-variable variances d (diagonal) or one shared variance xi
// (spherical). d is always materialized at length p so consumers can scale
// by it uniformly.

enum class NoiseKind { diagonal, spherical };

struct Noise {
  NoiseKind kind = NoiseKind::diagonal;
  Vector d;          // length p, strictly positive
  double xi = 1.0;   // meaningful for spherical only

  static Noise diagonal(Vector d) {
    require(d.size() >= 1 && (d.array() > 0.0).all(),
            "Noise: diagonal variances must be positive");
    return Noise{NoiseKind::diagonal, std::move(d), 1.0};
  }

  static Noise spherical(double xi, Index p) {
    require(xi > 0.0, "Noise: spherical variance must be positive");
    return Noise{NoiseKind::spherical, Vector::Constant(p, xi), xi};
  }

  Vector inv() const { return d.cwiseInverse(); }
};

// ---------------------------------------------------------------------------
// ModelParams. sigma is the cached inverse of omega and is refreshed on every
// precision update; nothing outside these setters inverts omega.

struct ModelParams {
  Matrix B;      // d_cov x p regression coefficients
  Matrix omega;  // q x q precision of the latent block means (SPD)
  Matrix sigma;  // q x q cached inverse of omega
  Noise noise;
  Vector alpha;  // latent-cluster mixture weights (empty when clusters observed)
  Vector kappa;  // per-variable zero-inflation probabilities (empty when absent)

  Index q() const { return omega.rows(); }
  Index p() const { return noise.d.size(); }
  bool latent() const { return alpha.size() > 0; }
  bool zero_inflated() const { return kappa.size() > 0; }

  void set_precision(Matrix om) {
    sigma = invert_spd(om, "ModelParams::set_precision(omega)");
    omega = std::move(om);
  }

  // For callers (glasso) that already hold a matching inverse.
  void set_precision(Matrix om, Matrix sg) {
    require(om.rows() == sg.rows() && om.cols() == sg.cols(),
            "ModelParams::set_precision: omega/sigma shape mismatch");
    omega = std::move(om);
    sigma = std::move(sg);
  }

  void set_covariance(Matrix sg) {
    omega = invert_spd(sg, "ModelParams::set_covariance(sigma)");
    sigma = std::move(sg);
  }
};

// ---------------------------------------------------------------------------
// VariationalState for the latent-cluster model: Gaussian means/variances for
// the n latent rows and simplex-valued cluster responsibilities for the p
// variables.

struct VariationalState {
  Matrix M;    // n x q
  Matrix S;    // n x q, strictly positive variances
  Matrix tau;  // p x q, rows on the probability simplex
};

// ---------------------------------------------------------------------------
// NetworkEstimate: thresholded support of omega plus the partial correlations
// on that support. Off-support entries (and the diagonal) are exact zeros so
// support(k,l) <=> partial_corr(k,l) != 0 holds entrywise.

struct NetworkEstimate {
  BoolMatrix support;   // q x q symmetric, zero diagonal
  Matrix partial_corr;  // q x q symmetric, zero off-support and on diagonal
  double lambda = 0.0;  // penalty the estimate was produced under

  int edge_count() const {
    int e = 0;
    for (Index l = 1; l < support.cols(); ++l)
      for (Index k = 0; k < l; ++k) e += support(k, l) ? 1 : 0;
    return e;
  }
};

constexpr double kZeroTol = 1e-10;

// Full partial-correlation matrix of a precision matrix: unit diagonal,
// -omega_kl / sqrt(omega_kk * omega_ll) off it.
inline Matrix partial_correlations(const Matrix& omega) {
  require(omega.rows() == omega.cols(), "partial_correlations: square input");
  require((omega.diagonal().array() > 0.0).all(),
          "partial_correlations: non-positive diagonal");
  const Vector isd = omega.diagonal().cwiseSqrt().cwiseInverse();
  Matrix pc = -(isd.asDiagonal() * omega * isd.asDiagonal());
  pc.diagonal().setOnes();
  return pc;
}

inline NetworkEstimate extract_network(const Matrix& omega, double lambda,
                                       double zero_tol = kZeroTol) {
  const Index q = omega.rows();
  const Matrix pc = partial_correlations(omega);
  NetworkEstimate net;
  net.support = BoolMatrix::Constant(q, q, false);
  net.partial_corr = Matrix::Zero(q, q);
  net.lambda = lambda;
  for (Index l = 0; l < q; ++l)
    for (Index k = 0; k < q; ++k)
      if (k != l && std::abs(omega(k, l)) > zero_tol) {
        net.support(k, l) = true;
        net.partial_corr(k, l) = pc(k, l);
      }
  return net;
}

// ---------------------------------------------------------------------------
// Fit outputs shared by every fitter.

struct FitCriteria {
  double log_like_bound = 0.0;  // exact log-likelihood when nothing is latent
  double bic = 0.0;             // higher is better throughout
  double ebic = 0.0;
  double icl = 0.0;
  int n_params = 0;
};

struct FitResult {
  ModelParams params;
  std::optional<VariationalState> varstate;  // latent-cluster fits only
  ClusterAssignment clustering;
  std::vector<double> objective_trace;  // penalized objective, one per iteration
  FitCriteria criteria;
  NetworkEstimate network;
  bool converged = false;
  int iterations = 0;
};

}  // namespace nb
