#pragma once

// Parameter counting and information criteria shared by every fitter, plus
// the exact marginal log-likelihood of the observed-cluster model (the
// yardstick the criteria are computed from when nothing is latent).
// All criteria are stored in "higher is better" orientation.

#include <nb/types.hpp>

namespace nb {

struct ModelKind {
  bool latent = false;
  bool zero_inflated = false;
  NoiseKind noise = NoiseKind::diagonal;
};

inline ModelKind model_kind_of(const ModelParams& par) {
  return ModelKind{par.latent(), par.zero_inflated(), par.noise.kind};
}

// B entries + omega upper triangle with diagonal (only selected edges count)
// + noise terms + simplex-constrained alpha + kappa.
inline int count_parameters(const FitResult& fit, const ModelKind& kind) {
  const int q = static_cast<int>(fit.params.q());
  const int p = static_cast<int>(fit.params.p());
  const int dcov = static_cast<int>(fit.params.B.rows());
  int k = dcov * p;
  k += q + fit.network.edge_count();
  k += kind.noise == NoiseKind::diagonal ? p : 1;
  if (kind.latent) k += q - 1;
  if (kind.zero_inflated) k += p;
  return k;
}

inline int count_parameters(const FitResult& fit) {
  return count_parameters(fit, model_kind_of(fit.params));
}

// Shannon entropy of the responsibilities, with 0*log(0) := 0.
inline double tau_entropy(const Matrix& tau) {
  double h = 0.0;
  for (Index k = 0; k < tau.cols(); ++k)
    for (Index j = 0; j < tau.rows(); ++j) h -= xlogx(tau(j, k));
  return h;
}

// Fills fit.criteria given the unpenalized objective at convergence
// (exact log-likelihood when clusters are observed, ELBO otherwise).
inline void fill_criteria(FitResult& fit, Index n, double log_like_bound) {
  FitCriteria& c = fit.criteria;
  c.log_like_bound = log_like_bound;
  c.n_params = count_parameters(fit);
  c.bic = log_like_bound - 0.5 * c.n_params * std::log(static_cast<double>(n));
  const int q = static_cast<int>(fit.params.q());
  const int edges = fit.network.edge_count();
  c.ebic = c.bic;
  if (edges > 0)  // q >= 2 whenever an edge exists
    c.ebic -= 0.5 * edges * std::log(q * (q - 1) / 2.0);
  c.icl = c.bic - (fit.varstate ? tau_entropy(fit.varstate->tau) : 0.0);
}

inline FitCriteria criteria(const FitResult& fit, const Dataset& data) {
  FitResult tmp = fit;
  fill_criteria(tmp, data.n(), fit.criteria.log_like_bound);
  return tmp.criteria;
}

// The trace penalty matching the glasso M-step: maximizing
// loglik - 0.5*n*lambda*||omega||_1,off over omega at a fixed scatter is the
// glasso problem with per-sample penalty lambda.
inline double l1_trace_penalty(const Matrix& omega, double lambda, Index n) {
  return 0.5 * static_cast<double>(n) * lambda * offdiag_l1(omega);
}

// Exact marginal log-likelihood of the observed-cluster model:
// Y_i ~ N(B'X_i, V) with V = D + C sigma C'. Direct dense evaluation.
inline double observed_loglik(const ModelParams& par,
                              const ClusterAssignment& clustering,
                              const Dataset& data) {
  const Index n = data.n(), p = data.p();
  require(clustering.p() == p, "observed_loglik: clustering size mismatch");
  const Matrix C = one_hot(clustering);
  Matrix V = C * par.sigma * C.transpose();
  V.diagonal() += par.noise.d;
  Eigen::LLT<Matrix> llt = llt_spd(V, "observed_loglik: D + C sigma C'");
  const Matrix R = data.Y - data.X * par.B;
  // quad = sum_i r_i' V^-1 r_i via the Cholesky factor.
  const Matrix half = llt.matrixL().solve(R.transpose());
  const double quad = half.squaredNorm();
  return -0.5 * static_cast<double>(n * p) * kLog2Pi -
         0.5 * static_cast<double>(n) * logdet_from_llt(llt) - 0.5 * quad;
}

}  // namespace nb
