#pragma once

// EM for the block model with observed clusters. The E-step is closed form
// (the latent block means are jointly Gaussian with the data); the M-step is
// closed form except the precision, which is a graphical-lasso subproblem.
//
// The objective trace records the penalized marginal log-likelihood
// log p(Y | C, theta) - (n/2) lambda ||Omega||_1,off, evaluated via the
// identity loglik = J + entropy(Gamma) that holds right after an E-step.
// Every block update maximizes that objective exactly (the precision via a
// keep-best safeguard around glasso), so the trace is non-decreasing.

#include <nb/criteria.hpp>
#include <nb/glasso.hpp>
#include <nb/two_step.hpp>
#include <nb/types.hpp>

#include <optional>
#include <utility>
#include <vector>

namespace nb {

struct PosteriorMoments {
  Matrix mu;     // n x q posterior means of the latent rows
  Matrix gamma;  // q x q posterior covariance (shared across rows)
};

// Gamma = (C' D^-1 C + Omega)^-1 with C' D^-1 C diagonal (one-hot C);
// mu = (Y - XB) D^-1 C Gamma.
inline PosteriorMoments e_step(const ModelParams& par,
                               const ClusterAssignment& clustering,
                               const Dataset& data) {
  const Index q = par.q();
  require(clustering.q() == q && clustering.p() == data.p(),
          "e_step: clustering/params shape mismatch");
  const Vector dinv = par.noise.inv();

  Matrix prec = par.omega;
  for (int j = 0; j < clustering.p(); ++j)
    prec(clustering.label(j), clustering.label(j)) += dinv(j);

  PosteriorMoments mom;
  mom.gamma = invert_spd(prec, "e_step: posterior precision");
  symmetrize(mom.gamma);

  const Matrix R = data.Y - data.X * par.B;
  Matrix scaled_sums(data.n(), q);  // (R D^-1 C): per-cluster weighted sums
  scaled_sums.setZero();
  for (int j = 0; j < clustering.p(); ++j)
    scaled_sums.col(clustering.label(j)) += dinv(j) * R.col(j);
  mom.mu = scaled_sums * mom.gamma;
  return mom;
}

// The complete-data objective J(theta) at the given moments.
inline double em_objective(const ModelParams& par,
                           const ClusterAssignment& clustering,
                           const Dataset& data, const PosteriorMoments& mom) {
  const Index n = data.n(), p = data.p(), q = par.q();
  const Vector dinv = par.noise.inv();
  const Matrix C = one_hot(clustering);
  const Matrix Rmu = data.Y - data.X * par.B - mom.mu * C.transpose();

  double obs = -0.5 * static_cast<double>(n * p) * kLog2Pi -
               0.5 * static_cast<double>(n) *
                   par.noise.d.array().log().sum();
  double quad = 0.0;
  for (Index j = 0; j < p; ++j) {
    const int c = clustering.label(static_cast<int>(j));
    quad += dinv(j) * (Rmu.col(j).squaredNorm() +
                       static_cast<double>(n) * mom.gamma(c, c));
  }
  obs -= 0.5 * quad;

  double lat = -0.5 * static_cast<double>(n * q) * kLog2Pi +
               0.5 * static_cast<double>(n) *
                   logdet_spd(par.omega, "em_objective: omega");
  const Matrix scatter =
      static_cast<double>(n) * mom.gamma + mom.mu.transpose() * mom.mu;
  lat -= 0.5 * (par.omega.cwiseProduct(scatter)).sum();
  return obs + lat;
}

// Entropy of the Gaussian posterior of the n latent rows.
inline double posterior_entropy(const PosteriorMoments& mom, Index n) {
  const Index q = mom.gamma.rows();
  return 0.5 * static_cast<double>(n) *
         (static_cast<double>(q) * (kLog2Pi + 1.0) +
          logdet_spd(mom.gamma, "posterior_entropy"));
}

namespace detail {

struct MStepScratch {
  Eigen::ColPivHouseholderQR<Matrix> xqr;  // factorized design
  std::optional<GlassoResult> warm;        // previous glasso solution
};

// Block objective of the precision subproblem (up to the constant n/2):
// logdet(omega) - tr(omega sigma_hat) - lambda ||omega||_1,off.
inline double omega_block_objective(const Matrix& omega, const Matrix& sigma,
                                    double lambda) {
  return logdet_spd(omega, "omega_block_objective") -
         omega.cwiseProduct(sigma).sum() - lambda * offdiag_l1(omega);
}

inline ModelParams m_step_impl(const PosteriorMoments& mom,
                               const ClusterAssignment& clustering,
                               const Dataset& data, NoiseKind kind,
                               double lambda, const GlassoConfig& gcfg,
                               MStepScratch& scratch, const ModelParams* prev,
                               bool* glasso_converged) {
  const Index n = data.n(), p = data.p(), q = mom.gamma.rows();
  const Matrix C = one_hot(clustering);

  ModelParams par;
  par.B = scratch.xqr.solve(data.Y - mom.mu * C.transpose());

  const Matrix Rmu = data.Y - data.X * par.B - mom.mu * C.transpose();
  if (kind == NoiseKind::diagonal) {
    Vector d(p);
    for (Index j = 0; j < p; ++j) {
      const int c = clustering.label(static_cast<int>(j));
      d(j) = Rmu.col(j).squaredNorm() / static_cast<double>(n) + mom.gamma(c, c);
    }
    par.noise = Noise::diagonal(std::move(d));
  } else {
    double xi = Rmu.squaredNorm() / static_cast<double>(n * p);
    for (Index j = 0; j < p; ++j)
      xi += mom.gamma(clustering.label(static_cast<int>(j)),
                      clustering.label(static_cast<int>(j))) /
            static_cast<double>(p);
    par.noise = Noise::spherical(xi, p);
  }

  Matrix sigma_hat =
      mom.mu.transpose() * mom.mu / static_cast<double>(n) + mom.gamma;
  symmetrize(sigma_hat);

  if (glasso_converged) *glasso_converged = true;
  if (lambda > 0.0) {
    GlassoResult gl;
    try {
      gl = glasso(sigma_hat, lambda, gcfg,
                  scratch.warm ? &*scratch.warm : nullptr);
    } catch (const GlassoNonConvergence& e) {
      gl = e.last;
      if (glasso_converged) *glasso_converged = false;
    }
    // Keep-best: never let solver slack move the precision block downhill.
    if (prev && omega_block_objective(gl.omega, sigma_hat, lambda) <
                    omega_block_objective(prev->omega, sigma_hat, lambda)) {
      par.set_precision(prev->omega, prev->sigma);
    } else {
      par.set_precision(gl.omega, gl.sigma_hat);
      scratch.warm = std::move(gl);
    }
  } else {
    par.set_covariance(sigma_hat);
    (void)q;
  }
  return par;
}

inline ModelParams two_step_init(const Dataset& data,
                                 const ClusterAssignment& clustering,
                                 NoiseKind kind) {
  MlrFit mlr = mlr_fit(data);
  const Matrix gamma_hat =
      mlr.residuals.transpose() * mlr.residuals / static_cast<double>(data.n());
  const Matrix sigma_tilde = aggregate_covariance(gamma_hat, clustering);

  ModelParams par;
  par.B = std::move(mlr.B);
  Matrix ridge = sigma_tilde;
  ridge.diagonal().array() += 1e-3;
  par.set_precision(invert_spd(ridge, "two_step_init"));
  Vector d(data.p());
  for (Index j = 0; j < data.p(); ++j) {
    const int c = clustering.label(static_cast<int>(j));
    // Relative floor: a near-zero start collapses the first posterior onto
    // single variables and strands EM in an inflated-noise stationary point.
    d(j) = std::max({gamma_hat(j, j) - sigma_tilde(c, c),
                     0.05 * gamma_hat(j, j), 1e-6});
  }
  if (kind == NoiseKind::diagonal)
    par.noise = Noise::diagonal(std::move(d));
  else
    par.noise = Noise::spherical(d.mean(), data.p());
  return par;
}

}  // namespace detail

// Standalone M-step matching the update order B -> d/xi -> sigma -> omega.
inline ModelParams m_step(const PosteriorMoments& mom,
                          const ClusterAssignment& clustering,
                          const Dataset& data, NoiseKind kind, double lambda,
                          const GlassoConfig& gcfg = {},
                          const ModelParams* prev = nullptr) {
  detail::MStepScratch scratch{Eigen::ColPivHouseholderQR<Matrix>(data.X), {}};
  if (scratch.xqr.rank() < data.dcov())
    throw SingularInput("m_step: design matrix is rank deficient");
  return detail::m_step_impl(mom, clustering, data, kind, lambda, gcfg,
                             scratch, prev, nullptr);
}

struct FitOptions {
  double tol = 1e-6;   // relative change of the penalized objective
  int max_iter = 500;
  GlassoConfig glasso;
  std::uint64_t seed = 0;  // used only when a fit must build its own init
  int restarts = 1;  // latent cold starts: keep the best final objective
};

inline FitResult fit_em_observed(const Dataset& data,
                                 const ClusterAssignment& clustering,
                                 NoiseKind kind, double lambda,
                                 std::optional<ModelParams> init = {},
                                 const FitOptions& opts = {}) {
  require(clustering.p() == data.p(),
          "fit_em_observed: clustering size mismatch");
  require(opts.max_iter >= 1, "fit_em_observed: max_iter must be >= 1");
  require(lambda >= 0.0, "fit_em_observed: lambda must be non-negative");

  ModelParams par =
      init ? std::move(*init) : detail::two_step_init(data, clustering, kind);
  require(par.q() == clustering.q() && par.p() == data.p(),
          "fit_em_observed: init shape mismatch");

  detail::MStepScratch scratch{Eigen::ColPivHouseholderQR<Matrix>(data.X), {}};
  if (scratch.xqr.rank() < data.dcov())
    throw SingularInput("fit_em_observed: design matrix is rank deficient");

  std::vector<double> trace;
  trace.reserve(64);
  bool converged = false, glasso_ok = true;
  double loglik = 0.0, prev_obj = 0.0;

  for (int it = 0; it < opts.max_iter; ++it) {
    const PosteriorMoments mom = e_step(par, clustering, data);
    loglik = em_objective(par, clustering, data, mom) +
             posterior_entropy(mom, data.n());
    const double obj = loglik - l1_trace_penalty(par.omega, lambda, data.n());
    trace.push_back(obj);
    if (it > 0 && std::abs(obj - prev_obj) <= opts.tol * (1.0 + std::abs(obj))) {
      converged = true;
      break;
    }
    prev_obj = obj;

    bool ok = true;
    par = detail::m_step_impl(mom, clustering, data, kind, lambda, opts.glasso,
                              scratch, &par, &ok);
    glasso_ok = glasso_ok && ok;
  }

  if (!converged) {
    // Evaluate the final parameters so trace/criteria describe what we return.
    const PosteriorMoments mom = e_step(par, clustering, data);
    loglik = em_objective(par, clustering, data, mom) +
             posterior_entropy(mom, data.n());
    trace.push_back(loglik - l1_trace_penalty(par.omega, lambda, data.n()));
  }

  const int iterations = static_cast<int>(trace.size()) - (converged ? 0 : 1);
  FitResult fit{std::move(par),
                std::nullopt,
                clustering,
                std::move(trace),
                {},
                {},
                converged && glasso_ok,
                iterations};
  fit.network = extract_network(fit.params.omega, lambda);
  fill_criteria(fit, data.n(), loglik);
  return fit;
}

}  // namespace nb
