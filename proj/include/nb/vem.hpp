#pragma once

// Variational EM for the latent-cluster model. The posterior over the n
// latent rows is approximated by independent diagonal Gaussians (M, S) and
// the posterior over the p cluster memberships by independent categoricals
// (tau). Every update is an exact coordinate maximizer of the ELBO, so the
// recorded (penalized) ELBO trace is non-decreasing; the variational
// variance is the reciprocal of the posterior-precision diagonal, which is
// the stationary point of the ELBO for this family (and what the
// zero-inflated variant reduces to at kappa = 0).

#include <nb/em_observed.hpp>

#include <cmath>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

namespace nb {

namespace detail {

// A_ij = E[(R_ij - W_i . C_j)^2] under the variational posterior.
inline Matrix expected_sq_residual(const Matrix& R, const Matrix& M,
                                   const Matrix& S, const Matrix& tau) {
  return (R.array().square() - 2.0 * R.array() * (M * tau.transpose()).array() +
          ((M.array().square() + S.array()).matrix() * tau.transpose()).array())
      .matrix();
}

inline void check_varstate(const ModelParams& par, const VariationalState& vs,
                           const Dataset& data, const char* where) {
  require(par.latent(), std::string(where) + ": params.alpha must be set");
  require(vs.M.rows() == data.n() && vs.M.cols() == par.q() &&
              vs.S.rows() == data.n() && vs.S.cols() == par.q() &&
              vs.tau.rows() == data.p() && vs.tau.cols() == par.q(),
          std::string(where) + ": variational state shape mismatch");
}

// The Gaussian half of the VE update at a fixed tau.
inline void update_gaussian_block(const ModelParams& par, const Matrix& R,
                                  const Matrix& tau, Matrix& M, Matrix& S) {
  const Vector dinv = par.noise.inv();
  const Vector t = tau.transpose() * dinv;  // per-cluster precision load
  Matrix prec = par.omega;
  prec.diagonal() += t;
  const Matrix gamma = invert_spd(prec, "ve_step: posterior precision");
  M = (R * dinv.asDiagonal()) * tau * gamma;
  const Index n = R.rows();
  S.resize(n, par.q());
  for (Index k = 0; k < par.q(); ++k)
    S.col(k).setConstant(1.0 / (par.omega(k, k) + t(k)));
}

}  // namespace detail

inline double elbo(const ModelParams& par, const VariationalState& vs,
                   const Dataset& data) {
  detail::check_varstate(par, vs, data, "elbo");
  const Index n = data.n(), p = data.p(), q = par.q();
  const Vector dinv = par.noise.inv();
  const Matrix R = data.Y - data.X * par.B;
  const Matrix A = detail::expected_sq_residual(R, vs.M, vs.S, vs.tau);

  double val = -0.5 * static_cast<double>(n * p) * kLog2Pi -
               0.5 * static_cast<double>(n) * par.noise.d.array().log().sum() -
               0.5 * (A * dinv).sum();

  const Vector cs = vs.S.colwise().sum().transpose();
  val += 0.5 * static_cast<double>(n) * logdet_spd(par.omega, "elbo: omega");
  val -= 0.5 * ((par.omega.cwiseProduct(vs.M.transpose() * vs.M)).sum() +
                par.omega.diagonal().dot(cs));

  // Gaussian entropy net of the prior's 2*pi constant, plus log S.
  val += 0.5 * static_cast<double>(n * q) +
         0.5 * vs.S.array().log().sum();

  for (Index k = 0; k < q; ++k) {
    const double la = std::log(par.alpha(k));
    for (Index j = 0; j < p; ++j) {
      const double t = vs.tau(j, k);
      if (t > 0.0) val += t * la;  // masked: 0 * log(alpha) contributes 0
      val -= xlogx(t);
    }
  }
  return val;
}

// tau first (softmax of eta), then the Gaussian block at the fresh tau.
inline VariationalState ve_step(const ModelParams& par,
                                const VariationalState& vs,
                                const Dataset& data) {
  detail::check_varstate(par, vs, data, "ve_step");
  const Index p = data.p(), q = par.q();
  const Vector dinv = par.noise.inv();
  const Matrix R = data.Y - data.X * par.B;

  VariationalState out;
  // eta_jk = -d_j^-1 [ colsq_k / 2 - (R'M)_jk ] + log alpha_k
  const Vector colsq =
      (vs.M.array().square() + vs.S.array()).matrix().colwise().sum().transpose();
  const Matrix rtm = R.transpose() * vs.M;  // p x q
  out.tau.resize(p, q);
  for (Index j = 0; j < p; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index k = 0; k < q; ++k) {
      const double eta = dinv(j) * (rtm(j, k) - 0.5 * colsq(k)) +
                         std::log(par.alpha(k));
      out.tau(j, k) = eta;
      mx = std::max(mx, eta);
    }
    double z = 0.0;
    for (Index k = 0; k < q; ++k) {
      out.tau(j, k) = std::exp(out.tau(j, k) - mx);
      z += out.tau(j, k);
    }
    out.tau.row(j) /= z;
  }

  detail::update_gaussian_block(par, R, out.tau, out.M, out.S);
  return out;
}

namespace detail {

inline ModelParams vem_m_step_impl(const VariationalState& vs,
                                   const Dataset& data, NoiseKind kind,
                                   double lambda, const GlassoConfig& gcfg,
                                   MStepScratch& scratch,
                                   const ModelParams* prev,
                                   bool* glasso_converged) {
  const Index n = data.n(), p = data.p(), q = vs.tau.cols();

  ModelParams par;
  par.B = scratch.xqr.solve(data.Y - vs.M * vs.tau.transpose());

  const Matrix R = data.Y - data.X * par.B;
  const Matrix A = expected_sq_residual(R, vs.M, vs.S, vs.tau);
  if (kind == NoiseKind::diagonal)
    par.noise =
        Noise::diagonal(A.colwise().sum().transpose() / static_cast<double>(n));
  else
    par.noise = Noise::spherical(A.sum() / static_cast<double>(n * p), p);

  Matrix sigma_hat = vs.M.transpose() * vs.M;
  sigma_hat.diagonal() += vs.S.colwise().sum().transpose();
  sigma_hat /= static_cast<double>(n);
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
    if (prev && prev->latent() &&
        omega_block_objective(gl.omega, sigma_hat, lambda) <
            omega_block_objective(prev->omega, sigma_hat, lambda)) {
      par.set_precision(prev->omega, prev->sigma);
    } else {
      par.set_precision(gl.omega, gl.sigma_hat);
      scratch.warm = std::move(gl);
    }
  } else {
    par.set_covariance(sigma_hat);
  }

  // alpha: column means of tau, floored so log(alpha) stays finite.
  Vector alpha = vs.tau.colwise().sum().transpose() / static_cast<double>(p);
  alpha = alpha.cwiseMax(1e-12);
  par.alpha = alpha / alpha.sum();
  return par;
}

}  // namespace detail

inline ModelParams vem_m_step(const VariationalState& vs, const Dataset& data,
                              double lambda,
                              NoiseKind kind = NoiseKind::diagonal,
                              const GlassoConfig& gcfg = {},
                              const ModelParams* prev = nullptr) {
  detail::MStepScratch scratch{Eigen::ColPivHouseholderQR<Matrix>(data.X), {}};
  if (scratch.xqr.rank() < data.dcov())
    throw SingularInput("vem_m_step: design matrix is rank deficient");
  return detail::vem_m_step_impl(vs, data, kind, lambda, gcfg, scratch, prev,
                                 nullptr);
}

// Row-argmax of tau with ties broken toward the lowest cluster index.
inline ClusterAssignment hard_assignment(const Matrix& tau) {
  std::vector<int> labels(static_cast<std::size_t>(tau.rows()));
  for (Index j = 0; j < tau.rows(); ++j) {
    int best = 0;
    for (Index k = 1; k < tau.cols(); ++k)
      if (tau(j, k) > tau(j, best)) best = static_cast<int>(k);
    labels[static_cast<std::size_t>(j)] = best;
  }
  return ClusterAssignment(std::move(labels), static_cast<int>(tau.cols()));
}

struct VemInit {
  std::optional<ClusterAssignment> clustering;
  std::optional<ModelParams> params;
};

inline FitResult fit_vem(const Dataset& data, int q, double lambda,
                         VemInit init = {}, const FitOptions& opts = {},
                         NoiseKind kind = NoiseKind::diagonal) {
  require(q >= 1 && q <= data.p(), "fit_vem: q must be in [1, p]");
  require(opts.max_iter >= 1, "fit_vem: max_iter must be >= 1");
  require(lambda >= 0.0, "fit_vem: lambda must be non-negative");
  require(opts.restarts >= 1, "fit_vem: restarts must be >= 1");

  // Cold starts only: rerun from distinct kmeans seeds, keep the best bound.
  if (opts.restarts > 1 && !init.clustering) {
    std::optional<FitResult> best;
    for (int t = 0; t < opts.restarts; ++t) {
      FitOptions single = opts;
      single.restarts = 1;
      if (t > 0)
        single.seed =
            derive_seed(opts.seed, 0x5e5d0000u + static_cast<std::uint64_t>(t));
      FitResult cand = fit_vem(data, q, lambda, init, single, kind);
      if (!best || cand.objective_trace.back() > best->objective_trace.back())
        best = std::move(cand);
    }
    return *std::move(best);
  }

  ClusterAssignment clustering0 =
      init.clustering
          ? *std::move(init.clustering)
          : kmeans_columns(mlr_fit(data).residuals, q, opts.seed);
  require(clustering0.q() == q && clustering0.p() == data.p(),
          "fit_vem: init clustering shape mismatch");

  ModelParams par = init.params
                        ? *std::move(init.params)
                        : detail::two_step_init(data, clustering0, kind);
  require(par.q() == q && par.p() == data.p(),
          "fit_vem: init params shape mismatch");
  if (!par.latent()) {
    Vector alpha = Vector::Zero(q);
    for (int j = 0; j < clustering0.p(); ++j) alpha(clustering0.label(j)) += 1.0;
    alpha = (alpha / static_cast<double>(data.p())).cwiseMax(1e-12);
    par.alpha = alpha / alpha.sum();
  }

  detail::MStepScratch scratch{Eigen::ColPivHouseholderQR<Matrix>(data.X), {}};
  if (scratch.xqr.rank() < data.dcov())
    throw SingularInput("fit_vem: design matrix is rank deficient");

  VariationalState vs;
  vs.tau = one_hot(clustering0);
  detail::update_gaussian_block(par, data.Y - data.X * par.B, vs.tau, vs.M,
                                vs.S);

  std::vector<double> trace;
  trace.reserve(64);
  bool converged = false, glasso_ok = true;
  double bound = 0.0, prev_obj = 0.0;

  for (int it = 0; it < opts.max_iter; ++it) {
    bound = elbo(par, vs, data);
    const double obj = bound - l1_trace_penalty(par.omega, lambda, data.n());
    trace.push_back(obj);
    if (it > 0 && std::abs(obj - prev_obj) <= opts.tol * (1.0 + std::abs(obj))) {
      converged = true;
      break;
    }
    prev_obj = obj;

    vs = ve_step(par, vs, data);
    bool ok = true;
    par = detail::vem_m_step_impl(vs, data, kind, lambda, opts.glasso, scratch,
                                  &par, &ok);
    glasso_ok = glasso_ok && ok;
  }

  if (!converged) {
    bound = elbo(par, vs, data);
    trace.push_back(bound - l1_trace_penalty(par.omega, lambda, data.n()));
  }

  const int iterations = static_cast<int>(trace.size()) - (converged ? 0 : 1);
  FitResult fit{std::move(par),
                std::nullopt,
                hard_assignment(vs.tau),
                std::move(trace),
                {},
                {},
                converged && glasso_ok,
                iterations};
  fit.varstate = std::move(vs);
  fit.network = extract_network(fit.params.omega, lambda);
  fill_criteria(fit, data.n(), bound);
  return fit;
}

}  // namespace nb
