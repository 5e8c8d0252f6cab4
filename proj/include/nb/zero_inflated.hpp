#pragma once

// Zero-inflated variants. A Bernoulli(kappa_j) layer masks entries of Y to
// exact zero; since the Gaussian component is continuous, the posterior of
// the mask is the indicator of observed zeros, so the E-step conditions the
// latent rows on the nonzero coordinates only. That makes the posterior
// covariance row-specific (one q x q inverse per row). The Dirac log-density
// of an observed zero is the log of a point mass at its own atom and enters
// every criterion as the constant 0; criteria are therefore only comparable
// at a fixed zero pattern.
//
// B (and M in the latent variant) have no global closed form under masking,
// so they are updated by backtracking gradient ascent. Each column (row) of
// the relevant objective is an exactly solvable weighted least-squares
// problem, and those solutions seed the ascent, which then terminates at the
// gradient tolerance immediately; the ascent machinery remains as the
// general-purpose fallback (rank-deficient masked designs, user inits).

#include <nb/vem.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace nb {

struct ZiMasks {
  BoolMatrix mask;               // 1_Y: true where Y_ij != 0
  Matrix ones;                   // same mask as 0/1 doubles
  Eigen::VectorXi nonzero_counts;  // n_Y, per column
  long long total_nonzeros = 0;    // np_Y

  Index n() const { return mask.rows(); }
  Index p() const { return mask.cols(); }
  int zeros(Index j) const {
    return static_cast<int>(n()) - nonzero_counts(j);
  }

  static ZiMasks from(const Matrix& Y) {
    require(Y.size() > 0, "ZiMasks: empty matrix");
    ZiMasks m;
    m.mask = (Y.array() != 0.0).matrix();
    m.ones = m.mask.cast<double>();
    m.nonzero_counts = m.ones.colwise().sum().cast<int>().transpose();
    m.total_nonzeros = static_cast<long long>(m.nonzero_counts.sum());
    for (Index i = 0; i < Y.rows(); ++i)
      if (!m.mask.row(i).any())
        throw DegenerateRow("zero-inflated model: row " + std::to_string(i + 1) +
                            " has no nonzero entries");
    for (Index j = 0; j < Y.cols(); ++j)
      if (m.nonzero_counts(j) == 0)
        throw InvalidArgument("zero-inflated model: column " +
                              std::to_string(j + 1) + " is entirely zero");
    return m;
  }
};

// log p(mask | kappa); -inf when kappa gives an observed pattern zero mass.
inline double bernoulli_loglik(const Vector& kappa, const ZiMasks& masks) {
  require(kappa.size() == masks.p(), "bernoulli_loglik: kappa size mismatch");
  double s = 0.0;
  for (Index j = 0; j < masks.p(); ++j) {
    const int z = masks.zeros(j), nz = masks.nonzero_counts(j);
    if (z > 0) s += z * std::log(kappa(j));
    if (nz > 0) s += nz * std::log1p(-kappa(j));
  }
  return s;
}

namespace detail {

// Backtracking (Armijo) gradient ascent with a Barzilai-Borwein step guess,
// stopped at gradient max-norm <= grad_tol or after max_steps steps.
// Returns whether the tolerance was met.
template <typename Value, typename Grad>
bool gradient_ascent(Matrix& x, Value f, Grad grad, double grad_tol = 1e-6,
                     int max_steps = 200) {
  Matrix g = grad(x);
  if (g.cwiseAbs().maxCoeff() <= grad_tol) return true;
  double fx = f(x);
  double step = 1.0;
  for (int it = 0; it < max_steps; ++it) {
    const double gnorm2 = g.squaredNorm();
    Matrix xn;
    double fn = 0.0;
    for (int halvings = 0;; ++halvings) {
      xn = x + step * g;
      fn = f(xn);
      if (fn >= fx + 1e-4 * step * gnorm2) break;
      if (halvings >= 60) return false;  // ascent direction made no progress
      step *= 0.5;
    }
    Matrix gn = grad(xn);
    const double sy = -((xn - x).cwiseProduct(gn - g)).sum();
    const double ss = (xn - x).squaredNorm();
    step = sy > 1e-300 ? std::min(std::max(ss / sy, 1e-12), 1e12) : 1.0;
    x = std::move(xn);
    fx = fn;
    g = std::move(gn);
    if (g.cwiseAbs().maxCoeff() <= grad_tol) return true;
  }
  return false;
}

// Column-wise least squares restricted to the rows where the mask is set.
// Columns with a rank-deficient masked design fall back to the matching
// column of `fallback`, or raise when there is nothing to fall back to.
inline Matrix masked_column_ols(const Dataset& data, const Matrix& target,
                                const ZiMasks& masks,
                                const Eigen::ColPivHouseholderQR<Matrix>& full_qr,
                                const Matrix* fallback) {
  const Index n = data.n(), p = data.p(), dcov = data.dcov();
  Matrix B(dcov, p);
  for (Index j = 0; j < p; ++j) {
    const int nj = masks.nonzero_counts(j);
    if (nj == n) {
      B.col(j) = full_qr.solve(target.col(j));
      continue;
    }
    Matrix Xj(nj, dcov);
    Vector yj(nj);
    Index r = 0;
    for (Index i = 0; i < n; ++i)
      if (masks.mask(i, j)) {
        Xj.row(r) = data.X.row(i);
        yj(r) = target(i, j);
        ++r;
      }
    Eigen::ColPivHouseholderQR<Matrix> qr(Xj);
    if (qr.rank() < dcov) {
      if (!fallback)
        throw SingularInput("masked least squares: column " +
                            std::to_string(j + 1) +
                            " has a rank-deficient masked design");
      B.col(j) = fallback->col(j);
    } else {
      B.col(j) = qr.solve(yj);
    }
  }
  return B;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Observed clusters
// ---------------------------------------------------------------------------

struct ZiPosterior {
  Matrix mu;                  // n x q posterior means
  std::vector<Matrix> gamma;  // per-row q x q posterior covariances
};

// Gamma^(i) = (Omega + C'*D^-1*C restricted to nonzero coords)^-1 and the
// matching mean, row by row.
inline ZiPosterior zi_e_step_observed(const ModelParams& par,
                                      const ClusterAssignment& clustering,
                                      const Dataset& data,
                                      const ZiMasks& masks) {
  const Index n = data.n(), q = par.q();
  require(clustering.q() == q && clustering.p() == data.p(),
          "zi_e_step_observed: clustering/params shape mismatch");
  require(masks.n() == n && masks.p() == data.p(),
          "zi_e_step_observed: mask shape mismatch");
  if (par.zero_inflated())
    require(par.kappa.maxCoeff() < 1.0,
            "zi_e_step_observed: kappa entries must be < 1");
  const Vector dinv = par.noise.inv();
  const Matrix R = data.Y - data.X * par.B;

  ZiPosterior post;
  post.mu.resize(n, q);
  post.gamma.reserve(static_cast<std::size_t>(n));
  Matrix prec(q, q);
  Vector b(q);
  for (Index i = 0; i < n; ++i) {
    prec = par.omega;
    b.setZero();
    for (int j = 0; j < clustering.p(); ++j) {
      if (!masks.mask(i, j)) continue;
      const int c = clustering.label(j);
      prec(c, c) += dinv(j);
      b(c) += dinv(j) * R(i, j);
    }
    Matrix gamma = invert_spd(prec, "zi_e_step_observed: posterior precision");
    symmetrize(gamma);
    post.mu.row(i) = (gamma * b).transpose();
    post.gamma.push_back(std::move(gamma));
  }
  return post;
}

// The ZI complete-data objective J at the given moments (Dirac terms are the
// constant 0 by convention).
inline double zi_em_objective(const ModelParams& par,
                              const ClusterAssignment& clustering,
                              const Dataset& data, const ZiMasks& masks,
                              const ZiPosterior& post) {
  const Index n = data.n(), q = par.q();
  require(par.zero_inflated(), "zi_em_objective: params.kappa must be set");
  const Vector dinv = par.noise.inv();
  const Matrix C = one_hot(clustering);
  const Matrix Rmu = data.Y - data.X * par.B - post.mu * C.transpose();

  double val = -0.5 * (static_cast<double>(masks.total_nonzeros) +
                       static_cast<double>(n * q)) *
               kLog2Pi;
  Matrix gamma_rowsum = Matrix::Zero(q, q);
  for (const Matrix& g : post.gamma) gamma_rowsum += g;

  double quad = 0.0;
  for (Index j = 0; j < data.p(); ++j) {
    const int c = clustering.label(static_cast<int>(j));
    double col = 0.0;
    for (Index i = 0; i < n; ++i)
      if (masks.mask(i, j))
        col += Rmu(i, j) * Rmu(i, j) + post.gamma[static_cast<std::size_t>(i)](c, c);
    quad += dinv(j) * col;
    val -= 0.5 * masks.nonzero_counts(j) * std::log(par.noise.d(j));
  }
  val -= 0.5 * quad;

  val += 0.5 * static_cast<double>(n) *
         logdet_spd(par.omega, "zi_em_objective: omega");
  val -= 0.5 * ((post.mu * par.omega).cwiseProduct(post.mu).sum() +
                par.omega.cwiseProduct(gamma_rowsum).sum());
  return val + bernoulli_loglik(par.kappa, masks);
}

// Entropy of the exact posterior: Gaussian per row; the mask posterior is a
// point mass and contributes 0.
inline double zi_posterior_entropy(const ZiPosterior& post) {
  const Index n = static_cast<Index>(post.gamma.size());
  const Index q = post.mu.cols();
  double h = 0.5 * static_cast<double>(n * q) * (kLog2Pi + 1.0);
  for (const Matrix& g : post.gamma)
    h += 0.5 * logdet_spd(g, "zi_posterior_entropy");
  return h;
}

// Exact marginal log-likelihood of the ZI observed-cluster model, via the
// EM identity loglik = J + entropy at a fresh E-step.
inline double zi_observed_loglik(const ModelParams& par,
                                 const ClusterAssignment& clustering,
                                 const Dataset& data, const ZiMasks& masks) {
  const ZiPosterior post = zi_e_step_observed(par, clustering, data, masks);
  return zi_em_objective(par, clustering, data, masks, post) +
         zi_posterior_entropy(post);
}

namespace detail {

inline ModelParams zi_m_step_impl(const ZiPosterior& post, const ZiMasks& masks,
                                  const ClusterAssignment& clustering,
                                  const Dataset& data, double lambda,
                                  const GlassoConfig& gcfg,
                                  MStepScratch& scratch,
                                  const ModelParams* prev, bool* glasso_converged,
                                  bool* ascent_converged) {
  const Index n = data.n(), p = data.p();
  const Matrix C = one_hot(clustering);
  const Matrix target = data.Y - post.mu * C.transpose();

  ModelParams par;
  // B: the masked per-column least-squares solution is the exact maximizer
  // of F(B) = -tr(D^-1 1_Y' R_mu^2)/2 (the weights decouple per column), so
  // the ascent below normally stops at its first gradient check.
  par.B = masked_column_ols(data, target, masks, scratch.xqr,
                            prev ? &prev->B : nullptr);
  const Vector w = prev ? prev->noise.inv() : Vector::Ones(p);
  auto value = [&](const Matrix& B) {
    const Matrix Rmu = (target - data.X * B).cwiseProduct(masks.ones);
    return -0.5 * (Rmu.array().square().matrix() * w).sum();
  };
  auto grad = [&](const Matrix& B) -> Matrix {
    const Matrix Rmu = (target - data.X * B).cwiseProduct(masks.ones);
    return data.X.transpose() * (Rmu * w.asDiagonal());
  };
  const bool ascent_ok = gradient_ascent(par.B, value, grad);
  if (ascent_converged) *ascent_converged = ascent_ok;

  const Matrix Rmu = target - data.X * par.B;
  Vector d(p);
  for (Index j = 0; j < p; ++j) {
    const int c = clustering.label(static_cast<int>(j));
    double s = 0.0;
    for (Index i = 0; i < n; ++i)
      if (masks.mask(i, j))
        s += Rmu(i, j) * Rmu(i, j) + post.gamma[static_cast<std::size_t>(i)](c, c);
    d(j) = s / masks.nonzero_counts(j);
  }
  par.noise = Noise::diagonal(std::move(d));

  Matrix sigma_hat = post.mu.transpose() * post.mu;
  for (const Matrix& g : post.gamma) sigma_hat += g;
  sigma_hat /= static_cast<double>(n);
  symmetrize(sigma_hat);

  if (glasso_converged) *glasso_converged = true;
  if (lambda > 0.0) {
    GlassoResult gl;
    try {
      gl = glasso(sigma_hat, lambda, gcfg, scratch.warm ? &*scratch.warm : nullptr);
    } catch (const GlassoNonConvergence& e) {
      gl = e.last;
      if (glasso_converged) *glasso_converged = false;
    }
    if (prev && omega_block_objective(gl.omega, sigma_hat, lambda) <
                    omega_block_objective(prev->omega, sigma_hat, lambda)) {
      par.set_precision(prev->omega, prev->sigma);
    } else {
      par.set_precision(gl.omega, gl.sigma_hat);
      scratch.warm = std::move(gl);
    }
  } else {
    par.set_covariance(sigma_hat);
  }

  par.kappa.resize(p);
  for (Index j = 0; j < p; ++j)
    par.kappa(j) = static_cast<double>(masks.zeros(j)) / static_cast<double>(n);
  return par;
}

// Two-step-style initializer on masked residuals.
inline ModelParams zi_init(const Dataset& data,
                           const ClusterAssignment& clustering,
                           const ZiMasks& masks,
                           const Eigen::ColPivHouseholderQR<Matrix>& xqr) {
  ModelParams par;
  par.B = masked_column_ols(data, data.Y, masks, xqr, nullptr);
  const Matrix rhat = (data.Y - data.X * par.B).cwiseProduct(masks.ones);
  const Matrix gamma_hat =
      rhat.transpose() * rhat / static_cast<double>(data.n());
  const Matrix sigma_tilde = aggregate_covariance(gamma_hat, clustering);
  Matrix ridge = sigma_tilde;
  ridge.diagonal().array() += 1e-3;
  par.set_precision(invert_spd(ridge, "zi_init"));
  Vector d(data.p());
  for (Index j = 0; j < data.p(); ++j) {
    const int c = clustering.label(static_cast<int>(j));
    const double var_j = rhat.col(j).squaredNorm() / masks.nonzero_counts(j);
    // Relative floor: see two_step_init.
    d(j) = std::max({var_j - sigma_tilde(c, c), 0.05 * var_j, 1e-6});
  }
  par.noise = Noise::diagonal(std::move(d));
  par.kappa.resize(data.p());
  for (Index j = 0; j < data.p(); ++j)
    par.kappa(j) =
        static_cast<double>(masks.zeros(j)) / static_cast<double>(data.n());
  return par;
}

}  // namespace detail

inline ModelParams zi_m_step_observed(const ZiPosterior& post,
                                      const ZiMasks& masks,
                                      const ClusterAssignment& clustering,
                                      const Dataset& data, double lambda = 0.0,
                                      const GlassoConfig& gcfg = {},
                                      const ModelParams* prev = nullptr) {
  detail::MStepScratch scratch{Eigen::ColPivHouseholderQR<Matrix>(data.X), {}};
  if (scratch.xqr.rank() < data.dcov())
    throw SingularInput("zi_m_step_observed: design matrix is rank deficient");
  return detail::zi_m_step_impl(post, masks, clustering, data, lambda, gcfg,
                                scratch, prev, nullptr, nullptr);
}

inline FitResult fit_zi_em_observed(const Dataset& data,
                                    const ClusterAssignment& clustering,
                                    double lambda,
                                    const FitOptions& opts = {}) {
  require(clustering.p() == data.p(),
          "fit_zi_em_observed: clustering size mismatch");
  require(opts.max_iter >= 1, "fit_zi_em_observed: max_iter must be >= 1");
  require(lambda >= 0.0, "fit_zi_em_observed: lambda must be non-negative");
  const ZiMasks masks = ZiMasks::from(data.Y);

  detail::MStepScratch scratch{Eigen::ColPivHouseholderQR<Matrix>(data.X), {}};
  if (scratch.xqr.rank() < data.dcov())
    throw SingularInput("fit_zi_em_observed: design matrix is rank deficient");
  ModelParams par = detail::zi_init(data, clustering, masks, scratch.xqr);

  std::vector<double> trace;
  trace.reserve(64);
  bool converged = false, glasso_ok = true, ascent_ok = true;
  double loglik = 0.0, prev_obj = 0.0;

  for (int it = 0; it < opts.max_iter; ++it) {
    const ZiPosterior post = zi_e_step_observed(par, clustering, data, masks);
    loglik = zi_em_objective(par, clustering, data, masks, post) +
             zi_posterior_entropy(post);
    const double obj =
        loglik - l1_trace_penalty(par.omega, lambda, data.n());
    trace.push_back(obj);
    if (it > 0 && std::abs(obj - prev_obj) <= opts.tol * (1.0 + std::abs(obj))) {
      converged = true;
      break;
    }
    prev_obj = obj;

    bool gok = true, aok = true;
    par = detail::zi_m_step_impl(post, masks, clustering, data, lambda,
                                 opts.glasso, scratch, &par, &gok, &aok);
    glasso_ok = glasso_ok && gok;
    ascent_ok = ascent_ok && aok;
  }

  if (!converged) {
    loglik = zi_observed_loglik(par, clustering, data, masks);
    trace.push_back(loglik - l1_trace_penalty(par.omega, lambda, data.n()));
  }

  const int iterations = static_cast<int>(trace.size()) - (converged ? 0 : 1);
  FitResult fit{std::move(par),
                std::nullopt,
                clustering,
                std::move(trace),
                {},
                {},
                converged && glasso_ok && ascent_ok,
                iterations};
  fit.network = extract_network(fit.params.omega, lambda);
  fill_criteria(fit, data.n(), loglik);
  return fit;
}

// ---------------------------------------------------------------------------
// Latent clusters (ZI VEM)
// ---------------------------------------------------------------------------

inline double zi_elbo(const ModelParams& par, const VariationalState& vs,
                      const Dataset& data, const ZiMasks& masks) {
  detail::check_varstate(par, vs, data, "zi_elbo");
  require(par.zero_inflated(), "zi_elbo: params.kappa must be set");
  const Index n = data.n(), q = par.q();
  const Vector dinv = par.noise.inv();
  const Matrix R = data.Y - data.X * par.B;
  const Matrix A = detail::expected_sq_residual(R, vs.M, vs.S, vs.tau);

  double val =
      -0.5 * static_cast<double>(masks.total_nonzeros) * kLog2Pi -
      0.5 * (masks.ones.cwiseProduct(A) * dinv).sum();
  for (Index j = 0; j < data.p(); ++j)
    val -= 0.5 * masks.nonzero_counts(j) * std::log(par.noise.d(j));

  const Vector cs = vs.S.colwise().sum().transpose();
  val += 0.5 * static_cast<double>(n) * logdet_spd(par.omega, "zi_elbo: omega");
  val -= 0.5 * ((par.omega.cwiseProduct(vs.M.transpose() * vs.M)).sum() +
                par.omega.diagonal().dot(cs));
  val += 0.5 * static_cast<double>(n * q) + 0.5 * vs.S.array().log().sum();

  for (Index k = 0; k < q; ++k) {
    const double la = std::log(par.alpha(k));
    for (Index j = 0; j < data.p(); ++j) {
      const double t = vs.tau(j, k);
      if (t > 0.0) val += t * la;
      val -= xlogx(t);
    }
  }
  return val + bernoulli_loglik(par.kappa, masks);
}

// tau (masked softmax), then S (closed form), then M (per-row solves used as
// the ascent seed). Writes whether the M ascent met its gradient tolerance.
inline VariationalState zi_ve_step(const ModelParams& par,
                                   const VariationalState& vs,
                                   const Dataset& data, const ZiMasks& masks,
                                   bool* ascent_converged = nullptr) {
  detail::check_varstate(par, vs, data, "zi_ve_step");
  const Index n = data.n(), p = data.p(), q = par.q();
  const Vector dinv = par.noise.inv();
  const Matrix R = data.Y - data.X * par.B;
  const Matrix masked_R = masks.ones.cwiseProduct(R);

  VariationalState out;
  // eta_jk = d_j^-1 [ ((1_Y o R)' M)_jk - (1_Y' (M^2 + S))_jk / 2 ] + log a_k
  const Matrix colsq =
      masks.ones.transpose() * (vs.M.array().square() + vs.S.array()).matrix();
  const Matrix cross = masked_R.transpose() * vs.M;
  out.tau.resize(p, q);
  for (Index j = 0; j < p; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index k = 0; k < q; ++k) {
      const double eta = dinv(j) * (cross(j, k) - 0.5 * colsq(j, k)) +
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

  // Per-row precision load t^(i) and the closed-form S at the fresh tau.
  const Matrix T = (masks.ones * dinv.asDiagonal()) * out.tau;  // n x q
  out.S = (T.array().rowwise() +
           par.omega.diagonal().transpose().array())
              .inverse()
              .matrix();

  // M: per-row exact solves of (Omega + diag(t^(i))) M_i = b_i seed the
  // ascent on F(M); the seed is the global maximizer, so the ascent
  // normally exits at its first gradient check.
  const Matrix b = (masked_R * dinv.asDiagonal()) * out.tau;  // n x q
  out.M.resize(n, q);
  Matrix prec(q, q);
  for (Index i = 0; i < n; ++i) {
    prec = par.omega;
    prec.diagonal() += T.row(i).transpose();
    out.M.row(i) =
        llt_spd(prec, "zi_ve_step: row precision").solve(b.row(i).transpose())
            .transpose();
  }
  auto value = [&](const Matrix& M) {
    return (b.cwiseProduct(M)).sum() -
           0.5 * ((T.cwiseProduct(M.array().square().matrix())).sum() +
                  ((M * par.omega).cwiseProduct(M)).sum());
  };
  auto grad = [&](const Matrix& M) -> Matrix {
    return b - T.cwiseProduct(M) - M * par.omega;
  };
  const bool ok = detail::gradient_ascent(out.M, value, grad);
  if (ascent_converged) *ascent_converged = ok;
  return out;
}

namespace detail {

inline ModelParams zi_vem_m_step_impl(const VariationalState& vs,
                                      const Dataset& data, const ZiMasks& masks,
                                      double lambda, const GlassoConfig& gcfg,
                                      MStepScratch& scratch,
                                      const ModelParams* prev,
                                      bool* glasso_converged,
                                      bool* ascent_converged) {
  const Index n = data.n(), p = data.p();

  ModelParams par;
  const Matrix fitted = vs.M * vs.tau.transpose();
  const Matrix target = data.Y - fitted;
  par.B = masked_column_ols(data, target, masks, scratch.xqr,
                            prev ? &prev->B : nullptr);
  const Vector w = prev ? prev->noise.inv() : Vector::Ones(p);
  auto value = [&](const Matrix& B) {
    const Matrix Rm = (target - data.X * B).cwiseProduct(masks.ones);
    return -0.5 * (Rm.array().square().matrix() * w).sum();
  };
  auto grad = [&](const Matrix& B) -> Matrix {
    const Matrix Rm = (target - data.X * B).cwiseProduct(masks.ones);
    return data.X.transpose() * (Rm * w.asDiagonal());
  };
  const bool ascent_ok = gradient_ascent(par.B, value, grad);
  if (ascent_converged) *ascent_converged = ascent_ok;

  const Matrix R = data.Y - data.X * par.B;
  const Matrix A = expected_sq_residual(R, vs.M, vs.S, vs.tau);
  Vector d(p);
  for (Index j = 0; j < p; ++j)
    d(j) = masks.ones.col(j).dot(A.col(j)) / masks.nonzero_counts(j);
  par.noise = Noise::diagonal(std::move(d));

  Matrix sigma_hat = vs.M.transpose() * vs.M;
  sigma_hat.diagonal() += vs.S.colwise().sum().transpose();
  sigma_hat /= static_cast<double>(n);
  symmetrize(sigma_hat);

  if (glasso_converged) *glasso_converged = true;
  if (lambda > 0.0) {
    GlassoResult gl;
    try {
      gl = glasso(sigma_hat, lambda, gcfg, scratch.warm ? &*scratch.warm : nullptr);
    } catch (const GlassoNonConvergence& e) {
      gl = e.last;
      if (glasso_converged) *glasso_converged = false;
    }
    if (prev && omega_block_objective(gl.omega, sigma_hat, lambda) <
                    omega_block_objective(prev->omega, sigma_hat, lambda)) {
      par.set_precision(prev->omega, prev->sigma);
    } else {
      par.set_precision(gl.omega, gl.sigma_hat);
      scratch.warm = std::move(gl);
    }
  } else {
    par.set_covariance(sigma_hat);
  }

  Vector alpha = vs.tau.colwise().sum().transpose() / static_cast<double>(p);
  alpha = alpha.cwiseMax(1e-12);
  par.alpha = alpha / alpha.sum();

  par.kappa.resize(p);
  for (Index j = 0; j < p; ++j)
    par.kappa(j) = static_cast<double>(masks.zeros(j)) / static_cast<double>(n);
  return par;
}

}  // namespace detail

inline ModelParams zi_vem_m_step(const VariationalState& vs, const Dataset& data,
                                 const ZiMasks& masks, double lambda,
                                 const GlassoConfig& gcfg = {},
                                 const ModelParams* prev = nullptr) {
  detail::MStepScratch scratch{Eigen::ColPivHouseholderQR<Matrix>(data.X), {}};
  if (scratch.xqr.rank() < data.dcov())
    throw SingularInput("zi_vem_m_step: design matrix is rank deficient");
  return detail::zi_vem_m_step_impl(vs, data, masks, lambda, gcfg, scratch,
                                    prev, nullptr, nullptr);
}

inline FitResult fit_zi_vem(const Dataset& data, int q, double lambda,
                            VemInit init = {}, const FitOptions& opts = {}) {
  require(q >= 1 && q <= data.p(), "fit_zi_vem: q must be in [1, p]");
  require(opts.max_iter >= 1, "fit_zi_vem: max_iter must be >= 1");
  require(lambda >= 0.0, "fit_zi_vem: lambda must be non-negative");
  require(opts.restarts >= 1, "fit_zi_vem: restarts must be >= 1");

  // Cold starts only: rerun from distinct kmeans seeds, keep the best bound.
  if (opts.restarts > 1 && !init.clustering) {
    std::optional<FitResult> best;
    for (int t = 0; t < opts.restarts; ++t) {
      FitOptions single = opts;
      single.restarts = 1;
      if (t > 0)
        single.seed =
            derive_seed(opts.seed, 0x5e5d0000u + static_cast<std::uint64_t>(t));
      FitResult cand = fit_zi_vem(data, q, lambda, init, single);
      if (!best || cand.objective_trace.back() > best->objective_trace.back())
        best = std::move(cand);
    }
    return *std::move(best);
  }

  const ZiMasks masks = ZiMasks::from(data.Y);

  detail::MStepScratch scratch{Eigen::ColPivHouseholderQR<Matrix>(data.X), {}};
  if (scratch.xqr.rank() < data.dcov())
    throw SingularInput("fit_zi_vem: design matrix is rank deficient");

  ClusterAssignment clustering0 = [&] {
    if (init.clustering) return *std::move(init.clustering);
    const Matrix B0 =
        detail::masked_column_ols(data, data.Y, masks, scratch.xqr, nullptr);
    const Matrix rhat = (data.Y - data.X * B0).cwiseProduct(masks.ones);
    return kmeans_columns(rhat, q, opts.seed);
  }();
  require(clustering0.q() == q && clustering0.p() == data.p(),
          "fit_zi_vem: init clustering shape mismatch");

  ModelParams par = init.params
                        ? *std::move(init.params)
                        : detail::zi_init(data, clustering0, masks, scratch.xqr);
  require(par.q() == q && par.p() == data.p(),
          "fit_zi_vem: init params shape mismatch");
  if (!par.latent()) {
    Vector alpha = Vector::Zero(q);
    for (int j = 0; j < clustering0.p(); ++j) alpha(clustering0.label(j)) += 1.0;
    alpha = (alpha / static_cast<double>(data.p())).cwiseMax(1e-12);
    par.alpha = alpha / alpha.sum();
  }
  if (!par.zero_inflated()) {
    par.kappa.resize(data.p());
    for (Index j = 0; j < data.p(); ++j)
      par.kappa(j) =
          static_cast<double>(masks.zeros(j)) / static_cast<double>(data.n());
  }
  require(par.kappa.maxCoeff() < 1.0, "fit_zi_vem: kappa entries must be < 1");

  // Initialize (M, S) at the one-hot tau before the first objective
  // evaluation, exactly as the VE update would at fixed tau.
  VariationalState vs;
  vs.tau = one_hot(clustering0);
  {
    const Vector dinv = par.noise.inv();
    const Matrix R = data.Y - data.X * par.B;
    const Matrix masked_R = masks.ones.cwiseProduct(R);
    const Matrix T = (masks.ones * dinv.asDiagonal()) * vs.tau;
    vs.S = (T.array().rowwise() + par.omega.diagonal().transpose().array())
               .inverse()
               .matrix();
    const Matrix b = (masked_R * dinv.asDiagonal()) * vs.tau;
    vs.M.resize(data.n(), q);
    Matrix prec(q, q);
    for (Index i = 0; i < data.n(); ++i) {
      prec = par.omega;
      prec.diagonal() += T.row(i).transpose();
      vs.M.row(i) = llt_spd(prec, "fit_zi_vem: row precision")
                        .solve(b.row(i).transpose())
                        .transpose();
    }
  }

  std::vector<double> trace;
  trace.reserve(64);
  bool converged = false, glasso_ok = true, ascent_ok = true;
  double bound = 0.0, prev_obj = 0.0;

  for (int it = 0; it < opts.max_iter; ++it) {
    bound = zi_elbo(par, vs, data, masks);
    const double obj = bound - l1_trace_penalty(par.omega, lambda, data.n());
    trace.push_back(obj);
    if (it > 0 && std::abs(obj - prev_obj) <= opts.tol * (1.0 + std::abs(obj))) {
      converged = true;
      break;
    }
    prev_obj = obj;

    bool ve_ok = true, gok = true, mok = true;
    vs = zi_ve_step(par, vs, data, masks, &ve_ok);
    par = detail::zi_vem_m_step_impl(vs, data, masks, lambda, opts.glasso,
                                     scratch, &par, &gok, &mok);
    glasso_ok = glasso_ok && gok;
    ascent_ok = ascent_ok && ve_ok && mok;
  }

  if (!converged) {
    bound = zi_elbo(par, vs, data, masks);
    trace.push_back(bound - l1_trace_penalty(par.omega, lambda, data.n()));
  }

  const int iterations = static_cast<int>(trace.size()) - (converged ? 0 : 1);
  FitResult fit{std::move(par),
                std::nullopt,
                hard_assignment(vs.tau),
                std::move(trace),
                {},
                {},
                converged && glasso_ok && ascent_ok,
                iterations};
  fit.varstate = std::move(vs);
  fit.network = extract_network(fit.params.omega, lambda);
  fill_criteria(fit, data.n(), bound);
  return fit;
}

// ---------------------------------------------------------------------------
// ZI two-step baseline
// ---------------------------------------------------------------------------

namespace detail {

struct ZiTwoStepBase {
  ZiMasks masks;
  Matrix B;
  Matrix rhat;       // masked residuals (zeros at masked entries)
  Matrix gamma_hat;  // rhat' rhat / n
};

inline ZiTwoStepBase zi_two_step_base(const Dataset& data) {
  ZiTwoStepBase base{ZiMasks::from(data.Y), {}, {}, {}};
  Eigen::ColPivHouseholderQR<Matrix> qr(data.X);
  if (qr.rank() < data.dcov())
    throw SingularInput("zi_two_step_fit: design matrix is rank deficient");
  base.B = masked_column_ols(data, data.Y, base.masks, qr, nullptr);
  base.rhat = (data.Y - data.X * base.B).cwiseProduct(base.masks.ones);
  base.gamma_hat =
      base.rhat.transpose() * base.rhat / static_cast<double>(data.n());
  return base;
}

inline FitResult zi_two_step_assemble(const Dataset& data, ZiTwoStepBase base,
                                      ClusterAssignment clustering,
                                      double lambda, const GlassoConfig& gcfg) {
  const Matrix sigma_tilde = aggregate_covariance(base.gamma_hat, clustering);

  bool glasso_ok = true;
  GlassoResult gl;
  try {
    gl = glasso(sigma_tilde, lambda, gcfg);
  } catch (const GlassoNonConvergence& e) {
    gl = e.last;
    glasso_ok = false;
  }

  ModelParams par;
  par.B = std::move(base.B);
  par.set_precision(gl.omega, gl.sigma_hat);
  Vector d(data.p());
  for (Index j = 0; j < data.p(); ++j) {
    const int c = clustering.label(static_cast<int>(j));
    const double var_j =
        base.rhat.col(j).squaredNorm() / base.masks.nonzero_counts(j);
    // Relative floor: see two_step_assemble.
    d(j) = std::max({var_j - sigma_tilde(c, c), 0.05 * var_j, 1e-6});
  }
  par.noise = Noise::diagonal(std::move(d));
  par.kappa.resize(data.p());
  for (Index j = 0; j < data.p(); ++j)
    par.kappa(j) = static_cast<double>(base.masks.zeros(j)) /
                   static_cast<double>(data.n());

  FitResult fit{std::move(par),
                std::nullopt,
                std::move(clustering),
                {},
                {},
                extract_network(gl.omega, lambda),
                glasso_ok,
                1};
  const double llb =
      zi_observed_loglik(fit.params, fit.clustering, data, base.masks);
  fit.objective_trace.push_back(
      llb - l1_trace_penalty(fit.params.omega, lambda, data.n()));
  fill_criteria(fit, data.n(), llb);
  return fit;
}

}  // namespace detail

inline FitResult zi_two_step_fit(const Dataset& data,
                                 const ClusterAssignment& clustering,
                                 double lambda, const GlassoConfig& gcfg = {}) {
  require(clustering.p() == data.p(),
          "zi_two_step_fit: clustering size mismatch");
  detail::ZiTwoStepBase base = detail::zi_two_step_base(data);
  return detail::zi_two_step_assemble(data, std::move(base), clustering, lambda,
                                      gcfg);
}

inline FitResult zi_two_step_fit(
    const Dataset& data, int q, double lambda,
    TwoStepClustering method = TwoStepClustering::residual_kmeans,
    std::uint64_t seed = 0, const GlassoConfig& gcfg = {}) {
  require(q >= 1 && q <= data.p(), "zi_two_step_fit: q out of range [1, p]");
  detail::ZiTwoStepBase base = detail::zi_two_step_base(data);
  ClusterAssignment clustering =
      method == TwoStepClustering::residual_kmeans
          ? kmeans_columns(base.rhat, q, seed)
          : spectral_cluster_covariance(base.gamma_hat, q, seed);
  return detail::zi_two_step_assemble(data, std::move(base),
                                      std::move(clustering), lambda, gcfg);
}

}  // namespace nb
