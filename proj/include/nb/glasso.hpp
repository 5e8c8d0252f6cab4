#pragma once

// L1-penalized precision estimation (graphical lasso), block coordinate
// descent over columns with an inner lasso solved by coordinate descent.
// The working variable is the covariance estimate W; the precision is
// recovered from the per-column lasso coefficients after every sweep.

#include <nb/common.hpp>

#include <utility>
#include <vector>

namespace nb {

struct GlassoConfig {
  double tol = 1e-6;
  int max_iter = 1000;           // outer sweeps
  bool penalize_diagonal = false;
};

struct GlassoResult {
  Matrix omega;      // precision estimate
  Matrix sigma_hat;  // its covariance counterpart W (omega^-1 up to tol)
  int sweeps = 0;
};

class GlassoNonConvergence : public NonConvergence {
 public:
  GlassoNonConvergence(const std::string& what, GlassoResult last_iterate)
      : NonConvergence(what), last(std::move(last_iterate)) {}
  GlassoResult last;
};

// Max KKT violation over off-diagonal pairs (unscaled). Zero entries must
// satisfy |S - W| <= lambda, active ones S - W = -lambda * sign(omega).
inline double glasso_kkt_residual(const Matrix& S, const Matrix& omega,
                                  const Matrix& sigma_hat, double lambda) {
  double r = 0.0;
  for (Index j = 1; j < S.cols(); ++j)
    for (Index i = 0; i < j; ++i) {
      const double gap = S(i, j) - sigma_hat(i, j);
      if (omega(i, j) == 0.0)
        r = std::max(r, std::abs(gap) - lambda);
      else
        r = std::max(r, std::abs(gap + lambda * sgn(omega(i, j))));
    }
  return std::max(r, 0.0);
}

namespace detail {

inline void check_glasso_input(const Matrix& S, double lambda) {
  require(S.rows() == S.cols(), "glasso: S must be square");
  require(S.allFinite(), "glasso: non-finite entries in S");
  require(lambda >= 0.0, "glasso: lambda must be non-negative");
  const double scale = std::max(1.0, S.cwiseAbs().maxCoeff());
  require((S - S.transpose()).cwiseAbs().maxCoeff() <= 1e-8 * scale,
          "glasso: S must be symmetric");
  require((S.diagonal().array() > 0.0).all(),
          "glasso: S must have a positive diagonal");
}

// Recover omega column-wise from (W, Beta); beta_j solves the lasso for
// column j so omega_jj = 1/(W_jj - w12' beta_j), omega_.j = -beta_j omega_jj.
inline Matrix recover_omega(const Matrix& W, const Matrix& Beta) {
  const Index m = W.rows();
  Matrix omega(m, m);
  for (Index j = 0; j < m; ++j) {
    double quad = 0.0;
    for (Index k = 0; k < m; ++k)
      if (k != j) quad += W(k, j) * Beta(k, j);
    const double denom = W(j, j) - quad;
    if (denom <= 0.0)
      throw SingularInput("glasso: working covariance lost positive definiteness");
    const double ojj = 1.0 / denom;
    for (Index k = 0; k < m; ++k) omega(k, j) = (k == j) ? ojj : -Beta(k, j) * ojj;
  }
  // Beta columns agree only up to tol; average to restore exact symmetry.
  symmetrize(omega);
  return omega;
}

}  // namespace detail

inline GlassoResult glasso(const Matrix& S_in, double lambda,
                           GlassoConfig cfg = {},
                           const GlassoResult* warm = nullptr) {
  detail::check_glasso_input(S_in, lambda);
  const Index m = S_in.rows();
  Matrix S = 0.5 * (S_in + S_in.transpose());

  const double diag_shift = cfg.penalize_diagonal ? lambda : 0.0;

  if (m == 1) {
    const double w = S(0, 0) + diag_shift;
    GlassoResult res;
    res.omega = Matrix::Constant(1, 1, 1.0 / w);
    res.sigma_hat = Matrix::Constant(1, 1, w);
    return res;
  }

  if (lambda == 0.0) {
    // Unpenalized: direct inversion, with Newton-Schulz refinement so the
    // inverse residual meets the advertised 10*tol bound.
    Eigen::LLT<Matrix> llt(S);
    if (llt.info() != Eigen::Success)
      throw SingularInput("glasso: S is singular and lambda is 0");
    Matrix omega = llt.solve(Matrix::Identity(m, m));
    const Matrix I = Matrix::Identity(m, m);
    for (int r = 0; r < 3; ++r) {
      if ((omega * S - I).cwiseAbs().maxCoeff() <= 10.0 * cfg.tol) break;
      omega = omega + omega * (I - S * omega);
    }
    if ((omega * S - I).cwiseAbs().maxCoeff() > 10.0 * cfg.tol)
      throw SingularInput("glasso: S is numerically singular at lambda = 0");
    symmetrize(omega);
    GlassoResult res;
    res.omega = std::move(omega);
    res.sigma_hat = S;
    return res;
  }

  const double scale = S.diagonal().cwiseAbs().mean();
  const double outer_tol = cfg.tol * scale;
  const double inner_tol = 0.05 * outer_tol;

  Matrix W = warm ? warm->sigma_hat : S;
  Matrix Beta = Matrix::Zero(m, m);
  if (warm) {
    for (Index j = 0; j < m; ++j) {
      const double ojj = warm->omega(j, j);
      if (ojj > 0.0)
        for (Index k = 0; k < m; ++k)
          if (k != j) Beta(k, j) = -warm->omega(k, j) / ojj;
    }
  }
  W.diagonal() = S.diagonal().array() + diag_shift;

  Matrix omega_prev = detail::recover_omega(W, Beta);
  GlassoResult res;

  for (int sweep = 1; sweep <= cfg.max_iter; ++sweep) {
    for (Index j = 0; j < m; ++j) {
      // u_k = sum_{l != j} W_kl Beta_lj; Beta(j,j) stays 0 so a full product
      // works. Entry u_j is never read.
      Vector u = W * Beta.col(j);
      for (int it = 0; it < 500; ++it) {
        double dmax = 0.0;
        for (Index k = 0; k < m; ++k) {
          if (k == j) continue;
          const double old = Beta(k, j);
          const double g = S(k, j) - (u(k) - W(k, k) * old);
          const double b = soft_threshold(g, lambda) / W(k, k);
          if (b != old) {
            Beta(k, j) = b;
            u += (b - old) * W.col(k);
            dmax = std::max(dmax, std::abs(b - old));
          }
        }
        if (dmax <= inner_tol) break;
      }
      for (Index k = 0; k < m; ++k)
        if (k != j) W(k, j) = W(j, k) = u(k);
    }

    Matrix omega = detail::recover_omega(W, Beta);
    const double delta = mean_abs(omega - omega_prev);
    omega_prev = omega;
    if (delta <= outer_tol &&
        glasso_kkt_residual(S, omega, W, lambda) <= outer_tol) {
      res.omega = std::move(omega);
      res.sigma_hat = W;
      res.sweeps = sweep;
      return res;
    }
  }

  res.omega = std::move(omega_prev);
  res.sigma_hat = W;
  res.sweeps = cfg.max_iter;
  throw GlassoNonConvergence(
      "glasso: no convergence after " + std::to_string(cfg.max_iter) +
          " sweeps (tol " + std::to_string(cfg.tol) + ")",
      std::move(res));
}

// Warm-started path; lambdas are processed in the given order, which should
// be decreasing for the warm starts to pay off.
inline std::vector<GlassoResult> glasso_path(const Matrix& S,
                                             const std::vector<double>& lambdas,
                                             GlassoConfig cfg = {}) {
  require(!lambdas.empty(), "glasso_path: empty lambda grid");
  std::vector<GlassoResult> out;
  out.reserve(lambdas.size());
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    const GlassoResult* warm = out.empty() ? nullptr : &out.back();
    out.push_back(glasso(S, lambdas[i], cfg, warm));
  }
  return out;
}

}  // namespace nb
