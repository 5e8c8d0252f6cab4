#pragma once

// Shared aliases, error types and small numeric helpers used across the
// library. Everything downstream assumes column-major Eigen doubles.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace nb {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;
using Index = Eigen::Index;

// ---------------------------------------------------------------------------
// Errors. InvalidArgument covers caller mistakes (bad shapes, bad labels,
// unknown options) and maps to the CLI usage exit code; the others are
// numerical conditions detected while fitting.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class SingularInput : public Error {
 public:
  using Error::Error;
};

class DegenerateRow : public Error {
 public:
  using Error::Error;
};

class NonConvergence : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

// ---------------------------------------------------------------------------
// RNG. A thin wrapper over mt19937_64 so every stochastic routine takes an
// explicit seed and derived streams are reproducible. derive_seed gives
// decorrelated per-task seeds (splitmix64 of master + index).

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  return splitmix64(master + 0x632be59bd9b4e019ULL * (stream + 1));
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double uniform() { return unif_(gen_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * unif_(gen_); }
  double normal() { return norm_(gen_); }
  double normal(double mean, double sd) { return mean + sd * norm_(gen_); }

  // Inclusive on both ends.
  int uniform_int(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(gen_);
  }

  bool bernoulli(double p) { return unif_(gen_) < p; }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::uniform_real_distribution<double> unif_{0.0, 1.0};
  std::normal_distribution<double> norm_{0.0, 1.0};
};

// ---------------------------------------------------------------------------
// Numeric helpers.

inline double soft_threshold(double x, double t) {
  if (x > t) return x - t;
  if (x < -t) return x + t;
  return 0.0;
}

inline double sgn(double x) { return (x > 0.0) - (x < 0.0); }

// x*log(x) with the 0*log(0) := 0 convention; keeps entropies finite when
// responsibilities underflow to exact zeros.
inline double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

inline double mean_abs(const Matrix& m) { return m.cwiseAbs().mean(); }

inline double offdiag_l1(const Matrix& m) {
  return m.cwiseAbs().sum() - m.diagonal().cwiseAbs().sum();
}

inline double max_abs_offdiag(const Matrix& m) {
  double v = 0.0;
  for (Index j = 0; j < m.cols(); ++j)
    for (Index i = 0; i < m.rows(); ++i)
      if (i != j) v = std::max(v, std::abs(m(i, j)));
  return v;
}

// Cholesky of an SPD matrix; throws SingularInput when the factorization
// fails (callers name the offending matrix in `what`).
inline Eigen::LLT<Matrix> llt_spd(const Matrix& m, const char* what) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success)
    throw SingularInput(std::string(what) +
                        ": matrix is not symmetric positive definite");
  return llt;
}

inline double logdet_from_llt(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

inline double logdet_spd(const Matrix& m, const char* what) {
  return logdet_from_llt(llt_spd(m, what));
}

inline Matrix invert_spd(const Matrix& m, const char* what) {
  Eigen::LLT<Matrix> llt = llt_spd(m, what);
  return llt.solve(Matrix::Identity(m.rows(), m.cols()));
}

inline void symmetrize(Matrix& m) {
  m = ((m + m.transpose()) * 0.5).eval();
}

inline double logsumexp(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  double mx = v.maxCoeff();
  if (!std::isfinite(mx)) return mx;  // all -inf
  return mx + std::log((v.array() - mx).exp().sum());
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("median: empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

constexpr double kPi = 3.141592653589793238462643383279502884;
constexpr double kLog2Pi = 1.8378770664093454835606594728112353;

}  // namespace nb
