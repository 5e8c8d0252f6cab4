#pragma once

// Hyper-parameter selection: log-spaced penalty grids, information-criterion
// sweeps over the cluster count q or the penalty lambda, and stability
// selection for lambda (edge frequencies over row subsamples, clustering held
// fixed).  Sweep cells are independent and fan out over a worker pool.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "criteria.hpp"
#include "em_observed.hpp"
#include "parallel.hpp"
#include "types.hpp"
#include "vem.hpp"
#include "zero_inflated.hpp"

namespace nb {

// Log-spaced decreasing grid from lambda_max = max off-diagonal |s| down to
// min_ratio * lambda_max.  lambda_max at the head makes the first downstream
// glasso solve decoupled (empty graph); an all-zero off-diagonal input
// degenerates the grid to {0}.
inline std::vector<double> lambda_grid(const Matrix& s, int n_points = 30,
                                       double min_ratio = 0.01) {
  require(s.rows() == s.cols(), "lambda_grid: square input required");
  require(n_points >= 2, "lambda_grid: need at least two points");
  require(min_ratio > 0.0 && min_ratio < 1.0,
          "lambda_grid: min_ratio must be in (0,1)");
  double lmax = 0.0;
  for (Index l = 1; l < s.cols(); ++l)
    for (Index k = 0; k < l; ++k) lmax = std::max(lmax, std::abs(s(k, l)));
  if (lmax == 0.0) return {0.0};
  std::vector<double> grid(static_cast<std::size_t>(n_points));
  const double step = std::log(min_ratio) / (n_points - 1);
  for (int t = 0; t < n_points; ++t)
    grid[static_cast<std::size_t>(t)] = lmax * std::exp(step * t);
  return grid;
}

enum class Criterion { bic, ebic, icl };

struct CandidateRecord {
  double value = 0.0;      // the swept quantity: q (as a double) or lambda
  double objective = 0.0;  // log-likelihood bound at the returned state
  int n_params = 0;
  double bic = 0.0;
  double ebic = 0.0;
  double icl = 0.0;
  bool converged = false;
  bool failed = false;
  std::string error;
};

struct CriterionReport {
  std::vector<CandidateRecord> records;
  int chosen_bic = -1;   // argmax indices over non-failed records
  int chosen_ebic = -1;  // (criteria are stored higher-is-better)
  int chosen_icl = -1;
  int chosen = -1;  // per the criterion the sweep was asked to optimize

  int argmax(Criterion c) const {
    switch (c) {
      case Criterion::bic: return chosen_bic;
      case Criterion::ebic: return chosen_ebic;
      case Criterion::icl: return chosen_icl;
    }
    return -1;
  }
};

struct SelectConfig {
  NoiseKind noise = NoiseKind::diagonal;
  bool zero_inflated = false;
  FitOptions fit;
  int jobs = 0;  // 0 = available parallelism
};

namespace detail {

inline CandidateRecord record_from_fit(double value, const FitResult& fit) {
  CandidateRecord rec;
  rec.value = value;
  rec.objective = fit.criteria.log_like_bound;
  rec.n_params = fit.criteria.n_params;
  rec.bic = fit.criteria.bic;
  rec.ebic = fit.criteria.ebic;
  rec.icl = fit.criteria.icl;
  rec.converged = fit.converged;
  return rec;
}

inline void finalize_report(CriterionReport& report, Criterion criterion) {
  auto best = [&](auto key) {
    int arg = -1;
    for (std::size_t i = 0; i < report.records.size(); ++i) {
      const CandidateRecord& r = report.records[i];
      if (r.failed) continue;
      if (arg < 0 || key(r) > key(report.records[static_cast<std::size_t>(arg)]))
        arg = static_cast<int>(i);
    }
    return arg;
  };
  report.chosen_bic = best([](const CandidateRecord& r) { return r.bic; });
  report.chosen_ebic = best([](const CandidateRecord& r) { return r.ebic; });
  report.chosen_icl = best([](const CandidateRecord& r) { return r.icl; });
  report.chosen = report.argmax(criterion);
}

// Runs one sweep cell, converting any failure into a marked record so the
// sweep itself never aborts.
template <typename Fit>
void run_cell(double value, Fit fit, CandidateRecord& rec,
              std::optional<FitResult>* slot) {
  try {
    FitResult result = fit();
    rec = record_from_fit(value, result);
    if (slot) *slot = std::move(result);
  } catch (const std::exception& e) {
    rec.value = value;
    rec.failed = true;
    rec.error = e.what();
  }
}

}  // namespace detail

// Criterion sweep over the cluster count at a fixed penalty.  Cells run
// concurrently; failed cells are marked in the report without aborting the
// sweep.  When `fits` is given it is resized to the sweep and receives every
// successful fit.
inline CriterionReport select_q(const Dataset& data,
                                const std::vector<int>& q_range, double lambda,
                                Criterion criterion,
                                const SelectConfig& cfg = {},
                                std::vector<std::optional<FitResult>>* fits =
                                    nullptr) {
  require(!q_range.empty(), "select_q: empty candidate range");
  for (int q : q_range)
    require(q >= 1 && q <= data.p(), "select_q: q out of range [1, p]");
  CriterionReport report;
  report.records.resize(q_range.size());
  if (fits) fits->assign(q_range.size(), std::nullopt);

  parallel_for(q_range.size(), cfg.jobs, [&](std::size_t i) {
    const int q = q_range[i];
    detail::run_cell(
        static_cast<double>(q),
        [&] {
          return cfg.zero_inflated
                     ? fit_zi_vem(data, q, lambda, {}, cfg.fit)
                     : fit_vem(data, q, lambda, {}, cfg.fit, cfg.noise);
        },
        report.records[i], fits ? &(*fits)[i] : nullptr);
  });
  detail::finalize_report(report, criterion);
  return report;
}

// Criterion sweep over the penalty at a fixed cluster count.
inline CriterionReport select_lambda(const Dataset& data, int q,
                                     const std::vector<double>& lambdas,
                                     Criterion criterion,
                                     const SelectConfig& cfg = {},
                                     std::vector<std::optional<FitResult>>*
                                         fits = nullptr) {
  require(!lambdas.empty(), "select_lambda: empty candidate grid");
  for (double l : lambdas)
    require(l >= 0.0, "select_lambda: lambda must be non-negative");
  CriterionReport report;
  report.records.resize(lambdas.size());
  if (fits) fits->assign(lambdas.size(), std::nullopt);

  parallel_for(lambdas.size(), cfg.jobs, [&](std::size_t i) {
    detail::run_cell(
        lambdas[i],
        [&] {
          return cfg.zero_inflated
                     ? fit_zi_vem(data, q, lambdas[i], {}, cfg.fit)
                     : fit_vem(data, q, lambdas[i], {}, cfg.fit, cfg.noise);
        },
        report.records[i], fits ? &(*fits)[i] : nullptr);
  });
  detail::finalize_report(report, criterion);
  return report;
}

// --------------------------------------------------------------------------
// Stability selection.  The clustering is held fixed (take it from an
// unpenalized fit); each lambda is refit on row subsamples and scored by how
// reliably the edges of its full-data network reappear.

struct StarsConfig {
  int n_subsamples = 20;
  double subsample_ratio = 0.8;
  double threshold = 0.8;      // required edge frequency, in (0,1)
  std::uint64_t seed = 0;      // subsample draws derive from this
  int jobs = 0;
  bool zero_inflated = false;
  NoiseKind noise = NoiseKind::diagonal;
  FitOptions fit;
};

struct StabilityPoint {
  double lambda = 0.0;
  Matrix frequency;    // q x q symmetric edge selection frequencies in [0,1]
  BoolMatrix support;  // full-data support at this lambda
  double min_selected_frequency = 1.0;  // 1 when the support is empty
  int failed_subsamples = 0;
  bool full_fit_failed = false;
  bool qualified = false;
};

struct StarsResult {
  double chosen_lambda = 0.0;
  int chosen_index = -1;
  bool any_qualified = false;  // false => fell back to the largest lambda
  std::vector<StabilityPoint> curve;
};

namespace detail {

inline Dataset take_rows(const Dataset& data, const std::vector<Index>& rows) {
  Matrix y(static_cast<Index>(rows.size()), data.p());
  Matrix x(static_cast<Index>(rows.size()), data.dcov());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    y.row(static_cast<Index>(r)) = data.Y.row(rows[r]);
    x.row(static_cast<Index>(r)) = data.X.row(rows[r]);
  }
  return Dataset::validated(std::move(y), std::move(x));
}

inline std::vector<Index> draw_subsample(Index n, Index m, Rng& rng) {
  std::vector<Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Index{0});
  for (Index t = 0; t < m; ++t) {
    const int j = rng.uniform_int(static_cast<int>(t), static_cast<int>(n) - 1);
    std::swap(idx[static_cast<std::size_t>(t)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(m));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace detail

inline StarsResult stars(const Dataset& data,
                         const ClusterAssignment& clustering,
                         const std::vector<double>& lambdas,
                         const StarsConfig& cfg = {}) {
  require(!lambdas.empty(), "stars: empty penalty grid");
  for (double l : lambdas) require(l >= 0.0, "stars: lambda must be non-negative");
  require(cfg.threshold > 0.0 && cfg.threshold < 1.0,
          "stars: threshold must be in (0,1)");
  require(cfg.subsample_ratio > 0.0 && cfg.subsample_ratio <= 1.0,
          "stars: subsample_ratio must be in (0,1]");
  require(cfg.n_subsamples >= 1, "stars: need at least one subsample");
  require(clustering.p() == data.p(), "stars: clustering size mismatch");

  const Index n = data.n();
  const Index m = std::max<Index>(
      1, static_cast<Index>(std::floor(cfg.subsample_ratio * n)));
  const std::size_t n_lambda = lambdas.size();
  const std::size_t n_sub = static_cast<std::size_t>(cfg.n_subsamples);

  // Subsamples are drawn once, up front, from seeds derived per index; the
  // same row sets serve every lambda.
  std::vector<Dataset> subsets;
  subsets.reserve(n_sub);
  for (std::size_t s = 0; s < n_sub; ++s) {
    Rng rng(cfg.seed + 0x9e3779b97f4a7c15ULL * (s + 1));
    subsets.push_back(detail::take_rows(data, detail::draw_subsample(n, m, rng)));
  }

  auto fit_support = [&](const Dataset& d, double lambda) {
    const FitResult fit =
        cfg.zero_inflated
            ? fit_zi_em_observed(d, clustering, lambda, cfg.fit)
            : fit_em_observed(d, clustering, cfg.noise, lambda, {}, cfg.fit);
    return fit.network.support;
  };

  // Task layout: for each lambda, one full-data fit followed by the
  // subsample fits.  All cells are independent.
  const std::size_t per_lambda = n_sub + 1;
  std::vector<std::optional<BoolMatrix>> supports(n_lambda * per_lambda);
  parallel_for(supports.size(), cfg.jobs, [&](std::size_t t) {
    const std::size_t li = t / per_lambda, s = t % per_lambda;
    const Dataset& d = s == 0 ? data : subsets[s - 1];
    try {
      supports[t] = fit_support(d, lambdas[li]);
    } catch (const std::exception&) {
      supports[t].reset();
    }
  });

  const Index q = clustering.q();
  StarsResult result;
  result.curve.resize(n_lambda);
  for (std::size_t li = 0; li < n_lambda; ++li) {
    StabilityPoint& pt = result.curve[li];
    pt.lambda = lambdas[li];
    pt.frequency = Matrix::Zero(q, q);
    pt.support = BoolMatrix::Constant(q, q, false);

    int ok = 0;
    for (std::size_t s = 0; s < n_sub; ++s) {
      const auto& sup = supports[li * per_lambda + 1 + s];
      if (!sup) {
        ++pt.failed_subsamples;
        continue;
      }
      ++ok;
      pt.frequency += sup->cast<double>();
    }
    if (ok > 0) pt.frequency /= static_cast<double>(ok);

    const auto& full = supports[li * per_lambda];
    if (!full) {
      pt.full_fit_failed = true;
      continue;
    }
    pt.support = *full;
    pt.min_selected_frequency = 1.0;
    for (Index l = 1; l < q; ++l)
      for (Index k = 0; k < l; ++k)
        if (pt.support(k, l))
          pt.min_selected_frequency =
              std::min(pt.min_selected_frequency, pt.frequency(k, l));
    pt.qualified = pt.min_selected_frequency >= cfg.threshold;
  }

  // Walk from the strongest penalty down and keep lowering it while every
  // selected edge stays stable; the first unstable support ends the walk.
  // Qualification is not monotone along the path: a barely penalized fit and
  // its subsample fits agree on every edge, so a pointwise "smallest
  // qualifying lambda" resurges at the dense end and degenerates to the grid
  // floor.  No qualifying point at all falls back to the strongest penalty,
  // flagged via any_qualified.
  std::vector<std::size_t> order(n_lambda);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return lambdas[a] > lambdas[b];
  });
  int chosen = -1;
  for (std::size_t oi : order) {
    if (!result.curve[oi].qualified) break;
    chosen = static_cast<int>(oi);
  }
  result.any_qualified = chosen >= 0;
  if (chosen < 0) chosen = static_cast<int>(order.front());
  result.chosen_index = chosen;
  result.chosen_lambda = lambdas[static_cast<std::size_t>(chosen)];
  return result;
}

}  // namespace nb
