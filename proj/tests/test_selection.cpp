#include <nb/selection.hpp>

#include <atomic>
#include <cmath>
#include <set>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "test_util.hpp"

using namespace nb;
using namespace nbtest;

namespace {

// Balanced latent instance at simulation-protocol noise levels.  Noise kept
// at d ~ U(0.5, 1.5): much smaller d inflates the price of finite-sample
// covariance misfit by 1/d and lets a split cluster out-score the truth,
// which is an overfitting regime criterion tests must avoid.
Dataset easy_instance(Rng& rng, int n, int p, int q, ClusterAssignment* truth) {
  std::vector<int> labels(static_cast<std::size_t>(p));
  for (int j = 0; j < p; ++j) labels[static_cast<std::size_t>(j)] = j % q;
  *truth = ClusterAssignment(labels, q);
  ModelParams gen;
  gen.B = random_matrix(rng, 1, p);
  gen.set_precision(random_sparse_precision(rng, q));
  Vector d(p);
  for (int j = 0; j < p; ++j) d(j) = rng.uniform(0.5, 1.5);
  gen.noise = Noise::diagonal(d);
  return draw_data(gen, *truth, n, rng);
}

}  // namespace

TEST_CASE("parallel_for covers every index exactly once and rethrows") {
  std::vector<std::atomic<int>> hits(97);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i].fetch_add(1); });
  for (const auto& h : hits) REQUIRE(h.load() == 1);

  parallel_for(0, 4, [](std::size_t) { FAIL("body ran for empty range"); });

  REQUIRE_THROWS_AS(parallel_for(50, 3,
                                 [](std::size_t i) {
                                   if (i == 17) throw InvalidArgument("boom");
                                 }),
                    InvalidArgument);
  REQUIRE(resolve_jobs(5) == 5);
  REQUIRE(resolve_jobs(0) >= 1);
}

TEST_CASE("lambda_grid is log-spaced and hits its endpoints") {
  Matrix s(3, 3);
  s << 2.0, 0.5, -0.8,  //
      0.5, 1.0, 0.25,   //
      -0.8, 0.25, 3.0;

  const std::vector<double> two = lambda_grid(s, 2);
  REQUIRE(two.size() == 2);
  REQUIRE(two[0] == Catch::Approx(0.8));
  REQUIRE(two[1] == Catch::Approx(0.008));

  const std::vector<double> grid = lambda_grid(s, 30, 0.01);
  REQUIRE(grid.size() == 30);
  REQUIRE(grid.front() == Catch::Approx(0.8));
  REQUIRE(grid.back() == Catch::Approx(0.008));
  for (std::size_t t = 1; t < grid.size(); ++t) {
    REQUIRE(grid[t] < grid[t - 1]);
    const double ratio = grid[t] / grid[t - 1];
    REQUIRE(ratio == Catch::Approx(grid[1] / grid[0]).epsilon(1e-12));
  }

  // The head of the grid decouples the glasso solve: empty graph.
  const GlassoResult at_max = glasso(s, grid.front());
  REQUIRE(extract_network(at_max.omega, grid.front()).edge_count() == 0);

  const Matrix diag_only = Vector::LinSpaced(4, 1.0, 4.0).asDiagonal();
  const std::vector<double> degenerate = lambda_grid(diag_only, 30);
  REQUIRE(degenerate == std::vector<double>{0.0});

  REQUIRE_THROWS_AS(lambda_grid(s, 1), InvalidArgument);
  REQUIRE_THROWS_AS(lambda_grid(s, 10, 0.0), InvalidArgument);
  REQUIRE_THROWS_AS(lambda_grid(s, 10, 1.0), InvalidArgument);
}

TEST_CASE("select_q picks the true cluster count on easy instances") {
  Rng rng(201);
  const std::vector<int> q_range = {1, 2, 3, 4, 5};
  int bic_hits = 0, ebic_hits = 0;
  for (int rep = 0; rep < 10; ++rep) {
    ClusterAssignment truth({0}, 1);
    const Dataset data = easy_instance(rng, 120, 24, 3, &truth);
    SelectConfig cfg;
    cfg.fit.seed = 300 + static_cast<std::uint64_t>(rep);

    std::vector<std::optional<FitResult>> fits;
    const CriterionReport report =
        select_q(data, q_range, 0.0, Criterion::bic, cfg, &fits);

    REQUIRE(report.records.size() == q_range.size());
    for (std::size_t i = 0; i < report.records.size(); ++i) {
      const CandidateRecord& rec = report.records[i];
      REQUIRE_FALSE(rec.failed);
      REQUIRE(rec.value == q_range[i]);
      REQUIRE(rec.ebic <= rec.bic + 1e-12);
      REQUIRE(fits[i].has_value());
      REQUIRE(fits[i]->clustering.q() == q_range[i]);
    }

    // Reported argmaxes match a recomputation from the records.
    for (auto [crit, idx] :
         {std::pair{Criterion::bic, report.chosen_bic},
          std::pair{Criterion::ebic, report.chosen_ebic},
          std::pair{Criterion::icl, report.chosen_icl}}) {
      double best = -1e300;
      int arg = -1;
      for (std::size_t i = 0; i < report.records.size(); ++i) {
        const double v = crit == Criterion::bic    ? report.records[i].bic
                         : crit == Criterion::ebic ? report.records[i].ebic
                                                   : report.records[i].icl;
        if (v > best) best = v, arg = static_cast<int>(i);
      }
      REQUIRE(idx == arg);
    }
    REQUIRE(report.chosen == report.chosen_bic);

    const int bic_q = q_range[static_cast<std::size_t>(report.chosen_bic)];
    const int ebic_q = q_range[static_cast<std::size_t>(report.chosen_ebic)];
    bic_hits += bic_q == 3 ? 1 : 0;
    ebic_hits += ebic_q == 3 ? 1 : 0;
    REQUIRE(std::abs(bic_q - 3) <= 1);  // misses, if any, are off by one
    REQUIRE(std::abs(ebic_q - 3) <= 1);
  }
  REQUIRE(bic_hits >= 8);
  REQUIRE(ebic_hits >= 8);

  SECTION("singleton range returns it") {
    ClusterAssignment truth({0}, 1);
    const Dataset data = easy_instance(rng, 40, 8, 2, &truth);
    const CriterionReport rep = select_q(data, {2}, 0.0, Criterion::icl);
    REQUIRE(rep.chosen == 0);
    REQUIRE(rep.records.size() == 1);
  }

  SECTION("input validation") {
    ClusterAssignment truth({0}, 1);
    const Dataset data = easy_instance(rng, 20, 6, 2, &truth);
    REQUIRE_THROWS_AS(select_q(data, {}, 0.0, Criterion::bic), InvalidArgument);
    REQUIRE_THROWS_AS(select_q(data, {0}, 0.0, Criterion::bic), InvalidArgument);
    REQUIRE_THROWS_AS(select_q(data, {7}, 0.0, Criterion::bic), InvalidArgument);
  }
}

TEST_CASE("select_q marks failing cells instead of aborting") {
  Rng rng(202);
  SmallInstance inst = random_instance(rng, 12, 6, 2);
  Matrix Y = inst.data.Y;
  Y.row(4).setZero();  // poisons every zero-inflated fit
  const Dataset data = Dataset::validated(std::move(Y), inst.data.X);

  SelectConfig cfg;
  cfg.zero_inflated = true;
  std::vector<std::optional<FitResult>> fits;
  const CriterionReport report =
      select_q(data, {1, 2, 3}, 0.0, Criterion::bic, cfg, &fits);
  for (const CandidateRecord& rec : report.records) {
    REQUIRE(rec.failed);
    REQUIRE_FALSE(rec.error.empty());
  }
  for (const auto& f : fits) REQUIRE_FALSE(f.has_value());
  REQUIRE(report.chosen == -1);
  REQUIRE(report.chosen_bic == -1);
}

TEST_CASE("select_lambda sweeps a grid at fixed q") {
  Rng rng(203);
  ClusterAssignment truth({0}, 1);
  const Dataset data = easy_instance(rng, 80, 10, 3, &truth);

  const FitResult base = two_step_fit(data, 3, 0.0);
  const std::vector<double> lambdas = lambda_grid(base.params.sigma, 8);

  SelectConfig cfg;
  cfg.fit.seed = 11;
  std::vector<std::optional<FitResult>> fits;
  const CriterionReport report =
      select_lambda(data, 3, lambdas, Criterion::ebic, cfg, &fits);

  REQUIRE(report.records.size() == lambdas.size());
  REQUIRE(report.chosen == report.chosen_ebic);
  REQUIRE(report.chosen >= 0);
  for (std::size_t i = 0; i < report.records.size(); ++i) {
    REQUIRE_FALSE(report.records[i].failed);
    REQUIRE(report.records[i].value == lambdas[i]);
    REQUIRE(report.records[i].ebic <= report.records[i].bic + 1e-12);
    REQUIRE(fits[i].has_value());
  }
  // The grid is decreasing, so its head is the most penalized, sparsest fit.
  REQUIRE(fits.front()->network.edge_count() <=
          fits.back()->network.edge_count());

  REQUIRE_THROWS_AS(select_lambda(data, 3, {}, Criterion::bic), InvalidArgument);
  REQUIRE_THROWS_AS(select_lambda(data, 3, {-0.1}, Criterion::bic),
                    InvalidArgument);
}

TEST_CASE("stars frequencies are valid and the degenerate ratio qualifies") {
  Rng rng(204);
  ClusterAssignment truth({0}, 1);
  const Dataset data = easy_instance(rng, 60, 10, 3, &truth);

  const FitResult base = two_step_fit(data, 3, 0.0);
  std::vector<double> lambdas = lambda_grid(base.params.sigma, 5);

  StarsConfig cfg;
  cfg.n_subsamples = 8;
  cfg.threshold = 0.7;
  cfg.seed = 99;
  const StarsResult res = stars(data, base.clustering, lambdas, cfg);

  REQUIRE(res.curve.size() == lambdas.size());
  REQUIRE(res.chosen_index >= 0);
  REQUIRE(res.chosen_lambda == lambdas[static_cast<std::size_t>(res.chosen_index)]);
  for (const StabilityPoint& pt : res.curve) {
    REQUIRE(pt.frequency.minCoeff() >= 0.0);
    REQUIRE(pt.frequency.maxCoeff() <= 1.0);
    REQUIRE((pt.frequency - pt.frequency.transpose()).cwiseAbs().maxCoeff() ==
            0.0);
    REQUIRE(pt.failed_subsamples == 0);
    REQUIRE_FALSE(pt.full_fit_failed);
    if (pt.support.count() == 0) REQUIRE(pt.min_selected_frequency == 1.0);
  }

  // Same seed, same curve, bit for bit.
  const StarsResult again = stars(data, base.clustering, lambdas, cfg);
  REQUIRE(again.chosen_index == res.chosen_index);
  for (std::size_t li = 0; li < res.curve.size(); ++li)
    REQUIRE((again.curve[li].frequency - res.curve[li].frequency)
                .cwiseAbs()
                .maxCoeff() == 0.0);

  SECTION("ratio 1 makes every subsample the full data") {
    StarsConfig degen = cfg;
    degen.subsample_ratio = 1.0;
    degen.n_subsamples = 3;
    const StarsResult r = stars(data, base.clustering, lambdas, degen);
    for (const StabilityPoint& pt : r.curve) {
      for (Index l = 1; l < pt.frequency.cols(); ++l)
        for (Index k = 0; k < l; ++k) {
          const double f = pt.frequency(k, l);
          REQUIRE((f == 0.0 || f == 1.0));
          REQUIRE(pt.support(k, l) == (f == 1.0));
        }
      REQUIRE(pt.qualified);  // every selected edge reappears with freq 1
    }
    // All lambdas qualify, so the smallest one is chosen.
    REQUIRE(r.chosen_lambda == Catch::Approx(lambdas.back()));
    REQUIRE(r.any_qualified);
  }

  SECTION("config validation") {
    StarsConfig bad = cfg;
    bad.threshold = 1.0;
    REQUIRE_THROWS_AS(stars(data, base.clustering, lambdas, bad),
                      InvalidArgument);
    bad = cfg;
    bad.subsample_ratio = 0.0;
    REQUIRE_THROWS_AS(stars(data, base.clustering, lambdas, bad),
                      InvalidArgument);
    bad = cfg;
    bad.n_subsamples = 0;
    REQUIRE_THROWS_AS(stars(data, base.clustering, lambdas, bad),
                      InvalidArgument);
    REQUIRE_THROWS_AS(stars(data, base.clustering, {}, cfg), InvalidArgument);
  }
}

TEST_CASE("stars counts subsample failures without aborting") {
  Rng rng(205);
  // A zero-inflated dataset where one column is nonzero in just two rows:
  // most 40%-row subsamples miss both, the masked fit throws, and the
  // failure is tallied rather than propagated.
  const int n = 10, p = 5;
  SmallInstance inst = random_instance(rng, n, p, 2);
  Matrix Y = inst.data.Y;
  for (Index i = 0; i < n; ++i)
    if (i != 2 && i != 7) Y(i, 4) = 0.0;
  const Dataset data = Dataset::validated(std::move(Y), inst.data.X);

  StarsConfig cfg;
  cfg.zero_inflated = true;
  cfg.n_subsamples = 10;
  cfg.subsample_ratio = 0.4;
  cfg.threshold = 0.6;
  cfg.seed = 5;
  const StarsResult res = stars(data, inst.clustering, {0.05}, cfg);

  REQUIRE(res.curve.size() == 1);
  const StabilityPoint& pt = res.curve.front();
  REQUIRE(pt.failed_subsamples > 0);
  REQUIRE(pt.failed_subsamples < cfg.n_subsamples);  // some must survive
  REQUIRE(pt.frequency.minCoeff() >= 0.0);
  REQUIRE(pt.frequency.maxCoeff() <= 1.0);
}
