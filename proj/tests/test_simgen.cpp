#include <nb/em_observed.hpp>
#include <nb/metrics.hpp>
#include <nb/simulate.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "test_util.hpp"

using namespace nb;
using namespace nbtest;

namespace {

// Pair-counting ARI oracle: O(p^2) loop over variable pairs, no
// contingency table.
double ari_pairs(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t p = a.size();
  double together = 0.0, same_a = 0.0, same_b = 0.0, total = 0.0;
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = i + 1; j < p; ++j) {
      total += 1.0;
      const bool sa = a[i] == a[j], sb = b[i] == b[j];
      same_a += sa ? 1.0 : 0.0;
      same_b += sb ? 1.0 : 0.0;
      together += sa && sb ? 1.0 : 0.0;
    }
  const double expected = same_a * same_b / total;
  const double maximum = 0.5 * (same_a + same_b);
  if (maximum - expected == 0.0) return 1.0;
  return (together - expected) / (maximum - expected);
}

int reachable_count(const Matrix& g) {
  const Index q = g.rows();
  std::vector<bool> seen(static_cast<std::size_t>(q), false);
  std::vector<Index> stack{0};
  seen[0] = true;
  int count = 1;
  while (!stack.empty()) {
    const Index at = stack.back();
    stack.pop_back();
    for (Index l = 0; l < q; ++l)
      if (g(at, l) == 1.0 && !seen[static_cast<std::size_t>(l)]) {
        seen[static_cast<std::size_t>(l)] = true;
        stack.push_back(l);
        ++count;
      }
  }
  return count;
}

BoolMatrix support_of(const Matrix& omega, double tol = 1e-10) {
  BoolMatrix s = (omega.array().abs() > tol).matrix();
  s.diagonal().setConstant(false);
  return s;
}

}  // namespace

TEST_CASE("generate_graph honors each mechanism") {
  SECTION("erdos-renyi extremes") {
    GraphSpec spec;
    spec.q = 6;
    spec.seed = 3;
    spec.edge_prob = 1.0;
    Matrix complete = generate_graph(spec);
    REQUIRE(complete.diagonal().isZero());
    for (Index l = 1; l < 6; ++l)
      for (Index k = 0; k < l; ++k) REQUIRE(complete(k, l) == 1.0);
    spec.edge_prob = 0.0;
    REQUIRE(generate_graph(spec).isZero());
  }

  SECTION("community extremes give a block-diagonal adjacency") {
    GraphSpec spec;
    spec.structure = GraphStructure::community;
    spec.q = 9;
    spec.communities = 3;
    spec.within_prob = 1.0;
    spec.between_prob = 0.0;
    spec.seed = 11;
    const Matrix g = generate_graph(spec);
    for (Index l = 0; l < 9; ++l)
      for (Index k = 0; k < 9; ++k) {
        const bool same_block = k / 3 == l / 3;
        if (k == l) REQUIRE(g(k, l) == 0.0);
        else REQUIRE(g(k, l) == (same_block ? 1.0 : 0.0));
      }
  }

  SECTION("preferential attachment builds a spanning tree") {
    for (std::uint64_t seed : {0ull, 1ull, 2ull, 3ull, 4ull}) {
      GraphSpec spec;
      spec.structure = GraphStructure::preferential_attachment;
      spec.q = 12;
      spec.seed = seed;
      const Matrix g = generate_graph(spec);
      REQUIRE((g - g.transpose()).isZero());
      REQUIRE(g.diagonal().isZero());
      REQUIRE(g.sum() == Catch::Approx(2.0 * (12 - 1)));  // q-1 edges
      REQUIRE(reachable_count(g) == 12);
    }
  }

  SECTION("deterministic given the seed") {
    GraphSpec spec;
    spec.q = 10;
    spec.seed = 42;
    const Matrix a = generate_graph(spec);
    const Matrix b = generate_graph(spec);
    REQUIRE((a - b).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("validation") {
    GraphSpec spec;
    spec.q = 0;
    REQUIRE_THROWS_AS(generate_graph(spec), InvalidArgument);
    spec.q = 5;
    spec.edge_prob = 1.5;
    REQUIRE_THROWS_AS(generate_graph(spec), InvalidArgument);
    spec = {};
    spec.structure = GraphStructure::community;
    spec.q = 2;
    spec.communities = 3;
    REQUIRE_THROWS_AS(generate_graph(spec), InvalidArgument);
  }
}

TEST_CASE("graph_to_precision shifts the spectrum above u") {
  SECTION("empty graph gives u on the diagonal") {
    const Matrix omega = graph_to_precision(Matrix::Zero(4, 4));
    REQUIRE((omega - 0.4 * Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() <
            1e-15);
  }

  SECTION("support matches the adjacency and the result is SPD") {
    for (auto structure :
         {GraphStructure::erdos_renyi, GraphStructure::preferential_attachment,
          GraphStructure::community}) {
      for (std::uint64_t seed = 0; seed < 6; ++seed) {
        GraphSpec spec;
        spec.structure = structure;
        spec.q = 9;
        spec.seed = seed;
        const Matrix g = generate_graph(spec);
        const Matrix omega = graph_to_precision(g);

        for (Index l = 1; l < 9; ++l)
          for (Index k = 0; k < l; ++k) {
            if (g(k, l) == 1.0) REQUIRE(omega(k, l) == Catch::Approx(0.3));
            else REQUIRE(omega(k, l) == 0.0);
          }
        const Eigen::SelfAdjointEigenSolver<Matrix> eig(omega);
        REQUIRE(eig.eigenvalues().minCoeff() >= 0.4 - 1e-10);
        REQUIRE_NOTHROW(llt_spd(omega, "test"));
      }
    }
  }

  SECTION("validation") {
    REQUIRE_THROWS_AS(graph_to_precision(Matrix::Zero(3, 4)), InvalidArgument);
    REQUIRE_THROWS_AS(graph_to_precision(Matrix::Zero(3, 3), 0.0),
                      InvalidArgument);
    Matrix asym = Matrix::Zero(3, 3);
    asym(0, 1) = 1.0;
    REQUIRE_THROWS_AS(graph_to_precision(asym), InvalidArgument);
    Matrix nonbin = Matrix::Zero(3, 3);
    nonbin(0, 1) = nonbin(1, 0) = 0.5;
    REQUIRE_THROWS_AS(graph_to_precision(nonbin), InvalidArgument);
    Matrix diag = Matrix::Identity(3, 3);
    REQUIRE_THROWS_AS(graph_to_precision(diag), InvalidArgument);
  }
}

TEST_CASE("balanced_clustering never leaves a cluster empty") {
  Rng rng(21);
  for (int rep = 0; rep < 50; ++rep) {
    const int q = rng.uniform_int(1, 6);
    const int p = q + rng.uniform_int(0, 12);
    const ClusterAssignment c = balanced_clustering(p, q, rng);
    REQUIRE(c.p() == p);
    const std::vector<int> sizes = c.sizes();
    REQUIRE(*std::min_element(sizes.begin(), sizes.end()) >= 1);
  }
  const ClusterAssignment tight = balanced_clustering(4, 4, rng);
  for (int s : tight.sizes()) REQUIRE(s == 1);
  REQUIRE_THROWS_AS(balanced_clustering(2, 3, rng), InvalidArgument);
}

TEST_CASE("truncated_kappa respects its window") {
  Rng rng(22);
  const Vector kappa = truncated_kappa(4000, 0.8, rng);
  REQUIRE(kappa.minCoeff() >= 0.0);
  REQUIRE(kappa.maxCoeff() <= 0.9);
  // The mass above 0.9 folds back, so the mean sits slightly below 0.8.
  REQUIRE(kappa.mean() == Catch::Approx(0.8).margin(0.01));
  REQUIRE_THROWS_AS(truncated_kappa(5, 0.95, rng), InvalidArgument);
  REQUIRE_THROWS_AS(truncated_kappa(5, 0.5, rng, 0.0), InvalidArgument);
}

TEST_CASE("simulate matches the model's second moments") {
  Rng rng(23);
  const int n = 100000, p = 4, q = 2;
  ModelParams par;
  par.B = random_matrix(rng, 1, p);
  Matrix omega(q, q);
  omega << 1.0, -0.4,  //
      -0.4, 0.8;
  par.set_precision(omega);
  par.noise = Noise::diagonal((Vector(p) << 0.6, 1.0, 1.4, 0.8).finished());
  const ClusterAssignment c({0, 0, 1, 1}, q);

  const Dataset data = simulate(par, c, n, 77);
  REQUIRE(data.n() == n);
  REQUIRE(data.p() == p);
  REQUIRE(data.X.minCoeff() >= 1.0);
  REQUIRE(data.X.maxCoeff() <= 10.0);

  const Matrix resid = data.Y - data.X * par.B;
  const Matrix centered = resid.rowwise() - resid.colwise().mean();
  const Matrix emp = centered.transpose() * centered / static_cast<double>(n);
  const Matrix pop = one_hot(c) * par.sigma * one_hot(c).transpose() +
                     Matrix(par.noise.d.asDiagonal());
  for (Index a = 0; a < p; ++a)
    for (Index b = 0; b < p; ++b) {
      const double se = std::sqrt(
          (pop(a, a) * pop(b, b) + pop(a, b) * pop(a, b)) / n);
      REQUIRE(emp(a, b) == Catch::Approx(pop(a, b)).margin(3.0 * se));
    }

  SECTION("deterministic given the seed") {
    const Dataset again = simulate(par, c, 50, 4242);
    const Dataset twice = simulate(par, c, 50, 4242);
    REQUIRE((again.Y - twice.Y).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((again.X - twice.X).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("simulate_zi masks at the requested rates") {
  Rng rng(24);
  const int n = 20000, p = 3, q = 2;
  ModelParams par;
  par.B = random_matrix(rng, 1, p);
  par.set_precision(Matrix::Identity(q, q));
  par.noise = Noise::diagonal(Vector::Constant(p, 1.0));
  const ClusterAssignment c({0, 1, 1}, q);

  SECTION("kappa = 0 reproduces simulate exactly") {
    par.kappa = Vector::Zero(p);
    const Dataset plain = simulate(par, c, 200, 5);
    const Dataset zi = simulate_zi(par, c, 200, 5);
    REQUIRE((plain.Y - zi.Y).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((plain.X - zi.X).cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("empirical zero rate approximates kappa") {
    par.kappa = (Vector(p) << 0.1, 0.5, 0.8).finished();
    const Dataset data = simulate_zi(par, c, n, 6);
    for (Index j = 0; j < p; ++j) {
      const double rate =
          (data.Y.col(j).array() == 0.0).cast<double>().sum() / n;
      const double se = std::sqrt(par.kappa(j) * (1.0 - par.kappa(j)) / n);
      REQUIRE(rate == Catch::Approx(par.kappa(j)).margin(3.0 * se));
    }
  }

  SECTION("kappa must be present and valid") {
    par.kappa.resize(0);
    REQUIRE_THROWS_AS(simulate_zi(par, c, 10, 1), InvalidArgument);
    par.kappa = Vector::Constant(p, 1.0);
    REQUIRE_THROWS_AS(simulate_zi(par, c, 10, 1), InvalidArgument);
  }
}

TEST_CASE("regression estimates sharpen as n grows") {
  Rng rng(25);
  const int p = 8, q = 2;
  ModelParams gen;
  gen.B = random_matrix(rng, 1, p);
  gen.set_precision(random_sparse_precision(rng, q));
  Vector d(p);
  for (int j = 0; j < p; ++j) d(j) = rng.uniform(0.5, 1.5);
  gen.noise = Noise::diagonal(d);
  const ClusterAssignment c({0, 0, 0, 0, 1, 1, 1, 1}, q);

  std::vector<double> med;
  for (int n : {50, 200, 800}) {
    std::vector<double> errs;
    for (int rep = 0; rep < 5; ++rep) {
      const Dataset data =
          simulate(gen, c, n, 1000 + 10 * static_cast<std::uint64_t>(n) +
                                  static_cast<std::uint64_t>(rep));
      const FitResult fit =
          fit_em_observed(data, c, NoiseKind::diagonal, 0.0);
      errs.push_back(rmse(fit.params.B, gen.B));
    }
    std::sort(errs.begin(), errs.end());
    med.push_back(errs[2]);
  }
  REQUIRE(med[1] < med[0]);
  REQUIRE(med[2] < med[1]);
}

TEST_CASE("ari agrees with the pair-counting oracle") {
  REQUIRE(ari({1, 1, 2, 2}, {1, 1, 2, 2}) == 1.0);
  REQUIRE(ari({0, 0, 1, 1}, {3, 3, 7, 7}) == 1.0);  // names do not matter
  REQUIRE(ari({1, 1, 2, 2}, {1, 2, 1, 2}) ==
          Catch::Approx(ari_pairs({1, 1, 2, 2}, {1, 2, 1, 2})));

  Rng rng(26);
  for (int rep = 0; rep < 25; ++rep) {
    const int p = rng.uniform_int(2, 14);
    std::vector<int> a(static_cast<std::size_t>(p)),
        b(static_cast<std::size_t>(p));
    for (int j = 0; j < p; ++j) {
      a[static_cast<std::size_t>(j)] = rng.uniform_int(0, 3);
      b[static_cast<std::size_t>(j)] = rng.uniform_int(0, 2);
    }
    const double lib = ari(a, b);
    REQUIRE(lib == Catch::Approx(ari_pairs(a, b)).margin(1e-12));
    REQUIRE(ari(b, a) == Catch::Approx(lib).margin(1e-12));  // symmetry

    std::vector<int> renamed = a;  // bijective label renaming
    for (int& l : renamed) l = 5 - l;
    REQUIRE(ari(renamed, b) == Catch::Approx(lib).margin(1e-12));
  }

  REQUIRE(ari({0, 0, 0}, {1, 1, 1}) == 1.0);  // degenerate denominator
  REQUIRE_THROWS_AS(ari({0, 1}, {0, 1, 2}), InvalidArgument);
  REQUIRE_THROWS_AS(ari(std::vector<int>{}, std::vector<int>{}),
                    InvalidArgument);
}

TEST_CASE("roc_auc sweeps a support path against the truth") {
  Rng rng(27);
  const Matrix omega = graph_to_precision(generate_graph({
      GraphStructure::erdos_renyi, 8, 0.3, 1.0, 3, 0.6, 0.05, 9}));
  const BoolMatrix truth = support_of(omega);

  SECTION("thresholding the true precision gives AUC 1") {
    std::vector<double> cuts;
    for (Index l = 1; l < 8; ++l)
      for (Index k = 0; k < l; ++k)
        if (std::abs(omega(k, l)) > 0.0) cuts.push_back(std::abs(omega(k, l)));
    cuts.push_back(0.15);  // below every true edge: the full-support point
    std::sort(cuts.begin(), cuts.end(), std::greater<>());
    std::vector<BoolMatrix> path;
    for (double cut : cuts)
      path.push_back((omega.array().abs() >= cut).matrix());
    for (BoolMatrix& s : path) s.diagonal().setConstant(false);

    const RocCurve curve = roc_auc(truth, path);
    REQUIRE(curve.auc == Catch::Approx(1.0));
  }

  SECTION("single-point path at the truth") {
    const RocCurve curve = roc_auc(truth, {truth});
    REQUIRE(curve.points.size() == 3);
    REQUIRE(curve.points[1].fpr == 0.0);
    REQUIRE(curve.points[1].tpr == 1.0);
    REQUIRE(curve.auc == Catch::Approx(1.0));
  }

  SECTION("random supports hover around one half") {
    double total = 0.0;
    const int reps = 300;
    for (int rep = 0; rep < reps; ++rep) {
      Matrix scores = random_matrix(rng, 8, 8);
      scores = (scores + scores.transpose()).eval();
      std::vector<BoolMatrix> path;
      for (double cut : {2.0, 1.5, 1.0, 0.5, 0.25, 0.0}) {
        BoolMatrix s = (scores.array().abs() > cut).matrix();
        s.diagonal().setConstant(false);
        path.push_back(s);
      }
      total += roc_auc(truth, path).auc;
    }
    REQUIRE(total / reps == Catch::Approx(0.5).margin(0.05));
  }

  SECTION("degenerate truths are rejected") {
    const BoolMatrix empty = BoolMatrix::Constant(5, 5, false);
    REQUIRE_THROWS_AS(roc_auc(empty, {empty}), InvalidArgument);
    BoolMatrix full = BoolMatrix::Constant(5, 5, true);
    full.diagonal().setConstant(false);
    REQUIRE_THROWS_AS(roc_auc(full, {full}), InvalidArgument);
    REQUIRE_THROWS_AS(roc_auc(truth, {}), InvalidArgument);
    REQUIRE_THROWS_AS(roc_auc(truth, {BoolMatrix::Constant(3, 3, false)}),
                      InvalidArgument);
  }
}

TEST_CASE("rmse and f1 follow their definitions") {
  Matrix a(2, 2), b(2, 2);
  a << 1.0, 2.0, 3.0, 4.0;
  b = a;
  REQUIRE(rmse(a, b) == 0.0);
  b(0, 0) = 3.0;  // one entry off by 2: rmse = sqrt(4/4) = 1
  REQUIRE(rmse(a, b) == Catch::Approx(1.0));
  REQUIRE_THROWS_AS(rmse(a, Matrix::Zero(2, 3)), InvalidArgument);

  const Vector u = (Vector(3) << 1.0, 2.0, 3.0).finished();
  REQUIRE(rmse(u, u) == 0.0);

  // 2 true positives, 1 false positive, 1 false negative -> 2/3.
  BoolMatrix truth = BoolMatrix::Constant(4, 4, false);
  BoolMatrix sel = truth;
  auto edge = [](BoolMatrix& m, Index k, Index l) {
    m(k, l) = m(l, k) = true;
  };
  edge(truth, 0, 1);
  edge(truth, 0, 2);
  edge(truth, 1, 2);
  edge(sel, 0, 1);
  edge(sel, 0, 2);
  edge(sel, 2, 3);
  REQUIRE(f1(sel, truth) == Catch::Approx(2.0 / 3.0));

  REQUIRE(f1(truth, truth) == 1.0);
  const BoolMatrix none = BoolMatrix::Constant(4, 4, false);
  REQUIRE(f1(none, truth) == 0.0);
  REQUIRE(f1(none, none) == 0.0);  // 0/0 convention
  REQUIRE_THROWS_AS(f1(none, BoolMatrix::Constant(3, 3, false)),
                    InvalidArgument);
}

TEST_CASE("corrupt_clustering changes exactly the requested count") {
  std::vector<int> labels(100);
  for (int j = 0; j < 100; ++j) labels[static_cast<std::size_t>(j)] = j % 4;
  const ClusterAssignment c(labels, 4);

  REQUIRE(corrupt_clustering(c, 0.0, 7) == c);

  const ClusterAssignment ten = corrupt_clustering(c, 0.1, 7);
  int diff = 0;
  for (int j = 0; j < 100; ++j)
    diff += ten.label(j) != c.label(j) ? 1 : 0;
  REQUIRE(diff == 10);
  for (int j = 0; j < 100; ++j) REQUIRE(ten.label(j) < 4);

  // Deterministic in the seed.
  REQUIRE(corrupt_clustering(c, 0.1, 7) == ten);
  REQUIRE_FALSE(corrupt_clustering(c, 0.1, 8) == ten);

  const ClusterAssignment two({0, 1, 0, 1}, 2);
  const ClusterAssignment flipped = corrupt_clustering(two, 1.0, 3);
  for (int j = 0; j < 4; ++j) REQUIRE(flipped.label(j) == 1 - two.label(j));

  REQUIRE_THROWS_AS(corrupt_clustering(c, 1.5, 0), InvalidArgument);
  const ClusterAssignment solo({0, 0, 0}, 1);
  REQUIRE_THROWS_AS(corrupt_clustering(solo, 0.5, 0), InvalidArgument);
  REQUIRE(corrupt_clustering(solo, 0.0, 0) == solo);
}
