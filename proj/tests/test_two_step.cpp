#include <nb/two_step.hpp>

#include <catch2/catch_amalgamated.hpp>

#include "test_util.hpp"

using namespace nb;

namespace {

// Partition equality up to label names: canonical first-occurrence relabel.
std::vector<int> canonical(const std::vector<int>& labels) {
  std::vector<int> map(labels.size(), -1), out;
  out.reserve(labels.size());
  int next = 0;
  for (int l : labels) {
    if (map[static_cast<std::size_t>(l)] < 0)
      map[static_cast<std::size_t>(l)] = next++;
    out.push_back(map[static_cast<std::size_t>(l)]);
  }
  return out;
}

}  // namespace

TEST_CASE("mlr_fit solves the normal equations") {
  Rng rng(21);
  Matrix X = nbtest::random_matrix(rng, 40, 3);
  Matrix B = nbtest::random_matrix(rng, 3, 5);
  Matrix Y = X * B + 0.01 * nbtest::random_matrix(rng, 40, 5);
  Dataset data = Dataset::validated(Y, X);

  MlrFit fit = mlr_fit(data);
  // Oracle: (X'X)^-1 X'Y computed independently.
  Matrix oracle = (X.transpose() * X).ldlt().solve(X.transpose() * Y);
  REQUIRE((fit.B - oracle).cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE((fit.residuals - (Y - X * fit.B)).cwiseAbs().maxCoeff() == 0.0);

  // Intercept-only design: coefficients are the column means.
  Dataset dm = Dataset::validated(Y, Matrix::Ones(40, 1));
  MlrFit mfit = mlr_fit(dm);
  REQUIRE((mfit.B.row(0).transpose() - Y.colwise().mean().transpose())
              .cwiseAbs()
              .maxCoeff() < 1e-12);

  // Rank-deficient design errors out.
  Matrix Xdup(40, 2);
  Xdup.col(0) = X.col(0);
  Xdup.col(1) = 2.0 * X.col(0);
  REQUIRE_THROWS_AS(mlr_fit(Dataset::validated(Y, Xdup)), SingularInput);
}

TEST_CASE("kmeans recovers well-separated clusters") {
  Rng rng(22);
  const int per = 30;
  Matrix pts(2, 3 * per);
  std::vector<int> truth;
  const double cx[3] = {0.0, 10.0, -8.0}, cy[3] = {0.0, 9.0, 7.0};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < per; ++i) {
      pts(0, c * per + i) = cx[c] + 0.3 * rng.normal();
      pts(1, c * per + i) = cy[c] + 0.3 * rng.normal();
      truth.push_back(c);
    }

  KmeansResult res = kmeans(pts, 3, 99);
  REQUIRE(canonical(res.labels) == canonical(truth));

  // Deterministic under the same seed.
  KmeansResult res2 = kmeans(pts, 3, 99);
  REQUIRE(res.labels == res2.labels);
  REQUIRE(res.wcss == Catch::Approx(res2.wcss));

  // With k = N every point is its own cluster (no empty clusters).
  Matrix tiny = pts.leftCols(4);
  KmeansResult singletons = kmeans(tiny, 4, 1);
  std::vector<int> sorted = singletons.labels;
  std::sort(sorted.begin(), sorted.end());
  REQUIRE(sorted == std::vector<int>{0, 1, 2, 3});

  REQUIRE_THROWS_AS(kmeans(tiny, 5, 1), InvalidArgument);
}

TEST_CASE("spectral clustering splits a block covariance") {
  // Two blocks of strongly correlated variables.
  const int p = 8;
  Matrix gamma = Matrix::Identity(p, p);
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b) {
      if (a != b) {
        gamma(a, b) = 0.8;
        gamma(4 + a, 4 + b) = -0.7;  // correlations count through |.|
      }
    }
  ClusterAssignment cl = spectral_cluster_covariance(gamma, 2, 5);
  REQUIRE(canonical(cl.labels()) ==
          canonical(std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1}));
}

TEST_CASE("aggregate_covariance averages all ordered pairs") {
  Rng rng(23);
  Matrix gamma = nbtest::random_spd(rng, 6);
  ClusterAssignment cl({0, 1, 0, 2, 1, 0}, 3);
  Matrix st = aggregate_covariance(gamma, cl);

  // Brute-force oracle over index lists.
  std::vector<std::vector<int>> members{{0, 2, 5}, {1, 4}, {3}};
  for (int k = 0; k < 3; ++k)
    for (int l = 0; l < 3; ++l) {
      double acc = 0.0;
      for (int a : members[static_cast<std::size_t>(k)])
        for (int b : members[static_cast<std::size_t>(l)]) acc += gamma(a, b);
      acc /= static_cast<double>(members[static_cast<std::size_t>(k)].size() *
                                 members[static_cast<std::size_t>(l)].size());
      REQUIRE(st(k, l) == Catch::Approx(acc).margin(1e-12));
    }

  // PSD by congruence; diagonal positive here.
  REQUIRE_NOTHROW(llt_spd(st + 1e-12 * Matrix::Identity(3, 3), "st"));

  ClusterAssignment holey({0, 0, 2, 2, 2, 2}, 3);  // cluster 1 empty
  REQUIRE_THROWS_AS(aggregate_covariance(gamma, holey), InvalidArgument);
}

TEST_CASE("two_step_fit with known clustering estimates the block covariance") {
  Rng rng(24);
  nbtest::SmallInstance inst = nbtest::random_instance(rng, 400, 24, 3);
  FitResult fit = two_step_fit(inst.data, inst.clustering, 0.0);

  REQUIRE(fit.converged);
  REQUIRE(fit.clustering == inst.clustering);
  // sigma (inverse of the glasso precision at lambda 0) approximates the true
  // block covariance at this sample size.
  REQUIRE((fit.params.sigma - inst.params.sigma).cwiseAbs().maxCoeff() < 0.5);
  // Residual-variance proxy stays positive.
  REQUIRE((fit.params.noise.d.array() > 0.0).all());
  REQUIRE(fit.criteria.n_params > 0);
  REQUIRE(fit.criteria.icl == fit.criteria.bic);  // observed clusters

  // Consistency smoke test: quadrupling n should clearly shrink the error.
  auto sigma_err = [&](int n, std::uint64_t seed) {
    Rng r(seed);
    nbtest::SmallInstance big = inst;
    // Redraw data at the same parameters/clustering.
    Matrix X(n, 1);
    for (int i = 0; i < n; ++i) X(i, 0) = r.uniform(1.0, 10.0);
    const Matrix C = one_hot(inst.clustering);
    const Matrix L = llt_spd(inst.params.sigma, "sim").matrixL();
    Matrix W = nbtest::random_matrix(r, n, 3) * L.transpose();
    Matrix Y = X * inst.params.B + W * C.transpose();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < 24; ++j)
        Y(i, j) += r.normal(0.0, std::sqrt(inst.params.noise.d(j)));
    Dataset d = Dataset::validated(Y, X);
    FitResult f = two_step_fit(d, inst.clustering, 0.0);
    Matrix sigma_tilde = f.params.sigma;
    return (sigma_tilde - inst.params.sigma).norm() / inst.params.sigma.norm();
  };
  std::vector<double> small, large;
  for (std::uint64_t s = 0; s < 3; ++s) {
    small.push_back(sigma_err(250, 100 + s));
    large.push_back(sigma_err(1000, 200 + s));
  }
  REQUIRE(median(large) < 0.8 * median(small));
}

TEST_CASE("two_step_fit residual k-means recovers an easy clustering") {
  Rng rng(25);
  nbtest::SmallInstance inst = nbtest::random_instance(rng, 120, 30, 3);
  FitResult fit = two_step_fit(inst.data, 3, 0.0,
                               TwoStepClustering::residual_kmeans, 7);
  REQUIRE(canonical(fit.clustering.labels()) ==
          canonical(inst.clustering.labels()));

  // Large lambda yields an empty network and ebic == bic.
  FitResult sparse = two_step_fit(inst.data, inst.clustering, 1e3);
  REQUIRE(sparse.network.edge_count() == 0);
  REQUIRE(sparse.criteria.ebic == sparse.criteria.bic);
}

TEST_CASE("count_parameters arithmetic") {
  // diagonal observed model, q=3 dense omega, p=4, d_cov=1:
  // 4 (B) + 3 + 3 (omega upper with diagonal) + 4 (noise) = 14.
  Rng rng(26);
  nbtest::SmallInstance inst = nbtest::random_instance(rng, 30, 4, 3);
  FitResult fit = two_step_fit(inst.data, inst.clustering, 0.0);
  REQUIRE(fit.network.edge_count() == 3);  // dense at lambda 0
  REQUIRE(count_parameters(fit) == 14);

  // Latent + spherical + ZI variants shift the count by q-1 / p-1 / p.
  ModelKind kind{true, false, NoiseKind::diagonal};
  REQUIRE(count_parameters(fit, kind) == 16);
  kind = ModelKind{false, true, NoiseKind::spherical};
  REQUIRE(count_parameters(fit, kind) == 14 - 4 + 1 + 4);
}
