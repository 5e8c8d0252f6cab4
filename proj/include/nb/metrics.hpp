#pragma once

// Evaluation metrics: adjusted Rand index over labelings, ROC/AUC over a
// support path, RMSE, F1 on edge sets, and controlled label corruption for
// robustness studies.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <unordered_map>
#include <vector>

#include "common.hpp"
#include "types.hpp"

namespace nb {

// Adjusted Rand index from the pair-counting contingency form; the
// degenerate denominator (both partitions trivial in the same way) is 1 by
// convention.
inline double ari(const std::vector<int>& a, const std::vector<int>& b) {
  require(a.size() == b.size(), "ari: labelings must have equal length");
  require(!a.empty(), "ari: empty labelings");
  auto compact = [](const std::vector<int>& v) {
    std::unordered_map<int, int> id;
    std::vector<int> out(v.size());
    for (std::size_t j = 0; j < v.size(); ++j) {
      auto [it, unused] = id.emplace(v[j], static_cast<int>(id.size()));
      out[j] = it->second;
    }
    return std::pair{out, static_cast<int>(id.size())};
  };
  const auto [la, ka] = compact(a);
  const auto [lb, kb] = compact(b);

  Eigen::MatrixXd table = Eigen::MatrixXd::Zero(ka, kb);
  for (std::size_t j = 0; j < la.size(); ++j)
    table(la[j], lb[j]) += 1.0;

  auto choose2 = [](double m) { return 0.5 * m * (m - 1.0); };
  double index = 0.0;
  for (Index r = 0; r < table.rows(); ++r)
    for (Index c = 0; c < table.cols(); ++c) index += choose2(table(r, c));
  double sum_a = 0.0, sum_b = 0.0;
  for (Index r = 0; r < table.rows(); ++r) sum_a += choose2(table.row(r).sum());
  for (Index c = 0; c < table.cols(); ++c) sum_b += choose2(table.col(c).sum());

  const double total = choose2(static_cast<double>(a.size()));
  const double expected = total > 0.0 ? sum_a * sum_b / total : 0.0;
  const double maximum = 0.5 * (sum_a + sum_b);
  if (maximum - expected == 0.0) return 1.0;
  return (index - expected) / (maximum - expected);
}

inline double ari(const ClusterAssignment& a, const ClusterAssignment& b) {
  return ari(a.labels(), b.labels());
}

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // sorted by (fpr, tpr), anchors included
  double auc = 0.0;
};

// TPR/FPR of each path support against the true support, compared on the
// strict upper triangle; the trapezoid AUC is anchored at (0,0) and (1,1).
inline RocCurve roc_auc(const BoolMatrix& truth,
                        const std::vector<BoolMatrix>& path) {
  require(truth.rows() == truth.cols(), "roc_auc: square truth required");
  require(!path.empty(), "roc_auc: empty path");
  const Index q = truth.rows();
  double positives = 0.0, negatives = 0.0;
  for (Index l = 1; l < q; ++l)
    for (Index k = 0; k < l; ++k) (truth(k, l) ? positives : negatives) += 1.0;
  require(positives > 0.0,
          "roc_auc: true support is empty, AUC undefined (no positives)");
  require(negatives > 0.0,
          "roc_auc: true support is complete, AUC undefined (no negatives)");

  RocCurve curve;
  curve.points.push_back({0.0, 0.0});
  for (const BoolMatrix& sup : path) {
    require(sup.rows() == q && sup.cols() == q,
            "roc_auc: path support shape mismatch");
    double tp = 0.0, fp = 0.0;
    for (Index l = 1; l < q; ++l)
      for (Index k = 0; k < l; ++k) {
        if (!sup(k, l)) continue;
        (truth(k, l) ? tp : fp) += 1.0;
      }
    curve.points.push_back({fp / negatives, tp / positives});
  }
  curve.points.push_back({1.0, 1.0});
  std::sort(curve.points.begin(), curve.points.end(),
            [](const RocPoint& x, const RocPoint& y) {
              return x.fpr != y.fpr ? x.fpr < y.fpr : x.tpr < y.tpr;
            });
  for (std::size_t t = 1; t < curve.points.size(); ++t)
    curve.auc += 0.5 *
                 (curve.points[t].tpr + curve.points[t - 1].tpr) *
                 (curve.points[t].fpr - curve.points[t - 1].fpr);
  return curve;
}

template <typename A, typename B>
double rmse(const Eigen::MatrixBase<A>& estimate,
            const Eigen::MatrixBase<B>& truth) {
  require(estimate.rows() == truth.rows() && estimate.cols() == truth.cols(),
          "rmse: shape mismatch");
  require(estimate.size() > 0, "rmse: empty input");
  return std::sqrt((estimate.derived() - truth.derived())
                       .array()
                       .square()
                       .mean());
}

// F1 on strict-upper-triangle edge sets; the empty/empty case is 0 by the
// 0/0 -> 0 convention.
inline double f1(const BoolMatrix& selected, const BoolMatrix& truth) {
  require(selected.rows() == truth.rows() && selected.cols() == truth.cols(),
          "f1: shape mismatch");
  require(selected.rows() == selected.cols(), "f1: square inputs required");
  double tp = 0.0, fp = 0.0, fn = 0.0;
  for (Index l = 1; l < truth.cols(); ++l)
    for (Index k = 0; k < l; ++k) {
      if (selected(k, l) && truth(k, l)) tp += 1.0;
      if (selected(k, l) && !truth(k, l)) fp += 1.0;
      if (!selected(k, l) && truth(k, l)) fn += 1.0;
    }
  const double denom = 2.0 * tp + fp + fn;
  return denom == 0.0 ? 0.0 : 2.0 * tp / denom;
}

// Reassigns exactly round(error_rate * p) uniformly chosen variables to a
// uniformly chosen different cluster.
inline ClusterAssignment corrupt_clustering(const ClusterAssignment& c,
                                            double error_rate,
                                            std::uint64_t seed) {
  require(error_rate >= 0.0 && error_rate <= 1.0,
          "corrupt_clustering: error_rate must be in [0,1]");
  const int p = c.p(), q = c.q();
  const int k = static_cast<int>(std::llround(error_rate * p));
  if (k == 0) return c;
  require(q >= 2, "corrupt_clustering: q >= 2 required to change labels");

  Rng rng(seed);
  std::vector<int> order(static_cast<std::size_t>(p));
  std::iota(order.begin(), order.end(), 0);
  for (int t = 0; t < k; ++t)
    std::swap(order[static_cast<std::size_t>(t)],
              order[static_cast<std::size_t>(rng.uniform_int(t, p - 1))]);

  std::vector<int> labels = c.labels();
  for (int t = 0; t < k; ++t) {
    const int j = order[static_cast<std::size_t>(t)];
    int repl = rng.uniform_int(0, q - 2);
    if (repl >= labels[static_cast<std::size_t>(j)]) ++repl;
    labels[static_cast<std::size_t>(j)] = repl;
  }
  return ClusterAssignment(std::move(labels), q);
}

}  // namespace nb
