#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "comprer/array.hpp"

namespace comprer {

enum class TopKMode {
  row,        ///< each row queries the columns, as the metric is usually stated
  symmetric,  ///< mean of the row-wise and column-wise scores
};

/// Cosine similarity of every row of `a` with every row of `b`, via
/// l2-normalized rows. Zero rows raise DegenerateInputError.
template <class DerivedA, class DerivedB>
RowMatrix<typename DerivedA::Scalar> cosine_similarity(const Eigen::MatrixBase<DerivedA>& a,
                                                       const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  if (a.cols() != b.cols()) throw DimensionError("cosine_similarity: embedding widths differ");
  const Vector<Scalar> na = a.rowwise().norm();
  const Vector<Scalar> nb = b.rowwise().norm();
  if ((na.array() == Scalar(0)).any() || (nb.array() == Scalar(0)).any()) {
    throw DegenerateInputError("cosine_similarity: zero-norm embedding");
  }
  const RowMatrix<Scalar> ua = na.cwiseInverse().asDiagonal() * a;
  const RowMatrix<Scalar> ub = nb.cwiseInverse().asDiagonal() * b;
  return ua * ub.transpose();
}

namespace detail {

/// Position of the diagonal entry of row i in the descending order of that
/// row, ties going to the lower column index.
template <class Derived>
Eigen::Index diagonal_rank(const Eigen::MatrixBase<Derived>& sim, Eigen::Index i) {
  const auto target = sim(i, i);
  Eigen::Index rank = 0;
  for (Eigen::Index j = 0; j < sim.cols(); ++j) {
    if (sim(i, j) > target || (sim(i, j) == target && j < i)) ++rank;
  }
  return rank;
}

template <class Derived>
double row_top_k(const Eigen::MatrixBase<Derived>& sim, Eigen::Index k) {
  Eigen::Index correct = 0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    if (diagonal_rank(sim, i) < k) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(sim.rows());
}

}  // namespace detail

/// Fraction of rows whose diagonal entry is among the k largest entries of
/// that row. Requires a square matrix and 1 <= k <= N.
template <class Derived>
double top_k_accuracy(const Eigen::MatrixBase<Derived>& sim, std::size_t k, TopKMode mode = TopKMode::row) {
  if (sim.rows() != sim.cols() || sim.rows() == 0) throw DimensionError("top_k_accuracy: similarity matrix must be square");
  const auto n = static_cast<std::size_t>(sim.rows());
  if (k < 1 || k > n) {
    throw ContractError("top_k_accuracy: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  const auto kk = static_cast<Eigen::Index>(k);
  const double rows = detail::row_top_k(sim, kk);
  if (mode == TopKMode::row) return rows;
  return 0.5 * (rows + detail::row_top_k(sim.transpose(), kk));
}

/// Top-K accuracy divided by its chance rate k/N; 1 means chance-level.
template <class Derived>
double multiplicative_top_k(const Eigen::MatrixBase<Derived>& sim, std::size_t k, TopKMode mode = TopKMode::row) {
  const double score = top_k_accuracy(sim, k, mode);
  return score * static_cast<double>(sim.rows()) / static_cast<double>(k);
}

/// 1 − SS_res/SS_tot, SS_tot about the mean of y. Constant y raises
/// DegenerateInputError.
template <class DerivedY, class DerivedP>
double r_squared(const Eigen::MatrixBase<DerivedY>& y, const Eigen::MatrixBase<DerivedP>& y_hat) {
  if (y.size() != y_hat.size()) throw DimensionError("r_squared: lengths differ");
  if (y.size() < 2) throw ContractError("r_squared: need at least two points");
  const double mu = y.template cast<double>().mean();
  const double ss_tot = (y.template cast<double>().array() - mu).square().sum();
  if (ss_tot == 0.0) throw DegenerateInputError("r_squared: target is constant");
  const double ss_res =
      (y.template cast<double>().reshaped() - y_hat.template cast<double>().reshaped()).squaredNorm();
  return 1.0 - ss_res / ss_tot;
}

/// Mann-Whitney AUC: (concordant + ½·tied) / (n_pos·n_neg), computed from
/// midranks in O(N log N). Labels are 0/1; single-class input raises
/// DegenerateInputError.
template <class DerivedL, class DerivedS>
double roc_auc(const Eigen::MatrixBase<DerivedL>& labels, const Eigen::MatrixBase<DerivedS>& scores);

struct MetricReport {
  std::size_t step = 0;
  std::vector<std::size_t> k_values;
  std::map<std::size_t, double> top_k;
  std::map<std::size_t, double> mult_top_k;
  std::map<std::string, double> r2_per_measure;
  std::map<std::string, double> auc_per_label;
  /// Context values (eval-set size, reconstruction MSE, ...).
  std::map<std::string, double> scalars;

  nlohmann::json to_json() const;
  static MetricReport from_json(const nlohmann::json& j);
  /// Rows of "step,metric,key,value"; header included when requested.
  std::string to_csv(bool header = true) const;
};

/// Top-K and multiplicative Top-K for every k in k_values over the similarity
/// of paired embeddings (row i of a pairs with row i of b).
template <class DerivedA, class DerivedB>
void add_top_k(MetricReport& report, const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
               const std::vector<std::size_t>& k_values, TopKMode mode = TopKMode::row) {
  const auto sim = cosine_similarity(a, b);
  report.k_values = k_values;
  for (std::size_t k : k_values) {
    report.top_k[k] = top_k_accuracy(sim, k, mode);
    report.mult_top_k[k] = report.top_k[k] * static_cast<double>(sim.rows()) / static_cast<double>(k);
  }
  report.scalars["n_pairs"] = static_cast<double>(sim.rows());
}

}  // namespace comprer

#include "comprer/metrics_impl.hpp"
