#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

namespace comprer {

template <class DerivedL, class DerivedS>
double roc_auc(const Eigen::MatrixBase<DerivedL>& labels, const Eigen::MatrixBase<DerivedS>& scores) {
  if (labels.size() != scores.size()) throw DimensionError("roc_auc: labels and scores differ in length");
  const auto n = static_cast<std::size_t>(labels.size());
  const auto label = labels.reshaped();
  const auto score = scores.reshaped();

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return score(static_cast<Eigen::Index>(a)) < score(static_cast<Eigen::Index>(b));
  });

  double positives = 0.0;
  double rank_sum = 0.0;  // sum of midranks of the positives (1-based)
  for (std::size_t start = 0; start < n;) {
    std::size_t end = start + 1;
    const auto value = score(static_cast<Eigen::Index>(order[start]));
    while (end < n && score(static_cast<Eigen::Index>(order[end])) == value) ++end;
    const double midrank = 0.5 * static_cast<double>(start + 1 + end);
    for (std::size_t i = start; i < end; ++i) {
      if (label(static_cast<Eigen::Index>(order[i])) > 0) {
        positives += 1.0;
        rank_sum += midrank;
      }
    }
    start = end;
  }
  const double negatives = static_cast<double>(n) - positives;
  if (positives == 0.0 || negatives == 0.0) throw DegenerateInputError("roc_auc: labels contain a single class");
  return (rank_sum - positives * (positives + 1.0) / 2.0) / (positives * negatives);
}

}  // namespace comprer
