#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "comprer/array.hpp"

namespace comprer {

/// Five-point central differences
///   (f(θ−2h) − 8f(θ−h) + 8f(θ+h) − f(θ+2h)) / 12h
/// for every coordinate of every parameter array. The two-point form leaves
/// too much truncation error where normalized embeddings are short and the
/// logits curve hard. With step <= 0 the step adapts per coordinate as
/// cbrt(eps)·max(1, |θ_i|).
///
/// The oracle never touches a tape: it only calls f.
inline std::vector<Array> finite_difference_gradient(const std::function<double(const std::vector<Array>&)>& f,
                                                     std::vector<Array> params, double step = 0.0) {
  const double base_step = std::cbrt(std::numeric_limits<double>::epsilon());
  std::vector<Array> grads;
  grads.reserve(params.size());
  for (auto& p : params) grads.emplace_back(p.shape());
  for (std::size_t a = 0; a < params.size(); ++a) {
    for (std::size_t i = 0; i < params[a].size(); ++i) {
      const double original = params[a][i];
      const double h = step > 0.0 ? step : base_step * std::max(1.0, std::abs(original));
      auto at = [&](double offset) {
        params[a][i] = original + offset;
        return f(params);
      };
      const double m2 = at(-2.0 * h), m1 = at(-h), p1 = at(h), p2 = at(2.0 * h);
      params[a][i] = original;
      grads[a][i] = (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h);
    }
  }
  return grads;
}

struct GradientComparison {
  double worst_relative = 0.0;
  double worst_absolute = 0.0;
  std::size_t failures = 0;
  std::size_t checked = 0;
  bool ok() const { return failures == 0; }
};

/// An entry passes when |a − b| <= abs_floor or |a − b| / max(|a|, |b|) < rel_tol.
inline GradientComparison compare_gradients(const std::vector<Array>& analytic, const std::vector<Array>& numeric,
                                            double rel_tol = 1e-5, double abs_floor = 1e-8) {
  GradientComparison out;
  for (std::size_t a = 0; a < analytic.size(); ++a) {
    for (std::size_t i = 0; i < analytic[a].size(); ++i) {
      const double x = analytic[a][i];
      const double y = numeric[a][i];
      const double diff = std::abs(x - y);
      const double rel = diff / std::max({std::abs(x), std::abs(y), std::numeric_limits<double>::min()});
      ++out.checked;
      if (diff > abs_floor) {
        out.worst_relative = std::max(out.worst_relative, rel);
        if (rel >= rel_tol) ++out.failures;
      }
      out.worst_absolute = std::max(out.worst_absolute, diff);
    }
  }
  return out;
}

}  // namespace comprer
