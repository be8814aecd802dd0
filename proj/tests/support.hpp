#pragma once

// Helpers shared by the unit-test binaries.

#include <filesystem>
#include <functional>
#include <string>
#include <unistd.h>
#include <vector>

#include "comprer/gradcheck.hpp"
#include "comprer/ops.hpp"
#include "comprer/rng.hpp"

namespace testing {

using namespace comprer;

inline Array random_array(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Array a(std::move(shape));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = lo + (hi - lo) * rng.uniform();
  return a;
}

inline Array random_normal(Shape shape, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  Array a(std::move(shape));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = sd * rng.normal();
  return a;
}

using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Tape gradient of a scalar graph against central finite differences.
inline GradientComparison check_graph(const GraphFn& build, const std::vector<Array>& params, double rel_tol = 1e-5,
                                      double abs_floor = 1e-8) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(tape.parameter(p));
  const Var root = build(tape, vars);
  const Gradients g = tape.backward(root);
  std::vector<Array> analytic;
  for (const auto& v : vars) analytic.push_back(g[v]);

  auto f = [&](const std::vector<Array>& values) {
    Tape t;
    std::vector<Var> vs;
    for (const auto& v : values) vs.push_back(t.constant(v));
    return build(t, vs).value().item();
  };
  return compare_gradients(analytic, finite_difference_gradient(f, params), rel_tol, abs_floor);
}

/// Fresh per-process scratch directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag)
      : path_(std::filesystem::temp_directory_path() / ("comprer_" + tag + "_" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
