#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "comprer/losses.hpp"
#include "support.hpp"

using namespace comprer;
using testing::check_graph;
using testing::random_normal;

namespace {

EmbeddingBatch batch(const Array& a, Modality m = Modality::fundus, View v = View::plain) { return {a, m, v}; }

// Loop-level InfoNCE, one direction.
double naive_contrastive(const Array& u, const Array& v, double tau) {
  const std::size_t n = u.dim(0), d = u.dim(1);
  auto norm = [&](const Array& a, std::size_t r) {
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) s += a[r * d + c] * a[r * d + c];
    return std::sqrt(s);
  };
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logit(n);
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += u[i * d + c] * v[j * d + c];
      logit[j] = dot / (norm(u, i) * norm(v, j)) / tau;
    }
    double z = 0;
    for (double l : logit) z += std::exp(l);
    total += std::log(z) - logit[i];
  }
  return total / static_cast<double>(n);
}

}  // namespace

TEST_CASE("contrastive loss matches a loop-level oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Array u = random_normal({6, 5}, seed);
    const Array v = random_normal({6, 5}, seed + 100);
    const double tau = 0.07 + 0.1 * static_cast<double>(seed);
    const double oracle = naive_contrastive(u, v, tau);
    CHECK(contrastive_loss(batch(u), batch(v), {tau}) == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(clip_loss(batch(u), batch(v), {tau}) ==
          doctest::Approx(0.5 * (oracle + naive_contrastive(v, u, tau))).epsilon(1e-12));
  }
}

TEST_CASE("equal similarities give ln N") {
  for (std::size_t n : {2, 4, 8}) {
    const Array u = Array::full({n, 3}, 0.5);
    CHECK(std::abs(clip_loss(batch(u), batch(u), {0.07}) - std::log(static_cast<double>(n))) <= 1e-12);
  }
}

TEST_CASE("single pair has zero loss") {
  const Array u = random_normal({1, 4}, 3);
  const Array v = random_normal({1, 4}, 4);
  CHECK(contrastive_loss(batch(u), batch(v), {0.07}) == 0.0);
  CHECK(clip_loss(batch(u), batch(v), {0.07}) == 0.0);
}

TEST_CASE("loss ignores per-batch positive scaling and is swap symmetric") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Array u = random_normal({7, 6}, seed);
    const Array v = random_normal({7, 6}, seed + 50);
    Array su = u, sv = v;
    su.values() *= 0.3 + static_cast<double>(seed);
    sv.values() *= 17.0 / (1.0 + static_cast<double>(seed));
    const double base = clip_loss(batch(u), batch(v), {0.07});
    CHECK(std::abs(clip_loss(batch(su), batch(sv), {0.07}) - base) <= 1e-10);
    CHECK(clip_loss(batch(v), batch(u), {0.07}) == base);
  }
}

TEST_CASE("matched identical embeddings push the loss toward zero as tau shrinks") {
  Array u({4, 4});
  for (std::size_t i = 0; i < 4; ++i) u[i * 4 + i] = 1.0;
  CHECK(clip_loss(batch(u), batch(u), {0.01}) < 1e-20);
  CHECK(clip_loss(batch(u), batch(u), {1.0}) > 0.5);
}

TEST_CASE("contract violations") {
  const Array a = random_normal({3, 4}, 1);
  CHECK_THROWS_AS(clip_loss(batch(a), batch(random_normal({2, 4}, 2)), {0.07}), DimensionError);
  CHECK_THROWS_AS(clip_loss(batch(a), batch(a), {0.0}), DomainError);
  CHECK_THROWS_AS(clip_loss(batch(random_normal({3, 1}, 3)), batch(random_normal({3, 1}, 4)), {0.07}), DimensionError);

  CHECK_THROWS_AS(instantiate_contrastive(Pairing::fc, batch(a, Modality::fundus), batch(a, Modality::fundus), {0.07}),
                  PairingError);
  CHECK_THROWS_AS(instantiate_contrastive(Pairing::fv, batch(a, Modality::fundus, View::visit_t_prime),
                                          batch(a, Modality::fundus, View::visit_t), {0.07}),
                  PairingError);
  CHECK_THROWS_AS(instantiate_contrastive(Pairing::cv, batch(a, Modality::fundus, View::visit_t),
                                          batch(a, Modality::fundus, View::visit_t_prime), {0.07}),
                  PairingError);
  CHECK_THROWS_AS(instantiate_contrastive(Pairing::eye, batch(a, Modality::fundus, View::eye_left),
                                          batch(a, Modality::fundus, View::eye_right), {0.07}),
                  PairingError);
  CHECK_NOTHROW(instantiate_contrastive(Pairing::eye, batch(a, Modality::fundus, View::eye_right),
                                        batch(a, Modality::fundus, View::eye_left), {0.07}));
  CHECK_NOTHROW(instantiate_contrastive(Pairing::fc, batch(a, Modality::fundus, View::visit_t),
                                        batch(a, Modality::carotid, View::visit_t), {0.07}));
}

TEST_CASE("loss gradients match finite differences, including a learned temperature") {
  const Array u = random_normal({5, 4}, 10);
  const Array v = random_normal({5, 4}, 11);
  CHECK(check_graph([](Tape&, const std::vector<Var>& x) { return clip_loss(x[0], x[1], TemperatureNode::constant(0.2)); },
                    {u, v})
            .ok());
  CHECK(check_graph([](Tape&, const std::vector<Var>& x) { return clip_loss(x[0], x[1], TemperatureNode::learned(x[2])); },
                    {u, v, Array::full({1}, std::log(0.3))})
            .ok());
  CHECK(check_graph([](Tape&, const std::vector<Var>& x) { return prediction_mse(x[0], x[1]); }, {u, v}).ok());
}

TEST_CASE("mse terms") {
  Array a({2, 2}, VectorXd::Zero(4));
  Array b({2, 2});
  b.values() << 1, -1, 2, 0;
  CHECK(prediction_mse(a, b) == doctest::Approx(1.5));
  CHECK(reconstruction_mse(b, b) == 0.0);
  CHECK_THROWS_AS(reconstruction_mse(a, Array({4})), DimensionError);
}

TEST_CASE("total loss sums weighted terms in canonical order") {
  const std::vector<std::pair<Term, double>> terms = {
      {Term::rec_c, 8.0}, {Term::contr_fc, 1.0}, {Term::pred_r, 5.0}, {Term::contr_eye, 4.0},
      {Term::rec_f, 7.0}, {Term::contr_cv, 3.0}, {Term::pred_c, 6.0}, {Term::contr_fv, 2.0}};
  LossWeights w;
  w.rec_f = 0.5;
  const LossReport r = total_loss(terms, w);
  REQUIRE(r.terms.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(r.terms[i].first == kAllTerms[i]);
  CHECK(r.total == 1.0 + 2 + 3 + 4 + 5 + 6 + 0.5 * 7 + 8);
  CHECK(r.recompute_total(w) == r.total);
  CHECK(r.value(Term::pred_c) == 6.0);

  const LossReport no_rec = total_loss(terms, w.paper_total());
  CHECK(no_rec.total == 1.0 + 2 + 3 + 4 + 5 + 6);

  const std::vector<std::pair<Term, double>> dup = {{Term::rec_c, 1.0}, {Term::rec_c, 2.0}};
  CHECK_THROWS_AS(total_loss(dup, w), ContractError);
  CHECK_THROWS_AS(total_loss(std::span<const std::pair<Term, double>>{}, w), ContractError);

  LossWeights negative;
  negative.cv = -1.0;
  CHECK_THROWS_AS(negative.validate(), ConfigError);
}

TEST_CASE("loss reports round-trip through json") {
  const std::vector<std::pair<Term, double>> terms = {{Term::contr_fc, 0.25}, {Term::pred_c, 1.5}};
  LossReport r = total_loss(terms, LossWeights{});
  r.step = 42;
  const LossReport back = LossReport::from_json(r.to_json());
  CHECK(back.step == 42);
  CHECK(back.total == r.total);
  CHECK(back.terms == r.terms);
  for (Term t : kAllTerms) CHECK(parse_term(term_name(t)) == t);
}
