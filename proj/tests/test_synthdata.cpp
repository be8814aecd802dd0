#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <Eigen/Cholesky>
#include <numeric>
#include <set>

#include "comprer/metrics.hpp"
#include "comprer/synthdata.hpp"
#include "support.hpp"

using namespace comprer;

namespace {

GeneratorConfig small_config() {
  GeneratorConfig c;
  c.n_participants = 120;
  c.second_visit_fraction = 0.5;
  c.missing_probability = 0.3;
  return c;
}

// Which streams a sample (or a participant's pair of visits) qualifies for,
// written from the presence masks alone.
bool wants_fc(const CohortSample& s) { return s.presence().any_fundus() && s.presence().carotid; }
bool wants_eyes(const CohortSample& s) { return s.presence().fundus_right && s.presence().fundus_left; }

std::size_t kept_per_epoch(std::size_t n, std::size_t batch) {
  if (n < 2) return 0;
  const std::size_t rem = n % batch;
  return rem == 1 ? n - 1 : n;
}

}  // namespace

TEST_CASE("split arithmetic and disjointness") {
  std::vector<std::size_t> ids(100);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  const CohortSplit s = split_participants(ids, 3);
  CHECK(s.train.size() == 64);
  CHECK(s.validation.size() == 16);
  CHECK(s.test.size() == 20);
  std::set<std::size_t> all;
  for (const auto* part : {&s.train, &s.validation, &s.test}) all.insert(part->begin(), part->end());
  CHECK(all.size() == 100);

  const CohortSplit again = split_participants(ids, 3);
  CHECK(again.train == s.train);
  CHECK(again.test == s.test);
  CHECK_FALSE(split_participants(ids, 4).test == s.test);

  CHECK_THROWS_AS(split_participants({1, 2, 3}, 0), ContractError);
}

TEST_CASE("split keeps every visit of a participant together") {
  const auto samples = generate_cohort(80, small_config(), 5);
  const CohortSplit s = split_cohort(samples, 5);
  std::map<std::size_t, int> where;
  for (std::size_t pid : s.train) where[pid] = 0;
  for (std::size_t pid : s.validation) where[pid] = 1;
  for (std::size_t pid : s.test) where[pid] = 2;
  for (const auto& sample : samples) CHECK(where.count(sample.participant_id) == 1);
}

TEST_CASE("generation is deterministic and labels follow the stated rules") {
  const GeneratorConfig c = small_config();
  const auto a = generate_cohort(60, c, 7);
  const auto b = generate_cohort(60, c, 7);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].participant_id == b[i].participant_id);
    CHECK(a[i].measures == b[i].measures);
    CHECK(a[i].fundus_right.has_value() == b[i].fundus_right.has_value());
    if (a[i].carotid) CHECK(*a[i].carotid == *b[i].carotid);
  }
  for (const auto& s : a) {
    CHECK(s.presence().any());
    CHECK(s.measures.all_finite());
    CHECK((s.diagnosis == 0 || s.diagnosis == 1));
    if (s.diagnosis == 1) CHECK(s.prognosis == -1);
    if (s.diagnosis == 0) CHECK((s.prognosis == 0 || s.prognosis == 1));
    for (ImageField f : {ImageField::fundus_right, ImageField::fundus_left, ImageField::carotid}) {
      if (const auto& img = s.field(f)) {
        CHECK(img->shape() == Shape{3, 16, 16});
        CHECK(img->values().minCoeff() >= 0.0);
        CHECK(img->values().maxCoeff() <= 1.0);
      }
    }
  }
  CHECK_THROWS_AS(generate_cohort(5, c, 1), ConfigError);
}

TEST_CASE("latent drift keeps visits correlated") {
  GeneratorConfig c = small_config();
  c.second_visit_fraction = 1.0;
  const auto samples = generate_cohort(200, c, 2);
  double num = 0, d1 = 0, d2 = 0;
  for (std::size_t i = 0; i + 1 < samples.size(); ++i) {
    if (samples[i].participant_id != samples[i + 1].participant_id) continue;
    const VectorXd& z1 = samples[i].latent.values();
    const VectorXd& z2 = samples[i + 1].latent.values();
    num += z1.dot(z2);
    d1 += z1.squaredNorm();
    d2 += z2.squaredNorm();
  }
  // Expected correlation 1 / sqrt(1 + drift²).
  CHECK(num / std::sqrt(d1 * d2) == doctest::Approx(1.0 / std::sqrt(1.09)).epsilon(0.05));
}

TEST_CASE("zero drift renders the same latent at both visits") {
  GeneratorConfig c = small_config();
  c.drift = 0.0;
  c.tile_nuisance = 0.0;  // per-image nuisance would differ between visits
  c.missing_probability = 0.0;
  c.second_visit_fraction = 1.0;
  c.pixel_noise = 0.0;
  const auto exact = generate_cohort(12, c, 4);
  c.pixel_noise = 0.05;
  const auto noisy = generate_cohort(12, c, 4);
  REQUIRE(exact.size() == 24);
  for (std::size_t i = 0; i < exact.size(); i += 2) {
    CHECK(exact[i].latent == exact[i + 1].latent);
    CHECK(*exact[i].carotid == *exact[i + 1].carotid);
    CHECK(*exact[i].fundus_left == *exact[i + 1].fundus_left);
    const double rms = std::sqrt((noisy[i].carotid->values() - noisy[i + 1].carotid->values()).squaredNorm() / 768.0);
    CHECK(rms < 0.05 * std::sqrt(2.0) * 1.2);
  }
}

TEST_CASE("no missingness gives full presence") {
  GeneratorConfig c = small_config();
  c.missing_probability = 0.0;
  for (const auto& s : generate_cohort(40, c, 1)) {
    CHECK(s.presence().fundus_right);
    CHECK(s.presence().fundus_left);
    CHECK(s.presence().carotid);
  }
}

TEST_CASE("measures are linear in the latent") {
  GeneratorConfig c;
  const auto samples = generate_cohort(300, c, 9);
  const auto n = static_cast<Eigen::Index>(samples.size());
  MatrixXd Z(n, 9), Y(n, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    Z.row(i) << samples[static_cast<std::size_t>(i)].latent.values().transpose(), 1.0;
    Y.row(i) = samples[static_cast<std::size_t>(i)].measures.values().transpose();
  }
  const MatrixXd coef = (Z.transpose() * Z).ldlt().solve(Z.transpose() * Y);
  const MatrixXd fit = Z * coef;
  for (Eigen::Index m = 0; m < 4; ++m) CHECK(r_squared(Y.col(m), fit.col(m)) > 0.95);
}

TEST_CASE("ridge regression from fundus pixels recovers the latent") {
  const Cohort cohort = make_cohort(GeneratorConfig{}, 3);
  auto design = [&](const std::vector<std::size_t>& ids, MatrixXd& X, MatrixXd& Z) {
    const auto picked = cohort.select(ids);
    std::vector<std::pair<const Array*, const Array*>> pairs;
    for (const auto& s : picked) {
      if (auto f = s.representative_fundus()) pairs.push_back({&*s.field(*f), &s.latent});
    }
    X.resize(static_cast<Eigen::Index>(pairs.size()), 768 + 1);
    Z.resize(static_cast<Eigen::Index>(pairs.size()), 8);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      X.row(static_cast<Eigen::Index>(i)) << pairs[i].first->values().transpose(), 1.0;
      Z.row(static_cast<Eigen::Index>(i)) = pairs[i].second->values().transpose();
    }
  };
  MatrixXd Xtr, Ztr, Xte, Zte;
  std::vector<std::size_t> fit_ids = cohort.split.train;
  fit_ids.insert(fit_ids.end(), cohort.split.validation.begin(), cohort.split.validation.end());
  design(fit_ids, Xtr, Ztr);
  design(cohort.split.test, Xte, Zte);
  MatrixXd gram = Xtr.transpose() * Xtr;
  gram.diagonal().array() += 1.0;
  const MatrixXd W = gram.ldlt().solve(Xtr.transpose() * Ztr);
  const MatrixXd pred = Xte * W;
  CHECK(r_squared(Zte, pred) > 0.5);
}

TEST_CASE("stream qualification is exact under heavy missingness") {
  const auto samples = generate_cohort(150, small_config(), 11);
  std::map<std::size_t, std::vector<std::size_t>> by_pid;
  for (std::size_t i = 0; i < samples.size(); ++i) by_pid[samples[i].participant_id].push_back(i);

  std::set<std::size_t> fc_expected, eye_expected, fv_expected, cv_expected;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (wants_fc(samples[i])) fc_expected.insert(i);
    if (wants_eyes(samples[i])) eye_expected.insert(i);
  }
  for (const auto& [pid, idx] : by_pid) {
    if (idx.size() != 2) continue;
    if (samples[idx[0]].presence().any_fundus() && samples[idx[1]].presence().any_fundus()) fv_expected.insert(pid);
    if (samples[idx[0]].presence().carotid && samples[idx[1]].presence().carotid) cv_expected.insert(pid);
  }

  auto left_set = [&](Stream s) {
    std::set<std::size_t> out;
    for (const PairRef& p : qualifying_pairs(samples, s)) {
      const bool cross = s == Stream::fv || s == Stream::cv;
      CHECK(samples[p.left_sample].participant_id == samples[p.right_sample].participant_id);
      CHECK(samples[p.left_sample].field(p.left_field).has_value());
      CHECK(samples[p.right_sample].field(p.right_field).has_value());
      if (cross) {
        CHECK(samples[p.left_sample].visit == Visit::t);
        CHECK(samples[p.right_sample].visit == Visit::t_prime);
        out.insert(samples[p.left_sample].participant_id);
      } else {
        CHECK(p.left_sample == p.right_sample);
        out.insert(p.left_sample);
      }
    }
    return out;
  };
  CHECK(left_set(Stream::fc) == fc_expected);
  CHECK(left_set(Stream::eyes) == eye_expected);
  CHECK(left_set(Stream::fv) == fv_expected);
  CHECK(left_set(Stream::cv) == cv_expected);
  CHECK_FALSE(fv_expected.empty());
  CHECK_FALSE(cv_expected.empty());
}

TEST_CASE("single visits with full presence leave the visit streams empty") {
  GeneratorConfig c = small_config();
  c.missing_probability = 0.0;
  c.second_visit_fraction = 0.0;
  const auto samples = generate_cohort(20, c, 1);
  StreamScheduler sched(samples, 4, 1);
  CHECK(sched.empty(Stream::fv));
  CHECK(sched.empty(Stream::cv));
  CHECK(sched.pairs(Stream::fc).size() == 20);
  CHECK(sched.pairs(Stream::eyes).size() == 20);
  CHECK_FALSE(sched.next(Stream::fv).has_value());
  const auto step = sched.next_step();
  CHECK(step[0].has_value());
  CHECK_FALSE(step[1].has_value());
}

TEST_CASE("a sample without carotid only feeds fundus streams") {
  GeneratorConfig c = small_config();
  c.missing_probability = 0.0;
  c.second_visit_fraction = 1.0;
  auto samples = generate_cohort(10, c, 2);
  samples[0].carotid.reset();  // participant 0, visit t
  for (Stream s : kAllStreams) {
    bool used = false;
    for (const PairRef& p : qualifying_pairs(samples, s)) used = used || p.left_sample == 0 || p.right_sample == 0;
    CHECK(used == (s == Stream::fv || s == Stream::eyes));
  }
}

TEST_CASE("per-epoch conservation and batch integrity") {
  const auto samples = generate_cohort(150, small_config(), 13);
  for (std::size_t batch : {2, 5, 9}) {
    StreamScheduler sched(samples, batch, 17);
    for (Stream s : kAllStreams) {
      const std::size_t n = sched.pairs(s).size();
      for (std::size_t epoch = 0; epoch < 3; ++epoch) {
        std::size_t total = 0;
        std::set<std::size_t> seen;
        for (const auto& b : sched.epoch_batches(s, epoch)) {
          CHECK(b.size() >= 2);
          CHECK(b.size() <= batch);
          total += b.size();
          seen.insert(b.begin(), b.end());
        }
        CHECK(total == kept_per_epoch(n, batch));
        CHECK(seen.size() == total);
      }
    }
    // Materialized batches pair rows of the same participant.
    for (int step = 0; step < 20; ++step) {
      for (const auto& b : sched.next_step()) {
        if (!b) continue;
        CHECK(b->left.dim(0) == b->size());
        CHECK(b->right.dim(0) == b->size());
        for (std::size_t i = 0; i < b->size(); ++i) {
          if (b->stream == Stream::fv || b->stream == Stream::cv) {
            CHECK(b->left_visits[i] == Visit::t);
            CHECK(b->right_visits[i] == Visit::t_prime);
          } else {
            CHECK(b->left_visits[i] == b->right_visits[i]);
          }
        }
      }
    }
  }
}

TEST_CASE("scheduler contracts and determinism") {
  const auto samples = generate_cohort(40, small_config(), 1);
  CHECK_THROWS_AS(StreamScheduler(samples, 1, 0), ContractError);
  CHECK_THROWS_AS(StreamScheduler({}, 4, 0), ContractError);
  StreamScheduler a(samples, 4, 3), b(samples, 4, 3);
  for (int i = 0; i < 30; ++i) {
    const auto x = a.next(Stream::fc);
    const auto y = b.next(Stream::fc);
    CHECK(x->participant_ids == y->participant_ids);
  }
  // Cursors restore the position exactly.
  StreamScheduler c(samples, 4, 3);
  c.set_cursors(a.cursors());
  CHECK(a.next(Stream::fc)->participant_ids == c.next(Stream::fc)->participant_ids);
}

TEST_CASE("cohort directory round trip") {
  testing::TempDir dir("cohort_io");
  GeneratorConfig c = small_config();
  c.n_participants = 30;
  const Cohort cohort = make_cohort(c, 21);
  save_cohort(dir.path(), cohort);
  CHECK(std::filesystem::exists(dir / "cohort.json"));
  CHECK(std::filesystem::exists(dir.path() / "train" / "samples.csv"));
  const Cohort back = load_cohort(dir.path());
  CHECK(back.seed == cohort.seed);
  CHECK(back.split.test == cohort.split.test);
  REQUIRE(back.samples.size() == cohort.samples.size());
  for (std::size_t i = 0; i < back.samples.size(); ++i) {
    const auto& x = back.samples[i];
    const auto& y = cohort.samples[i];
    CHECK(x.participant_id == y.participant_id);
    CHECK(x.visit == y.visit);
    CHECK(x.measures == y.measures);
    CHECK(x.latent == y.latent);
    CHECK(x.diagnosis == y.diagnosis);
    CHECK(x.prognosis == y.prognosis);
    for (ImageField f : {ImageField::fundus_right, ImageField::fundus_left, ImageField::carotid}) {
      REQUIRE(x.field(f).has_value() == y.field(f).has_value());
      if (x.field(f)) CHECK(*x.field(f) == *y.field(f));
    }
  }
  CHECK_THROWS_AS(load_cohort(dir / "missing"), IoError);
}

TEST_CASE("generator config validation") {
  GeneratorConfig c;
  c.missing_probability = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  nlohmann::json j = GeneratorConfig{};
  j["unknown_key"] = 1;
  CHECK_THROWS_AS(j.get<GeneratorConfig>(), ConfigError);
  nlohmann::json ok = GeneratorConfig{};
  CHECK(nlohmann::json(ok.get<GeneratorConfig>()) == ok);
}
