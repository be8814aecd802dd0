#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <fstream>

#include "fixtures.hpp"
#include "support.hpp"

using namespace comprer;
using testing::tiny_encoder;
using testing::tiny_generator;
using testing::tiny_train;

namespace {

struct Setup {
  Cohort cohort;
  TrainConfig config;
  TrainState state;
  std::vector<CohortSample> train;
};

Setup setup(std::size_t steps = 20, std::size_t n = 40) {
  Setup s{make_cohort(tiny_generator(n), 3), tiny_train(steps), {}, {}};
  s.state = init_train_state(s.cohort, s.config, resolve_encoder_config(tiny_encoder(), s.cohort, s.config));
  s.train = s.cohort.select(s.cohort.split.train);
  return s;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST_CASE("adamw first step has the closed form") {
  ParamStore params{{"a", Array({3}, VectorXd::LinSpaced(3, -1.0, 2.0))}, {"b", Array::full({2}, 0.5)}};
  ParamStore grads{{"a", Array({3}, Eigen::Vector3d(0.2, -4.0, 1e-3))}, {"b", Array::full({2}, -2.0)}};
  const ParamStore before = params;
  OptimState state = OptimState::zeros_like(params);
  const double lr = 0.01, wd = 0.1;
  adamw_step(params, grads, state, lr, wd, {"b"});
  CHECK(state.step == 1);
  const double eps = state.constants.eps;
  for (std::size_t i = 0; i < 3; ++i) {
    const double g = grads["a"][i], th = before.at("a")[i];
    // m̂ = g and v̂ = g² after one step.
    CHECK(params["a"][i] == doctest::Approx(th - lr * (g / (std::abs(g) + eps) + wd * th)).epsilon(1e-14));
    CHECK(state.m["a"][i] == doctest::Approx(0.1 * g));
    CHECK(state.v["a"][i] == doctest::Approx(0.001 * g * g));
  }
  for (std::size_t i = 0; i < 2; ++i) CHECK(params["b"][i] == doctest::Approx(0.5 + lr * 2.0 / (2.0 + eps)));

  // Second step with the same gradient: bias corrections still cancel.
  adamw_step(params, grads, state, lr, 0.0, {"b"});
  CHECK(params["b"][0] == doctest::Approx(0.5 + 2 * lr * 2.0 / (2.0 + eps)).epsilon(1e-12));
}

TEST_CASE("adamw decays weights even with a zero gradient") {
  ParamStore params{{"w", Array::full({2}, 2.0)}};
  ParamStore grads{{"w", Array({2})}};
  OptimState state = OptimState::zeros_like(params);
  adamw_step(params, grads, state, 0.1, 0.5);
  CHECK(params["w"][0] == doctest::Approx(2.0 * (1 - 0.05)));
}

TEST_CASE("adamw validates before touching anything") {
  ParamStore params{{"a", Array::full({2}, 1.0)}, {"b", Array::full({2}, 1.0)}};
  OptimState state = OptimState::zeros_like(params);
  const ParamStore before = params;
  ParamStore missing{{"a", Array({2})}};
  CHECK_THROWS_AS(adamw_step(params, missing, state, 0.1, 0.0), ContractError);
  ParamStore shaped{{"a", Array({2})}, {"b", Array({3})}};
  CHECK_THROWS_AS(adamw_step(params, shaped, state, 0.1, 0.0), DimensionError);
  ParamStore nan{{"a", Array::full({2}, 1.0)}, {"b", Array::full({2}, std::nan(""))}};
  CHECK_THROWS_AS(adamw_step(params, nan, state, 0.1, 0.0), NumericError);
  CHECK(params == before);
  CHECK(state.step == 0);
  CHECK(state.m.at("a").values().isZero());
}

TEST_CASE("step schedule") {
  CHECK(steplr(1.0, 0, 1000, 0.9) == 1.0);
  CHECK(steplr(1.0, 999, 1000, 0.9) == 1.0);
  CHECK(steplr(1.0, 1000, 1000, 0.9) == doctest::Approx(0.9));
  CHECK(steplr(2.0, 2500, 1000, 0.9) == doctest::Approx(2.0 * 0.81));
  CHECK_THROWS_AS(steplr(1.0, 1, 0, 0.9), ContractError);
}

TEST_CASE("train config json") {
  TrainConfig c;
  c.mode = TrainMode::mmcl;
  c.tau.learnable = true;
  nlohmann::json j = c;
  CHECK(nlohmann::json(j.get<TrainConfig>()) == j);
  CHECK(nlohmann::json{{"tau", 0.2}}.get<TrainConfig>().tau.tau == 0.2);
  CHECK_THROWS_AS(nlohmann::json({{"learning_rate", 1}}).get<TrainConfig>(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.steps = 0;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("measure standardization uses train statistics") {
  const Setup s = setup();
  const MeasureStats& st = s.state.stats;
  MatrixXd m(static_cast<Eigen::Index>(s.train.size()), 4);
  for (std::size_t i = 0; i < s.train.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = s.train[i].measures.values().transpose();
  const Array z = st.standardize(Array::from_matrix(m));
  for (Eigen::Index c = 0; c < 4; ++c) {
    CHECK(std::abs(z.matrix().col(c).mean()) < 1e-12);
    CHECK(std::sqrt(z.matrix().col(c).squaredNorm() / static_cast<double>(m.rows())) == doctest::Approx(1.0));
  }
}

TEST_CASE("comprer steps report all eight terms, mmcl only the multimodal one") {
  Setup s = setup();
  const StepBatches batches = testing::full_step(s.train, 4, 1);
  for (const auto& b : batches) REQUIRE(b.has_value());
  const LossReport full = evaluate_step_losses(s.state.params, batches, s.config, s.state.stats);
  REQUIRE(full.terms.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(full.terms[i].first == kAllTerms[i]);
  CHECK(full.total == doctest::Approx(full.recompute_total(s.config.loss_weights)).epsilon(1e-14));

  TrainConfig no_rec = s.config;
  no_rec.loss_weights = no_rec.loss_weights.paper_total();
  const LossReport six = evaluate_step_losses(s.state.params, batches, no_rec, s.state.stats);
  CHECK(six.terms.size() == 6);
  CHECK_FALSE(six.has(Term::rec_f));
  double sum6 = 0;
  for (const auto& [t, v] : six.terms) sum6 += v;
  CHECK(six.total == doctest::Approx(sum6).epsilon(1e-14));

  TrainConfig mmcl = s.config;
  mmcl.mode = TrainMode::mmcl;
  const LossReport one = evaluate_step_losses(s.state.params, batches, mmcl, s.state.stats);
  REQUIRE(one.terms.size() == 1);
  CHECK(one.terms[0].first == Term::contr_fc);
  CHECK(one.value(Term::contr_fc) == full.value(Term::contr_fc));

  StepBatches none{};
  CHECK_THROWS_AS(evaluate_step_losses(s.state.params, none, s.config, s.state.stats), ContractError);
}

TEST_CASE("eight-term gradient matches finite differences on a tiny model") {
  Setup s = setup(1, 24);
  const StepBatches batches = testing::full_step(s.train, 3, 2);
  const StepGradients sg = step_gradients(s.state.params, batches, s.config, s.state.stats);
  REQUIRE(sg.report.terms.size() == 8);
  std::vector<std::string> names;
  std::vector<Array> analytic, values;
  for (const auto& [name, g] : sg.grads) {
    names.push_back(name);
    analytic.push_back(g);
    values.push_back(s.state.params.values.at(name));
  }
  auto f = [&](const std::vector<Array>& v) {
    ModelParams q = s.state.params;
    for (std::size_t i = 0; i < names.size(); ++i) q.values[names[i]] = v[i];
    return evaluate_step_losses(q, batches, s.config, s.state.stats).total;
  };
  const auto numeric = finite_difference_gradient(f, values);
  const GradientComparison cmp = compare_gradients(analytic, numeric);
  INFO("worst relative " << cmp.worst_relative << " over " << cmp.checked);
  CHECK(cmp.ok());
}

TEST_CASE("training lowers the loss") {
  Setup s = setup(200, 80);
  const TrainResult r = train_loop(s.cohort, s.config, s.state.params.config);
  REQUIRE(r.losses.size() == 200);
  double first = 0, last = 0, rec_first = 0, rec_last = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    first += r.losses[i].total;
    last += r.losses[180 + i].total;
    rec_first += r.losses[i].value(Term::rec_f);
    rec_last += r.losses[180 + i].value(Term::rec_f);
  }
  CHECK(last < 0.95 * first);
  CHECK(rec_last < 0.6 * rec_first);
  CHECK(r.state.step() == 200);
  CHECK(r.losses.back().step == 200);
}

TEST_CASE("a learned temperature moves and is not decayed") {
  Setup s = setup(10);
  s.config.tau.learnable = true;
  const EncoderConfig enc = resolve_encoder_config(tiny_encoder(), s.cohort, s.config);
  CHECK(enc.learnable_tau);
  const TrainResult r = train_loop(s.cohort, s.config, enc);
  CHECK(r.state.params.values.at("log_tau").item() != std::log(0.07));
}

TEST_CASE("zero steps writes an initial checkpoint and empty history") {
  testing::TempDir dir("train_zero");
  Setup s = setup(0);
  const TrainResult r = train_loop(s.cohort, s.config, s.state.params.config, {dir.path(), {}, {}, {}});
  CHECK(r.losses.empty());
  CHECK(read_lines(dir / "loss_history.jsonl").empty());
  const Checkpoint c = load_checkpoint(dir / "checkpoint.cmpr");
  CHECK(c.state.step() == 0);
  CHECK(c.state.params.values == s.state.params.values);
}

TEST_CASE("resuming from a checkpoint reproduces the unbroken run bitwise") {
  testing::TempDir dir("train_resume");
  Setup s = setup(30);
  s.config.eval_every = 10;
  s.config.checkpoint_every = 15;
  const EncoderConfig enc = s.state.params.config;
  const TrainResult whole = train_loop(s.cohort, s.config, enc, {dir / "whole", {}, {}, {}});

  TrainConfig half = s.config;
  half.steps = 15;
  train_loop(s.cohort, half, enc, {dir / "split", {}, {}, {}});
  Checkpoint cp = load_checkpoint(dir.path() / "split" / "checkpoint.cmpr");
  CHECK(cp.config.steps == 15);
  CHECK(cp.state.step() == 15);
  const TrainResult rest = train_loop(s.cohort, s.config, enc, {dir / "split", std::move(cp.state), {}, {}});

  CHECK(rest.state.params.values == whole.state.params.values);
  CHECK(rest.state.optim.m == whole.state.optim.m);
  CHECK(read_lines(dir.path() / "split" / "loss_history.jsonl") == read_lines(dir.path() / "whole" / "loss_history.jsonl"));
  CHECK(read_lines(dir.path() / "split" / "metrics_history.jsonl") ==
        read_lines(dir.path() / "whole" / "metrics_history.jsonl"));
  CHECK(std::filesystem::exists(dir.path() / "whole" / "checkpoint_step_000015.cmpr"));
}

TEST_CASE("checkpoint round trip keeps the forward pass bitwise") {
  testing::TempDir dir("train_ckpt");
  Setup s = setup(5);
  const TrainResult r = train_loop(s.cohort, s.config, s.state.params.config);
  save_checkpoint(dir / "c.cmpr", r.state, s.config);
  const Checkpoint c = load_checkpoint(dir / "c.cmpr");
  const auto val = s.cohort.select(s.cohort.split.validation);
  std::vector<const Array*> imgs;
  for (const auto& v : val) {
    if (v.carotid) imgs.push_back(&*v.carotid);
  }
  const Array x = stack_images(imgs);
  CHECK(forward(c.state.params, x, Modality::carotid).decoded == forward(r.state.params, x, Modality::carotid).decoded);
  CHECK(c.state.stats.mean == r.state.stats.mean);
  CHECK(c.state.cursors[0].position == r.state.cursors[0].position);
  CHECK(nlohmann::json(c.config) == nlohmann::json(s.config));

  std::ofstream(dir / "bad.cmpr") << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.cmpr"), IoError);
}

TEST_CASE("evaluation reports top-k, r2 and reconstruction") {
  Setup s = setup();
  const auto val = s.cohort.select(s.cohort.split.validation);
  const MetricReport m = evaluate_samples(s.state.params, val, s.state.stats, {1, 2, 1000}, true);
  CHECK(m.top_k.count(1) == 1);
  CHECK(m.top_k.count(1000) == 0);  // larger than the evaluation set
  CHECK(m.r2_per_measure.size() == 8);
  CHECK(m.scalars.count("reconstruction_mse.fundus") == 1);
  CHECK_THROWS_AS(evaluate_samples(s.state.params, val, s.state.stats, {1000}, false), ContractError);
}

TEST_CASE("ablation shares the first fc loss across modes") {
  Setup s = setup(5);
  const AblationReport rep = run_ablation(s.cohort, s.config, s.state.params.config);
  CHECK(rep.comprer_step0_fc == rep.mmcl_step0_fc);
  CHECK(rep.mmcl.losses.front().terms.size() == 1);
  CHECK(rep.comprer.losses.front().terms.size() == 8);
  const nlohmann::json j = rep.to_json();
  CHECK(j.at("step0_fc_identical").get<bool>());
}
