#include "comprer/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "comprer/array_io.hpp"
#include "comprer/error.hpp"
#include "comprer/rng.hpp"

namespace comprer {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kInitTag = 0x696e6974ULL;
constexpr std::uint64_t kStreamTag = 0x73747265616dULL;
constexpr std::size_t kEvalChunk = 128;

std::size_t stream_index(Stream s) { return static_cast<std::size_t>(s); }

/// Concatenates arrays along their leading axis.
Array concat_leading(const std::vector<const Array*>& parts) {
  if (parts.empty()) throw DimensionError("concat_leading: nothing to concatenate");
  Shape shape = parts.front()->shape();
  std::size_t rows = 0;
  for (const Array* p : parts) {
    if (p->rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p->shape().begin() + 1)) {
      throw DimensionError("concat_leading: trailing shapes differ");
    }
    rows += p->dim(0);
  }
  shape[0] = rows;
  Array out(shape);
  Eigen::Index offset = 0;
  for (const Array* p : parts) {
    out.values().segment(offset, static_cast<Eigen::Index>(p->size())) = p->values();
    offset += static_cast<Eigen::Index>(p->size());
  }
  return out;
}

struct Segment {
  std::size_t begin = 0;
  std::size_t count = 0;
};

struct RowPlan {
  std::vector<const Array*> parts;
  std::size_t rows = 0;

  Segment push(const Array& a) {
    Segment s{rows, a.dim(0)};
    parts.push_back(&a);
    rows += a.dim(0);
    return s;
  }
};

TotalLoss assemble_step(Tape& tape, const BoundModel& model, const StepBatches& batches, const TrainConfig& config,
                        const MeasureStats& stats) {
  const auto& fc = batches[stream_index(Stream::fc)];
  const auto& fv = batches[stream_index(Stream::fv)];
  const auto& cv = batches[stream_index(Stream::cv)];
  const auto& eyes = batches[stream_index(Stream::eyes)];
  if (!fc && !fv && !cv && !eyes) throw ContractError("train_step: no stream batch supplied");

  const bool mmcl = config.mode == TrainMode::mmcl;
  const LossWeights& w = config.loss_weights;
  auto want = [&](Term t) { return w.weight(t) != 0.0 && (!mmcl || t == Term::contr_fc); };

  const bool take_fc = fc && (want(Term::contr_fc) || want(Term::pred_r) || want(Term::pred_c) ||
                              want(Term::rec_f) || want(Term::rec_c));
  const bool take_eyes = eyes && (want(Term::contr_eye) || want(Term::pred_r) || want(Term::rec_f));
  const bool take_fv = fv && (want(Term::contr_fv) || want(Term::rec_f));
  const bool take_cv = cv && (want(Term::contr_cv) || want(Term::rec_c));

  // Measure-bearing rows first so the prediction heads see one contiguous
  // slice per modality.
  RowPlan fundus, carotid;
  Segment f_fc, f_eye_r, f_eye_l, f_v1, f_v2, c_fc, c_v1, c_v2;
  if (take_fc) f_fc = fundus.push(fc->left);
  if (take_eyes) {
    f_eye_r = fundus.push(eyes->left);
    f_eye_l = fundus.push(eyes->right);
  }
  const std::size_t n_r = fundus.rows;
  if (take_fv) {
    f_v1 = fundus.push(fv->left);
    f_v2 = fundus.push(fv->right);
  }
  if (take_fc) c_fc = carotid.push(fc->right);
  const std::size_t n_c = carotid.rows;
  if (take_cv) {
    c_v1 = carotid.push(cv->left);
    c_v2 = carotid.push(cv->right);
  }

  const TemperatureNode tau = model.log_tau() ? TemperatureNode::learned(*model.log_tau())
                                              : TemperatureNode::constant(config.tau.tau);
  std::vector<NamedTerm> terms;

  struct Encoded {
    Array images;
    Var proj, tap;
  };
  auto encode_all = [&](RowPlan& plan, Modality m) -> std::optional<Encoded> {
    if (plan.rows == 0) return std::nullopt;
    Encoded e;
    e.images = concat_leading(plan.parts);
    Var emb = model.encode(e.images, m);
    e.proj = model.project(emb, m);
    e.tap = model.head_input(emb, e.proj);
    return e;
  };
  const auto F = encode_all(fundus, Modality::fundus);
  const auto C = encode_all(carotid, Modality::carotid);
  auto rows = [](Var x, Segment s) { return slice_rows(x, s.begin, s.count); };

  if (take_fc && want(Term::contr_fc)) {
    terms.push_back(instantiate_contrastive(Pairing::fc, {rows(F->proj, f_fc), Modality::fundus, View::plain},
                                            {rows(C->proj, c_fc), Modality::carotid, View::plain}, tau));
  }
  if (take_fv && want(Term::contr_fv)) {
    terms.push_back(instantiate_contrastive(Pairing::fv, {rows(F->proj, f_v1), Modality::fundus, View::visit_t},
                                            {rows(F->proj, f_v2), Modality::fundus, View::visit_t_prime}, tau));
  }
  if (take_cv && want(Term::contr_cv)) {
    terms.push_back(instantiate_contrastive(Pairing::cv, {rows(C->proj, c_v1), Modality::carotid, View::visit_t},
                                            {rows(C->proj, c_v2), Modality::carotid, View::visit_t_prime}, tau));
  }
  if (take_eyes && want(Term::contr_eye)) {
    terms.push_back(instantiate_contrastive(Pairing::eye, {rows(F->proj, f_eye_r), Modality::fundus, View::eye_right},
                                            {rows(F->proj, f_eye_l), Modality::fundus, View::eye_left}, tau));
  }
  if (want(Term::pred_r) && n_r > 0) {
    std::vector<const Array*> targets;
    if (take_fc) targets.push_back(&fc->left_measures);
    if (take_eyes) {
      targets.push_back(&eyes->left_measures);
      targets.push_back(&eyes->right_measures);
    }
    Var y = tape.constant(stats.standardize(concat_leading(targets)));
    terms.push_back({Term::pred_r, prediction_mse(y, model.predict_measures(rows(F->tap, {0, n_r}), Modality::fundus))});
  }
  if (want(Term::pred_c) && n_c > 0) {
    Var y = tape.constant(stats.standardize(fc->right_measures));
    terms.push_back(
        {Term::pred_c, prediction_mse(y, model.predict_measures(rows(C->tap, {0, n_c}), Modality::carotid))});
  }
  if (want(Term::rec_f) && F) {
    terms.push_back(
        {Term::rec_f, reconstruction_mse(tape.constant(F->images), model.decode(F->tap, Modality::fundus))});
  }
  if (want(Term::rec_c) && C) {
    terms.push_back(
        {Term::rec_c, reconstruction_mse(tape.constant(C->images), model.decode(C->tap, Modality::carotid))});
  }
  if (terms.empty()) throw ContractError("train_step: the supplied streams produce no weighted loss term");
  return total_loss(terms, w);
}

std::string format_step(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", step);
  return buf;
}

void append_line(const std::optional<fs::path>& path, const nlohmann::json& j) {
  if (!path) return;
  std::ofstream out(*path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot append to " + path->string());
  out << j.dump() << '\n';
}

}  // namespace

std::string_view mode_name(TrainMode mode) { return mode == TrainMode::comprer ? "comprer" : "mmcl"; }

TrainMode parse_mode(std::string_view name) {
  if (name == "comprer") return TrainMode::comprer;
  if (name == "mmcl") return TrainMode::mmcl;
  throw ConfigError("unknown training mode '" + std::string(name) + "' (expected comprer or mmcl)");
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("train config: " + msg);
  };
  require(lr > 0.0 && std::isfinite(lr), "lr must be positive");
  require(weight_decay >= 0.0 && std::isfinite(weight_decay), "weight_decay must be non-negative");
  require(batch_size >= 2, "batch_size must be at least 2");
  require(scheduler.gamma > 0.0 && scheduler.gamma <= 1.0, "scheduler.gamma must lie in (0, 1]");
  require(scheduler.step_size >= 1, "scheduler.step_size must be positive");
  require(tau.tau > 0.0, "tau must be positive");
  require(clip_grad_norm >= 0.0, "clip_grad_norm must be non-negative");
  for (std::size_t k : eval_k) require(k >= 1, "eval_k entries must be positive");
  loss_weights.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"batch_size", c.batch_size},
       {"steps", c.steps},
       {"scheduler", {{"step_size", c.scheduler.step_size}, {"gamma", c.scheduler.gamma}}},
       {"loss_weights", c.loss_weights},
       {"tau", {{"value", c.tau.tau}, {"learnable", c.tau.learnable}}},
       {"eval_every", c.eval_every},
       {"checkpoint_every", c.checkpoint_every},
       {"seed", c.seed},
       {"mode", mode_name(c.mode)},
       {"clip_grad_norm", c.clip_grad_norm},
       {"eval_k", c.eval_k}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known = {"lr",         "weight_decay",     "batch_size", "steps",
                                              "scheduler",  "loss_weights",     "tau",        "eval_every",
                                              "checkpoint_every", "seed",       "mode",       "clip_grad_norm",
                                              "eval_k"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("train config: unknown key '" + key + "'");
  }
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  if (j.contains("scheduler")) {
    c.scheduler.step_size = j["scheduler"].value("step_size", c.scheduler.step_size);
    c.scheduler.gamma = j["scheduler"].value("gamma", c.scheduler.gamma);
  }
  if (j.contains("loss_weights")) c.loss_weights = j["loss_weights"].get<LossWeights>();
  if (j.contains("tau")) {
    if (j["tau"].is_number()) {
      c.tau.tau = j["tau"].get<double>();
    } else {
      c.tau.tau = j["tau"].value("value", c.tau.tau);
      c.tau.learnable = j["tau"].value("learnable", c.tau.learnable);
    }
  }
  c.eval_every = j.value("eval_every", c.eval_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.seed = j.value("seed", c.seed);
  if (j.contains("mode")) c.mode = parse_mode(j["mode"].get<std::string>());
  c.clip_grad_norm = j.value("clip_grad_norm", c.clip_grad_norm);
  c.eval_k = j.value("eval_k", c.eval_k);
}

OptimState OptimState::zeros_like(const ParamStore& params) {
  OptimState s;
  for (const auto& [name, p] : params) {
    s.m.emplace(name, Array(p.shape()));
    s.v.emplace(name, Array(p.shape()));
  }
  return s;
}

void adamw_step(ParamStore& params, const ParamStore& grads, OptimState& state, double lr_t, double weight_decay,
                const std::set<std::string>& no_decay) {
  for (const auto& [name, p] : params) {
    auto g = grads.find(name);
    if (g == grads.end()) throw ContractError("adamw_step: no gradient for '" + name + "'");
    if (g->second.shape() != p.shape()) {
      throw DimensionError("adamw_step: gradient of '" + name + "' has shape " + shape_string(g->second.shape()) +
                           ", parameter has " + shape_string(p.shape()));
    }
    if (!g->second.all_finite()) throw NumericError("adamw_step: non-finite gradient for '" + name + "'");
    auto m = state.m.find(name);
    auto v = state.v.find(name);
    if (m == state.m.end() || v == state.v.end() || m->second.shape() != p.shape() || v->second.shape() != p.shape()) {
      throw ContractError("adamw_step: optimizer moments do not match parameter '" + name + "'");
    }
  }
  const AdamConstants& c = state.constants;
  const double t = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (auto& [name, p] : params) {
    const auto g = grads.at(name).values().array();
    auto m = state.m.at(name).values().array();
    auto v = state.v.at(name).values().array();
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.square();
    const double wd = no_decay.count(name) ? 0.0 : weight_decay;
    auto theta = p.values().array();
    theta = theta - lr_t * ((m / bc1) / ((v / bc2).sqrt() + c.eps) + wd * theta);
  }
  ++state.step;
}

double steplr(double lr0, std::size_t step, std::size_t step_size, double gamma) {
  if (step_size == 0) throw ContractError("steplr: step_size must be positive");
  return lr0 * std::pow(gamma, static_cast<double>(step / step_size));
}

MeasureStats MeasureStats::fit(const std::vector<CohortSample>& samples) {
  if (samples.empty()) throw DegenerateInputError("measure statistics need at least one sample");
  const auto p = static_cast<Eigen::Index>(samples.front().measures.size());
  MatrixXd m(static_cast<Eigen::Index>(samples.size()), p);
  for (std::size_t i = 0; i < samples.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = samples[i].measures.values();
  MeasureStats s;
  s.mean = m.colwise().mean().transpose();
  s.stddev = ((m.rowwise() - s.mean.transpose()).array().square().colwise().mean()).sqrt().transpose();
  if ((s.stddev.array() == 0.0).any()) throw DegenerateInputError("a measure is constant over the train split");
  return s;
}

Array MeasureStats::standardize(const Array& measures) const {
  if (measures.rank() != 2 || measures.dim(1) != static_cast<std::size_t>(mean.size())) {
    throw DimensionError("standardize: expected [N×" + std::to_string(mean.size()) + "], got " +
                         shape_string(measures.shape()));
  }
  Array out(measures.shape());
  out.matrix() = (measures.matrix().rowwise() - mean.transpose()).array().rowwise() / stddev.transpose().array();
  return out;
}

void to_json(nlohmann::json& j, const MeasureStats& s) {
  j = {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
       {"stddev", std::vector<double>(s.stddev.data(), s.stddev.data() + s.stddev.size())}};
}

void from_json(const nlohmann::json& j, MeasureStats& s) {
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto sd = j.at("stddev").get<std::vector<double>>();
  s.mean = Eigen::Map<const VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  s.stddev = Eigen::Map<const VectorXd>(sd.data(), static_cast<Eigen::Index>(sd.size()));
}

StepGradients step_gradients(const ModelParams& params, const StepBatches& batches, const TrainConfig& config,
                             const MeasureStats& stats) {
  Tape tape;
  BoundModel model(tape, params);
  TotalLoss loss = assemble_step(tape, model, batches, config, stats);
  const Gradients g = tape.backward(loss.total);
  StepGradients out{loss.report, {}};
  for (const auto& [name, var] : model.vars()) out.grads.emplace(name, g[var]);
  return out;
}

LossReport train_step(ModelParams& params, const StepBatches& batches, const TrainConfig& config, OptimState& optim,
                      const MeasureStats& stats) {
  StepGradients sg = step_gradients(params, batches, config, stats);
  double sq = 0.0;
  for (const auto& [name, grad] : sg.grads) sq += grad.values().squaredNorm();
  if (!std::isfinite(sq)) throw NumericError("train_step: non-finite gradient at step " + std::to_string(optim.step + 1));
  if (config.clip_grad_norm > 0.0 && std::sqrt(sq) > config.clip_grad_norm) {
    const double factor = config.clip_grad_norm / std::sqrt(sq);
    for (auto& [name, grad] : sg.grads) grad.values() *= factor;
  }
  const double lr = steplr(config.lr, optim.step, config.scheduler.step_size, config.scheduler.gamma);
  adamw_step(params.values, sg.grads, optim, lr, config.weight_decay, {"log_tau"});
  sg.report.step = optim.step;
  return sg.report;
}

LossReport evaluate_step_losses(const ModelParams& params, const StepBatches& batches, const TrainConfig& config,
                                const MeasureStats& stats) {
  Tape tape;
  BoundModel model(tape, params, BoundModel::Binding::frozen);
  return assemble_step(tape, model, batches, config, stats).report;
}

EncoderConfig resolve_encoder_config(EncoderConfig base, const Cohort& cohort, const TrainConfig& config) {
  base.image_size = cohort.config.image_size;
  base.n_measures = cohort.config.n_measures;
  base.learnable_tau = config.tau.learnable;
  base.init_tau = config.tau.tau;
  base.validate();
  return base;
}

TrainState init_train_state(const Cohort& cohort, const TrainConfig& config, const EncoderConfig& encoder) {
  config.validate();
  const EncoderConfig enc = resolve_encoder_config(encoder, cohort, config);
  TrainState state;
  state.params = init_params(enc, derive_seed({config.seed, kInitTag}));
  state.optim = OptimState::zeros_like(state.params.values);
  state.stats = MeasureStats::fit(cohort.select(cohort.split.train));
  return state;
}

void save_checkpoint(const fs::path& path, const TrainState& state, const TrainConfig& config) {
  Container c;
  c.manifest["format"] = "comprer-checkpoint";
  c.manifest["step"] = state.step();
  c.manifest["train_config"] = config;
  c.manifest["encoder_config"] = state.params.config;
  c.manifest["measure_stats"] = state.stats;
  nlohmann::json cursors = nlohmann::json::array();
  for (const auto& cur : state.cursors) cursors.push_back({cur.epoch, cur.position});
  c.manifest["cursors"] = cursors;
  c.manifest["adam"] = {{"step", state.optim.step},
                        {"beta1", state.optim.constants.beta1},
                        {"beta2", state.optim.constants.beta2},
                        {"eps", state.optim.constants.eps}};
  for (const auto& [name, p] : state.params.values) c.add("param/" + name, p);
  for (const auto& [name, m] : state.optim.m) c.add("adam_m/" + name, m);
  for (const auto& [name, v] : state.optim.v) c.add("adam_v/" + name, v);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  // Write-then-rename so an interrupted save never clobbers a good file.
  const fs::path tmp = path.string() + ".tmp";
  save_container(tmp, c);
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  const Container c = load_container(path);
  if (c.manifest.value("format", std::string()) != "comprer-checkpoint") {
    throw IoError(path.string() + " is not a checkpoint");
  }
  Checkpoint ck;
  try {
    ck.config = c.manifest.at("train_config").get<TrainConfig>();
    ck.state.params.config = c.manifest.at("encoder_config").get<EncoderConfig>();
    ck.state.stats = c.manifest.at("measure_stats").get<MeasureStats>();
    const auto& cursors = c.manifest.at("cursors");
    for (std::size_t i = 0; i < 4; ++i) {
      ck.state.cursors[i] = {cursors.at(i).at(0).get<std::size_t>(), cursors.at(i).at(1).get<std::size_t>()};
    }
    const auto& adam = c.manifest.at("adam");
    ck.state.optim.step = adam.at("step").get<std::size_t>();
    ck.state.optim.constants = {adam.at("beta1").get<double>(), adam.at("beta2").get<double>(),
                                adam.at("eps").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint manifest in " + path.string() + ": " + e.what());
  }
  for (const auto& [name, array] : c.arrays) {
    const auto slash = name.find('/');
    if (slash == std::string::npos) throw IoError("unexpected checkpoint entry '" + name + "'");
    const std::string kind = name.substr(0, slash);
    const std::string key = name.substr(slash + 1);
    if (kind == "param") {
      ck.state.params.values.emplace(key, array);
    } else if (kind == "adam_m") {
      ck.state.optim.m.emplace(key, array);
    } else if (kind == "adam_v") {
      ck.state.optim.v.emplace(key, array);
    } else {
      throw IoError("unexpected checkpoint entry '" + name + "'");
    }
  }
  ck.state.params.config.validate();
  if (ck.state.params.count() != parameter_count(ck.state.params.config)) {
    throw IoError("checkpoint parameters do not match its encoder configuration");
  }
  return ck;
}

Array embed_images(const ModelParams& params, const std::vector<const Array*>& images, Modality modality) {
  if (images.empty()) throw DimensionError("embed_images: no images");
  Array out({images.size(), params.config.embed_dim});
  for (std::size_t start = 0; start < images.size(); start += kEvalChunk) {
    const std::size_t end = std::min(images.size(), start + kEvalChunk);
    const std::vector<const Array*> chunk(images.begin() + static_cast<std::ptrdiff_t>(start),
                                          images.begin() + static_cast<std::ptrdiff_t>(end));
    const Array e = encode(params, stack_images(chunk), modality);
    out.matrix().middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)) = e.matrix();
  }
  return out;
}

MetricReport evaluate_samples(const ModelParams& params, const std::vector<CohortSample>& samples,
                              const MeasureStats& stats, const std::vector<std::size_t>& k_values, bool drop_large_k,
                              std::size_t step) {
  MetricReport report;
  report.step = step;
  const auto pairs = qualifying_pairs(samples, Stream::fc);
  std::vector<std::size_t> ks;
  for (std::size_t k : k_values) {
    if (k <= pairs.size()) {
      ks.push_back(k);
    } else if (!drop_large_k) {
      throw ContractError("k=" + std::to_string(k) + " exceeds the " + std::to_string(pairs.size()) +
                          " multimodal pairs of the evaluation set");
    }
  }
  if (!pairs.empty() && !ks.empty()) {
    std::vector<const Array*> f, c;
    for (const auto& p : pairs) {
      f.push_back(&*samples[p.left_sample].field(p.left_field));
      c.push_back(&*samples[p.right_sample].field(p.right_field));
    }
    const Array pf = project(params, embed_images(params, f, Modality::fundus), Modality::fundus);
    const Array pc = project(params, embed_images(params, c, Modality::carotid), Modality::carotid);
    add_top_k(report, pf.matrix(), pc.matrix(), ks);
  }

  for (Modality m : {Modality::fundus, Modality::carotid}) {
    std::vector<const Array*> images, measures;
    for (const auto& s : samples) {
      const std::optional<Array>* img = nullptr;
      if (m == Modality::fundus) {
        if (auto rep = s.representative_fundus()) img = &s.field(*rep);
      } else if (s.carotid) {
        img = &s.carotid;
      }
      if (img == nullptr) continue;
      images.push_back(&**img);
      measures.push_back(&s.measures);
    }
    if (images.size() < 2) continue;
    const Array emb = embed_images(params, images, m);
    const Array tap = params.config.head_tap == HeadTap::pre_projection ? emb : project(params, emb, m);
    const Array pred = predict_measures(params, tap, m);
    const Array target = stats.standardize(stack_images(measures));
    const std::string prefix = std::string(modality_name(m)) + ".measure_";
    for (Eigen::Index j = 0; j < target.matrix().cols(); ++j) {
      report.r2_per_measure[prefix + std::to_string(j)] = r_squared(target.matrix().col(j), pred.matrix().col(j));
    }
    double sq = 0.0;
    for (std::size_t start = 0; start < images.size(); start += kEvalChunk) {
      const std::size_t end = std::min(images.size(), start + kEvalChunk);
      const Array part = stack_images({images.begin() + static_cast<std::ptrdiff_t>(start),
                                       images.begin() + static_cast<std::ptrdiff_t>(end)});
      const Array rows = Array::from_matrix(
          tap.matrix().middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(end - start)));
      const Array decoded = decode(params, rows, m);
      sq += (decoded.values() - part.values()).squaredNorm();
    }
    report.scalars[std::string("reconstruction_mse.") + std::string(modality_name(m))] =
        sq / static_cast<double>(images.size() * images.front()->size());
  }
  return report;
}

TrainResult train_loop(const Cohort& cohort, const TrainConfig& config, const EncoderConfig& encoder,
                       TrainOptions options) {
  config.validate();
  TrainResult result;
  result.state = options.resume ? std::move(*options.resume) : init_train_state(cohort, config, encoder);
  TrainState& state = result.state;

  const auto train_samples = cohort.select(cohort.split.train);
  const auto val_samples = cohort.select(cohort.split.validation);
  if (train_samples.empty()) throw ContractError("train_loop: the train split is empty");
  StreamScheduler scheduler(train_samples, config.batch_size, derive_seed({config.seed, kStreamTag}));
  scheduler.set_cursors(state.cursors);

  std::optional<fs::path> loss_log, metric_log;
  if (options.out_dir) {
    fs::create_directories(*options.out_dir);
    loss_log = *options.out_dir / "loss_history.jsonl";
    metric_log = *options.out_dir / "metrics_history.jsonl";
    if (!options.resume) {
      for (const auto& p : {*loss_log, *metric_log}) std::ofstream(p, std::ios::binary | std::ios::trunc);
    }
  }
  auto save_final = [&] {
    if (options.out_dir) save_checkpoint(*options.out_dir / "checkpoint.cmpr", state, config);
  };

  while (state.step() < config.steps) {
    const auto cursors_before = scheduler.cursors();
    const StepBatches batches = scheduler.next_step();
    LossReport report;
    try {
      report = train_step(state.params, batches, config, state.optim, state.stats);
    } catch (const NumericError&) {
      state.cursors = cursors_before;
      save_final();
      throw;
    }
    state.cursors = scheduler.cursors();
    append_line(loss_log, report.to_json());
    if (options.on_step) options.on_step(report);
    result.losses.push_back(std::move(report));

    const std::size_t step = state.step();
    if (config.eval_every > 0 && step % config.eval_every == 0 && !val_samples.empty()) {
      MetricReport metrics = evaluate_samples(state.params, val_samples, state.stats, config.eval_k, true, step);
      append_line(metric_log, metrics.to_json());
      if (options.on_eval) options.on_eval(metrics);
      result.metrics.push_back(std::move(metrics));
    }
    if (options.out_dir && config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
      save_checkpoint(*options.out_dir / ("checkpoint_step_" + format_step(step) + ".cmpr"), state, config);
    }
  }
  save_final();
  return result;
}

nlohmann::json AblationReport::to_json() const {
  nlohmann::json j;
  j["step0_fc_loss"] = {{"comprer", comprer_step0_fc}, {"mmcl", mmcl_step0_fc}};
  j["step0_fc_identical"] = comprer_step0_fc == mmcl_step0_fc;
  j["final"] = {{"comprer", comprer_final.to_json()}, {"mmcl", mmcl_final.to_json()}};
  nlohmann::json diff = nlohmann::json::object();
  for (const auto& [k, v] : comprer_final.mult_top_k) {
    if (mmcl_final.mult_top_k.count(k)) diff["mult_top_k"][std::to_string(k)] = v - mmcl_final.mult_top_k.at(k);
  }
  for (const auto& [name, v] : comprer_final.r2_per_measure) {
    if (mmcl_final.r2_per_measure.count(name)) diff["r2"][name] = v - mmcl_final.r2_per_measure.at(name);
  }
  j["comprer_minus_mmcl"] = diff;
  return j;
}

AblationReport run_ablation(const Cohort& cohort, const TrainConfig& config, const EncoderConfig& encoder) {
  AblationReport report;
  const auto val_samples = cohort.select(cohort.split.validation);
  for (TrainMode mode : {TrainMode::comprer, TrainMode::mmcl}) {
    TrainConfig c = config;
    c.mode = mode;
    const TrainState initial = init_train_state(cohort, c, encoder);
    const auto train_samples = cohort.select(cohort.split.train);
    StreamScheduler scheduler(train_samples, c.batch_size, derive_seed({c.seed, kStreamTag}));
    const LossReport first = evaluate_step_losses(initial.params, scheduler.next_step(), c, initial.stats);
    const double step0 = first.has(Term::contr_fc) ? first.value(Term::contr_fc) : std::nan("");

    TrainResult run = train_loop(cohort, c, encoder);
    MetricReport final_metrics =
        evaluate_samples(run.state.params, val_samples, run.state.stats, c.eval_k, true, run.state.step());
    if (mode == TrainMode::comprer) {
      report.comprer = std::move(run);
      report.comprer_step0_fc = step0;
      report.comprer_final = std::move(final_metrics);
    } else {
      report.mmcl = std::move(run);
      report.mmcl_step0_fc = step0;
      report.mmcl_final = std::move(final_metrics);
    }
  }
  return report;
}

}  // namespace comprer
