#include "comprer/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "comprer/array_io.hpp"
#include "comprer/error.hpp"
#include "comprer/rng.hpp"
#include "comprer/training.hpp"

namespace comprer {

namespace {

// log(1 + e^z) without overflow.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

void require_two_classes(const VectorXd& y, const std::string& where) {
  const Eigen::Index pos = (y.array() > 0.5).count();
  if (pos == 0 || pos == y.size()) throw DegenerateInputError(where + ": labels contain a single class");
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string_view task_name(ProbeTask task) { return task == ProbeTask::diagnosis ? "diagnosis" : "prognosis"; }

ProbeTask parse_task(std::string_view name) {
  if (name == "diagnosis") return ProbeTask::diagnosis;
  if (name == "prognosis") return ProbeTask::prognosis;
  throw ConfigError("unknown probe task '" + std::string(name) + "' (expected diagnosis or prognosis)");
}

void ProbeConfig::validate() const {
  if (!(l2_strength > 0.0)) throw ConfigError("probe config: l2_strength must be positive");
  if (max_iterations == 0) throw ConfigError("probe config: max_iterations must be positive");
  if (!(convergence_tol > 0.0)) throw ConfigError("probe config: convergence_tol must be positive");
}

void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = {{"l2_strength", c.l2_strength},
       {"max_iterations", c.max_iterations},
       {"convergence_tol", c.convergence_tol},
       {"task", task_name(c.task)}};
}

void from_json(const nlohmann::json& j, ProbeConfig& c) {
  c.l2_strength = j.value("l2_strength", c.l2_strength);
  c.max_iterations = j.value("max_iterations", c.max_iterations);
  c.convergence_tol = j.value("convergence_tol", c.convergence_tol);
  if (j.contains("task")) c.task = parse_task(j["task"].get<std::string>());
}

std::vector<GridPoint> SearchGrid::points() const {
  std::vector<GridPoint> out;
  for (double l : lr) {
    for (double wd : weight_decay) {
      for (std::size_t e : epochs) out.push_back({l, wd, e});
    }
  }
  return out;
}

void SearchGrid::validate() const {
  if (lr.empty() || weight_decay.empty() || epochs.empty()) throw ConfigError("search grid: every axis needs a value");
  for (double l : lr) {
    if (!(l > 0.0)) throw ConfigError("search grid: learning rates must be positive");
  }
  for (double wd : weight_decay) {
    if (!(wd >= 0.0)) throw ConfigError("search grid: weight decay must be non-negative");
  }
  for (std::size_t e : epochs) {
    if (e == 0) throw ConfigError("search grid: epochs must be positive");
  }
  if (batch_size == 0 || top == 0) throw ConfigError("search grid: batch_size and top must be positive");
}

void to_json(nlohmann::json& j, const SearchGrid& g) {
  j = {{"lr", g.lr}, {"weight_decay", g.weight_decay}, {"epochs", g.epochs}, {"batch_size", g.batch_size},
       {"top", g.top}};
}

void from_json(const nlohmann::json& j, SearchGrid& g) {
  g.lr = j.value("lr", g.lr);
  g.weight_decay = j.value("weight_decay", g.weight_decay);
  g.epochs = j.value("epochs", g.epochs);
  g.batch_size = j.value("batch_size", g.batch_size);
  g.top = j.value("top", g.top);
}

EmbeddingTable extract_embeddings(const ModelParams& params, const std::vector<CohortSample>& samples,
                                  Modality modality) {
  EmbeddingTable table;
  std::vector<const Array*> images;
  for (const auto& s : samples) {
    const Array* img = nullptr;
    if (modality == Modality::fundus) {
      if (auto rep = s.representative_fundus()) img = &*s.field(*rep);
    } else if (s.carotid) {
      img = &*s.carotid;
    }
    if (img == nullptr) {
      ++table.skipped;
      continue;
    }
    images.push_back(img);
    table.participant_ids.push_back(s.participant_id);
    table.visits.push_back(s.visit);
  }
  if (images.empty()) throw DegenerateInputError("extract_embeddings: no sample carries the modality");
  table.embeddings = embed_images(params, images, modality);
  return table;
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table) {
  Container c;
  c.manifest["format"] = "comprer-embeddings";
  c.manifest["skipped"] = table.skipped;
  Array ids({table.participant_ids.size(), 2});
  for (std::size_t i = 0; i < table.participant_ids.size(); ++i) {
    ids[2 * i] = static_cast<double>(table.participant_ids[i]);
    ids[2 * i + 1] = table.visits[i] == Visit::t ? 0.0 : 1.0;
  }
  c.add("embeddings", table.embeddings);
  c.add("ids", ids);
  save_container(path, c);
}

EmbeddingTable load_embeddings(const std::filesystem::path& path) {
  const Container c = load_container(path);
  if (c.manifest.value("format", std::string()) != "comprer-embeddings") {
    throw IoError(path.string() + " is not an embedding cache");
  }
  EmbeddingTable t;
  t.skipped = c.manifest.value("skipped", std::size_t{0});
  t.embeddings = c.get("embeddings");
  const Array& ids = c.get("ids");
  if (ids.rank() != 2 || ids.dim(1) != 2 || ids.dim(0) != t.embeddings.dim(0)) {
    throw IoError("embedding cache " + path.string() + " has inconsistent ids");
  }
  for (std::size_t i = 0; i < ids.dim(0); ++i) {
    t.participant_ids.push_back(static_cast<std::size_t>(ids[2 * i]));
    t.visits.push_back(ids[2 * i + 1] == 0.0 ? Visit::t : Visit::t_prime);
  }
  return t;
}

ProbeDataset task_population(const EmbeddingTable& table, const std::vector<CohortSample>& samples, ProbeTask task) {
  std::map<std::size_t, const CohortSample*> baseline;
  for (const auto& s : samples) {
    if (s.visit == Visit::t) baseline[s.participant_id] = &s;
  }
  std::vector<Eigen::Index> rows;
  std::vector<double> labels;
  ProbeDataset out;
  for (std::size_t i = 0; i < table.participant_ids.size(); ++i) {
    if (table.visits[i] != Visit::t) continue;
    auto it = baseline.find(table.participant_ids[i]);
    if (it == baseline.end()) continue;
    const CohortSample& s = *it->second;
    int label = s.diagnosis;
    if (task == ProbeTask::prognosis) {
      if (s.diagnosis != 0 || s.prognosis < 0) continue;
      label = s.prognosis;
    }
    rows.push_back(static_cast<Eigen::Index>(i));
    labels.push_back(label);
    out.participant_ids.push_back(s.participant_id);
  }
  const auto m = table.embeddings.matrix();
  out.x.resize(static_cast<Eigen::Index>(rows.size()), m.cols());
  out.y.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.x.row(static_cast<Eigen::Index>(r)) = m.row(rows[r]);
    out.y[static_cast<Eigen::Index>(r)] = labels[r];
  }
  return out;
}

ProbeDataset restrict_to(const ProbeDataset& data, const std::vector<std::size_t>& ids) {
  std::vector<Eigen::Index> rows;
  ProbeDataset out;
  for (std::size_t i = 0; i < data.participant_ids.size(); ++i) {
    if (std::binary_search(ids.begin(), ids.end(), data.participant_ids[i])) {
      rows.push_back(static_cast<Eigen::Index>(i));
      out.participant_ids.push_back(data.participant_ids[i]);
    }
  }
  out.x.resize(static_cast<Eigen::Index>(rows.size()), data.x.cols());
  out.y.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.x.row(static_cast<Eigen::Index>(r)) = data.x.row(rows[r]);
    out.y[static_cast<Eigen::Index>(r)] = data.y[rows[r]];
  }
  return out;
}

Standardizer Standardizer::fit(const MatrixXd& x) {
  if (x.rows() == 0) throw DegenerateInputError("standardizer: empty fitting population");
  Standardizer s;
  s.mean = x.colwise().mean().transpose();
  VectorXd sd = ((x.rowwise() - s.mean.transpose()).array().square().colwise().mean()).sqrt().transpose();
  // Constant columns pass through centred rather than blowing up.
  s.scale = (sd.array() > 0.0).select(sd, 1.0);
  return s;
}

MatrixXd Standardizer::apply(const MatrixXd& x) const {
  return (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
}

double logistic_objective(const MatrixXd& x, const VectorXd& y, const VectorXd& w, double b, double l2) {
  const VectorXd z = (x * w).array() + b;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) loss += softplus(z[i]) - y[i] * z[i];
  return loss / static_cast<double>(z.size()) + 0.5 * l2 * w.squaredNorm();
}

LogisticModel fit_logistic(const MatrixXd& x, const VectorXd& y, const ProbeConfig& config) {
  config.validate();
  if (x.rows() != y.size()) throw DimensionError("fit_logistic: embeddings and labels differ in length");
  require_two_classes(y, "fit_logistic");
  const double n = static_cast<double>(x.rows());
  const double l2 = config.l2_strength;

  LogisticModel model;
  model.w = VectorXd::Zero(x.cols());
  double f = logistic_objective(x, y, model.w, model.b, l2);
  model.loss_trace.push_back(f);
  double step = 1.0;
  for (std::size_t it = 0; it < config.max_iterations; ++it) {
    const VectorXd z = model.decision(x);
    VectorXd r(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) r[i] = sigmoid(z[i]) - y[i];
    const VectorXd gw = x.transpose() * r / n + l2 * model.w;
    const double gb = r.sum() / n;
    const double gnorm2 = gw.squaredNorm() + gb * gb;
    if (std::sqrt(gnorm2) < config.convergence_tol) {
      model.converged = true;
      break;
    }
    // Armijo backtracking; the step grows again after each accepted move.
    bool accepted = false;
    for (int k = 0; k < 60; ++k) {
      const VectorXd w_new = model.w - step * gw;
      const double b_new = model.b - step * gb;
      const double f_new = logistic_objective(x, y, w_new, b_new, l2);
      if (f_new <= f - 1e-4 * step * gnorm2) {
        model.w = w_new;
        model.b = b_new;
        f = f_new;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    model.loss_trace.push_back(f);
    model.iterations = it + 1;
    step *= 2.0;
  }
  return model;
}

void assert_no_test_leakage(const std::vector<std::size_t>& fit_ids, const CohortSplit& split) {
  for (std::size_t id : fit_ids) {
    if (std::binary_search(split.test.begin(), split.test.end(), id)) {
      throw ContractError("test participant " + std::to_string(id) + " reached a fitting call");
    }
  }
}

namespace {

struct SplitData {
  ProbeDataset train, validation, test;
  std::size_t skipped = 0;
};

SplitData prepare(const ModelParams& params, const Cohort& cohort, ProbeTask task, Modality modality) {
  const EmbeddingTable table = extract_embeddings(params, cohort.samples, modality);
  const ProbeDataset all = task_population(table, cohort.samples, task);
  SplitData d;
  d.skipped = table.skipped;
  d.train = restrict_to(all, cohort.split.train);
  d.validation = restrict_to(all, cohort.split.validation);
  d.test = restrict_to(all, cohort.split.test);
  assert_no_test_leakage(d.train.participant_ids, cohort.split);
  const Standardizer s = Standardizer::fit(d.train.x);
  d.train.x = s.apply(d.train.x);
  d.validation.x = s.apply(d.validation.x);
  d.test.x = s.apply(d.test.x);
  return d;
}

double auc_or_throw(const VectorXd& y, const VectorXd& scores, const char* split) {
  if (y.size() == 0) throw DegenerateInputError(std::string("the ") + split + " split has no probe population");
  require_two_classes(y, std::string("the ") + split + " split");
  return roc_auc(y, scores);
}

}  // namespace

ProbeOutcome run_logistic_probe(const ModelParams& params, const Cohort& cohort, const ProbeConfig& config,
                                Modality modality) {
  const SplitData d = prepare(params, cohort, config.task, modality);
  const LogisticModel model = fit_logistic(d.train.x, d.train.y, config);
  ProbeOutcome out;
  out.train_auc = auc_or_throw(d.train.y, model.decision(d.train.x), "train");
  out.validation_auc = auc_or_throw(d.validation.y, model.decision(d.validation.x), "validation");
  out.test_auc = auc_or_throw(d.test.y, model.decision(d.test.x), "test");
  out.n_train = d.train.size();
  out.n_validation = d.validation.size();
  out.n_test = d.test.size();
  out.skipped = d.skipped;
  return out;
}

MetricReport evaluate_task(const ModelParams& params, const Cohort& cohort, const ProbeConfig& config,
                           Modality modality) {
  const ProbeOutcome o = run_logistic_probe(params, cohort, config, modality);
  MetricReport r;
  const std::string t(task_name(config.task));
  r.auc_per_label[t + ".train"] = o.train_auc;
  r.auc_per_label[t + ".validation"] = o.validation_auc;
  r.auc_per_label[t + ".test"] = o.test_auc;
  r.scalars["n_train"] = static_cast<double>(o.n_train);
  r.scalars["n_validation"] = static_cast<double>(o.n_validation);
  r.scalars["n_test"] = static_cast<double>(o.n_test);
  r.scalars["skipped"] = static_cast<double>(o.skipped);
  return r;
}

double median(std::vector<double> values) {
  if (values.empty()) throw DegenerateInputError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

SearchResult finetune_head_search(const ModelParams& params, const Cohort& cohort, const SearchGrid& grid,
                                  ProbeTask task, std::uint64_t seed, Modality modality) {
  grid.validate();
  const SplitData d = prepare(params, cohort, task, modality);
  require_two_classes(d.train.y, "the train split");
  if (d.validation.size() == 0 || d.test.size() == 0) {
    throw DegenerateInputError("validation or test split has no probe population");
  }
  require_two_classes(d.validation.y, "the validation split");
  require_two_classes(d.test.y, "the test split");

  SearchResult result;
  result.task = task;
  result.n_train = d.train.size();
  result.n_validation = d.validation.size();
  result.n_test = d.test.size();

  const auto points = grid.points();
  const auto n = static_cast<std::size_t>(d.train.x.rows());
  const auto dim = static_cast<std::size_t>(d.train.x.cols());
  for (std::size_t gi = 0; gi < points.size(); ++gi) {
    const GridPoint& p = points[gi];
    ParamStore head;
    head.emplace("b", Array::scalar(0.0));
    head.emplace("w", Array({dim}));
    OptimState optim = OptimState::zeros_like(head);
    std::vector<std::size_t> order(n);
    for (std::size_t epoch = 0; epoch < p.epochs; ++epoch) {
      // The shuffle depends on the epoch only, so equal grid points train
      // identically.
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng rng(derive_seed({seed, epoch}));
      rng.shuffle(order);
      for (std::size_t start = 0; start < n; start += grid.batch_size) {
        const std::size_t end = std::min(n, start + grid.batch_size);
        const auto w = head.at("w").values();
        const double b = head.at("b").item();
        VectorXd gw = VectorXd::Zero(static_cast<Eigen::Index>(dim));
        double gb = 0.0;
        for (std::size_t i = start; i < end; ++i) {
          const auto row = d.train.x.row(static_cast<Eigen::Index>(order[i]));
          const double r = sigmoid(row.dot(w) + b) - d.train.y[static_cast<Eigen::Index>(order[i])];
          gw += r * row.transpose();
          gb += r;
        }
        const double m = static_cast<double>(end - start);
        ParamStore grads;
        grads.emplace("b", Array::scalar(gb / m));
        grads.emplace("w", Array({dim}, gw / m));
        adamw_step(head, grads, optim, p.lr, p.weight_decay);
      }
    }
    const VectorXd w = head.at("w").values();
    const double b = head.at("b").item();
    SearchRecord rec;
    rec.index = gi;
    rec.point = p;
    rec.validation_auc = roc_auc(d.validation.y, VectorXd((d.validation.x * w).array() + b));
    rec.test_auc = roc_auc(d.test.y, VectorXd((d.test.x * w).array() + b));
    result.records.push_back(rec);
  }

  std::vector<std::size_t> rank(result.records.size());
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) {
    return result.records[a].validation_auc > result.records[b].validation_auc;
  });
  const std::size_t keep = std::min(grid.top, rank.size());
  for (std::size_t i = 0; i < keep; ++i) {
    result.records[rank[i]].selected = true;
    result.distribution.push_back(result.records[rank[i]].test_auc);
  }
  result.median_test_auc = median(result.distribution);
  return result;
}

nlohmann::json SearchResult::to_json() const {
  nlohmann::json records_json = nlohmann::json::array();
  for (const auto& r : records) {
    records_json.push_back({{"index", r.index},
                            {"lr", r.point.lr},
                            {"weight_decay", r.point.weight_decay},
                            {"epochs", r.point.epochs},
                            {"validation_auc", r.validation_auc},
                            {"test_auc", r.test_auc},
                            {"selected", r.selected}});
  }
  return {{"task", task_name(task)},
          {"records", records_json},
          {"distribution", distribution},
          {"median_test_auc", median_test_auc},
          {"n_train", n_train},
          {"n_validation", n_validation},
          {"n_test", n_test}};
}

std::string SearchResult::to_csv() const {
  std::ostringstream out;
  out << "task,index,lr,weight_decay,epochs,validation_auc,test_auc,selected\n";
  for (const auto& r : records) {
    out << task_name(task) << ',' << r.index << ',' << format_double(r.point.lr) << ','
        << format_double(r.point.weight_decay) << ',' << r.point.epochs << ',' << format_double(r.validation_auc)
        << ',' << format_double(r.test_auc) << ',' << (r.selected ? 1 : 0) << '\n';
  }
  return out.str();
}

}  // namespace comprer
