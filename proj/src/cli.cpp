#include "comprer/cli.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "comprer/array_io.hpp"
#include "comprer/error.hpp"
#include "comprer/probe.hpp"
#include "comprer/training.hpp"

namespace comprer::cli {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return exit_numeric;
  if (dynamic_cast<const DegenerateInputError*>(&e)) return exit_degenerate;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return exit_io;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ContractError*>(&e) ||
      dynamic_cast<const DimensionError*>(&e) || dynamic_cast<const DomainError*>(&e) ||
      dynamic_cast<const json::exception*>(&e)) {
    return exit_usage;
  }
  return exit_unexpected;
}

std::string config_hash(const json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, const json& config) {
  if (flag) return *flag;
  if (config.is_object() && config.contains("seed")) return config["seed"].get<std::uint64_t>();
  if (const char* env = std::getenv("COMPRER_SEED"); env != nullptr && *env != '\0') {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("COMPRER_SEED is not an unsigned integer: '") + env + "'");
  }
  return 0;
}

json RunManifest::to_json() const {
  return {{"command", command},   {"argv", argv},        {"config_hash", config_hash},
          {"seed", seed},         {"inputs", inputs},    {"outputs", outputs},
          {"started", started},   {"finished", finished}, {"version", version},
          {"exit_code", exit_code}};
}

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

template <class T>
T section(const json& config, const char* name) {
  if (!config.is_object() || !config.contains(name)) return T{};
  try {
    return config[name].get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config section '") + name + "': " + e.what());
  }
}

Cohort open_cohort(const fs::path& dir) {
  if (!fs::exists(dir / "cohort.json")) throw IoError("no cohort at " + dir.string());
  return load_cohort(dir);
}

Checkpoint open_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("no checkpoint at " + path.string());
  return load_checkpoint(path);
}

const std::vector<std::size_t>& split_ids(const Cohort& c, const std::string& split) {
  if (split == "train") return c.split.train;
  if (split == "validation") return c.split.validation;
  if (split == "test") return c.split.test;
  throw ConfigError("unknown split '" + split + "' (expected train, validation or test)");
}

struct Common {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  std::vector<CLI::Option*> seed_opts;  // one per subcommand

  std::optional<std::uint64_t> seed_flag() const {
    for (const CLI::Option* o : seed_opts) {
      if (o->count() > 0) return seed;
    }
    return std::nullopt;
  }
};

struct Invocation {
  RunManifest manifest;
  fs::path out_dir;
};

// --- subcommands -----------------------------------------------------------

void gen_data(const Common& a, Invocation& inv) {
  const json config = load_config(a.config);
  const auto data = section<GeneratorConfig>(config, "data");
  data.validate();
  const std::uint64_t seed = resolve_seed(a.seed_flag(), config);
  inv.manifest.seed = seed;
  inv.manifest.config_hash = config_hash(config);
  inv.manifest.inputs = {{"config", a.config}};
  const Cohort cohort = make_cohort(data, seed);
  save_cohort(a.out, cohort);
  inv.manifest.outputs = {{"cohort", a.out},
                          {"participants", cohort.participant_count()},
                          {"samples", cohort.samples.size()}};
  std::cout << "generated " << cohort.participant_count() << " participants (" << cohort.samples.size()
            << " samples) into " << a.out << "\n";
}

struct PretrainArgs {
  std::string cohort;
  std::string mode;
  bool paper_total = false;
  std::size_t steps = 0;
  CLI::Option* steps_opt = nullptr;
  std::string resume;
};

void pretrain(const Common& a, const PretrainArgs& p, Invocation& inv) {
  const json config = load_config(a.config);
  TrainConfig train = section<TrainConfig>(config, "train");
  const auto encoder = section<EncoderConfig>(config, "model");
  train.seed = resolve_seed(a.seed_flag(), config.contains("seed") ? config : json{{"seed", train.seed}});
  if (!p.mode.empty()) train.mode = parse_mode(p.mode);
  if (p.paper_total) train.loss_weights = train.loss_weights.paper_total();
  if (p.steps_opt != nullptr && p.steps_opt->count() > 0) train.steps = p.steps;
  train.validate();
  inv.manifest.seed = train.seed;
  inv.manifest.config_hash = config_hash(config);
  inv.manifest.inputs = {{"config", a.config}, {"cohort", p.cohort}};

  const Cohort cohort = open_cohort(p.cohort);
  ensure_dir(a.out);
  write_text(fs::path(a.out) / "train_config.json", json(train).dump(2) + "\n");
  TrainOptions options;
  options.out_dir = fs::path(a.out);
  if (!p.resume.empty()) {
    options.resume = open_checkpoint(p.resume).state;
    inv.manifest.inputs["resume"] = p.resume;
  }
  options.on_eval = [](const MetricReport& m) {
    std::cout << "step " << m.step;
    for (const auto& [k, v] : m.mult_top_k) std::cout << "  mult_top" << k << "=" << v;
    std::cout << "\n";
  };
  inv.manifest.outputs = {{"checkpoint", (fs::path(a.out) / "checkpoint.cmpr").string()},
                          {"loss_history", (fs::path(a.out) / "loss_history.jsonl").string()},
                          {"metrics_history", (fs::path(a.out) / "metrics_history.jsonl").string()}};
  const TrainResult result = train_loop(cohort, train, encoder, options);
  std::cout << "trained " << result.state.step() << " steps (" << mode_name(train.mode) << ")\n";
}

struct EvalArgs {
  std::string checkpoint, cohort, split = "test";
  std::vector<std::size_t> k = {5, 25, 100};
};

void eval(const Common& a, const EvalArgs& e, Invocation& inv) {
  const Checkpoint ck = open_checkpoint(e.checkpoint);
  const Cohort cohort = open_cohort(e.cohort);
  inv.manifest.seed = ck.config.seed;
  inv.manifest.config_hash = config_hash(json(ck.config));
  inv.manifest.inputs = {{"checkpoint", e.checkpoint}, {"cohort", e.cohort}, {"split", e.split}, {"k", e.k}};
  const auto samples = cohort.select(split_ids(cohort, e.split));
  const MetricReport report =
      evaluate_samples(ck.state.params, samples, ck.state.stats, e.k, false, ck.state.step());
  ensure_dir(a.out);
  write_text(fs::path(a.out) / "metrics.json", report.to_json().dump(2) + "\n");
  write_text(fs::path(a.out) / "metrics.csv", report.to_csv());
  inv.manifest.outputs = {{"json", (fs::path(a.out) / "metrics.json").string()},
                          {"csv", (fs::path(a.out) / "metrics.csv").string()}};
  for (const auto& [k, v] : report.mult_top_k) std::cout << "mult_top" << k << "=" << v << "\n";
}

struct ProbeArgs {
  std::string checkpoint, cohort, task = "diagnosis", grid, modality = "fundus";
  bool search = false;
};

void probe(const Common& a, const ProbeArgs& p, Invocation& inv) {
  const json config = a.config.empty() ? json::object() : load_config(a.config);
  ProbeConfig pc = section<ProbeConfig>(config, "probe");
  pc.task = parse_task(p.task);
  pc.validate();
  const Modality modality = p.modality == "carotid" ? Modality::carotid : Modality::fundus;
  if (p.modality != "fundus" && p.modality != "carotid") throw ConfigError("unknown modality '" + p.modality + "'");
  const Checkpoint ck = open_checkpoint(p.checkpoint);
  const Cohort cohort = open_cohort(p.cohort);
  const std::uint64_t seed = resolve_seed(a.seed_flag(), config.contains("seed") ? config : json{{"seed", ck.config.seed}});
  inv.manifest.seed = seed;
  inv.manifest.inputs = {{"checkpoint", p.checkpoint}, {"cohort", p.cohort}, {"task", p.task}, {"modality", p.modality}};
  ensure_dir(a.out);
  const fs::path out(a.out);

  const EmbeddingTable table = extract_embeddings(ck.state.params, cohort.samples, modality);
  save_embeddings(out / "embeddings.cmpr", table);
  inv.manifest.outputs["embeddings"] = (out / "embeddings.cmpr").string();

  if (p.search || !p.grid.empty()) {
    SearchGrid grid = section<SearchGrid>(config, "grid");
    if (!p.grid.empty()) {
      grid = load_config(p.grid).get<SearchGrid>();
      inv.manifest.inputs["grid"] = p.grid;
    }
    inv.manifest.config_hash = config_hash({{"probe", pc}, {"grid", grid}});
    const SearchResult r = finetune_head_search(ck.state.params, cohort, grid, pc.task, seed, modality);
    write_text(out / "probe_results.json", r.to_json().dump(2) + "\n");
    write_text(out / "probe_results.csv", r.to_csv());
    std::cout << task_name(pc.task) << " median test AUC " << r.median_test_auc << " over " << r.distribution.size()
              << " selected heads (population " << r.n_train + r.n_validation + r.n_test << ")\n";
  } else {
    inv.manifest.config_hash = config_hash({{"probe", pc}});
    const MetricReport r = evaluate_task(ck.state.params, cohort, pc, modality);
    json j = r.to_json();
    j["task"] = task_name(pc.task);
    j["skipped"] = table.skipped;
    write_text(out / "probe_results.json", j.dump(2) + "\n");
    write_text(out / "probe_results.csv", r.to_csv());
    std::cout << task_name(pc.task) << " test AUC " << r.auc_per_label.at(std::string(task_name(pc.task)) + ".test")
              << "\n";
  }
  inv.manifest.outputs["json"] = (out / "probe_results.json").string();
  inv.manifest.outputs["csv"] = (out / "probe_results.csv").string();
}

void ablate(const Common& a, const PretrainArgs& p, Invocation& inv) {
  const json config = load_config(a.config);
  TrainConfig train = section<TrainConfig>(config, "train");
  const auto encoder = section<EncoderConfig>(config, "model");
  train.seed = resolve_seed(a.seed_flag(), config.contains("seed") ? config : json{{"seed", train.seed}});
  if (p.steps_opt != nullptr && p.steps_opt->count() > 0) train.steps = p.steps;
  train.validate();
  inv.manifest.seed = train.seed;
  inv.manifest.config_hash = config_hash(config);
  inv.manifest.inputs = {{"config", a.config}, {"cohort", p.cohort}};
  const Cohort cohort = open_cohort(p.cohort);
  const AblationReport report = run_ablation(cohort, train, encoder);
  ensure_dir(a.out);
  write_text(fs::path(a.out) / "ablation.json", report.to_json().dump(2) + "\n");
  inv.manifest.outputs = {{"report", (fs::path(a.out) / "ablation.json").string()}};
  std::cout << "step-0 fc loss: comprer " << report.comprer_step0_fc << ", mmcl " << report.mmcl_step0_fc << "\n";
}

int dispatch(const std::vector<std::string>& args, bool allow_replay);

int replay(const std::string& manifest_path) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + manifest_path);
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path + ": " + e.what());
  }
  const auto argv = m.at("argv").get<std::vector<std::string>>();
  std::vector<std::string> full = {"comprer"};
  full.insert(full.end(), argv.begin(), argv.end());
  return dispatch(full, false);
}

int dispatch(const std::vector<std::string>& args, bool allow_replay) {
  CLI::App app{"Contrastive multi-objective pretraining on a synthetic two-modality cohort", "comprer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  Common common;
  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("--config", common.config, "JSON config file");
    if (config_required) c->required();
    sub->add_option("--out", common.out, "output directory")->required();
    common.seed_opts.push_back(sub->add_option("--seed", common.seed, "overrides the config and COMPRER_SEED"));
  };

  auto* gen = app.add_subcommand("gen-data", "generate and split a synthetic cohort");
  add_common(gen, true);

  PretrainArgs pre;
  auto* pt = app.add_subcommand("pretrain", "train the twin encoders");
  add_common(pt, true);
  pt->add_option("--cohort", pre.cohort, "cohort directory")->required();
  pt->add_option("--mode", pre.mode, "comprer or mmcl")->check(CLI::IsMember({"comprer", "mmcl"}));
  pt->add_flag("--paper-total", pre.paper_total, "drop the reconstruction terms from the total");
  pre.steps_opt = pt->add_option("--steps", pre.steps, "override the configured step count");
  pt->add_option("--resume", pre.resume, "continue from a checkpoint");

  EvalArgs ev;
  auto* evc = app.add_subcommand("eval", "retrieval and measure-prediction metrics");
  add_common(evc, false);
  evc->add_option("--checkpoint", ev.checkpoint)->required();
  evc->add_option("--cohort", ev.cohort)->required();
  evc->add_option("--split", ev.split)->check(CLI::IsMember({"train", "validation", "test"}));
  evc->add_option("--k", ev.k, "comma-separated k list")->delimiter(',');

  ProbeArgs pr;
  auto* prc = app.add_subcommand("probe", "downstream diagnosis / prognosis probes");
  add_common(prc, false);
  prc->add_option("--checkpoint", pr.checkpoint)->required();
  prc->add_option("--cohort", pr.cohort)->required();
  prc->add_option("--task", pr.task)->check(CLI::IsMember({"diagnosis", "prognosis"}));
  prc->add_option("--grid", pr.grid, "JSON search grid; implies --search");
  prc->add_flag("--search", pr.search, "head search instead of the frozen logistic probe");
  prc->add_option("--modality", pr.modality)->check(CLI::IsMember({"fundus", "carotid"}));

  PretrainArgs abl;
  auto* ab = app.add_subcommand("ablate", "comprer and mmcl from one config and seed");
  add_common(ab, true);
  ab->add_option("--cohort", abl.cohort)->required();
  abl.steps_opt = ab->add_option("--steps", abl.steps);

  std::string manifest_path;
  CLI::App* rp = nullptr;
  if (allow_replay) {
    rp = app.add_subcommand("replay", "re-run the command recorded in a run manifest");
    rp->add_option("manifest", manifest_path)->required();
  }

  std::vector<const char*> argv;
  for (const auto& s : args) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_ok : exit_usage;
  }

  if (rp != nullptr && rp->parsed()) return replay(manifest_path);

  Invocation inv;
  inv.manifest.started = utc_now();
  inv.manifest.argv.assign(args.begin() + 1, args.end());
  inv.out_dir = common.out;
  int code = exit_ok;
  try {
    if (gen->parsed()) {
      inv.manifest.command = "gen-data";
      gen_data(common, inv);
    } else if (pt->parsed()) {
      inv.manifest.command = "pretrain";
      pretrain(common, pre, inv);
    } else if (evc->parsed()) {
      inv.manifest.command = "eval";
      eval(common, ev, inv);
    } else if (prc->parsed()) {
      inv.manifest.command = "probe";
      probe(common, pr, inv);
    } else if (ab->parsed()) {
      inv.manifest.command = "ablate";
      ablate(common, abl, inv);
    }
  } catch (const std::exception& e) {
    code = exit_code_for(e);
    std::cerr << "comprer " << inv.manifest.command << ": " << e.what() << "\n";
  }
  inv.manifest.exit_code = code;
  inv.manifest.finished = utc_now();
  // A usage error before the output directory exists leaves no manifest.
  if (!inv.out_dir.empty() && (code == exit_ok || fs::exists(inv.out_dir))) {
    try {
      ensure_dir(inv.out_dir);
      write_text(inv.out_dir / "run_manifest.json", inv.manifest.to_json().dump(2) + "\n");
    } catch (const std::exception& e) {
      std::cerr << "comprer: " << e.what() << "\n";
      if (code == exit_ok) code = exit_io;
    }
  }
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  try {
    return dispatch(args, true);
  } catch (const std::exception& e) {
    std::cerr << "comprer: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

int run(int argc, const char* const* argv) { return run(std::vector<std::string>(argv, argv + argc)); }

}  // namespace comprer::cli
