#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "comprer/cli.hpp"
#include "comprer/probe.hpp"
#include "fixtures.hpp"
#include "support.hpp"

using namespace comprer;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::vector<json> read_jsonl(const fs::path& p) {
  std::ifstream in(p);
  std::vector<json> out;
  for (std::string line; std::getline(in, line);) out.push_back(json::parse(line));
  return out;
}

json tiny_config(std::size_t steps = 6, std::size_t participants = 60) {
  return {{"seed", 7},
          {"data", testing::tiny_generator(participants)},
          {"model", testing::tiny_encoder()},
          {"train", testing::tiny_train(steps)}};
}

fs::path write_config(const testing::TempDir& dir, const json& config, const std::string& name = "config.json") {
  std::ofstream(dir / name) << config.dump(2);
  return dir / name;
}

int invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "comprer");
  return cli::run(args);
}

// Cohort and checkpoint shared by the eval/probe cases.
struct Prepared {
  testing::TempDir dir{"cli_prepared"};
  fs::path cohort, ckpt;
  Prepared() {
    const fs::path cfg = write_config(dir, tiny_config(8, 200));
    cohort = dir / "cohort";
    REQUIRE(invoke({"gen-data", "--config", cfg.string(), "--out", cohort.string()}) == 0);
    REQUIRE(invoke({"pretrain", "--config", cfg.string(), "--cohort", cohort.string(), "--out", (dir / "run").string()}) ==
            0);
    ckpt = dir.path() / "run" / "checkpoint.cmpr";
  }
};

Prepared& prepared() {
  static Prepared p;
  return p;
}

}  // namespace

TEST_CASE("exit code mapping") {
  CHECK(cli::exit_code_for(ConfigError("x")) == 2);
  CHECK(cli::exit_code_for(ContractError("x")) == 2);
  CHECK(cli::exit_code_for(DimensionError("x")) == 2);
  CHECK(cli::exit_code_for(IoError("x")) == 3);
  CHECK(cli::exit_code_for(NumericError("x")) == 4);
  CHECK(cli::exit_code_for(DegenerateInputError("x")) == 5);
  CHECK(cli::exit_code_for(std::runtime_error("x")) == 1);
}

TEST_CASE("config hash ignores key order and seeds resolve by precedence") {
  CHECK(cli::config_hash(json::parse(R"({"b":1,"a":[1,2]})")) == cli::config_hash(json::parse(R"({"a":[1,2],"b":1})")));
  CHECK(cli::config_hash(json{{"a", 1}}) != cli::config_hash(json{{"a", 2}}));
  CHECK(cli::config_hash(json{{"a", 1}}).size() == 16);

  CHECK(cli::resolve_seed(3, json{{"seed", 4}}) == 3);
  CHECK(cli::resolve_seed(std::nullopt, json{{"seed", 4}}) == 4);
  ::setenv("COMPRER_SEED", "19", 1);
  CHECK(cli::resolve_seed(std::nullopt, json::object()) == 19);
  ::unsetenv("COMPRER_SEED");
  CHECK(cli::resolve_seed(std::nullopt, json::object()) == 0);
}

TEST_CASE("usage and config failures") {
  testing::TempDir dir("cli_usage");
  CHECK(invoke({}) == 2);
  CHECK(invoke({"frobnicate"}) == 2);
  CHECK(invoke({"gen-data", "--config", (dir / "missing.json").string(), "--out", (dir / "o").string()}) == 2);
  std::ofstream(dir / "broken.json") << "{ not json";
  CHECK(invoke({"gen-data", "--config", (dir / "broken.json").string(), "--out", (dir / "o").string()}) == 2);
  json bad = tiny_config();
  bad["data"]["n_participants"] = 3;
  CHECK(invoke({"gen-data", "--config", write_config(dir, bad, "bad.json").string(), "--out", (dir / "o").string()}) == 2);
  json unknown = tiny_config();
  unknown["train"]["learning_rate"] = 1;
  CHECK(invoke({"pretrain", "--config", write_config(dir, unknown, "u.json").string(), "--cohort",
             (dir / "nowhere").string(), "--out", (dir / "p").string()}) == 2);
  CHECK(invoke({"eval", "--checkpoint", (dir / "none.cmpr").string(), "--cohort", (dir / "nowhere").string(), "--out",
             (dir / "e").string()}) == 3);
}

TEST_CASE("an unwritable output is an io failure") {
  testing::TempDir dir("cli_io");
  const fs::path cfg = write_config(dir, tiny_config());
  std::ofstream(dir / "file") << "x";
  CHECK(invoke({"gen-data", "--config", cfg.string(), "--out", (dir.path() / "file" / "sub").string()}) == 3);
}

TEST_CASE("gen-data is byte-identical on rerun and counts match the config") {
  testing::TempDir dir("cli_gen");
  const fs::path cfg = write_config(dir, tiny_config());
  REQUIRE(invoke({"gen-data", "--config", cfg.string(), "--out", (dir / "a").string()}) == 0);
  REQUIRE(invoke({"gen-data", "--config", cfg.string(), "--out", (dir / "b").string()}) == 0);
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(dir / "a")) {
    if (!entry.is_regular_file() || entry.path().filename() == "run_manifest.json") continue;
    ++files;
    CHECK(slurp(entry.path()) == slurp(dir / "b" / fs::relative(entry.path(), dir / "a")));
  }
  CHECK(files > 10);

  const json manifest = read_json(dir.path() / "a" / "run_manifest.json");
  CHECK(manifest.at("command") == "gen-data");
  CHECK(manifest.at("seed") == 7);
  CHECK(manifest.at("exit_code") == 0);
  CHECK(manifest.at("outputs").at("participants") == 60);
  CHECK(manifest.at("config_hash") == cli::config_hash(tiny_config()));
  CHECK(read_json(dir.path() / "a" / "cohort.json").at("seed") == 7);

  REQUIRE(invoke({"gen-data", "--config", cfg.string(), "--out", (dir / "c").string(), "--seed", "8"}) == 0);
  CHECK(slurp(dir.path() / "c" / "test" / "measures.cmpr") != slurp(dir.path() / "a" / "test" / "measures.cmpr"));
}

TEST_CASE("replaying a manifest reproduces the outputs") {
  testing::TempDir dir("cli_replay");
  const fs::path cfg = write_config(dir, tiny_config());
  REQUIRE(invoke({"gen-data", "--config", cfg.string(), "--out", (dir / "a").string()}) == 0);
  const std::string before = slurp(dir.path() / "a" / "train" / "fundus_right.cmpr");
  fs::copy_file(dir.path() / "a" / "run_manifest.json", dir / "manifest.json");
  fs::remove_all(dir / "a");
  CHECK(invoke({"replay", (dir / "manifest.json").string()}) == 0);
  CHECK(slurp(dir.path() / "a" / "train" / "fundus_right.cmpr") == before);
  CHECK(invoke({"replay", (dir / "nothing.json").string()}) == 3);
}

TEST_CASE("pretrain histories in both modes") {
  testing::TempDir dir("cli_pretrain");
  const fs::path cfg = write_config(dir, tiny_config());
  const fs::path cohort = dir / "cohort";
  REQUIRE(invoke({"gen-data", "--config", cfg.string(), "--out", cohort.string()}) == 0);

  REQUIRE(invoke({"pretrain", "--config", cfg.string(), "--cohort", cohort.string(), "--out", (dir / "mmcl").string(),
               "--mode", "mmcl"}) == 0);
  const auto mmcl = read_jsonl(dir.path() / "mmcl" / "loss_history.jsonl");
  REQUIRE(mmcl.size() == 6);
  for (const json& line : mmcl) {
    CHECK(line.size() == 3);  // step, contr_fc, total
    CHECK(line.contains("contr_fc"));
  }

  REQUIRE(invoke({"pretrain", "--config", cfg.string(), "--cohort", cohort.string(), "--out", (dir / "no_rec").string(),
               "--paper-total", "--steps", "3"}) == 0);
  const auto no_rec = read_jsonl(dir.path() / "no_rec" / "loss_history.jsonl");
  REQUIRE(no_rec.size() == 3);
  for (const json& line : no_rec) {
    double sum = 0;
    for (const char* t : {"contr_fc", "contr_fv", "contr_cv", "contr_eye", "pred_r", "pred_c"}) sum += line.at(t).get<double>();
    CHECK_FALSE(line.contains("rec_f"));
    CHECK(line.at("total").get<double>() == doctest::Approx(sum).epsilon(1e-14));
  }
  CHECK(fs::exists(dir.path() / "no_rec" / "checkpoint.cmpr"));
  CHECK(read_json(dir.path() / "no_rec" / "run_manifest.json").at("command") == "pretrain");
}

TEST_CASE("resumed pretraining matches the unbroken history") {
  testing::TempDir dir("cli_resume");
  json config = tiny_config(8);
  config["train"]["checkpoint_every"] = 4;
  const fs::path cfg = write_config(dir, config);
  const fs::path cohort = dir / "cohort";
  REQUIRE(invoke({"gen-data", "--config", cfg.string(), "--out", cohort.string()}) == 0);
  REQUIRE(invoke({"pretrain", "--config", cfg.string(), "--cohort", cohort.string(), "--out", (dir / "whole").string()}) == 0);
  REQUIRE(invoke({"pretrain", "--config", cfg.string(), "--cohort", cohort.string(), "--out", (dir / "part").string(),
               "--steps", "4"}) == 0);
  REQUIRE(invoke({"pretrain", "--config", cfg.string(), "--cohort", cohort.string(), "--out", (dir / "part").string(),
               "--resume", (dir.path() / "part" / "checkpoint.cmpr").string()}) == 0);
  CHECK(slurp(dir.path() / "part" / "loss_history.jsonl") == slurp(dir.path() / "whole" / "loss_history.jsonl"));
  CHECK(slurp(dir.path() / "part" / "checkpoint.cmpr") == slurp(dir.path() / "whole" / "checkpoint.cmpr"));
}

TEST_CASE("a diverging run exits 4 and keeps a loadable checkpoint") {
  testing::TempDir dir("cli_diverge");
  json config = tiny_config(50);
  config["train"]["lr"] = 1e150;
  const fs::path cfg = write_config(dir, config);
  const fs::path cohort = dir / "cohort";
  REQUIRE(invoke({"gen-data", "--config", cfg.string(), "--out", cohort.string()}) == 0);
  CHECK(invoke({"pretrain", "--config", cfg.string(), "--cohort", cohort.string(), "--out", (dir / "run").string()}) == 4);
  const Checkpoint c = load_checkpoint(dir.path() / "run" / "checkpoint.cmpr");
  CHECK(c.state.params.all_finite());
  CHECK(c.state.step() < 50);
  CHECK(read_json(dir.path() / "run" / "run_manifest.json").at("exit_code") == 4);
}

TEST_CASE("eval writes deterministic json and a csv with the documented rows") {
  Prepared& p = prepared();
  const fs::path out = p.dir / "eval";
  REQUIRE(invoke({"eval", "--checkpoint", p.ckpt.string(), "--cohort", p.cohort.string(), "--out", out.string(), "--k",
               "1,2,3"}) == 0);
  const std::string first = slurp(out / "metrics.json");
  const std::string csv = slurp(out / "metrics.csv");
  // header + 2 rows per k + 8 measures (4 per modality) + 3 scalars
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 3 * 2 + 8 + 3);
  REQUIRE(invoke({"eval", "--checkpoint", p.ckpt.string(), "--cohort", p.cohort.string(), "--out", out.string(), "--k",
               "1,2,3"}) == 0);
  CHECK(slurp(out / "metrics.json") == first);
  CHECK(invoke({"eval", "--checkpoint", p.ckpt.string(), "--cohort", p.cohort.string(), "--out", out.string(), "--k",
             "5000"}) == 2);
}

TEST_CASE("probe outputs, prognosis population and repeatability") {
  Prepared& p = prepared();
  const fs::path d1 = p.dir / "probe_diag", d2 = p.dir / "probe_diag2", pg = p.dir / "probe_prog";
  REQUIRE(invoke({"probe", "--checkpoint", p.ckpt.string(), "--cohort", p.cohort.string(), "--out", d1.string()}) == 0);
  REQUIRE(invoke({"probe", "--checkpoint", p.ckpt.string(), "--cohort", p.cohort.string(), "--out", d2.string()}) == 0);
  CHECK(slurp(d1 / "probe_results.json") == slurp(d2 / "probe_results.json"));
  CHECK(slurp(d1 / "embeddings.cmpr") == slurp(d2 / "embeddings.cmpr"));
  REQUIRE(invoke({"probe", "--checkpoint", p.ckpt.string(), "--cohort", p.cohort.string(), "--out", pg.string(), "--task",
               "prognosis"}) == 0);
  const json diag = read_json(d1 / "probe_results.json");
  const json prog = read_json(pg / "probe_results.json");
  const auto total = [](const json& j) {
    const json& s = j.at("scalars");
    return s.at("n_train").get<double>() + s.at("n_validation").get<double>() + s.at("n_test").get<double>();
  };
  CHECK(total(prog) < total(diag));

  testing::TempDir gdir("cli_grid");
  std::ofstream(gdir / "grid.json") << R"({"lr":[1e-2],"weight_decay":[0.0, 0.1],"epochs":[3],"top":2})";
  const fs::path sr = p.dir / "probe_search";
  REQUIRE(invoke({"probe", "--checkpoint", p.ckpt.string(), "--cohort", p.cohort.string(), "--out", sr.string(), "--grid",
               (gdir / "grid.json").string()}) == 0);
  const json search = read_json(sr / "probe_results.json");
  CHECK(search.at("records").size() == 2);
  CHECK(search.at("distribution").size() == 2);
}

TEST_CASE("degenerate probe labels exit 5") {
  testing::TempDir dir("cli_degenerate");
  json config = tiny_config(2);
  config["data"]["diagnosis_bias"] = -60.0;  // nobody is diagnosed
  const fs::path cfg = write_config(dir, config);
  const fs::path cohort = dir / "cohort";
  REQUIRE(invoke({"gen-data", "--config", cfg.string(), "--out", cohort.string()}) == 0);
  REQUIRE(invoke({"pretrain", "--config", cfg.string(), "--cohort", cohort.string(), "--out", (dir / "run").string()}) == 0);
  CHECK(invoke({"probe", "--checkpoint", (dir.path() / "run" / "checkpoint.cmpr").string(), "--cohort", cohort.string(),
             "--out", (dir / "probe").string()}) == 5);
}

TEST_CASE("ablate writes a comparison report") {
  testing::TempDir dir("cli_ablate");
  const fs::path cfg = write_config(dir, tiny_config(3));
  const fs::path cohort = dir / "cohort";
  REQUIRE(invoke({"gen-data", "--config", cfg.string(), "--out", cohort.string()}) == 0);
  REQUIRE(invoke({"ablate", "--config", cfg.string(), "--cohort", cohort.string(), "--out", (dir / "ab").string()}) == 0);
  const json report = read_json(dir.path() / "ab" / "ablation.json");
  CHECK(report.at("step0_fc_identical").get<bool>());
}
