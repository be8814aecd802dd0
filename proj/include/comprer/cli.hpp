#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace comprer::cli {

inline constexpr const char* kVersion = "0.1.0";

/// Process exit codes; stable across releases.
enum ExitCode : int {
  exit_ok = 0,
  exit_unexpected = 1,
  exit_usage = 2,
  exit_io = 3,
  exit_numeric = 4,
  exit_degenerate = 5,
};

/// Maps a library exception to its exit code.
int exit_code_for(const std::exception& e);

/// FNV-1a 64 over the compact dump of `config` (object keys sorted), as hex.
std::string config_hash(const nlohmann::json& config);

/// Missing or unparseable files raise ConfigError.
nlohmann::json load_config(const std::filesystem::path& path);

/// --seed, then the config's "seed", then $COMPRER_SEED, then 0.
std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, const nlohmann::json& config);

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;  ///< arguments after the program name
  std::string config_hash;
  std::uint64_t seed = 0;
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json outputs = nlohmann::json::object();
  std::string started, finished;
  std::string version = kVersion;
  int exit_code = 0;

  nlohmann::json to_json() const;
};

/// Parses and runs one subcommand (gen-data, pretrain, eval, probe, ablate,
/// replay); returns the exit code. Errors are reported on stderr.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace comprer::cli
