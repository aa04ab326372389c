#ifndef OMNINET_CONFIG_HPP
#define OMNINET_CONFIG_HPP

#include "omninet/model.hpp"
#include "omninet/train.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace omninet {

/// Invalid or inconsistent run configuration (exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a run needs. The model's vocabulary, head and class count are
/// derived from the task.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  ModelConfig model;
  TaskSpec task;
  OptimizerConfig optimizer;
  TrainOptions train;
  /// Intermediate checkpoints every this many steps; 0 keeps only the final one.
  std::int64_t checkpoint_every = 0;

  /// Throws ConfigError when model and task cannot run together.
  void validate() const;
};

/// JSON document of a configuration; all keys present.
nlohmann::ordered_json to_json(const RunConfig& config);

/// Strict conversion: unknown keys and wrongly typed values raise ConfigError.
/// Missing keys keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& doc);

/// Applies "a.b.c=value" to `doc`. The value is parsed as JSON when possible,
/// otherwise taken as a string. The path must name an existing setting.
void apply_override(nlohmann::json& doc, const std::string& assignment);

struct LoadedConfig {
  /// File contents exactly as read.
  std::string source;
  RunConfig config;
};

/// Reads a config file, applies overrides and the OMNINET_SEED environment
/// variable, then validates. Relative task paths resolve against the config
/// file's directory.
LoadedConfig load_run_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides = {});

/// Same, from an in-memory document; relative paths stay relative to the cwd.
RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides = {},
                           const std::filesystem::path& base_dir = {});

/// Seed from OMNINET_SEED if set.
std::optional<std::uint64_t> env_seed();

}  // namespace omninet

#endif  // OMNINET_CONFIG_HPP
