#ifndef OMNINET_CLI_HPP
#define OMNINET_CLI_HPP

#include "omninet/bench.hpp"
#include "omninet/config.hpp"
#include "omninet/verify.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace omninet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitNumericError = 3;

/// Finite differences are only run on models at most this large.
inline constexpr Index kGradCheckParamCap = 50000;

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

struct TrainArgs {
  std::filesystem::path config;
  std::vector<std::string> overrides;
  /// Replaces the config's output_dir.
  std::optional<std::filesystem::path> output_dir;
  /// Print one line per evaluation record.
  bool verbose = true;
};

/// Writes config.json (verbatim), config.resolved.json, metrics.jsonl and
/// checkpoint.bin (+ manifest) into the output directory.
int cmd_train(const TrainArgs& args, Streams io);

struct EvalArgs {
  std::filesystem::path checkpoint;
  /// Defaults to the checkpoint's own task settings.
  std::optional<Index> eval_size;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> report;
};

/// Prints {token_accuracy, cross_entropy, perplexity} as JSON.
int cmd_eval(const EvalArgs& args, Streams io);

struct GradCheckArgs {
  std::filesystem::path config;
  std::vector<std::string> overrides;
  std::optional<std::filesystem::path> report;
  Index batch_size = 2;
  /// Standard deviation of the noise added to the initial parameters.
  double jitter = 0.1;
};

int cmd_grad_check(const GradCheckArgs& args, Streams io);

struct ParityArgs {
  int instances = 50;
  std::uint64_t seed = 0;
  /// "" or "scaling".
  std::string inject_fault;
  bool include_models = true;
  std::optional<std::filesystem::path> report;
};

int cmd_parity_check(const ParityArgs& args, Streams io);

struct AttnDumpArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path output_dir;
  /// Input token ids; empty uses the first evaluation example of the task.
  std::vector<int> tokens;
  /// "cls" or a 0-based input position; empty picks CLS for classifiers and
  /// the last position for language models.
  std::string query;
  bool dense_oracle = false;
};

/// Writes attention.json, pooling.json and attention_head<h>.pgm.
int cmd_attn_dump(const AttnDumpArgs& args, Streams io);

struct BenchArgs {
  BenchGrid grid;
  std::optional<std::filesystem::path> csv;
};

int cmd_bench(const BenchArgs& args, Streams io);

/// Exact row of the model input that `query` names.
Index resolve_query(const std::string& query, const ModelConfig& config, Index n_inputs);

/// Greyscale P2 image of `values` (rows = height), linearly scaled so the
/// largest entry maps to 255.
std::string to_pgm(const Matrix& values);

/// Writes `text` to `path`, creating parent directories.
void write_file(const std::filesystem::path& path, const std::string& text);

}  // namespace omninet::cli

#endif  // OMNINET_CLI_HPP
