#ifndef OMNINET_MODEL_HPP
#define OMNINET_MODEL_HPP

#include "omninet/omni.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace omninet {

enum class TaskKind { LanguageModel, Classifier };

struct ModelConfig {
  Index vocab_size = 16;
  Index d_model = 32;
  Index n_heads = 2;
  Index d_ff = 64;
  int layers = 2;
  int partition = 1;
  /// Backend of the omni blocks. Plain transformer layers are always exact.
  AttentionBackend backend;
  /// Longest token sequence (CLS included) accepted by forward. Also the row
  /// extent of the low-rank projection, so a low-rank omni grid of g * N rows
  /// must fit in it; RunConfig::validate checks that.
  Index max_len = 64;
  TaskKind task = TaskKind::LanguageModel;
  Index n_classes = 0;
  double dropout_rate = 0.0;
  LnPlacement ln_placement = LnPlacement::AsPaper;
  bool include_embeddings = false;
  bool omni_residual = true;
  bool layer_embedding = false;

  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
  OmniPlan plan() const { return build_plan(layers, partition, include_embeddings); }
};

/// Zero-padded layer prefix, "layers.07".
std::string layer_prefix(int layer);

ParamSet init_params(const ModelConfig& config, std::uint64_t seed);

/// Sinusoidal position table, rows x d.
Matrix sinusoidal_positions(Index rows, Index d);

struct ForwardOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;
  /// Token whose attention row is exported from the last omni layer.
  std::optional<Index> attention_query;
  bool dense_oracle = false;
};

struct ForwardDiagnostics {
  std::vector<PoolStats> pool;
  std::vector<AttentionMap> attention;
};

struct ForwardResult {
  Var logits;
  ForwardDiagnostics diagnostics;
};

/// Causal LM: N tokens -> N x vocab logits.
ForwardResult forward_lm(Tape& tape, const ModelConfig& config, const ParamSet& params,
                         std::span<const int> tokens, const ForwardOptions& options = {});

/// Encoder classifier with a learned CLS row prepended: N tokens -> 1 x n_classes.
ForwardResult forward_classifier(Tape& tape, const ModelConfig& config, const ParamSet& params,
                                 std::span<const int> tokens, const ForwardOptions& options = {});

/// Parameter census grouped by top-level prefix ("embed", "layers.03", "head", ...).
struct ParamCensus {
  std::map<std::string, Index> per_group;
  /// Backend-specific tensors (low-rank projections, layer embeddings).
  std::map<std::string, Index> extras;
  Index total = 0;
};

ParamCensus param_count(const ParamSet& params);

/// Binary checkpoint: "OMNICKPT", u32 version, u64-length-prefixed config JSON,
/// u64 tensor count, then per tensor u32-length-prefixed name, u32 rank, u64
/// extents, raw little-endian float64 data. A JSON manifest listing names,
/// shapes and data offsets is written to `<path>.manifest.json`.
void save_checkpoint(const std::filesystem::path& path, const std::string& config_json,
                     const ParamSet& params);

struct Checkpoint {
  std::string config_json;
  ParamSet params;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

std::filesystem::path manifest_path(const std::filesystem::path& checkpoint);

}  // namespace omninet

#endif  // OMNINET_MODEL_HPP
