#include "omninet/model.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace omninet {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };
  if (vocab_size < 1) fail("vocab_size must be positive");
  if (d_model < 1 || n_heads < 1) fail("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (d_ff < 1) fail("d_ff must be positive");
  if (layers < 1) fail("model needs at least one layer");
  if (partition < 1 || partition > layers) fail("partition size must satisfy 1 <= P <= L");
  if (layers % partition != 0) fail("L mod P != 0");
  if (max_len < 1) fail("max_len must be positive");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) fail("dropout_rate must be in [0, 1)");
  if (task == TaskKind::Classifier && n_classes < 2) fail("classifier needs n_classes >= 2");
  if (task == TaskKind::LanguageModel && !backend.supports_causal()) {
    fail("low-rank backend does not support causality (language model requires it)");
  }
  switch (backend.kind) {
    case BackendKind::LowRank:
      if (backend.lowrank.proj_len < 1 || backend.lowrank.proj_len > max_len) {
        fail("lowrank k must be in [1, max_len]");
      }
      break;
    case BackendKind::BlockSparse:
      if (backend.block.block_size < 1) fail("block_size must be positive");
      if (backend.block.num_random_blocks < 0 || backend.block.num_global_blocks < 0 ||
          backend.block.window_blocks < 0) {
        fail("block-sparse counts must be non-negative");
      }
      break;
    case BackendKind::Kernel:
      if (backend.kernel.feature_eps < 0.0) fail("kernel feature_eps must be non-negative");
      break;
    case BackendKind::Exact:
      break;
  }
}

std::string layer_prefix(int layer) {
  std::string digits = std::to_string(layer);
  if (digits.size() < 2) digits.insert(0, 2 - digits.size(), '0');
  return "layers." + digits;
}

ParamSet init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng root(seed, 0);
  ParamSet params;
  const Index d = config.d_model;
  Rng embed_rng = root.split(1);
  params.add("embed.tokens", embed_rng.normal_matrix(config.vocab_size, d, 1.0 / std::sqrt(double(d))));
  if (config.task == TaskKind::Classifier) {
    params.add("embed.cls", embed_rng.normal_matrix(1, d, 1.0));
  }
  const OmniPlan plan = config.plan();
  for (const LayerPlan& entry : plan.schedule) {
    Rng rng = root.split(100 + static_cast<std::uint64_t>(entry.layer));
    const std::string prefix = layer_prefix(entry.layer);
    if (entry.kind == LayerKind::Transformer) {
      init_mha_params(params, prefix + ".attn", d, config.n_heads, rng);
      init_ffn_params(params, prefix + ".ffn", d, config.d_ff, rng);
      continue;
    }
    init_mha_params(params, prefix + ".omni.attn", d, config.n_heads, rng);
    init_ffn_params(params, prefix + ".omni.ffn", d, config.d_ff, rng);
    if (config.backend.kind == BackendKind::LowRank) {
      params.add(prefix + ".omni.lowrank_w",
                 rng.normal_matrix(config.max_len, config.backend.lowrank.proj_len,
                                   1.0 / std::sqrt(double(config.backend.lowrank.proj_len))));
    }
    if (config.layer_embedding) {
      params.add(prefix + ".omni.layer_embedding",
                 rng.normal_matrix(static_cast<Index>(entry.consumes.size()), d, 0.02));
    }
  }
  params.add("final_ln.gamma", Matrix::Ones(1, d));
  params.add("final_ln.beta", Matrix::Zero(1, d));
  const Index out_dim = config.task == TaskKind::Classifier ? config.n_classes : config.vocab_size;
  Rng head_rng = root.split(2);
  params.add("head.w", head_rng.normal_matrix(d, out_dim, 1.0 / std::sqrt(double(d))));
  params.add("head.b", Matrix::Zero(1, out_dim));
  return params;
}

Matrix sinusoidal_positions(Index rows, Index d) {
  Matrix pe(rows, d);
  for (Index pos = 0; pos < rows; ++pos) {
    for (Index i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -double(2 * (i / 2)) / double(d));
      pe(pos, i) = (i % 2 == 0) ? std::sin(double(pos) * rate) : std::cos(double(pos) * rate);
    }
  }
  return pe;
}

namespace {

void check_tokens(const ModelConfig& config, std::span<const int> tokens, Index extra_rows) {
  if (tokens.empty()) {
    throw std::invalid_argument("forward: empty token sequence");
  }
  if (static_cast<Index>(tokens.size()) + extra_rows > config.max_len) {
    throw std::invalid_argument("forward: sequence of " + std::to_string(tokens.size()) +
                                " exceeds max_len " + std::to_string(config.max_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= config.vocab_size) {
      throw std::out_of_range("forward: token " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(config.vocab_size));
    }
  }
}

/// Runs the layer schedule over the embedded input and returns the final
/// normalized representation.
Var run_layers(Tape& tape, const ModelConfig& config, const ParamSet& params, Var embedded,
               bool causal, const ForwardOptions& options, ForwardDiagnostics& diagnostics) {
  const OmniPlan plan = config.plan();
  const Index n = embedded.rows();
  const double dropout_rate = options.training ? config.dropout_rate : 0.0;
  const int last_omni = plan.omni_layers().empty() ? -1 : plan.omni_layers().back();

  std::vector<Var> outputs{embedded};
  outputs.reserve(plan.schedule.size() + 1);
  for (const LayerPlan& entry : plan.schedule) {
    const std::string prefix = layer_prefix(entry.layer);
    Var previous = outputs.back();
    if (entry.kind == LayerKind::Transformer) {
      const MhaParams attn = bind_mha(tape, params, prefix + ".attn", config.n_heads);
      const FfnParams ffn = bind_ffn(tape, params, prefix + ".ffn");
      const Mask mask = make_mask(causal, n, 1);
      Var y = mha_block(previous, attn, make_head_attention(AttentionBackend::exact(), mask),
                        config.ln_placement, dropout_rate, options.dropout_rng);
      outputs.push_back(ffn_block(y, ffn, config.ln_placement, dropout_rate, options.dropout_rng));
      continue;
    }
    OmniParams omni{bind_mha(tape, params, prefix + ".omni.attn", config.n_heads),
                    bind_ffn(tape, params, prefix + ".omni.ffn"), std::nullopt, std::nullopt};
    if (params.contains(prefix + ".omni.lowrank_w")) {
      omni.lowrank_w = tape.parameter(params, prefix + ".omni.lowrank_w");
    }
    if (params.contains(prefix + ".omni.layer_embedding")) {
      omni.layer_embedding = tape.parameter(params, prefix + ".omni.layer_embedding");
    }
    LayerStack stack;
    for (int src : entry.consumes) {
      stack.layers.push_back(outputs[static_cast<std::size_t>(src)]);
      stack.layer_ids.push_back(src);
    }
    OmniOptions omni_options;
    omni_options.placement = config.ln_placement;
    omni_options.dropout_rate = dropout_rate;
    omni_options.dropout_rng = options.dropout_rng;
    omni_options.omni_layer = entry.layer;
    omni_options.dense_oracle = options.dense_oracle;
    if (entry.layer == last_omni) {
      omni_options.attention_query = options.attention_query;
    }
    OmniOutput result = omni_block(stack, config.backend, omni, causal, omni_options);
    diagnostics.pool.push_back(std::move(result.stats));
    if (result.attention) {
      diagnostics.attention.push_back(std::move(*result.attention));
    }
    // A single-layer stack already carries that layer's residual inside the
    // block; the extra skip applies only to genuine multi-layer pooling.
    const bool add_skip = config.omni_residual && stack.layer_count() > 1;
    outputs.push_back(add_skip ? combine_final(previous, result.pooled) : result.pooled);
  }
  return layer_norm(outputs.back(), tape.parameter(params, "final_ln.gamma"),
                    tape.parameter(params, "final_ln.beta"));
}

Var embed_tokens(Tape& tape, const ModelConfig& config, const ParamSet& params,
                 std::span<const int> tokens) {
  std::vector<Index> rows(tokens.begin(), tokens.end());
  Var table = tape.parameter(params, "embed.tokens");
  return scale(gather_rows(table, std::move(rows)), std::sqrt(double(config.d_model)));
}

}  // namespace

ForwardResult forward_lm(Tape& tape, const ModelConfig& config, const ParamSet& params,
                         std::span<const int> tokens, const ForwardOptions& options) {
  if (config.task != TaskKind::LanguageModel) {
    throw std::invalid_argument("forward_lm: model is configured as a classifier");
  }
  if (!config.backend.supports_causal()) {
    throw std::invalid_argument("low-rank backend does not support causality");
  }
  check_tokens(config, tokens, 0);
  Var embedded = embed_tokens(tape, config, params, tokens);
  embedded = add_constant(embedded, sinusoidal_positions(embedded.rows(), config.d_model));
  ForwardResult result;
  Var hidden = run_layers(tape, config, params, embedded, true, options, result.diagnostics);
  result.logits = add_row(matmul(hidden, tape.parameter(params, "head.w")),
                          tape.parameter(params, "head.b"));
  return result;
}

ForwardResult forward_classifier(Tape& tape, const ModelConfig& config, const ParamSet& params,
                                 std::span<const int> tokens, const ForwardOptions& options) {
  if (config.task != TaskKind::Classifier) {
    throw std::invalid_argument("forward_classifier: model is configured as a language model");
  }
  check_tokens(config, tokens, 1);
  Var embedded =
      concat_rows({tape.parameter(params, "embed.cls"), embed_tokens(tape, config, params, tokens)});
  embedded = add_constant(embedded, sinusoidal_positions(embedded.rows(), config.d_model));
  ForwardResult result;
  Var hidden = run_layers(tape, config, params, embedded, false, options, result.diagnostics);
  result.logits = add_row(matmul(slice_rows(hidden, 0, 1), tape.parameter(params, "head.w")),
                          tape.parameter(params, "head.b"));
  return result;
}

ParamCensus param_count(const ParamSet& params) {
  ParamCensus census;
  for (const auto& [name, tensor] : params) {
    std::string group = name.substr(0, name.find('.'));
    if (group == "layers") {
      group = name.substr(0, name.find('.', group.size() + 1));
    }
    census.per_group[group] += tensor.size();
    if (name.ends_with(".lowrank_w") || name.ends_with(".layer_embedding")) {
      census.extras[name] += tensor.size();
    }
    census.total += tensor.size();
  }
  return census;
}

// ------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'O', 'M', 'N', 'I', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint64_t u(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + std::size_t(i)])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint: truncated file");
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::filesystem::path manifest_path(const std::filesystem::path& checkpoint) {
  return std::filesystem::path(checkpoint.string() + ".manifest.json");
}

void save_checkpoint(const std::filesystem::path& path, const std::string& config_json,
                     const ParamSet& params) {
  std::string out(kMagic, sizeof(kMagic));
  put_u32(out, kVersion);
  put_u64(out, config_json.size());
  out += config_json;
  put_u64(out, params.size());
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  for (const auto& [name, tensor] : params) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, 2);
    put_u64(out, static_cast<std::uint64_t>(tensor.rows()));
    put_u64(out, static_cast<std::uint64_t>(tensor.cols()));
    const std::size_t offset = out.size();
    for (Index k = 0; k < tensor.size(); ++k) {
      put_u64(out, std::bit_cast<std::uint64_t>(tensor.data()[k]));
    }
    tensors.push_back({{"name", name},
                       {"shape", {tensor.rows(), tensor.cols()}},
                       {"offset", offset},
                       {"bytes", static_cast<std::size_t>(tensor.size()) * 8}});
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("checkpoint: cannot write " + path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));

  nlohmann::ordered_json manifest;
  manifest["format"] = "omninet-checkpoint";
  manifest["version"] = kVersion;
  manifest["checkpoint"] = path.filename().string();
  manifest["config"] = nlohmann::ordered_json::parse(config_json);
  manifest["tensors"] = std::move(tensors);
  std::ofstream mfile(manifest_path(path));
  if (!mfile) throw std::runtime_error("checkpoint: cannot write manifest for " + path.string());
  mfile << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("checkpoint: cannot read " + path.string());
  std::ostringstream buffer;
  buffer << file.rdbuf();
  Reader in(buffer.str());
  if (in.str(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  }
  if (in.u(4) != kVersion) throw std::runtime_error("checkpoint: unsupported version");
  Checkpoint ckpt;
  ckpt.config_json = in.str(in.u(8));
  const std::uint64_t count = in.u(8);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = in.str(in.u(4));
    const std::uint64_t rank = in.u(4);
    if (rank != 2) throw std::runtime_error("checkpoint: tensor " + name + " has rank " + std::to_string(rank));
    const auto rows = static_cast<Index>(in.u(8));
    const auto cols = static_cast<Index>(in.u(8));
    Matrix tensor(rows, cols);
    for (Index k = 0; k < tensor.size(); ++k) {
      tensor.data()[k] = std::bit_cast<double>(in.u(8));
    }
    ckpt.params.add(name, std::move(tensor));
  }
  if (!in.done()) throw std::runtime_error("checkpoint: trailing bytes in " + path.string());
  return ckpt;
}

}  // namespace omninet
