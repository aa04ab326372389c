#include "omninet/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace omninet {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw ConfigError(msg); }

/// Rejects keys absent from `defaults` and values whose type differs.
void check_shape(const json& doc, const json& defaults, const std::string& where) {
  if (!doc.is_object()) fail(where.empty() ? "config must be a JSON object" : where + " must be an object");
  for (const auto& [key, value] : doc.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!defaults.contains(key)) fail("unknown config key '" + path + "'");
    const json& expected = defaults.at(key);
    if (expected.is_object()) {
      check_shape(value, expected, path);
    } else if (expected.is_boolean() && !value.is_boolean()) {
      fail("'" + path + "' must be a boolean");
    } else if (expected.is_string() && !value.is_string()) {
      fail("'" + path + "' must be a string");
    } else if (expected.is_number_integer() && !value.is_number_integer()) {
      fail("'" + path + "' must be an integer");
    } else if (expected.is_number_float() && !value.is_number()) {
      fail("'" + path + "' must be a number");
    }
  }
}

/// Recursively overwrites `base` with `patch`.
void merge(json& base, const json& patch) {
  for (const auto& [key, value] : patch.items()) {
    if (value.is_object()) {
      merge(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

template <typename T>
T get(const json& doc, const char* section, const char* key) {
  try {
    return doc.at(section).at(key).get<T>();
  } catch (const json::exception& e) {
    fail(std::string("'") + section + "." + key + "': " + e.what());
  }
}

template <typename Fn>
auto parse_enum(const std::string& key, Fn&& fn) {
  try {
    return fn();
  } catch (const std::invalid_argument& e) {
    fail("'" + key + "': " + e.what());
  }
}

}  // namespace

ordered_json to_json(const RunConfig& c) {
  const ModelConfig& m = c.model;
  const AttentionBackend& b = m.backend;
  ordered_json doc;
  doc["seed"] = c.seed;
  doc["output_dir"] = c.output_dir;
  doc["model"] = {
      {"d_model", m.d_model},
      {"n_heads", m.n_heads},
      {"d_ff", m.d_ff},
      {"layers", m.layers},
      {"partition", m.partition},
      {"max_len", m.max_len},
      {"dropout", m.dropout_rate},
      {"ln_placement", to_string(m.ln_placement)},
      {"include_embeddings", m.include_embeddings},
      {"omni_residual", m.omni_residual},
      {"layer_embedding", m.layer_embedding},
      {"backend",
       {{"kind", to_string(b.kind)},
        {"feature_eps", b.kernel.feature_eps},
        {"k", b.lowrank.proj_len},
        {"block_size", b.block.block_size},
        {"num_random_blocks", b.block.num_random_blocks},
        {"num_global_blocks", b.block.num_global_blocks},
        {"window_blocks", b.block.window_blocks},
        {"rng_seed", b.block.rng_seed}}},
  };
  doc["task"] = {{"kind", to_string(c.task.kind)},
                 {"seq_len", c.task.seq_len},
                 {"vocab", c.task.vocab},
                 {"eval_size", c.task.eval_size},
                 {"path", c.task.path}};
  doc["optimizer"] = {{"lr", c.optimizer.lr},
                      {"beta1", c.optimizer.beta1},
                      {"beta2", c.optimizer.beta2},
                      {"eps", c.optimizer.eps},
                      {"weight_decay", c.optimizer.weight_decay},
                      {"warmup_steps", c.optimizer.warmup_steps},
                      {"max_steps", c.optimizer.max_steps},
                      {"schedule", to_string(c.optimizer.schedule)}};
  doc["train"] = {{"batch_size", c.train.batch_size},
                  {"eval_every", c.train.eval_every},
                  {"checkpoint_every", c.checkpoint_every}};
  return doc;
}

RunConfig run_config_from_json(const json& user) {
  const json defaults = json(to_json(RunConfig{}));
  check_shape(user, defaults, "");
  json doc = defaults;
  merge(doc, user);

  for (const json* seed : {&doc.at("seed"), &doc.at("model").at("backend").at("rng_seed")}) {
    if (!seed->is_number_unsigned() && seed->get<std::int64_t>() < 0) fail("seeds must be non-negative");
  }
  RunConfig c;
  try {
    c.seed = doc.at("seed").get<std::uint64_t>();
    c.output_dir = doc.at("output_dir").get<std::string>();
  } catch (const json::exception& e) {
    fail(std::string("top-level setting: ") + e.what());
  }

  ModelConfig& m = c.model;
  m.d_model = get<Index>(doc, "model", "d_model");
  m.n_heads = get<Index>(doc, "model", "n_heads");
  m.d_ff = get<Index>(doc, "model", "d_ff");
  m.layers = get<int>(doc, "model", "layers");
  m.partition = get<int>(doc, "model", "partition");
  m.max_len = get<Index>(doc, "model", "max_len");
  m.dropout_rate = get<double>(doc, "model", "dropout");
  m.ln_placement = parse_enum("model.ln_placement", [&] {
    return parse_ln_placement(get<std::string>(doc, "model", "ln_placement"));
  });
  m.include_embeddings = get<bool>(doc, "model", "include_embeddings");
  m.omni_residual = get<bool>(doc, "model", "omni_residual");
  m.layer_embedding = get<bool>(doc, "model", "layer_embedding");

  const json& backend = doc.at("model").at("backend");
  auto bget = [&](const char* key) { return backend.at(key); };
  try {
    m.backend.kind = parse_enum("model.backend.kind",
                                [&] { return parse_backend_kind(bget("kind").get<std::string>()); });
    m.backend.kernel.feature_eps = bget("feature_eps").get<double>();
    m.backend.lowrank.proj_len = bget("k").get<Index>();
    m.backend.block.block_size = bget("block_size").get<Index>();
    m.backend.block.num_random_blocks = bget("num_random_blocks").get<Index>();
    m.backend.block.num_global_blocks = bget("num_global_blocks").get<Index>();
    m.backend.block.window_blocks = bget("window_blocks").get<Index>();
    m.backend.block.rng_seed = bget("rng_seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    fail(std::string("model.backend: ") + e.what());
  }

  c.task.kind = parse_enum("task.kind",
                           [&] { return parse_task_type(get<std::string>(doc, "task", "kind")); });
  c.task.seq_len = get<Index>(doc, "task", "seq_len");
  c.task.vocab = get<Index>(doc, "task", "vocab");
  c.task.eval_size = get<Index>(doc, "task", "eval_size");
  c.task.path = get<std::string>(doc, "task", "path");
  c.task.seed = c.seed;

  c.optimizer.lr = get<double>(doc, "optimizer", "lr");
  c.optimizer.beta1 = get<double>(doc, "optimizer", "beta1");
  c.optimizer.beta2 = get<double>(doc, "optimizer", "beta2");
  c.optimizer.eps = get<double>(doc, "optimizer", "eps");
  c.optimizer.weight_decay = get<double>(doc, "optimizer", "weight_decay");
  c.optimizer.warmup_steps = get<std::int64_t>(doc, "optimizer", "warmup_steps");
  c.optimizer.max_steps = get<std::int64_t>(doc, "optimizer", "max_steps");
  c.optimizer.schedule = parse_enum("optimizer.schedule", [&] {
    return parse_lr_schedule(get<std::string>(doc, "optimizer", "schedule"));
  });

  c.train.batch_size = get<Index>(doc, "train", "batch_size");
  c.train.eval_every = get<std::int64_t>(doc, "train", "eval_every");
  c.train.seed = c.seed;
  c.checkpoint_every = get<std::int64_t>(doc, "train", "checkpoint_every");

  m.vocab_size = c.task.model_vocab();
  if (c.task.is_classification()) {
    m.task = TaskKind::Classifier;
    m.n_classes = c.task.classes();
  } else {
    m.task = TaskKind::LanguageModel;
    m.n_classes = 0;
  }
  return c;
}

void RunConfig::validate() const {
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  if (task.seq_len < 1) fail("task.seq_len must be positive");
  if (task.eval_size < 1) fail("task.eval_size must be positive");
  if (task.kind == TaskType::CharLM && task.path.empty()) fail("charlm task needs task.path");
  if (task.kind == TaskType::MarkedToken && (task.vocab < 3 || task.seq_len < 2)) {
    fail("marked_token needs vocab >= 3 and seq_len >= 2");
  }
  if (task.kind != TaskType::CharLM && task.vocab < 1) fail("task.vocab must be positive");

  const Index tokens = task.seq_len + (model.task == TaskKind::Classifier ? 1 : 0);
  if (tokens > model.max_len) {
    fail("sequence of " + std::to_string(tokens) + " rows exceeds max_len " +
         std::to_string(model.max_len));
  }
  for (const LayerPlan& entry : model.plan().schedule) {
    if (entry.kind != LayerKind::Omni) continue;
    const Index m = omni_sequence_length(entry, tokens);
    const std::string where = "omni layer " + std::to_string(entry.layer) + " (length " +
                              std::to_string(m) + ")";
    if (model.backend.kind == BackendKind::LowRank) {
      if (m > model.max_len) fail(where + " exceeds max_len " + std::to_string(model.max_len));
      if (model.backend.lowrank.proj_len > m) fail(where + ": lowrank k exceeds its length");
    }
    if (model.backend.kind == BackendKind::BlockSparse && m % model.backend.block.block_size != 0) {
      fail(where + " is not divisible by block_size " +
           std::to_string(model.backend.block.block_size));
    }
  }

  const OptimizerConfig& o = optimizer;
  if (o.lr < 0.0) fail("optimizer.lr must be non-negative");
  if (o.beta1 < 0.0 || o.beta1 >= 1.0 || o.beta2 < 0.0 || o.beta2 >= 1.0) {
    fail("optimizer betas must be in [0, 1)");
  }
  if (o.eps <= 0.0) fail("optimizer.eps must be positive");
  if (o.weight_decay < 0.0) fail("optimizer.weight_decay must be non-negative");
  if (o.warmup_steps < 0 || o.max_steps < 0) fail("optimizer step counts must be non-negative");
  if (train.batch_size < 1) fail("train.batch_size must be positive");
  if (train.eval_every < 0 || checkpoint_every < 0) fail("train intervals must be non-negative");
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) fail("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  const json defaults = json(to_json(RunConfig{}));
  const json* schema = &defaults;
  json* target = &doc;
  std::stringstream path(key);
  std::vector<std::string> parts;
  for (std::string part; std::getline(path, part, '.');) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::string& part = parts[i];
    if (!schema->is_object() || !schema->contains(part)) fail("unknown config key '" + key + "'");
    schema = &schema->at(part);
    if (i + 1 == parts.size()) {
      if (schema->is_object()) fail("'" + key + "' is a section, not a setting");
      (*target)[part] = value;
    } else {
      if (!target->contains(part)) (*target)[part] = json::object();
      target = &(*target)[part];
      if (!target->is_object()) fail("'" + key + "' crosses a non-object value");
    }
  }
}

std::optional<std::uint64_t> env_seed() {
  const char* raw = std::getenv("OMNINET_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  try {
    std::size_t used = 0;
    const std::string text(raw);
    if (text.front() == '-') throw std::invalid_argument("negative");
    const std::uint64_t seed = std::stoull(text, &used);
    if (used != text.size()) throw std::invalid_argument("trailing characters");
    return seed;
  } catch (const std::exception&) {
    fail(std::string("OMNINET_SEED must be a non-negative integer, got '") + raw + "'");
  }
}

RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides,
                           const std::filesystem::path& base_dir) {
  json doc = json::parse(text, nullptr, false);
  if (doc.is_discarded()) fail("config is not valid JSON");
  if (!doc.is_object()) fail("config must be a JSON object");
  for (const std::string& o : overrides) apply_override(doc, o);
  if (const auto seed = env_seed()) doc["seed"] = *seed;
  RunConfig config = run_config_from_json(doc);
  if (!config.task.path.empty() && !base_dir.empty() &&
      std::filesystem::path(config.task.path).is_relative()) {
    config.task.path = (base_dir / config.task.path).lexically_normal().string();
  }
  config.validate();
  return config;
}

LoadedConfig load_run_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides) {
  std::ifstream file(path, std::ios::binary);
  if (!file) fail("cannot read config '" + path.string() + "'");
  LoadedConfig loaded;
  loaded.source.assign(std::istreambuf_iterator<char>(file), std::istreambuf_iterator<char>());
  loaded.config = parse_run_config(loaded.source, overrides, path.parent_path());
  return loaded;
}

}  // namespace omninet
