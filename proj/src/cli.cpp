#include "omninet/cli.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace omninet::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

/// Maps exceptions onto exit codes.
int guarded(std::ostream& err, const char* command, const std::function<int()>& body) {
  try {
    return body();
  } catch (const NumericError& e) {
    err << command << ": numeric failure: " << e.what() << '\n';
    return kExitNumericError;
  } catch (const ConfigError& e) {
    err << command << ": config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const std::exception& e) {
    err << command << ": " << e.what() << '\n';
    return kExitConfigError;
  }
}

std::string dump(const ordered_json& doc) { return doc.dump(2) + "\n"; }

RunConfig config_from_checkpoint(const Checkpoint& ckpt) {
  const json doc = json::parse(ckpt.config_json, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("checkpoint carries an unreadable config");
  RunConfig config = run_config_from_json(doc);
  config.validate();
  return config;
}

ordered_json record_json(const TrainRecord& r) {
  ordered_json line;
  line["step"] = r.step;
  line["loss"] = r.loss;
  line["accuracy"] = r.accuracy;
  line["perplexity"] = r.perplexity;
  line["wall_ms"] = r.wall_ms;
  return line;
}

ordered_json matrix_json(const Matrix& m) {
  ordered_json rows = ordered_json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    ordered_json row = ordered_json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot write '" + path.string() + "'");
  file << text;
  if (!file) throw std::runtime_error("write failed for '" + path.string() + "'");
}

// ------------------------------------------------------------- train

int cmd_train(const TrainArgs& args, Streams io) {
  return guarded(io.err, "train", [&] {
    LoadedConfig loaded = load_run_config(args.config, args.overrides);
    RunConfig& config = loaded.config;
    if (args.output_dir) config.output_dir = args.output_dir->string();
    const fs::path out(config.output_dir);
    fs::create_directories(out);
    write_file(out / "config.json", loaded.source);
    const std::string resolved = dump(to_json(config));
    write_file(out / "config.resolved.json", resolved);

    std::ofstream metrics(out / "metrics.jsonl", std::ios::binary);
    if (!metrics) throw std::runtime_error("cannot write metrics.jsonl");
    const RecordCallback on_record = [&](const TrainRecord& rec, const ParamSet& params) {
      metrics << record_json(rec).dump() << '\n';
      metrics.flush();
      if (args.verbose) {
        io.out << "step " << rec.step << "  loss " << std::setprecision(6) << rec.loss << "  acc "
               << rec.accuracy << "  ppl " << rec.perplexity << '\n';
      }
      if (config.checkpoint_every > 0 && rec.step > 0 && rec.step % config.checkpoint_every == 0 &&
          rec.step != config.optimizer.max_steps) {
        save_checkpoint(out / ("checkpoint_step" + std::to_string(rec.step) + ".bin"), resolved,
                        params);
      }
    };
    const TrainResult result =
        train_model(config.model, config.task, config.optimizer, config.train, on_record);
    save_checkpoint(out / "checkpoint.bin", resolved, result.params);
    io.out << "wrote " << (out / "checkpoint.bin").string() << '\n';
    return kExitOk;
  });
}

// ------------------------------------------------------------- eval

int cmd_eval(const EvalArgs& args, Streams io) {
  return guarded(io.err, "eval", [&] {
    const Checkpoint ckpt = load_checkpoint(args.checkpoint);
    RunConfig config = config_from_checkpoint(ckpt);
    if (args.eval_size) config.task.eval_size = *args.eval_size;
    if (args.seed) config.task.seed = *args.seed;
    if (const auto seed = env_seed()) config.task.seed = *seed;
    config.validate();
    const Metrics m = evaluate(config.model, ckpt.params, config.task);
    ordered_json report;
    report["token_accuracy"] = m.token_accuracy;
    report["cross_entropy"] = m.cross_entropy;
    report["perplexity"] = m.perplexity;
    report["eval_size"] = config.task.eval_size;
    report["seed"] = config.task.seed;
    io.out << dump(report);
    if (args.report) write_file(*args.report, dump(report));
    return kExitOk;
  });
}

// ------------------------------------------------------------- grad-check

int cmd_grad_check(const GradCheckArgs& args, Streams io) {
  return guarded(io.err, "grad-check", [&] {
    const RunConfig config = load_run_config(args.config, args.overrides).config;
    ParamSet params = init_params(config.model, config.seed);
    if (params.total_elements() > kGradCheckParamCap) {
      throw ConfigError("model has " + std::to_string(params.total_elements()) +
                        " parameters; grad-check is capped at " +
                        std::to_string(kGradCheckParamCap));
    }
    if (config.model.dropout_rate > 0.0) {
      io.err << "grad-check: dropout is disabled during the check\n";
    }
    Rng jitter_rng(config.seed, 0x6A17);
    jitter_params(params, jitter_rng, args.jitter);
    Rng batch_rng(config.seed, 0x6C);
    const std::vector<Example> batch = make_batch(config.task, args.batch_size, batch_rng);
    const GradCheckReport report = grad_check_model(config.model, params, batch);
    ordered_json doc = report.to_json();
    io.out << dump(doc);
    if (args.report) write_file(*args.report, dump(doc));
    if (!report.pass()) {
      for (const GradCheckEntry& e : report.entries) {
        if (!e.pass) io.err << "grad-check: " << e.name << " relative error " << e.max_rel_error << '\n';
      }
      return kExitCheckFailed;
    }
    return kExitOk;
  });
}

// ------------------------------------------------------------- parity-check

int cmd_parity_check(const ParityArgs& args, Streams io) {
  return guarded(io.err, "parity-check", [&] {
    if (!args.inject_fault.empty() && args.inject_fault != "scaling") {
      throw ConfigError("unknown fault '" + args.inject_fault + "' (expected scaling)");
    }
    if (args.instances < 1) throw ConfigError("instances must be positive");
    ParityOptions options;
    options.instances = args.instances;
    options.seed = args.seed;
    options.corrupt_scaling = args.inject_fault == "scaling";
    options.include_models = args.include_models;
    const ParityReport report = run_parity_suite(options);
    const ordered_json doc = report.to_json();
    io.out << dump(doc);
    if (args.report) write_file(*args.report, dump(doc));
    if (!report.pass()) {
      for (const ParityCheck& c : report.checks) {
        if (!c.pass) {
          io.err << "parity-check: " << c.name << " max error " << c.max_error << " > "
                 << c.tolerance << '\n';
        }
      }
      return kExitCheckFailed;
    }
    return kExitOk;
  });
}

// ------------------------------------------------------------- attn-dump

Index resolve_query(const std::string& query, const ModelConfig& config, Index n_inputs) {
  const bool classifier = config.task == TaskKind::Classifier;
  if (query.empty()) return classifier ? 0 : n_inputs - 1;
  if (query == "cls" || query == "CLS") {
    if (!classifier) throw ConfigError("query 'cls' needs a classifier checkpoint");
    return 0;
  }
  Index pos = 0;
  std::size_t used = 0;
  try {
    pos = std::stoll(query, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != query.size() || pos < 0 || pos >= n_inputs) {
    throw ConfigError("query must be 'cls' or a position in [0, " + std::to_string(n_inputs) +
                      "), got '" + query + "'");
  }
  return classifier ? pos + 1 : pos;
}

std::string to_pgm(const Matrix& values) {
  const double top = values.size() > 0 ? values.maxCoeff() : 0.0;
  std::ostringstream out;
  out << "P2\n" << values.cols() << ' ' << values.rows() << "\n255\n";
  for (Index r = 0; r < values.rows(); ++r) {
    for (Index c = 0; c < values.cols(); ++c) {
      const double v = top > 0.0 ? std::clamp(values(r, c) / top, 0.0, 1.0) : 0.0;
      out << (c ? " " : "") << static_cast<int>(std::lround(255.0 * v));
    }
    out << '\n';
  }
  return out.str();
}

int cmd_attn_dump(const AttnDumpArgs& args, Streams io) {
  return guarded(io.err, "attn-dump", [&] {
    const Checkpoint ckpt = load_checkpoint(args.checkpoint);
    const RunConfig config = config_from_checkpoint(ckpt);
    const ModelConfig& model = config.model;
    if (model.backend.kind != BackendKind::Exact && !args.dense_oracle) {
      throw ConfigError("checkpoint uses the " + to_string(model.backend.kind) +
                        " backend; attention maps need the exact backend or --dense-oracle");
    }
    std::vector<int> tokens = args.tokens;
    if (tokens.empty()) tokens = TaskSampler(config.task).eval_set().front().inputs;
    for (int t : tokens) {
      if (t < 0 || t >= model.vocab_size) {
        throw ConfigError("token " + std::to_string(t) + " outside vocabulary of " +
                          std::to_string(model.vocab_size));
      }
    }
    const Index n_inputs = static_cast<Index>(tokens.size());
    const Index query = resolve_query(args.query, model, n_inputs);

    ForwardOptions options;
    options.attention_query = query;
    options.dense_oracle = args.dense_oracle;
    Tape tape;
    const ForwardResult result = model.task == TaskKind::Classifier
                                     ? forward_classifier(tape, model, ckpt.params, tokens, options)
                                     : forward_lm(tape, model, ckpt.params, tokens, options);
    if (result.diagnostics.attention.empty()) throw std::logic_error("no attention map exported");
    const AttentionMap& map = result.diagnostics.attention.front();

    ordered_json attention;
    attention["omni_layer"] = map.omni_layer;
    attention["query"] = args.query.empty() ? (model.task == TaskKind::Classifier ? "cls" : "last")
                                            : args.query;
    attention["query_row"] = map.query_token;
    attention["backend"] = to_string(model.backend.kind);
    attention["dense_oracle"] = args.dense_oracle;
    attention["layer_ids"] = map.layer_ids;
    attention["g"] = map.heads.front().rows();
    attention["n"] = map.heads.front().cols();
    attention["tokens"] = tokens;
    attention["heads"] = ordered_json::array();
    for (std::size_t h = 0; h < map.heads.size(); ++h) {
      ordered_json head;
      head["head"] = h;
      head["sum"] = map.heads[h].sum();
      head["weights"] = matrix_json(map.heads[h]);
      attention["heads"].push_back(std::move(head));
    }

    ordered_json pooling;
    pooling["layers"] = ordered_json::array();
    for (const PoolStats& stats : result.diagnostics.pool) {
      ordered_json entry;
      entry["omni_layer"] = stats.omni_layer;
      entry["layer_ids"] = stats.layer_ids;
      entry["fractions"] = matrix_json(stats.fractions);
      pooling["layers"].push_back(std::move(entry));
    }

    const fs::path out(args.output_dir);
    write_file(out / "attention.json", dump(attention));
    write_file(out / "pooling.json", dump(pooling));
    for (std::size_t h = 0; h < map.heads.size(); ++h) {
      write_file(out / ("attention_head" + std::to_string(h) + ".pgm"), to_pgm(map.heads[h]));
    }
    io.out << "wrote attention for " << map.heads.size() << " heads to " << out.string() << '\n';
    return kExitOk;
  });
}

// ------------------------------------------------------------- bench

int cmd_bench(const BenchArgs& args, Streams io) {
  return guarded(io.err, "bench", [&] {
    if (args.grid.tokens.empty() || args.grid.backends.empty() || args.grid.partitions.empty()) {
      throw ConfigError("bench needs at least one length, backend and partition");
    }
    if (args.grid.repeats < 3) throw ConfigError("bench repeats must be >= 3");
    const BenchResult result = run_bench(args.grid);
    for (const BenchSkip& s : result.skipped) {
      io.err << "bench: skipped " << to_string(s.backend) << " N=" << s.tokens << " P=" << s.partition
             << ": " << s.reason << '\n';
    }
    std::ostringstream csv;
    write_bench_csv(csv, result.records);
    if (args.csv) {
      write_file(*args.csv, csv.str());
    } else {
      io.out << csv.str();
    }
    return kExitOk;
  });
}

}  // namespace omninet::cli
