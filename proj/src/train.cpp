#include "omninet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace omninet {

LrSchedule parse_lr_schedule(const std::string& text) {
  if (text == "constant") return LrSchedule::Constant;
  if (text == "linear") return LrSchedule::Linear;
  throw std::invalid_argument("unknown schedule '" + text + "' (expected constant|linear)");
}

std::string to_string(LrSchedule schedule) {
  return schedule == LrSchedule::Constant ? "constant" : "linear";
}

double learning_rate(const OptimizerConfig& cfg, std::int64_t step) {
  if (cfg.schedule == LrSchedule::Constant) {
    return cfg.lr;
  }
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) {
    return cfg.lr * double(step) / double(cfg.warmup_steps);
  }
  const double span = double(std::max<std::int64_t>(1, cfg.max_steps - cfg.warmup_steps));
  const double remaining = double(cfg.max_steps - step) / span;
  return cfg.lr * std::clamp(remaining, 0.0, 1.0);
}

AdamState AdamState::init(const ParamSet& params, const OptimizerConfig& config) {
  return {config, params.zeros_like(), params.zeros_like(), 0};
}

void adam_step(AdamState& state, ParamSet& params, const ParamSet& grads) {
  for (const auto& [name, g] : grads) {
    require_same_shape(g, params.at(name), "adam_step " + name);
    for (Index k = 0; k < g.size(); ++k) {
      if (!std::isfinite(g.data()[k])) {
        throw NumericError("adam_step: non-finite gradient for parameter " + name);
      }
    }
  }
  const OptimizerConfig& cfg = state.config;
  state.step += 1;
  const double lr = learning_rate(cfg, state.step);
  const double correction1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double correction2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  for (auto& [name, p] : params) {
    if (!grads.contains(name)) continue;
    const Matrix& g = grads.at(name);
    Matrix& m = state.first_moment.at(name);
    Matrix& v = state.second_moment.at(name);
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseAbs2();
    const Matrix m_hat = m / correction1;
    const Matrix v_hat = v / correction2;
    p.array() -= lr * (m_hat.array() / (v_hat.array().sqrt() + cfg.eps) + cfg.weight_decay * p.array());
  }
}

// ------------------------------------------------------------- tasks

TaskType parse_task_type(const std::string& text) {
  if (text == "copy") return TaskType::Copy;
  if (text == "reverse") return TaskType::Reverse;
  if (text == "charlm") return TaskType::CharLM;
  if (text == "marked_token") return TaskType::MarkedToken;
  throw std::invalid_argument("unknown task '" + text +
                              "' (expected copy|reverse|charlm|marked_token)");
}

std::string to_string(TaskType type) {
  switch (type) {
    case TaskType::Copy: return "copy";
    case TaskType::Reverse: return "reverse";
    case TaskType::CharLM: return "charlm";
    case TaskType::MarkedToken: return "marked_token";
  }
  return "unknown";
}

Index TaskSpec::model_vocab() const {
  return kind == TaskType::CharLM ? kByteVocab : vocab;
}

CharCorpus::CharCorpus(const std::string& path, Index seq_len) : seq_len_(seq_len) {
  if (seq_len < 1) throw std::invalid_argument("charlm: seq_len must be positive");
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("charlm: cannot read '" + path + "'");
  const std::string raw((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  if (raw.empty()) throw std::runtime_error("charlm: '" + path + "' is empty");
  bytes_.reserve(raw.size() + 1);
  for (char c : raw) bytes_.push_back(static_cast<unsigned char>(c));
  length_ = static_cast<Index>(raw.size());
  if (windows() < 1) {
    throw std::runtime_error("charlm: '" + path + "' shorter than one window");
  }
  bytes_.push_back(kByteEos);
}

Example CharCorpus::window(Index i) const {
  if (i < 0 || i >= windows()) throw std::out_of_range("charlm: window index");
  const auto begin = bytes_.begin() + i * seq_len_;
  return {std::vector<int>(begin, begin + seq_len_), std::vector<int>(begin + 1, begin + seq_len_ + 1)};
}

TaskSampler::TaskSampler(TaskSpec spec) : spec_(std::move(spec)) {
  if (spec_.seq_len < 1) throw std::invalid_argument("task: seq_len must be positive");
  if (spec_.kind == TaskType::CharLM) {
    corpus_ = std::make_shared<const CharCorpus>(spec_.path, spec_.seq_len);
  } else if (spec_.kind == TaskType::MarkedToken) {
    if (spec_.vocab < 3 || spec_.seq_len < 2) {
      throw std::invalid_argument("marked_token needs vocab >= 3 and seq_len >= 2");
    }
  } else if (spec_.vocab < 1) {
    throw std::invalid_argument("task: vocab must be positive");
  }
}

Example TaskSampler::sample(Rng& rng) const {
  const Index n = spec_.seq_len;
  Example ex;
  switch (spec_.kind) {
    case TaskType::Copy:
    case TaskType::Reverse:
      for (Index i = 0; i < n; ++i) ex.inputs.push_back(int(rng.below(std::uint64_t(spec_.vocab))));
      ex.targets = ex.inputs;
      if (spec_.kind == TaskType::Reverse) std::reverse(ex.targets.begin(), ex.targets.end());
      break;
    case TaskType::CharLM:
      return corpus_->window(Index(rng.below(std::uint64_t(corpus_->windows()))));
    case TaskType::MarkedToken: {
      const int marker = int(spec_.vocab - 1);
      for (Index i = 0; i < n; ++i) ex.inputs.push_back(int(rng.below(std::uint64_t(marker))));
      const auto pos = static_cast<std::size_t>(rng.below(std::uint64_t(n - 1)));
      ex.inputs[pos] = marker;
      ex.targets = {ex.inputs[pos + 1]};
      break;
    }
  }
  return ex;
}

std::vector<Example> TaskSampler::make_batch(Index batch_size, Rng& rng) const {
  std::vector<Example> batch;
  batch.reserve(static_cast<std::size_t>(batch_size));
  for (Index b = 0; b < batch_size; ++b) batch.push_back(sample(rng));
  return batch;
}

std::vector<Example> TaskSampler::eval_set() const {
  if (spec_.kind == TaskType::CharLM) {
    std::vector<Example> out;
    const Index count = std::min(spec_.eval_size, corpus_->windows());
    for (Index i = 0; i < count; ++i) out.push_back(corpus_->window(i));
    return out;
  }
  Rng rng(spec_.seed, 0xE7A1);
  return make_batch(spec_.eval_size, rng);
}

std::vector<Example> make_batch(const TaskSpec& spec, Index batch_size, Rng& rng) {
  return TaskSampler(spec).make_batch(batch_size, rng);
}

// ------------------------------------------------------------- metrics

Metrics score_logits(const std::vector<Matrix>& logits,
                     const std::vector<std::vector<int>>& targets) {
  if (logits.size() != targets.size()) {
    throw std::invalid_argument("score_logits: logits/targets count mismatch");
  }
  double total_ce = 0.0;
  double correct = 0.0;
  double count = 0.0;
  for (std::size_t e = 0; e < logits.size(); ++e) {
    const Matrix& z = logits[e];
    if (static_cast<std::size_t>(z.rows()) != targets[e].size()) {
      throw std::invalid_argument("score_logits: row/target mismatch");
    }
    for (Index r = 0; r < z.rows(); ++r) {
      const int t = targets[e][static_cast<std::size_t>(r)];
      const double m = z.row(r).maxCoeff();
      total_ce += m + std::log((z.row(r).array() - m).exp().sum()) - z(r, t);
      Index best = 0;
      z.row(r).maxCoeff(&best);
      correct += best == t ? 1.0 : 0.0;
      count += 1.0;
    }
  }
  Metrics out;
  if (count > 0) {
    out.cross_entropy = total_ce / count;
    out.token_accuracy = correct / count;
    out.perplexity = std::exp(out.cross_entropy);
  }
  return out;
}

Matrix predict(const ModelConfig& config, const ParamSet& params, const Example& example) {
  Tape tape;
  const ForwardResult result = config.task == TaskKind::Classifier
                                   ? forward_classifier(tape, config, params, example.inputs)
                                   : forward_lm(tape, config, params, example.inputs);
  return result.logits.value();
}

Metrics evaluate(const ModelConfig& config, const ParamSet& params,
                 const std::vector<Example>& examples) {
  std::vector<Matrix> logits;
  std::vector<std::vector<int>> targets;
  for (const Example& ex : examples) {
    logits.push_back(predict(config, params, ex));
    targets.push_back(ex.targets);
  }
  return score_logits(logits, targets);
}

Metrics evaluate(const ModelConfig& config, const ParamSet& params, const TaskSpec& task) {
  return evaluate(config, params, TaskSampler(task).eval_set());
}

Var batch_loss(Tape& tape, const ModelConfig& config, const ParamSet& params,
               const std::vector<Example>& batch, const ForwardOptions& options) {
  if (batch.empty()) throw std::invalid_argument("batch_loss: empty batch");
  std::vector<Var> losses;
  losses.reserve(batch.size());
  for (const Example& ex : batch) {
    const ForwardResult result = config.task == TaskKind::Classifier
                                     ? forward_classifier(tape, config, params, ex.inputs, options)
                                     : forward_lm(tape, config, params, ex.inputs, options);
    losses.push_back(cross_entropy(result.logits, ex.targets));
  }
  Var total = losses.front();
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  return scale(total, 1.0 / double(losses.size()));
}

// ------------------------------------------------------------- loop

TrainResult train_model(const ModelConfig& config, const TaskSpec& task,
                        const OptimizerConfig& optimizer, const TrainOptions& options,
                        const RecordCallback& on_record) {
  config.validate();
  if (config.vocab_size != task.model_vocab()) {
    throw std::invalid_argument("model vocab_size " + std::to_string(config.vocab_size) +
                                " does not match task vocabulary " +
                                std::to_string(task.model_vocab()));
  }
  if (task.is_classification() != (config.task == TaskKind::Classifier)) {
    throw std::invalid_argument("task kind does not match model head");
  }
  const TaskSampler sampler(task);
  const std::vector<Example> eval_examples = sampler.eval_set();
  TrainResult result;
  result.params = init_params(config, options.seed);
  AdamState state = AdamState::init(result.params, optimizer);
  Rng batch_rng(options.seed, 1);
  Rng dropout_rng(options.seed, 2);
  const auto start = std::chrono::steady_clock::now();

  auto record = [&](std::int64_t step) {
    const Metrics m = evaluate(config, result.params, eval_examples);
    if (!std::isfinite(m.cross_entropy)) {
      throw NumericError("evaluation loss is not finite at step " + std::to_string(step));
    }
    const double wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    TrainRecord rec{step, m.cross_entropy, m.token_accuracy, m.perplexity, wall_ms};
    result.history.push_back(rec);
    if (on_record) on_record(rec, result.params);
  };

  record(0);
  ForwardOptions forward_options;
  forward_options.training = true;
  forward_options.dropout_rng = &dropout_rng;
  for (std::int64_t step = 1; step <= optimizer.max_steps; ++step) {
    const std::vector<Example> batch = sampler.make_batch(options.batch_size, batch_rng);
    Tape tape;
    Var loss = batch_loss(tape, config, result.params, batch, forward_options);
    if (!std::isfinite(loss.value()(0, 0))) {
      throw NumericError("training loss is not finite at step " + std::to_string(step));
    }
    const ParamSet grads = backward(tape, loss, result.params);
    adam_step(state, result.params, grads);
    if ((options.eval_every > 0 && step % options.eval_every == 0) || step == optimizer.max_steps) {
      record(step);
    }
  }
  return result;
}

}  // namespace omninet
