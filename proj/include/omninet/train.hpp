#ifndef OMNINET_TRAIN_HPP
#define OMNINET_TRAIN_HPP

#include "omninet/model.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace omninet {

// ------------------------------------------------------------- optimizer

enum class LrSchedule { Constant, Linear };

LrSchedule parse_lr_schedule(const std::string& text);
std::string to_string(LrSchedule schedule);

struct OptimizerConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::int64_t warmup_steps = 200;
  std::int64_t max_steps = 2000;
  /// Linear: warmup to lr, then linear decay to zero at max_steps.
  LrSchedule schedule = LrSchedule::Linear;
};

/// Learning rate applied at 1-based `step`.
double learning_rate(const OptimizerConfig& cfg, std::int64_t step);

struct AdamState {
  OptimizerConfig config;
  ParamSet first_moment;
  ParamSet second_moment;
  std::int64_t step = 0;

  static AdamState init(const ParamSet& params, const OptimizerConfig& config);
};

/// Bias-corrected Adam with decoupled weight decay. A non-finite gradient
/// aborts with the parameter name before anything is modified.
void adam_step(AdamState& state, ParamSet& params, const ParamSet& grads);

// ------------------------------------------------------------- tasks

enum class TaskType { Copy, Reverse, CharLM, MarkedToken };

TaskType parse_task_type(const std::string& text);
std::string to_string(TaskType type);

struct TaskSpec {
  TaskType kind = TaskType::Copy;
  Index seq_len = 16;
  /// Ignored for CharLM, whose vocabulary is fixed at 256 bytes + 2 specials.
  Index vocab = 16;
  Index eval_size = 128;
  std::string path;
  std::uint64_t seed = 0;

  bool is_classification() const { return kind == TaskType::MarkedToken; }
  /// Token vocabulary the model must accept.
  Index model_vocab() const;
  /// MarkedToken only: labels are the non-marker tokens.
  Index classes() const { return vocab - 1; }
};

inline constexpr int kByteBos = 256;
inline constexpr int kByteEos = 257;
inline constexpr Index kByteVocab = 258;

struct Example {
  std::vector<int> inputs;
  /// One per input position for sequence tasks; a single label for
  /// classification.
  std::vector<int> targets;
};

/// Byte stream split into non-overlapping windows of seq_len inputs; each
/// window's targets are the following bytes, with EOS after the last byte.
class CharCorpus {
 public:
  CharCorpus(const std::string& path, Index seq_len);

  Index windows() const { return length_ / seq_len_; }
  Example window(Index i) const;

 private:
  /// File bytes followed by one EOS.
  std::vector<int> bytes_;
  Index length_ = 0;
  Index seq_len_;
};

/// Generates examples for a task. CharLM corpora are loaded once.
class TaskSampler {
 public:
  explicit TaskSampler(TaskSpec spec);

  const TaskSpec& spec() const { return spec_; }
  std::vector<Example> make_batch(Index batch_size, Rng& rng) const;
  /// Fixed evaluation set derived from spec.seed.
  std::vector<Example> eval_set() const;

 private:
  Example sample(Rng& rng) const;

  TaskSpec spec_;
  std::shared_ptr<const CharCorpus> corpus_;
};

/// Convenience wrapper: one batch straight from a spec.
std::vector<Example> make_batch(const TaskSpec& spec, Index batch_size, Rng& rng);

// ------------------------------------------------------------- metrics

struct Metrics {
  double token_accuracy = 0.0;
  double cross_entropy = 0.0;
  double perplexity = 1.0;
};

/// Metrics over row-wise logits; every row is one scored prediction.
Metrics score_logits(const std::vector<Matrix>& logits, const std::vector<std::vector<int>>& targets);

/// Logits of one example under the model's task head.
Matrix predict(const ModelConfig& config, const ParamSet& params, const Example& example);

Metrics evaluate(const ModelConfig& config, const ParamSet& params,
                 const std::vector<Example>& examples);
Metrics evaluate(const ModelConfig& config, const ParamSet& params, const TaskSpec& task);

/// Mean loss over a batch recorded on `tape`.
Var batch_loss(Tape& tape, const ModelConfig& config, const ParamSet& params,
               const std::vector<Example>& batch, const ForwardOptions& options = {});

// ------------------------------------------------------------- loop

struct TrainOptions {
  Index batch_size = 16;
  std::int64_t eval_every = 100;
  std::uint64_t seed = 0;
};

struct TrainRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double perplexity = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  ParamSet params;
  std::vector<TrainRecord> history;
};

using RecordCallback = std::function<void(const TrainRecord&, const ParamSet&)>;

/// Trains from `init_params(config, options.seed)` for optimizer.max_steps
/// steps, evaluating at step 0, every eval_every steps and at the end.
/// Batches are reduced in a fixed order, so runs are reproducible.
TrainResult train_model(const ModelConfig& config, const TaskSpec& task,
                        const OptimizerConfig& optimizer, const TrainOptions& options,
                        const RecordCallback& on_record = {});

}  // namespace omninet

#endif  // OMNINET_TRAIN_HPP
