#include "omninet/rng.hpp"
#include "omninet/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace omninet;

namespace {

const std::string kFixture = std::string(OMNINET_SOURCE_DIR) + "/tests/data/fixture.txt";

OptimizerConfig constant_lr(double lr) {
  OptimizerConfig c;
  c.lr = lr;
  c.schedule = LrSchedule::Constant;
  return c;
}

ParamSet scalar(double value) {
  ParamSet p;
  p.add("p", Matrix::Constant(1, 1, value));
  return p;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Rng rng(1);
  ParamSet p;
  p.add("w", rng.normal_matrix(3, 4));
  const ParamSet before = p;
  AdamState state = AdamState::init(p, constant_lr(0.1));
  for (int i = 0; i < 5; ++i) adam_step(state, p, p.zeros_like());
  EXPECT_EQ(p.at("w"), before.at("w"));
}

TEST(Adam, FirstStepMovesByLearningRateAgainstTheGradientSign) {
  for (double g : {-3.0, 0.25, 40.0}) {
    ParamSet p = scalar(1.0);
    AdamState state = AdamState::init(p, constant_lr(0.01));
    ParamSet grad = scalar(g);
    adam_step(state, p, grad);
    // m_hat = g, v_hat = g^2.
    const double expected = 1.0 - 0.01 * g / (std::abs(g) + 1e-8);
    EXPECT_NEAR(p.at("p")(0, 0), expected, 1e-15);
  }
}

TEST(Adam, DescendsOnAQuadratic) {
  ParamSet p = scalar(1.0);
  AdamState state = AdamState::init(p, constant_lr(0.05));
  double previous = 1.0;
  for (int i = 0; i < 10; ++i) {
    adam_step(state, p, scalar(2.0 * p.at("p")(0, 0)));
    const double f = std::pow(p.at("p")(0, 0), 2);
    EXPECT_LT(f, previous);
    previous = f;
  }
}

TEST(Adam, ZeroLearningRateIsIdentity) {
  Rng rng(2);
  ParamSet p;
  p.add("w", rng.normal_matrix(4, 4));
  const ParamSet before = p;
  OptimizerConfig cfg = constant_lr(0.0);
  cfg.weight_decay = 0.0;
  AdamState state = AdamState::init(p, cfg);
  ParamSet g;
  g.add("w", rng.normal_matrix(4, 4));
  adam_step(state, p, g);
  EXPECT_EQ(p.at("w"), before.at("w"));
}

TEST(Adam, DecoupledWeightDecay) {
  ParamSet p = scalar(2.0);
  OptimizerConfig cfg = constant_lr(0.1);
  cfg.weight_decay = 0.5;
  AdamState state = AdamState::init(p, cfg);
  adam_step(state, p, scalar(0.0));
  // Zero gradient: only the decay term lr * wd * p acts.
  EXPECT_NEAR(p.at("p")(0, 0), 2.0 - 0.1 * 0.5 * 2.0, 1e-15);
}

TEST(Adam, NonFiniteGradientNamesParameterAndModifiesNothing) {
  ParamSet p;
  p.add("a", Matrix::Ones(1, 2));
  p.add("b", Matrix::Ones(1, 2));
  ParamSet g = p.zeros_like();
  g.at("a").setConstant(1.0);
  g.at("b")(0, 1) = std::nan("");
  AdamState state = AdamState::init(p, constant_lr(0.1));
  try {
    adam_step(state, p, g);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("b"), std::string::npos);
  }
  EXPECT_EQ(p.at("a"), Matrix::Ones(1, 2));
  EXPECT_EQ(state.step, 0);
}

TEST(Schedule, LinearWarmupThenDecay) {
  OptimizerConfig cfg;
  cfg.lr = 1.0;
  cfg.warmup_steps = 10;
  cfg.max_steps = 110;
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 1), 0.1);
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 10), 1.0);
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 60), 0.5);
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 110), 0.0);
  cfg.schedule = LrSchedule::Constant;
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 1), 1.0);
  EXPECT_EQ(parse_lr_schedule(to_string(LrSchedule::Linear)), LrSchedule::Linear);
}

TEST(Tasks, CopyIsReproducible) {
  TaskSpec spec;
  spec.kind = TaskType::Copy;
  Rng a(7);
  Rng b(7);
  const auto x = make_batch(spec, 4, a);
  const auto y = make_batch(spec, 4, b);
  ASSERT_EQ(x.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(x[i].inputs, y[i].inputs);
    EXPECT_EQ(x[i].targets, x[i].inputs);
  }
}

TEST(Tasks, ReverseTargets) {
  TaskSpec spec;
  spec.kind = TaskType::Reverse;
  spec.seq_len = 5;
  Rng rng(8);
  for (const Example& ex : make_batch(spec, 10, rng)) {
    EXPECT_EQ(ex.targets, std::vector<int>(ex.inputs.rbegin(), ex.inputs.rend()));
  }
  // A palindrome's reverse target equals its copy target.
  const std::vector<int> palindrome{1, 2, 3, 2, 1};
  EXPECT_EQ(std::vector<int>(palindrome.rbegin(), palindrome.rend()), palindrome);
}

TEST(Tasks, MarkedTokenLabelsFollowTheMarker) {
  TaskSpec spec;
  spec.kind = TaskType::MarkedToken;
  spec.vocab = 6;
  spec.seq_len = 7;
  Rng rng(9);
  for (const Example& ex : make_batch(spec, 50, rng)) {
    ASSERT_EQ(ex.targets.size(), 1u);
    const auto marker = std::find(ex.inputs.begin(), ex.inputs.end(), 5);
    ASSERT_NE(marker, ex.inputs.end());
    EXPECT_EQ(std::count(ex.inputs.begin(), ex.inputs.end(), 5), 1);
    ASSERT_NE(marker + 1, ex.inputs.end());
    EXPECT_EQ(ex.targets[0], *(marker + 1));
    EXPECT_LT(ex.targets[0], spec.classes());
  }
}

TEST(Tasks, CharCorpusWindows) {
  ASSERT_EQ(std::filesystem::file_size(kFixture), 1024u);
  std::ifstream file(kFixture, std::ios::binary);
  const std::string raw((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  for (Index n : {1, 7, 16, 100, 1024}) {
    const CharCorpus corpus(kFixture, n);
    EXPECT_EQ(corpus.windows(), 1024 / n);
    const Example last = corpus.window(corpus.windows() - 1);
    const Index start = (corpus.windows() - 1) * n;
    for (Index i = 0; i < n; ++i) {
      EXPECT_EQ(last.inputs[static_cast<std::size_t>(i)], static_cast<unsigned char>(raw[static_cast<std::size_t>(start + i)]));
    }
    const int final_target = last.targets.back();
    if (start + n == 1024) {
      EXPECT_EQ(final_target, kByteEos);
    } else {
      EXPECT_EQ(final_target, static_cast<unsigned char>(raw[static_cast<std::size_t>(start + n)]));
    }
  }
  EXPECT_THROW(CharCorpus(kFixture, 1025), std::runtime_error);
  EXPECT_THROW(CharCorpus(kFixture + ".missing", 8), std::runtime_error);
}

TEST(Tasks, EmptyCorpusIsAnError) {
  const auto path = std::filesystem::temp_directory_path() / "omninet_empty.txt";
  std::ofstream(path).close();
  EXPECT_THROW(CharCorpus(path.string(), 4), std::runtime_error);
  std::filesystem::remove(path);
}

TEST(Metrics, UniformLogitsGiveLogV) {
  for (int v : {2, 11, 258}) {
    std::vector<Matrix> logits{Matrix::Zero(5, v)};
    std::vector<std::vector<int>> targets{{0, 1, 1, 0, 1}};
    const Metrics m = score_logits(logits, targets);
    EXPECT_NEAR(m.cross_entropy, std::log(double(v)), 1e-12);
    EXPECT_NEAR(m.perplexity, double(v), 1e-9);
  }
  // Random near-uniform logits stay within sampling noise of ln V.
  Rng rng(10);
  std::vector<Matrix> logits{rng.normal_matrix(2000, 16, 1e-3)};
  std::vector<std::vector<int>> targets(1);
  for (int i = 0; i < 2000; ++i) targets[0].push_back(int(rng.below(16)));
  EXPECT_NEAR(score_logits(logits, targets).cross_entropy, std::log(16.0), 1e-3);
}

TEST(Metrics, PerfectPredictionsGiveAccuracyOneAndPerplexityOne) {
  Matrix z = Matrix::Constant(3, 4, -100.0);
  z(0, 2) = z(1, 0) = z(2, 3) = 100.0;
  const Metrics m = score_logits({z}, {{2, 0, 3}});
  EXPECT_EQ(m.token_accuracy, 1.0);
  EXPECT_NEAR(m.perplexity, 1.0, 1e-12);
}

TEST(Metrics, DeterministicForCheckpointTaskAndSeed) {
  ModelConfig c;
  c.vocab_size = 8;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.layers = 2;
  c.partition = 2;
  c.backend.kind = BackendKind::Kernel;
  TaskSpec task;
  task.vocab = 8;
  task.seq_len = 6;
  task.eval_size = 16;
  task.seed = 3;
  const ParamSet p = init_params(c, 4);
  const Metrics a = evaluate(c, p, task);
  const Metrics b = evaluate(c, p, task);
  EXPECT_EQ(a.cross_entropy, b.cross_entropy);
  EXPECT_EQ(a.token_accuracy, b.token_accuracy);
}

TEST(Training, LossAtStep500BelowStep0OnThreeSeeds) {
  ModelConfig c;
  c.vocab_size = 8;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.layers = 4;
  c.partition = 2;
  c.backend.kind = BackendKind::Kernel;
  TaskSpec task;
  task.kind = TaskType::Copy;
  task.vocab = 8;
  task.seq_len = 8;
  task.eval_size = 32;
  OptimizerConfig opt;
  opt.lr = 1e-3;
  opt.warmup_steps = 50;
  opt.max_steps = 500;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    TrainOptions options;
    options.batch_size = 4;
    options.eval_every = 500;
    options.seed = seed;
    task.seed = seed;
    const TrainResult r = train_model(c, task, opt, options);
    ASSERT_EQ(r.history.size(), 2u);
    EXPECT_EQ(r.history.front().step, 0);
    EXPECT_EQ(r.history.back().step, 500);
    EXPECT_LT(r.history.back().loss, r.history.front().loss) << "seed " << seed;
  }
}

TEST(Training, RunsAreReproducible) {
  ModelConfig c;
  c.vocab_size = 6;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.layers = 2;
  c.partition = 1;
  TaskSpec task;
  task.vocab = 6;
  task.seq_len = 5;
  task.eval_size = 8;
  OptimizerConfig opt;
  opt.max_steps = 20;
  opt.warmup_steps = 5;
  TrainOptions options;
  options.batch_size = 2;
  options.eval_every = 10;
  const TrainResult a = train_model(c, task, opt, options);
  const TrainResult b = train_model(c, task, opt, options);
  ASSERT_EQ(a.history.size(), 3u);
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].loss, b.history[i].loss);
    EXPECT_EQ(a.history[i].accuracy, b.history[i].accuracy);
  }
  for (const auto& [name, value] : a.params) EXPECT_EQ(value, b.params.at(name)) << name;
}

TEST(Training, MismatchedTaskRejected) {
  ModelConfig c;
  c.vocab_size = 6;
  TaskSpec task;
  task.vocab = 7;
  EXPECT_THROW(train_model(c, task, OptimizerConfig{}, TrainOptions{}), std::invalid_argument);
  task.vocab = 6;
  task.kind = TaskType::MarkedToken;
  EXPECT_THROW(train_model(c, task, OptimizerConfig{}, TrainOptions{}), std::invalid_argument);
}
