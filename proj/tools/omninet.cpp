#include "omninet/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace omninet;

std::vector<AttentionBackend> parse_backends(const std::vector<std::string>& names, Index k,
                                             Index block_size, double feature_eps) {
  std::vector<AttentionBackend> out;
  for (const std::string& name : names) {
    AttentionBackend b;
    b.kind = parse_backend_kind(name);
    b.lowrank.proj_len = k;
    b.block.block_size = block_size;
    b.kernel.feature_eps = feature_eps;
    out.push_back(b);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OmniNet: omnidirectional attention over the layer x position grid"};
  app.require_subcommand(1);
  cli::Streams io{std::cout, std::cerr};

  cli::TrainArgs train;
  std::string train_out;
  auto* train_cmd = app.add_subcommand("train", "train a model from a JSON config");
  train_cmd->add_option("config", train.config, "config file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--set", train.overrides, "override a setting, dotted.key=value");
  train_cmd->add_option("--out", train_out, "output directory (replaces output_dir)");
  train_cmd->add_flag("!--quiet", train.verbose, "no per-evaluation log lines");

  cli::EvalArgs eval;
  std::string eval_report;
  Index eval_size = 0;
  std::uint64_t eval_seed = 0;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on its task");
  eval_cmd->add_option("checkpoint", eval.checkpoint)->required()->check(CLI::ExistingFile);
  auto* eval_size_opt = eval_cmd->add_option("--eval-size", eval_size, "number of evaluation examples");
  auto* eval_seed_opt = eval_cmd->add_option("--seed", eval_seed, "seed of the evaluation set");
  eval_cmd->add_option("--report", eval_report, "also write the metrics here");

  cli::GradCheckArgs grad;
  std::string grad_report;
  auto* grad_cmd = app.add_subcommand("grad-check", "finite-difference check of every parameter");
  grad_cmd->add_option("config", grad.config)->required()->check(CLI::ExistingFile);
  grad_cmd->add_option("--set", grad.overrides, "override a setting, dotted.key=value");
  grad_cmd->add_option("--report", grad_report, "write the per-parameter report here");
  grad_cmd->add_option("--batch", grad.batch_size, "examples in the checked batch");

  cli::ParityArgs parity;
  std::string parity_report;
  auto* parity_cmd = app.add_subcommand("parity-check", "efficient backends vs dense oracles");
  parity_cmd->add_option("--instances", parity.instances, "random instances per check");
  parity_cmd->add_option("--seed", parity.seed);
  parity_cmd->add_option("--inject-fault", parity.inject_fault, "test hook: scaling")
      ->check(CLI::IsMember({"scaling"}));
  parity_cmd->add_flag("!--no-models", parity.include_models, "skip full-model causality checks");
  parity_cmd->add_option("--report", parity_report, "write the JSON report here");

  cli::AttnDumpArgs dump;
  auto* dump_cmd = app.add_subcommand("attn-dump", "export omni attention maps and pooling stats");
  dump_cmd->add_option("checkpoint", dump.checkpoint)->required()->check(CLI::ExistingFile);
  dump_cmd->add_option("--out", dump.output_dir, "output directory")->required();
  dump_cmd->add_option("--tokens", dump.tokens, "input token ids")->delimiter(',');
  dump_cmd->add_option("--query", dump.query, "cls or an input position");
  dump_cmd->add_flag("--dense-oracle", dump.dense_oracle,
                     "re-evaluate non-exact omni attention densely");

  cli::BenchArgs bench;
  std::vector<Index> tokens{64, 128};
  std::vector<std::string> backends{"exact", "kernel", "lowrank", "blocksparse"};
  std::vector<int> partitions{1, 12};
  Index k = 32;
  Index block_size = 16;
  double feature_eps = 1e-3;
  std::string csv;
  auto* bench_cmd = app.add_subcommand("bench", "time and count attention over omni lengths");
  bench_cmd->add_option("--tokens", tokens, "token counts N")->delimiter(',');
  bench_cmd->add_option("--backends", backends)->delimiter(',');
  bench_cmd->add_option("--partitions", partitions)->delimiter(',');
  bench_cmd->add_option("--layers", bench.grid.layers);
  bench_cmd->add_option("--head-dim", bench.grid.head_dim);
  bench_cmd->add_option("--repeats", bench.grid.repeats)->check(CLI::PositiveNumber);
  bench_cmd->add_option("--warmup", bench.grid.warmup);
  bench_cmd->add_option("--seed", bench.grid.seed);
  bench_cmd->add_option("--k", k, "low-rank projection length");
  bench_cmd->add_option("--block-size", block_size);
  bench_cmd->add_option("--feature-eps", feature_eps);
  bench_cmd->add_option("--csv", csv, "write CSV here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : cli::kExitConfigError;
  }

  if (train_cmd->parsed()) {
    if (!train_out.empty()) train.output_dir = train_out;
    return cli::cmd_train(train, io);
  }
  if (eval_cmd->parsed()) {
    if (eval_size_opt->count() > 0) eval.eval_size = eval_size;
    if (eval_seed_opt->count() > 0) eval.seed = eval_seed;
    if (!eval_report.empty()) eval.report = eval_report;
    return cli::cmd_eval(eval, io);
  }
  if (grad_cmd->parsed()) {
    if (!grad_report.empty()) grad.report = grad_report;
    return cli::cmd_grad_check(grad, io);
  }
  if (parity_cmd->parsed()) {
    if (!parity_report.empty()) parity.report = parity_report;
    return cli::cmd_parity_check(parity, io);
  }
  if (dump_cmd->parsed()) return cli::cmd_attn_dump(dump, io);
  if (bench_cmd->parsed()) {
    try {
      bench.grid.tokens = tokens;
      bench.grid.backends = parse_backends(backends, k, block_size, feature_eps);
      bench.grid.partitions = partitions;
    } catch (const std::invalid_argument& e) {
      std::cerr << "bench: " << e.what() << '\n';
      return cli::kExitConfigError;
    }
    if (!csv.empty()) bench.csv = csv;
    return cli::cmd_bench(bench, io);
  }
  return cli::kExitConfigError;
}
