#include "omninet/verify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace omninet {

double max_relative_error(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_relative_error");
  if (a.size() == 0) return 0.0;
  const double scale = std::max(b.cwiseAbs().maxCoeff(), 1e-300);
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

// ------------------------------------------------------------- parity

bool ParityReport::pass() const {
  return std::all_of(checks.begin(), checks.end(), [](const ParityCheck& c) { return c.pass; });
}

nlohmann::ordered_json ParityReport::to_json() const {
  nlohmann::ordered_json out;
  out["pass"] = pass();
  out["checks"] = nlohmann::ordered_json::array();
  for (const ParityCheck& c : checks) {
    out["checks"].push_back({{"name", c.name},
                             {"instances", c.instances},
                             {"max_error", c.max_error},
                             {"tolerance", c.tolerance},
                             {"pass", c.pass}});
  }
  return out;
}

namespace {

struct Instance {
  Matrix q, k, v;
};

Instance random_instance(Rng& rng, Index m, Index dk) {
  return {rng.normal_matrix(m, dk), rng.normal_matrix(m, dk), rng.normal_matrix(m, dk)};
}

/// Runs `body` for each instance and folds the worst error into one check.
ParityCheck run_check(const std::string& name, int instances, double tolerance, Rng& rng,
                      const std::function<double(Rng&)>& body) {
  ParityCheck check{name, instances, 0.0, tolerance, false};
  for (int i = 0; i < instances; ++i) {
    check.max_error = std::max(check.max_error, body(rng));
  }
  check.pass = check.max_error <= tolerance;
  return check;
}

/// Largest change at rows of tokens < j after rewriting every row of token j.
template <typename Fn>
double perturbation_violation(const Instance& base, Index rows_per_token, Rng& rng, Fn attend) {
  const Matrix reference = attend(base);
  const Index tokens = base.q.rows() / rows_per_token;
  double worst = 0.0;
  for (Index j = 1; j < tokens; ++j) {
    Instance changed = base;
    for (Index r = j * rows_per_token; r < (j + 1) * rows_per_token; ++r) {
      changed.q.row(r) = rng.normal_matrix(1, base.q.cols());
      changed.k.row(r) = rng.normal_matrix(1, base.k.cols());
      changed.v.row(r) = rng.normal_matrix(1, base.v.cols());
    }
    const Matrix out = attend(changed);
    const Index prefix = j * rows_per_token;
    worst = std::max(worst, (out.topRows(prefix) - reference.topRows(prefix)).cwiseAbs().maxCoeff());
  }
  return worst;
}

Index pick(Rng& rng, Index lo, Index hi) {
  return lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

ModelConfig tiny_lm(const AttentionBackend& backend, int partition) {
  ModelConfig cfg;
  cfg.vocab_size = 11;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.layers = 4;
  cfg.partition = partition;
  cfg.max_len = 32;
  cfg.backend = backend;
  return cfg;
}

}  // namespace

ParityReport run_parity_suite(const ParityOptions& options) {
  ParityReport report;
  Rng rng(options.seed, 0x9A11);
  const int n = options.instances;
  auto efficient_scale = [&](Index dk) -> std::optional<double> {
    if (!options.corrupt_scaling) return std::nullopt;
    return 1.01 / std::sqrt(double(dk));
  };

  report.checks.push_back(run_check("lowrank_identity_vs_exact", n, kParityTolerance, rng, [&](Rng& r) {
    const Index m = pick(r, 2, 32);
    const Index dk = pick(r, 1, 8);
    const Instance in = random_instance(r, m, dk);
    const Matrix w = Matrix::Identity(m, m);
    return max_relative_error(lowrank_attention(in.q, in.k, in.v, w, false, nullptr, efficient_scale(dk)),
                              exact_attention(in.q, in.k, in.v));
  }));

  report.checks.push_back(run_check("blocksparse_full_window_vs_exact", n, kParityTolerance, rng, [&](Rng& r) {
    const Index bs = pick(r, 1, 4);
    const Index blocks = pick(r, 1, 32 / bs);
    const Index m = bs * blocks;
    const Index dk = pick(r, 1, 8);
    const Instance in = random_instance(r, m, dk);
    BlockSparseConfig cfg{bs, 0, 1, blocks, r.next_u64()};
    return max_relative_error(
        blocksparse_attention(in.q, in.k, in.v, cfg, false, 1, nullptr, efficient_scale(dk)),
        exact_attention(in.q, in.k, in.v));
  }));

  report.checks.push_back(run_check("blocksparse_single_block_vs_exact", n, kParityTolerance, rng, [&](Rng& r) {
    const Index m = pick(r, 1, 32);
    const Index dk = pick(r, 1, 8);
    const Instance in = random_instance(r, m, dk);
    BlockSparseConfig cfg{m, 3, 1, 1, r.next_u64()};
    return max_relative_error(
        blocksparse_attention(in.q, in.k, in.v, cfg, false, 1, nullptr, efficient_scale(dk)),
        exact_attention(in.q, in.k, in.v));
  }));

  report.checks.push_back(run_check("blocksparse_causal_full_window_vs_exact", n, kParityTolerance, rng, [&](Rng& r) {
    const Index g = pick(r, 1, 3);
    const Index bs = g * pick(r, 1, 2);
    const Index blocks = pick(r, 1, 32 / bs);
    const Index m = bs * blocks;
    const Index dk = pick(r, 1, 8);
    const Instance in = random_instance(r, m, dk);
    BlockSparseConfig cfg{bs, 0, 1, blocks, r.next_u64()};
    const Mask mask = build_causal_mask(m / g, g);
    return max_relative_error(
        blocksparse_attention(in.q, in.k, in.v, cfg, true, g, nullptr, efficient_scale(dk)),
        exact_attention(in.q, in.k, in.v, mask.additive.get()));
  }));

  report.checks.push_back(run_check("blocksparse_vs_mask_oracle", n, kParityTolerance, rng, [&](Rng& r) {
    const Index bs = pick(r, 1, 4);
    const Index blocks = pick(r, 1, 32 / bs);
    const Index m = bs * blocks;
    const Index dk = pick(r, 1, 8);
    const Instance in = random_instance(r, m, dk);
    BlockSparseConfig cfg{bs, pick(r, 0, 3), pick(r, 0, 2), pick(r, 0, 2), r.next_u64()};
    const bool causal = r.below(2) == 1;
    return max_relative_error(
        blocksparse_attention(in.q, in.k, in.v, cfg, causal, 1, nullptr, efficient_scale(dk)),
        blocksparse_dense_oracle(in.q, in.k, in.v, cfg, causal, 1));
  }));

  for (bool causal : {false, true}) {
    report.checks.push_back(run_check(causal ? "kernel_causal_vs_dense_oracle" : "kernel_vs_dense_oracle",
                                      n, kParityTolerance, rng, [&](Rng& r) {
      const Index m = pick(r, 1, 32);
      const Index dk = pick(r, 1, 8);
      const Instance in = random_instance(r, m, dk);
      Matrix fast = kernel_attention(in.q, in.k, in.v, causal);
      if (options.corrupt_scaling) fast *= 1.01;
      return max_relative_error(fast, kernel_dense_oracle(in.q, in.k, in.v, causal));
    }));
  }

  report.checks.push_back(run_check("exact_causality", n, kCausalityTolerance, rng, [&](Rng& r) {
    const Index g = pick(r, 1, 3);
    const Index tokens = pick(r, 2, 32 / g);
    const Instance in = random_instance(r, tokens * g, pick(r, 1, 8));
    const Mask mask = build_causal_mask(tokens, g);
    return perturbation_violation(in, g, r, [&](const Instance& x) {
      return exact_attention(x.q, x.k, x.v, mask.additive.get());
    });
  }));

  report.checks.push_back(run_check("kernel_causality", n, kCausalityTolerance, rng, [&](Rng& r) {
    const Index g = pick(r, 1, 3);
    const Index tokens = pick(r, 2, 32 / g);
    const Instance in = random_instance(r, tokens * g, pick(r, 1, 8));
    return perturbation_violation(in, g, r, [&](const Instance& x) {
      return kernel_attention(x.q, x.k, x.v, true);
    });
  }));

  report.checks.push_back(run_check("blocksparse_causality", n, kCausalityTolerance, rng, [&](Rng& r) {
    const Index g = pick(r, 1, 3);
    const Index bs = g * pick(r, 1, 2);
    const Index blocks = pick(r, 2, 32 / bs);
    const Instance in = random_instance(r, bs * blocks, pick(r, 1, 8));
    BlockSparseConfig cfg{bs, pick(r, 0, 3), pick(r, 0, 2), pick(r, 0, 2), r.next_u64()};
    return perturbation_violation(in, g, r, [&](const Instance& x) {
      return blocksparse_attention(x.q, x.k, x.v, cfg, true, g);
    });
  }));

  if (options.include_models) {
    AttentionBackend kernel;
    kernel.kind = BackendKind::Kernel;
    AttentionBackend block;
    block.kind = BackendKind::BlockSparse;
    block.block = BlockSparseConfig{2, 1, 1, 1, 7};
    for (const AttentionBackend& backend : {AttentionBackend::exact(), kernel, block}) {
      for (int partition : {1, 2, 4}) {
        const std::string name = "lm_causality_" + to_string(backend.kind) + "_P" + std::to_string(partition);
        report.checks.push_back(run_check(name, 3, kCausalityTolerance, rng, [&](Rng& r) {
          const ModelConfig cfg = tiny_lm(backend, partition);
          const ParamSet params = init_params(cfg, r.next_u64());
          std::vector<int> tokens;
          for (int i = 0; i < 6; ++i) tokens.push_back(int(r.below(11)));
          return lm_causality_violation(cfg, params, tokens, 11);
        }));
      }
    }
  }
  return report;
}

double lm_causality_violation(const ModelConfig& config, const ParamSet& params,
                              const std::vector<int>& tokens, int vocab) {
  auto logits_of = [&](const std::vector<int>& seq) {
    Tape tape;
    return Matrix(forward_lm(tape, config, params, seq).logits.value());
  };
  const Matrix reference = logits_of(tokens);
  double worst = 0.0;
  for (std::size_t j = 1; j < tokens.size(); ++j) {
    std::vector<int> changed = tokens;
    changed[j] = (changed[j] + 1) % vocab;
    const Matrix out = logits_of(changed);
    const auto prefix = static_cast<Index>(j);
    worst = std::max(worst, (out.topRows(prefix) - reference.topRows(prefix)).cwiseAbs().maxCoeff());
  }
  return worst;
}

// ------------------------------------------------------------- gradients

bool GradCheckReport::pass() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradCheckEntry& e) { return e.pass; });
}

nlohmann::ordered_json GradCheckReport::to_json() const {
  nlohmann::ordered_json out;
  out["pass"] = pass();
  out["tolerance"] = tolerance;
  out["resolution"] = resolution;
  out["total_params"] = total_params;
  out["parameters"] = nlohmann::ordered_json::array();
  for (const GradCheckEntry& e : entries) {
    out["parameters"].push_back({{"name", e.name},
                                 {"elements", e.elements},
                                 {"max_rel_error", e.max_rel_error},
                                 {"max_abs_error", e.max_abs_error},
                                 {"unresolved", e.unresolved},
                                 {"pass", e.pass}});
  }
  return out;
}

double gradient_relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

double finite_diff_resolution(double objective, double h) {
  return 16.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(objective), 1.0) / h;
}

GradCheckReport grad_check_model(const ModelConfig& config, const ParamSet& params,
                                 const std::vector<Example>& batch, double tolerance, double h) {
  Tape tape;
  Var loss = batch_loss(tape, config, params, batch);
  const ParamSet analytic = backward(tape, loss, params);
  const ParamSet numeric = finite_diff_grad(
      [&](const ParamSet& p) {
        Tape t;
        return batch_loss(t, config, p, batch).value()(0, 0);
      },
      params, h);
  GradCheckReport report;
  report.tolerance = tolerance;
  report.resolution = finite_diff_resolution(loss.value()(0, 0), h);
  report.total_params = params.total_elements();
  for (const auto& [name, g] : analytic) {
    const Matrix& fd = numeric.at(name);
    GradCheckEntry entry{name, g.size(), 0.0, 0.0, 0, true};
    for (Index k = 0; k < g.size(); ++k) {
      const double a = g.data()[k];
      const double b = fd.data()[k];
      const double abs_err = std::abs(a - b);
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      // Below resolution / tolerance the difference quotient cannot carry
      // `tolerance` relative accuracy; hold those to the absolute bound.
      if (std::max(std::abs(a), std::abs(b)) * tolerance <= report.resolution) {
        ++entry.unresolved;
        entry.pass = entry.pass && abs_err <= report.resolution;
        continue;
      }
      const double rel = gradient_relative_error(a, b);
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      entry.pass = entry.pass && rel <= tolerance;
    }
    report.entries.push_back(entry);
  }
  return report;
}

void jitter_params(ParamSet& params, Rng& rng, double scale) {
  for (auto& [name, tensor] : params) {
    tensor += rng.normal_matrix(tensor.rows(), tensor.cols(), scale);
  }
}

}  // namespace omninet
