#ifndef OMNINET_VERIFY_HPP
#define OMNINET_VERIFY_HPP

#include "omninet/train.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace omninet {

/// ||a - b||_inf / max(||b||_inf, tiny).
double max_relative_error(const Matrix& a, const Matrix& b);

// ------------------------------------------------------------- parity

struct ParityCheck {
  std::string name;
  int instances = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

struct ParityReport {
  std::vector<ParityCheck> checks;

  bool pass() const;
  nlohmann::ordered_json to_json() const;
};

struct ParityOptions {
  int instances = 50;
  std::uint64_t seed = 0;
  /// Fault injection: the efficient paths use a 1% wrong softmax scale.
  bool corrupt_scaling = false;
  /// Include the full-model causality checks (slower).
  bool include_models = true;
};

inline constexpr double kParityTolerance = 1e-10;
inline constexpr double kCausalityTolerance = 1e-12;

/// Degenerate-parameter parities of every backend against its dense oracle
/// and future-token perturbation checks of every causal path.
ParityReport run_parity_suite(const ParityOptions& options = {});

/// Largest change of logits at positions < j when token j is replaced, over
/// every j, for a causal language model.
double lm_causality_violation(const ModelConfig& config, const ParamSet& params,
                              const std::vector<int>& tokens, int vocab);

// ------------------------------------------------------------- gradients

struct GradCheckEntry {
  std::string name;
  Index elements = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  /// Coordinates too small for a relative comparison at this loss; these are
  /// checked against the absolute resolution instead.
  Index unresolved = 0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 1e-4;
  /// Smallest gradient magnitude central differences can resolve at this loss.
  double resolution = 0.0;
  Index total_params = 0;

  bool pass() const;
  nlohmann::ordered_json to_json() const;
};

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kFiniteDiffStep = 1e-5;

/// Relative error with denominator max(|a|, |b|, floor).
double gradient_relative_error(double analytic, double numeric, double floor = 1e-8);

/// Round-off limit of a central difference of an objective of magnitude
/// |f| with step h: 16 * eps_mach * |f| / h.
double finite_diff_resolution(double objective, double h);

/// Compares backward() with central differences of the batch loss for every
/// parameter coordinate. A coordinate passes when its relative error is within
/// `tolerance`. Coordinates whose magnitude is below resolution / tolerance,
/// where round-off alone exceeds the relative tolerance, must instead differ by
/// less than finite_diff_resolution (e.g. key biases under softmax, whose
/// gradient is exactly zero).
GradCheckReport grad_check_model(const ModelConfig& config, const ParamSet& params,
                                 const std::vector<Example>& batch,
                                 double tolerance = kGradTolerance, double h = kFiniteDiffStep);

/// Adds N(0, scale^2) noise to every parameter so biases and gains are not at
/// their symmetric initial values.
void jitter_params(ParamSet& params, Rng& rng, double scale);

}  // namespace omninet

#endif  // OMNINET_VERIFY_HPP
