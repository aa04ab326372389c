#ifndef OMNINET_RNG_HPP
#define OMNINET_RNG_HPP

#include "omninet/tensor.hpp"

#include <cstdint>
#include <random>

namespace omninet {

/// Deterministic random source. The raw 64-bit stream comes from mt19937_64
/// seeded through seed_seq, both of which are fully specified by the
/// standard, so (seed, stream) reproduces bit-identically everywhere.
/// Distributions are computed here rather than through <random> distribution
/// objects, whose algorithms are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

  /// Independent generator for a derived stream id.
  Rng split(std::uint64_t stream_id) const;

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 bits of mantissa.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal via Box-Muller.
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  Matrix normal_matrix(Index rows, Index cols, double stddev = 1.0);
  Matrix uniform_matrix(Index rows, Index cols, double lo, double hi);

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace omninet

#endif  // OMNINET_RNG_HPP
