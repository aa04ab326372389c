#ifndef OMNINET_BENCH_HPP
#define OMNINET_BENCH_HPP

#include "omninet/efficient_attention.hpp"
#include "omninet/omni.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace omninet {

inline constexpr const char* kBenchCsvHeader = "backend,M,g,P,wall_ns_median,mac_count";

struct BenchRecord {
  BackendKind backend = BackendKind::Exact;
  /// Omnidirectional length g * N of the last omni layer in the plan.
  Index length = 0;
  Index layers_pooled = 0;
  int partition = 0;
  double wall_ns_median = 0.0;
  /// Attention-core multiply-accumulates summed over every omni layer.
  std::uint64_t mac_count = 0;
};

struct BenchSkip {
  BackendKind backend = BackendKind::Exact;
  Index tokens = 0;
  int partition = 0;
  std::string reason;
};

struct BenchGrid {
  /// Token counts N.
  std::vector<Index> tokens;
  std::vector<AttentionBackend> backends;
  std::vector<int> partitions;
  int layers = 12;
  Index head_dim = 16;
  int repeats = 3;
  int warmup = 1;
  std::uint64_t seed = 0;
};

struct BenchResult {
  std::vector<BenchRecord> records;
  std::vector<BenchSkip> skipped;
};

/// One non-causal single-head attention evaluation of `backend` at length m;
/// returns the MAC count.
std::uint64_t attention_core_macs(const AttentionBackend& backend, Index m, Index head_dim,
                                  std::uint64_t seed = 0);

/// For every (backend, N, P) cell, runs the attention core of each omni layer
/// of build_plan(layers, P) at its omnidirectional length, timing the median
/// of `repeats` runs after `warmup` discarded runs. Single-threaded.
BenchResult run_bench(const BenchGrid& grid);

void write_bench_csv(std::ostream& out, const std::vector<BenchRecord>& records);
std::vector<BenchRecord> read_bench_csv(std::istream& in);

}  // namespace omninet

#endif  // OMNINET_BENCH_HPP
