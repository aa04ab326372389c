#include "omninet/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace omninet {

namespace {

struct CoreInputs {
  Matrix q, k, v, w;
};

CoreInputs make_inputs(const AttentionBackend& backend, Index m, Index head_dim, Rng& rng) {
  CoreInputs in{rng.normal_matrix(m, head_dim), rng.normal_matrix(m, head_dim),
                rng.normal_matrix(m, head_dim), Matrix()};
  if (backend.kind == BackendKind::LowRank) {
    in.w = rng.normal_matrix(m, backend.lowrank.proj_len, 1.0 / std::sqrt(double(m)));
  }
  return in;
}

Matrix run_core(const AttentionBackend& backend, const CoreInputs& in, MacCounter* counter) {
  switch (backend.kind) {
    case BackendKind::Exact: return exact_attention(in.q, in.k, in.v, nullptr, counter);
    case BackendKind::Kernel:
      return kernel_attention(in.q, in.k, in.v, false, backend.kernel.feature_eps, counter);
    case BackendKind::LowRank: return lowrank_attention(in.q, in.k, in.v, in.w, false, counter);
    case BackendKind::BlockSparse:
      return blocksparse_attention(in.q, in.k, in.v, backend.block, false, 1, counter);
  }
  throw std::logic_error("unhandled backend");
}

/// Empty when the backend can run at length m, else the reason it cannot.
std::string incompatibility(const AttentionBackend& backend, Index m) {
  if (backend.kind == BackendKind::LowRank && backend.lowrank.proj_len > m) {
    return "lowrank k=" + std::to_string(backend.lowrank.proj_len) + " exceeds length " +
           std::to_string(m);
  }
  if (backend.kind == BackendKind::BlockSparse && m % backend.block.block_size != 0) {
    return "length " + std::to_string(m) + " not divisible by block size " +
           std::to_string(backend.block.block_size);
  }
  return {};
}

}  // namespace

std::uint64_t attention_core_macs(const AttentionBackend& backend, Index m, Index head_dim,
                                  std::uint64_t seed) {
  if (const std::string why = incompatibility(backend, m); !why.empty()) {
    throw std::invalid_argument(why);
  }
  Rng rng(seed, static_cast<std::uint64_t>(m));
  const CoreInputs in = make_inputs(backend, m, head_dim, rng);
  MacCounter counter;
  run_core(backend, in, &counter);
  return counter.macs;
}

BenchResult run_bench(const BenchGrid& grid) {
  if (grid.repeats < 3) throw std::invalid_argument("bench: repeats must be >= 3");
  BenchResult result;
  for (const AttentionBackend& backend : grid.backends) {
    for (int partition : grid.partitions) {
      OmniPlan plan;
      try {
        plan = build_plan(grid.layers, partition);
      } catch (const std::invalid_argument& e) {
        for (Index n : grid.tokens) result.skipped.push_back({backend.kind, n, partition, e.what()});
        continue;
      }
      for (Index n : grid.tokens) {
        std::vector<Index> lengths;
        for (const LayerPlan& entry : plan.schedule) {
          if (entry.kind == LayerKind::Omni) lengths.push_back(omni_sequence_length(entry, n));
        }
        std::string reason;
        for (Index m : lengths) {
          if (reason.empty()) reason = incompatibility(backend, m);
        }
        if (!reason.empty()) {
          result.skipped.push_back({backend.kind, n, partition, reason});
          continue;
        }
        Rng rng(grid.seed, static_cast<std::uint64_t>(n * 1000 + partition));
        std::vector<CoreInputs> inputs;
        for (Index m : lengths) inputs.push_back(make_inputs(backend, m, grid.head_dim, rng));

        MacCounter counter;
        for (const CoreInputs& in : inputs) run_core(backend, in, &counter);

        std::vector<double> samples;
        for (int rep = 0; rep < grid.warmup + grid.repeats; ++rep) {
          const auto t0 = std::chrono::steady_clock::now();
          double sink = 0.0;
          for (const CoreInputs& in : inputs) sink += run_core(backend, in, nullptr)(0, 0);
          const auto t1 = std::chrono::steady_clock::now();
          if (!std::isfinite(sink)) throw NumericError("bench: non-finite attention output");
          if (rep >= grid.warmup) {
            samples.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
          }
        }
        std::sort(samples.begin(), samples.end());
        const std::size_t mid = samples.size() / 2;
        const double median = samples.size() % 2 == 1 ? samples[mid]
                                                       : 0.5 * (samples[mid - 1] + samples[mid]);
        const Index g = lengths.back() / n;
        result.records.push_back({backend.kind, lengths.back(), g, partition, median, counter.macs});
      }
    }
  }
  return result;
}

void write_bench_csv(std::ostream& out, const std::vector<BenchRecord>& records) {
  out << kBenchCsvHeader << '\n';
  for (const BenchRecord& r : records) {
    std::ostringstream wall;
    wall << std::fixed << std::setprecision(1) << r.wall_ns_median;
    out << to_string(r.backend) << ',' << r.length << ',' << r.layers_pooled << ',' << r.partition
        << ',' << wall.str() << ',' << r.mac_count << '\n';
  }
}

std::vector<BenchRecord> read_bench_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kBenchCsvHeader) {
    throw std::runtime_error("bench csv: missing or unexpected header");
  }
  std::vector<BenchRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    if (fields.size() != 6) throw std::runtime_error("bench csv: malformed row '" + line + "'");
    BenchRecord r;
    r.backend = parse_backend_kind(fields[0]);
    r.length = std::stoll(fields[1]);
    r.layers_pooled = std::stoll(fields[2]);
    r.partition = std::stoi(fields[3]);
    r.wall_ns_median = std::stod(fields[4]);
    r.mac_count = std::stoull(fields[5]);
    records.push_back(r);
  }
  return records;
}

}  // namespace omninet
