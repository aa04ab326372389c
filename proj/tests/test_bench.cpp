#include "omninet/bench.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace omninet;

namespace {

AttentionBackend backend_of(BackendKind kind) {
  AttentionBackend b;
  b.kind = kind;
  b.lowrank.proj_len = 32;
  b.block.block_size = 16;
  return b;
}

const std::vector<BackendKind> kAll{BackendKind::Exact, BackendKind::Kernel, BackendKind::LowRank,
                                    BackendKind::BlockSparse};

}  // namespace

TEST(Bench, ExactMacsQuadrupleWhenLengthDoubles) {
  const double ratio = double(attention_core_macs(backend_of(BackendKind::Exact), 256, 16)) /
                       double(attention_core_macs(backend_of(BackendKind::Exact), 128, 16));
  EXPECT_GE(ratio, 3.6);
  EXPECT_LE(ratio, 4.4);
}

TEST(Bench, KernelMacsDoubleWhenLengthDoubles) {
  const double ratio = double(attention_core_macs(backend_of(BackendKind::Kernel), 256, 16)) /
                       double(attention_core_macs(backend_of(BackendKind::Kernel), 128, 16));
  EXPECT_GE(ratio, 1.8);
  EXPECT_LE(ratio, 2.2);
}

TEST(Bench, MacsNonDecreasingInLength) {
  for (BackendKind kind : kAll) {
    std::uint64_t previous = 0;
    for (Index m = 32; m <= 512; m += 32) {
      const std::uint64_t macs = attention_core_macs(backend_of(kind), m, 8);
      EXPECT_GE(macs, previous) << to_string(kind) << " at " << m;
      previous = macs;
    }
  }
}

TEST(Bench, LengthRatioOfFullVersusNoPartition) {
  BenchGrid grid;
  grid.tokens = {16};
  grid.backends = {backend_of(BackendKind::Kernel)};
  grid.partitions = {1, 12};
  grid.layers = 12;
  grid.head_dim = 4;
  const BenchResult r = run_bench(grid);
  ASSERT_EQ(r.records.size(), 2u);
  EXPECT_TRUE(r.skipped.empty());
  EXPECT_EQ(r.records[0].partition, 1);
  EXPECT_EQ(r.records[1].partition, 12);
  EXPECT_EQ(r.records[1].length / r.records[0].length, 11);
  EXPECT_EQ(r.records[1].layers_pooled, 11);
  EXPECT_EQ(r.records[0].layers_pooled, 1);
}

TEST(Bench, IncompatibleCellsAreSkippedWithReasons) {
  BenchGrid grid;
  grid.tokens = {8, 40};
  grid.backends = {backend_of(BackendKind::LowRank), backend_of(BackendKind::BlockSparse)};
  grid.partitions = {1, 5};
  grid.layers = 4;
  grid.head_dim = 4;
  const BenchResult r = run_bench(grid);
  // P=5 does not divide L=4; N=8 is too short for k=32 and not a multiple of 16.
  bool saw_partition = false;
  bool saw_lowrank = false;
  bool saw_block = false;
  for (const BenchSkip& s : r.skipped) {
    EXPECT_FALSE(s.reason.empty());
    saw_partition |= s.partition == 5;
    saw_lowrank |= s.backend == BackendKind::LowRank && s.tokens == 8 && s.partition == 1;
    saw_block |= s.backend == BackendKind::BlockSparse && s.tokens == 8 && s.partition == 1;
  }
  EXPECT_TRUE(saw_partition);
  EXPECT_TRUE(saw_lowrank);
  EXPECT_TRUE(saw_block);
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.records[0].backend, BackendKind::LowRank);
  EXPECT_EQ(r.records[0].length, 40);
  EXPECT_THROW(attention_core_macs(backend_of(BackendKind::LowRank), 8, 4), std::invalid_argument);
}

TEST(Bench, RejectsTooFewRepeats) {
  BenchGrid grid;
  grid.tokens = {8};
  grid.backends = {backend_of(BackendKind::Exact)};
  grid.partitions = {1};
  grid.repeats = 2;
  EXPECT_THROW(run_bench(grid), std::invalid_argument);
}

TEST(Bench, CsvRoundTrip) {
  BenchGrid grid;
  grid.tokens = {16, 32};
  grid.backends = {backend_of(BackendKind::Exact), backend_of(BackendKind::Kernel)};
  grid.partitions = {2, 4};
  grid.layers = 4;
  grid.head_dim = 4;
  const BenchResult r = run_bench(grid);
  ASSERT_EQ(r.records.size(), 8u);
  std::stringstream csv;
  write_bench_csv(csv, r.records);
  std::string header;
  std::getline(std::istringstream(csv.str()) >> std::ws, header);
  EXPECT_EQ(header, kBenchCsvHeader);
  const std::vector<BenchRecord> back = read_bench_csv(csv);
  ASSERT_EQ(back.size(), r.records.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].backend, r.records[i].backend);
    EXPECT_EQ(back[i].length, r.records[i].length);
    EXPECT_EQ(back[i].layers_pooled, r.records[i].layers_pooled);
    EXPECT_EQ(back[i].partition, r.records[i].partition);
    EXPECT_EQ(back[i].mac_count, r.records[i].mac_count);
    EXPECT_GT(back[i].wall_ns_median, 0.0);
  }
  std::istringstream bad("backend,M\nexact,3\n");
  EXPECT_THROW(read_bench_csv(bad), std::runtime_error);
}
