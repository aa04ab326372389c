#include "omninet/efficient_attention.hpp"
#include "omninet/rng.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace omninet;

namespace {

struct Qkv {
  Matrix q, k, v;
};

Qkv random_qkv(Index m, Index dk, std::uint64_t seed) {
  Rng rng(seed);
  return {rng.normal_matrix(m, dk), rng.normal_matrix(m, dk), rng.normal_matrix(m, dk)};
}

BlockSparseConfig full_window(Index block_size, Index n_blocks) {
  BlockSparseConfig cfg;
  cfg.block_size = block_size;
  cfg.window_blocks = n_blocks;
  cfg.num_random_blocks = 0;
  return cfg;
}

double max_abs(const Matrix& a) { return a.cwiseAbs().maxCoeff(); }

}  // namespace

// ---------------------------------------------------------------- kernel

TEST(Kernel, AllOnesGivesOnes) {
  const Matrix ones = Matrix::Ones(3, 1);
  EXPECT_LE(max_abs(kernel_attention(ones, ones, ones, false) - ones), 1e-15);
}

TEST(Kernel, MatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Qkv x = random_qkv(6, 4, seed);
    for (bool causal : {false, true}) {
      const Matrix got = kernel_attention(x.q, x.k, x.v, causal, 1e-3);
      EXPECT_LE(oracle::rel_error(got, oracle::kernel_attention(x.q, x.k, x.v, causal, 1e-3)), 1e-10);
    }
  }
}

TEST(Kernel, LinearFormEqualsDenseOracleOnFiftySeeds) {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Qkv x = random_qkv(6, 4, 100 + seed);
    for (bool causal : {false, true}) {
      worst = std::max(worst, oracle::rel_error(kernel_attention(x.q, x.k, x.v, causal),
                                                kernel_dense_oracle(x.q, x.k, x.v, causal)));
    }
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(Kernel, SingleRowReturnsValue) {
  const Qkv x = random_qkv(1, 4, 3);
  EXPECT_LE(max_abs(kernel_dense_oracle(x.q, x.k, x.v, false) - x.v), 1e-14);
  EXPECT_LE(max_abs(kernel_attention(x.q, x.k, x.v, false) - x.v), 1e-14);
}

TEST(Kernel, CausalPrefixProperty) {
  const Qkv x = random_qkv(4, 4, 4);
  const Matrix base = kernel_attention(x.q, x.k, x.v, true);
  const Matrix first = kernel_attention(x.q.topRows(1), x.k.topRows(1), x.v.topRows(1), true);
  EXPECT_LE(max_abs(base.row(0) - first.row(0)), 1e-15);
  Qkv changed = x;
  Rng rng(5);
  changed.q.row(3) = rng.normal_matrix(1, 4);
  changed.k.row(3) = rng.normal_matrix(1, 4);
  changed.v.row(3) = rng.normal_matrix(1, 4);
  const Matrix out = kernel_attention(changed.q, changed.k, changed.v, true);
  EXPECT_LE(max_abs(out.topRows(3) - base.topRows(3)), 1e-12);
}

TEST(Kernel, DegenerateNormalizerRejected) {
  const Matrix neg = Matrix::Constant(3, 2, -1.0);
  for (bool causal : {false, true}) {
    try {
      kernel_attention(neg, neg, neg, causal, 0.0);
      FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
      EXPECT_NE(std::string(e.what()).find("degenerate kernel normalizer"), std::string::npos);
    }
    EXPECT_THROW(kernel_dense_oracle(neg, neg, neg, causal, 0.0), NumericError);
  }
}

TEST(Kernel, ImpliedWeightsAreAStochasticMatrix) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Qkv x = random_qkv(7, 3, 200 + seed);
    for (bool causal : {false, true}) {
      const Matrix w = kernel_dense_weights(x.q, x.k, causal);
      EXPECT_GE(w.minCoeff(), 0.0);
      for (Index r = 0; r < w.rows(); ++r) {
        EXPECT_NEAR(w.row(r).sum(), 1.0, 1e-12);
        if (causal) EXPECT_EQ(w.row(r).tail(w.cols() - r - 1).cwiseAbs().sum(), 0.0);
      }
    }
  }
}

// ---------------------------------------------------------------- low rank

TEST(LowRank, IdentityProjectionIsExact) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Qkv x = random_qkv(8, 4, 300 + seed);
    const Matrix eye = Matrix::Identity(8, 8);
    EXPECT_LE(oracle::rel_error(lowrank_attention(x.q, x.k, x.v, eye),
                                oracle::attention(x.q, x.k, x.v, oracle::everything)),
              1e-10);
  }
}

TEST(LowRank, RankOneCollapse) {
  const Qkv x = random_qkv(6, 4, 7);
  const Matrix w = Matrix::Constant(6, 1, 1.0 / 6.0);
  const Matrix out = lowrank_attention(x.q, x.k, x.v, w);
  const Matrix mean = x.v.colwise().mean();
  for (Index r = 0; r < 6; ++r) EXPECT_LE(max_abs(out.row(r) - mean), 1e-14);
}

TEST(LowRank, MatchesScoreLoopOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Qkv x = random_qkv(8, 4, 400 + seed);
    Rng rng(seed);
    const Matrix w = rng.normal_matrix(8, 3, 0.5);
    // Pseudo-tokens j = sum_r w(r, j) k_r, scores formed entry by entry.
    const Matrix kp = oracle::matmul(w.transpose(), x.k);
    const Matrix vp = oracle::matmul(w.transpose(), x.v);
    EXPECT_LE(oracle::rel_error(lowrank_attention(x.q, x.k, x.v, w),
                                oracle::attention(x.q, kp, vp, oracle::everything)),
              1e-10);
  }
}

TEST(LowRank, RejectsCausalAndBadShapes) {
  const Qkv x = random_qkv(4, 2, 8);
  try {
    lowrank_attention(x.q, x.k, x.v, Matrix::Identity(4, 4), true);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("does not support causality"), std::string::npos);
  }
  EXPECT_THROW(lowrank_attention(x.q, x.k, x.v, Matrix::Ones(5, 2)), ShapeError);
  EXPECT_THROW(lowrank_attention(x.q, x.k, x.v, Matrix::Ones(4, 5)), ShapeError);
}

// ---------------------------------------------------------------- block sparse

TEST(BlockSparse, FullWindowIsExact) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Qkv x = random_qkv(16, 4, 500 + seed);
    for (bool causal : {false, true}) {
      const Matrix got = blocksparse_attention(x.q, x.k, x.v, full_window(4, 4), causal);
      const auto allowed = causal ? oracle::causal_grid(1) : std::function<bool(Index, Index)>(oracle::everything);
      EXPECT_LE(oracle::rel_error(got, oracle::attention(x.q, x.k, x.v, allowed)), 1e-10);
    }
  }
}

TEST(BlockSparse, SingleBlockIsExact) {
  const Qkv x = random_qkv(8, 4, 9);
  BlockSparseConfig cfg;
  cfg.block_size = 8;
  EXPECT_LE(oracle::rel_error(blocksparse_attention(x.q, x.k, x.v, cfg, false),
                              oracle::attention(x.q, x.k, x.v, oracle::everything)),
            1e-10);
}

TEST(BlockSparse, MatchesNeighborhoodMaskOracle) {
  BlockSparseConfig cfg;
  cfg.block_size = 4;
  cfg.window_blocks = 1;
  cfg.num_global_blocks = 1;
  cfg.num_random_blocks = 1;
  cfg.rng_seed = 17;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Qkv x = random_qkv(16, 4, 600 + seed);
    for (Index g : {1, 2}) {
      for (bool causal : {false, true}) {
        // Boolean mask assembled from neighborhood() alone.
        std::vector<std::set<Index>> open(4);
        for (Index b = 0; b < 4; ++b) {
          const auto nb = neighborhood(b, cfg, 4);
          open[static_cast<std::size_t>(b)] = {nb.begin(), nb.end()};
        }
        auto allowed = [&](Index i, Index j) {
          if (!open[static_cast<std::size_t>(i / 4)].count(j / 4)) return false;
          return !causal || j / g <= i / g;
        };
        EXPECT_LE(oracle::rel_error(blocksparse_attention(x.q, x.k, x.v, cfg, causal, g),
                                    oracle::attention(x.q, x.k, x.v, allowed)),
                  1e-10);
        EXPECT_LE(oracle::rel_error(blocksparse_dense_oracle(x.q, x.k, x.v, cfg, causal, g),
                                    oracle::attention(x.q, x.k, x.v, allowed)),
                  1e-10);
      }
    }
  }
}

TEST(BlockSparse, IndivisibleLengthRejected) {
  const Qkv x = random_qkv(10, 2, 10);
  BlockSparseConfig cfg;
  cfg.block_size = 4;
  EXPECT_THROW(blocksparse_attention(x.q, x.k, x.v, cfg, false), ShapeError);
}

TEST(Neighborhood, SingleBlock) {
  EXPECT_EQ(neighborhood(0, BlockSparseConfig{}, 1), std::vector<Index>{0});
}

TEST(Neighborhood, EdgeClampAndContents) {
  BlockSparseConfig cfg;
  cfg.window_blocks = 1;
  cfg.num_global_blocks = 1;
  cfg.num_random_blocks = 2;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    cfg.rng_seed = seed;
    const auto nb = neighborhood(0, cfg, 8);
    // Own block 0 (also the global block), right neighbor 1, two random picks.
    ASSERT_EQ(nb.size(), 4u);
    EXPECT_EQ(nb[0], 0);
    EXPECT_EQ(nb[1], 1);
    EXPECT_TRUE(std::is_sorted(nb.begin(), nb.end()));
    for (Index i = 0; i < 8; ++i) {
      const auto other = neighborhood(i, cfg, 8);
      const std::set<Index> s(other.begin(), other.end());
      EXPECT_EQ(s.size(), other.size());
      EXPECT_TRUE(s.count(i));
      EXPECT_TRUE(s.count(0));
    }
  }
}

TEST(Neighborhood, SeededGolden) {
  BlockSparseConfig cfg;
  cfg.rng_seed = 42;
  const std::vector<Index> golden{0, 1, 2, 3, 4, 5, 7};
  EXPECT_EQ(neighborhood(3, cfg, 8), golden);
  EXPECT_EQ(neighborhood(3, cfg, 8), neighborhood(3, cfg, 8));
}

TEST(Neighborhood, OutOfRangeRejected) {
  EXPECT_THROW(neighborhood(4, BlockSparseConfig{}, 4), std::out_of_range);
}

// ---------------------------------------------------------------- shared properties

TEST(Backends, CausalOutputsIgnoreFutureRows) {
  BlockSparseConfig cfg;
  cfg.block_size = 4;
  cfg.num_random_blocks = 2;
  cfg.rng_seed = 3;
  const Qkv x = random_qkv(16, 4, 11);
  const Matrix mask = *build_causal_mask(16, 1).additive;
  const Matrix exact = exact_attention(x.q, x.k, x.v, &mask);
  const Matrix kern = kernel_attention(x.q, x.k, x.v, true);
  const Matrix sparse = blocksparse_attention(x.q, x.k, x.v, cfg, true);
  Rng rng(12);
  for (Index j = 1; j < 16; ++j) {
    Qkv y = x;
    y.q.bottomRows(16 - j) = rng.normal_matrix(16 - j, 4, 3.0);
    y.k.bottomRows(16 - j) = rng.normal_matrix(16 - j, 4, 3.0);
    y.v.bottomRows(16 - j) = rng.normal_matrix(16 - j, 4, 3.0);
    EXPECT_LE(max_abs((exact_attention(y.q, y.k, y.v, &mask) - exact).topRows(j)), 1e-12);
    EXPECT_LE(max_abs((kernel_attention(y.q, y.k, y.v, true) - kern).topRows(j)), 1e-12);
    EXPECT_LE(max_abs((blocksparse_attention(y.q, y.k, y.v, cfg, true) - sparse).topRows(j)), 1e-12);
  }
}

TEST(Backends, MacCountsScaleLinearlyOrQuadratically) {
  auto count = [](BackendKind kind, Index m) {
    const Qkv x = random_qkv(m, 8, 13);
    MacCounter c;
    switch (kind) {
      case BackendKind::Exact: exact_attention(x.q, x.k, x.v, nullptr, &c); break;
      case BackendKind::Kernel: kernel_attention(x.q, x.k, x.v, false, 1e-3, &c); break;
      case BackendKind::LowRank: {
        const Matrix w = Matrix::Constant(m, 32, 1.0 / double(m));
        lowrank_attention(x.q, x.k, x.v, w, false, &c);
        break;
      }
      case BackendKind::BlockSparse: {
        BlockSparseConfig cfg;
        cfg.block_size = 16;
        blocksparse_attention(x.q, x.k, x.v, cfg, false, 1, &c);
        break;
      }
    }
    return double(c.macs);
  };
  // A 4x longer sequence: linear backends at most 4x, exact at least 16x.
  EXPECT_LE(count(BackendKind::Kernel, 256) / count(BackendKind::Kernel, 64), 4.0 + 1e-9);
  EXPECT_LE(count(BackendKind::LowRank, 256) / count(BackendKind::LowRank, 64), 4.0 + 1e-9);
  EXPECT_GE(count(BackendKind::Exact, 256) / count(BackendKind::Exact, 64), 16.0 - 1e-9);
  EXPECT_LT(count(BackendKind::BlockSparse, 256), count(BackendKind::Exact, 256));
}

TEST(Backends, ParseNames) {
  for (BackendKind kind : {BackendKind::Exact, BackendKind::Kernel, BackendKind::LowRank,
                           BackendKind::BlockSparse}) {
    EXPECT_EQ(parse_backend_kind(to_string(kind)), kind);
  }
  EXPECT_THROW(parse_backend_kind("performer"), std::invalid_argument);
}

TEST(Backends, DenseWeightsMatchOutputs) {
  const Qkv x = random_qkv(8, 4, 14);
  AttentionBackend backend;
  for (BackendKind kind : {BackendKind::Exact, BackendKind::Kernel, BackendKind::BlockSparse}) {
    backend.kind = kind;
    backend.block.block_size = 4;
    backend.block.num_random_blocks = 1;
    for (bool causal : {false, true}) {
      const Mask mask = make_mask(causal, 8, 1);
      const Matrix w = dense_attention_weights(backend, x.q, x.k, mask);
      Tape tape;
      const Matrix out = make_head_attention(backend, mask)(tape.constant(x.q), tape.constant(x.k),
                                                            tape.constant(x.v), 0)
                             .value();
      EXPECT_LE(oracle::rel_error(out, oracle::matmul(w, x.v)), 1e-10) << to_string(kind);
    }
  }
}

// ---------------------------------------------------------------- tape gradients

namespace {

void expect_fd_match(const ParamSet& p, const std::function<Var(Tape&, const ParamSet&)>& build,
                     const char* what) {
  Tape tape;
  Var loss = build(tape, p);
  const ParamSet analytic = backward(tape, loss, p);
  const ParamSet numeric = finite_diff_grad(
      [&](const ParamSet& ps) {
        Tape t;
        return build(t, ps).value()(0, 0);
      },
      p);
  for (const auto& [name, g] : analytic) {
    const Matrix& n = numeric.at(name);
    for (Index i = 0; i < g.size(); ++i) {
      const double a = g.data()[i];
      const double b = n.data()[i];
      EXPECT_LE(std::abs(a - b) / std::max(std::abs(b), 1e-8), 1e-5)
          << what << " " << name << "[" << i << "] analytic " << a << " numeric " << b;
    }
  }
}

}  // namespace

TEST(TapeOps, KernelGradients) {
  Rng rng(15);
  ParamSet p;
  p.add("q", rng.normal_matrix(6, 4));
  p.add("k", rng.normal_matrix(6, 4));
  p.add("v", rng.normal_matrix(6, 3));
  const Matrix probe = rng.normal_matrix(6, 3);
  for (bool causal : {false, true}) {
    expect_fd_match(p, [&](Tape& t, const ParamSet& ps) {
      Var out = kernel_attention(t.parameter(ps, "q"), t.parameter(ps, "k"), t.parameter(ps, "v"), causal, 1e-3);
      return sum(matmul_nt(out, t.constant(probe)));
    }, causal ? "kernel causal" : "kernel");
  }
}

TEST(TapeOps, LowRankGradients) {
  Rng rng(16);
  ParamSet p;
  p.add("q", rng.normal_matrix(5, 4));
  p.add("k", rng.normal_matrix(5, 4));
  p.add("v", rng.normal_matrix(5, 4));
  p.add("w", rng.normal_matrix(9, 3, 0.5));  // sliced to the leading 5 rows
  const Matrix probe = rng.normal_matrix(5, 4);
  expect_fd_match(p, [&](Tape& t, const ParamSet& ps) {
    Var out = lowrank_attention(t.parameter(ps, "q"), t.parameter(ps, "k"), t.parameter(ps, "v"),
                                t.parameter(ps, "w"));
    return sum(matmul_nt(out, t.constant(probe)));
  }, "lowrank");
  Tape tape;
  const Matrix out = lowrank_attention(tape.constant(p.at("q")), tape.constant(p.at("k")),
                                       tape.constant(p.at("v")), tape.constant(p.at("w")))
                         .value();
  EXPECT_LE(oracle::rel_error(out, lowrank_attention(p.at("q"), p.at("k"), p.at("v"),
                                                     p.at("w").topRows(5))),
            1e-14);
  EXPECT_EQ(backward(tape, sum(lowrank_attention(tape.constant(p.at("q")), tape.constant(p.at("k")),
                                                 tape.constant(p.at("v")), tape.parameter(p, "w"))),
                     p)
                .at("w")
                .bottomRows(4),
            Matrix::Zero(4, 3));
}

TEST(TapeOps, BlockSparseGradients) {
  Rng rng(17);
  ParamSet p;
  p.add("q", rng.normal_matrix(8, 4));
  p.add("k", rng.normal_matrix(8, 4));
  p.add("v", rng.normal_matrix(8, 4));
  const Matrix probe = rng.normal_matrix(8, 4);
  BlockSparseConfig cfg;
  cfg.block_size = 2;
  cfg.num_random_blocks = 1;
  cfg.rng_seed = 5;
  for (bool causal : {false, true}) {
    const Mask mask = make_mask(causal, 8, 2);
    expect_fd_match(p, [&](Tape& t, const ParamSet& ps) {
      Var out = blocksparse_attention(t.parameter(ps, "q"), t.parameter(ps, "k"), t.parameter(ps, "v"), cfg, mask);
      return sum(matmul_nt(out, t.constant(probe)));
    }, causal ? "blocksparse causal" : "blocksparse");
    Tape tape;
    const Matrix out = blocksparse_attention(tape.constant(p.at("q")), tape.constant(p.at("k")),
                                             tape.constant(p.at("v")), cfg, mask)
                           .value();
    EXPECT_LE(oracle::rel_error(out, blocksparse_attention(p.at("q"), p.at("k"), p.at("v"), cfg,
                                                           causal, 2)),
              1e-12);
  }
}

TEST(Precision, FloatKernelTracksDouble) {
  const Qkv x = random_qkv(16, 4, 18);
  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> qf = x.q.cast<float>();
  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> kf = x.k.cast<float>();
  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> vf = x.v.cast<float>();
  const Matrix single = kernel_attention(qf, kf, vf, true).cast<double>();
  EXPECT_LE(oracle::rel_error(single, kernel_attention(x.q, x.k, x.v, true)), 1e-5);
}
