#ifndef OMNINET_EFFICIENT_ATTENTION_HPP
#define OMNINET_EFFICIENT_ATTENTION_HPP

#include "omninet/attention.hpp"
#include "omninet/rng.hpp"
#include "omninet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace omninet {

enum class BackendKind { Exact, Kernel, LowRank, BlockSparse };

BackendKind parse_backend_kind(const std::string& text);
std::string to_string(BackendKind kind);

/// ReLU generalized attention, phi(x) = max(x, 0) + feature_eps.
struct KernelConfig {
  double feature_eps = 1e-3;
};

/// Sequence-axis projection to proj_len pseudo-tokens, shared by keys and values.
struct LowRankConfig {
  Index proj_len = 32;
};

struct BlockSparseConfig {
  Index block_size = 4;
  Index num_random_blocks = 3;
  Index num_global_blocks = 1;
  /// Window half-width in blocks on each side.
  Index window_blocks = 1;
  std::uint64_t rng_seed = 0;
};

/// Attention backend selection with per-backend hyperparameters.
struct AttentionBackend {
  BackendKind kind = BackendKind::Exact;
  KernelConfig kernel;
  LowRankConfig lowrank;
  BlockSparseConfig block;

  bool supports_causal() const { return kind != BackendKind::LowRank; }
  static AttentionBackend exact() { return {}; }
};

/// Multiply-accumulate counter for the attention core.
struct MacCounter {
  std::uint64_t macs = 0;
  void add(std::uint64_t n) { macs += n; }
};

inline void count_macs(MacCounter* counter, std::uint64_t n) {
  if (counter != nullptr) counter->add(n);
}

/// Normalizer entries at or below this are rejected as degenerate.
inline constexpr double kKernelNormalizerFloor = 1e-9;

// ------------------------------------------------------------- exact

/// softmax(q k^T * scale + mask) v. `scale` defaults to 1/sqrt(d_k).
template <typename DQ, typename DK, typename DV>
Tensor<typename DQ::Scalar> exact_attention(const Eigen::MatrixBase<DQ>& q,
                                            const Eigen::MatrixBase<DK>& k,
                                            const Eigen::MatrixBase<DV>& v,
                                            const Matrix* mask = nullptr,
                                            MacCounter* counter = nullptr,
                                            std::optional<double> scale = std::nullopt) {
  using Scalar = typename DQ::Scalar;
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw ShapeError("exact_attention: q " + shape_string(q) + ", k " + shape_string(k) +
                     ", v " + shape_string(v));
  }
  const Scalar s = static_cast<Scalar>(scale.value_or(1.0 / std::sqrt(double(q.cols()))));
  Tensor<Scalar> logits = matmul(q, k.transpose()) * s;
  count_macs(counter, std::uint64_t(q.rows() * k.rows() * q.cols()));
  Tensor<Scalar> weights =
      mask != nullptr ? softmax_rows(logits, mask->template cast<Scalar>()) : softmax_rows(logits);
  count_macs(counter, std::uint64_t(q.rows() * k.rows() * v.cols()));
  return matmul(weights, v);
}

// ------------------------------------------------------------- kernel

template <typename Derived>
Tensor<typename Derived::Scalar> relu_features(const Eigen::MatrixBase<Derived>& x,
                                               double feature_eps) {
  using Scalar = typename Derived::Scalar;
  return (x.array().max(Scalar(0)) + Scalar(feature_eps)).matrix();
}

namespace detail {

template <typename Scalar>
void check_normalizer(Scalar value, Index row) {
  if (!(value > Scalar(kKernelNormalizerFloor))) {
    throw NumericError("degenerate kernel normalizer at row " + std::to_string(row));
  }
}

}  // namespace detail

/// Linear-time kernel attention. Non-causal: phi(Q)(phi(K)^T V) normalized by
/// phi(Q)(phi(K)^T 1). Causal: running prefix sums, so row r sees rows <= r.
template <typename DQ, typename DK, typename DV>
Tensor<typename DQ::Scalar> kernel_attention(const Eigen::MatrixBase<DQ>& q,
                                             const Eigen::MatrixBase<DK>& k,
                                             const Eigen::MatrixBase<DV>& v, bool causal,
                                             double feature_eps = KernelConfig{}.feature_eps,
                                             MacCounter* counter = nullptr) {
  using Scalar = typename DQ::Scalar;
  using Row = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
  if (q.cols() != k.cols() || k.rows() != v.rows() || q.rows() != k.rows()) {
    throw ShapeError("kernel_attention: q " + shape_string(q) + ", k " + shape_string(k) +
                     ", v " + shape_string(v));
  }
  const Tensor<Scalar> fq = relu_features(q, feature_eps);
  const Tensor<Scalar> fk = relu_features(k, feature_eps);
  const Index m = q.rows();
  const Index dk = q.cols();
  const Index dv = v.cols();
  Tensor<Scalar> out(m, dv);
  if (!causal) {
    const Tensor<Scalar> kv = fk.transpose() * v;  // dk x dv
    const Row ksum = fk.colwise().sum();
    count_macs(counter, std::uint64_t(m * dk * dv + m * dk));
    for (Index r = 0; r < m; ++r) {
      const Scalar den = fq.row(r).dot(ksum);
      detail::check_normalizer(den, r);
      out.row(r) = (fq.row(r) * kv) / den;
    }
    count_macs(counter, std::uint64_t(m * dk * dv + m * dk));
  } else {
    Tensor<Scalar> kv = Tensor<Scalar>::Zero(dk, dv);
    Row ksum = Row::Zero(dk);
    for (Index r = 0; r < m; ++r) {
      kv.noalias() += fk.row(r).transpose() * v.row(r);
      ksum += fk.row(r);
      const Scalar den = fq.row(r).dot(ksum);
      detail::check_normalizer(den, r);
      out.row(r) = (fq.row(r) * kv) / den;
    }
    count_macs(counter, std::uint64_t(2 * (m * dk * dv + m * dk)));
  }
  require_finite(out, "kernel_attention");
  return out;
}

/// Materialized kernel weights phi(Q) phi(K)^T, lower-triangular when causal,
/// row-normalized. Quadratic; used as an oracle and for diagnostics.
template <typename DQ, typename DK>
Tensor<typename DQ::Scalar> kernel_dense_weights(const Eigen::MatrixBase<DQ>& q,
                                                 const Eigen::MatrixBase<DK>& k, bool causal,
                                                 double feature_eps = KernelConfig{}.feature_eps) {
  using Scalar = typename DQ::Scalar;
  const Tensor<Scalar> fq = relu_features(q, feature_eps);
  const Tensor<Scalar> fk = relu_features(k, feature_eps);
  Tensor<Scalar> a = fq * fk.transpose();
  if (causal) {
    a = a.template triangularView<Eigen::Lower>();
  }
  for (Index r = 0; r < a.rows(); ++r) {
    const Scalar row_sum = a.row(r).sum();
    detail::check_normalizer(row_sum, r);
    a.row(r) /= row_sum;
  }
  return a;
}

template <typename DQ, typename DK, typename DV>
Tensor<typename DQ::Scalar> kernel_dense_oracle(const Eigen::MatrixBase<DQ>& q,
                                                const Eigen::MatrixBase<DK>& k,
                                                const Eigen::MatrixBase<DV>& v, bool causal,
                                                double feature_eps = KernelConfig{}.feature_eps) {
  return kernel_dense_weights(q, k, causal, feature_eps) * v;
}

// ------------------------------------------------------------- low rank

/// softmax(Q (W^T K)^T / sqrt(d_k)) (W^T V) with W (M x proj_len) mixing the
/// sequence axis. Causal use is rejected: the projection mixes future rows.
template <typename DQ, typename DK, typename DV, typename DW>
Tensor<typename DQ::Scalar> lowrank_attention(const Eigen::MatrixBase<DQ>& q,
                                              const Eigen::MatrixBase<DK>& k,
                                              const Eigen::MatrixBase<DV>& v,
                                              const Eigen::MatrixBase<DW>& w, bool causal = false,
                                              MacCounter* counter = nullptr,
                                              std::optional<double> scale = std::nullopt) {
  using Scalar = typename DQ::Scalar;
  if (causal) {
    throw std::invalid_argument("low-rank backend does not support causality");
  }
  if (w.rows() != k.rows()) {
    throw ShapeError("lowrank_attention: projection " + shape_string(w) + " for sequence of " +
                     std::to_string(k.rows()));
  }
  if (w.cols() > k.rows()) {
    throw ShapeError("lowrank_attention: projected length " + std::to_string(w.cols()) +
                     " exceeds sequence length " + std::to_string(k.rows()));
  }
  const Tensor<Scalar> k_proj = w.transpose() * k;
  const Tensor<Scalar> v_proj = w.transpose() * v;
  count_macs(counter, std::uint64_t(w.rows() * w.cols() * (k.cols() + v.cols())));
  return exact_attention(q, k_proj, v_proj, nullptr, counter, scale);
}

// ------------------------------------------------------------- block sparse

/// Key blocks visible from query block `i_block`: the window around it, the
/// global blocks, and seeded random blocks drawn without replacement from the
/// rest. Sorted ascending; deterministic in (cfg.rng_seed, i_block).
std::vector<Index> neighborhood(Index i_block, const BlockSparseConfig& cfg, Index n_blocks);

/// Additive M x M mask that opens exactly the block neighborhoods, intersected
/// with the token-causal rule when `causal`.
Matrix blocksparse_additive_mask(Index m, const BlockSparseConfig& cfg, bool causal,
                                 Index rows_per_token);

/// Block-sparse attention; each query block attends only its neighborhood.
template <typename DQ, typename DK, typename DV>
Tensor<typename DQ::Scalar> blocksparse_attention(const Eigen::MatrixBase<DQ>& q,
                                                  const Eigen::MatrixBase<DK>& k,
                                                  const Eigen::MatrixBase<DV>& v,
                                                  const BlockSparseConfig& cfg, bool causal,
                                                  Index rows_per_token = 1,
                                                  MacCounter* counter = nullptr,
                                                  std::optional<double> scale = std::nullopt) {
  using Scalar = typename DQ::Scalar;
  const Index m = q.rows();
  const Index bs = cfg.block_size;
  if (bs < 1 || m % bs != 0) {
    throw ShapeError("blocksparse_attention: sequence length " + std::to_string(m) +
                     " not divisible by block size " + std::to_string(bs));
  }
  if (k.rows() != m || v.rows() != m || q.cols() != k.cols()) {
    throw ShapeError("blocksparse_attention: q " + shape_string(q) + ", k " + shape_string(k) +
                     ", v " + shape_string(v));
  }
  const Scalar s = static_cast<Scalar>(scale.value_or(1.0 / std::sqrt(double(q.cols()))));
  const Index n_blocks = m / bs;
  Tensor<Scalar> out(m, v.cols());
  for (Index b = 0; b < n_blocks; ++b) {
    const std::vector<Index> blocks = neighborhood(b, cfg, n_blocks);
    const Index width = static_cast<Index>(blocks.size()) * bs;
    Tensor<Scalar> keys(width, k.cols());
    Tensor<Scalar> values(width, v.cols());
    std::vector<Index> key_rows;
    key_rows.reserve(static_cast<std::size_t>(width));
    for (std::size_t j = 0; j < blocks.size(); ++j) {
      keys.middleRows(Index(j) * bs, bs) = k.middleRows(blocks[j] * bs, bs);
      values.middleRows(Index(j) * bs, bs) = v.middleRows(blocks[j] * bs, bs);
      for (Index t = 0; t < bs; ++t) key_rows.push_back(blocks[j] * bs + t);
    }
    const Tensor<Scalar> logits = q.middleRows(b * bs, bs) * keys.transpose() * s;
    if (causal) {
      Tensor<Scalar> mask = Tensor<Scalar>::Zero(bs, width);
      for (Index r = 0; r < bs; ++r) {
        const Index query_token = (b * bs + r) / rows_per_token;
        for (Index c = 0; c < width; ++c) {
          if (key_rows[static_cast<std::size_t>(c)] / rows_per_token > query_token) {
            mask(r, c) = Scalar(kMaskedLogit);
          }
        }
      }
      out.middleRows(b * bs, bs) = softmax_rows(logits, mask) * values;
    } else {
      out.middleRows(b * bs, bs) = softmax_rows(logits) * values;
    }
    count_macs(counter, std::uint64_t(bs * width * (q.cols() + v.cols())));
  }
  return out;
}

/// Quadratic reference: exact attention under the explicit neighborhood mask.
template <typename DQ, typename DK, typename DV>
Tensor<typename DQ::Scalar> blocksparse_dense_oracle(const Eigen::MatrixBase<DQ>& q,
                                                     const Eigen::MatrixBase<DK>& k,
                                                     const Eigen::MatrixBase<DV>& v,
                                                     const BlockSparseConfig& cfg, bool causal,
                                                     Index rows_per_token = 1) {
  const Matrix mask = blocksparse_additive_mask(q.rows(), cfg, causal, rows_per_token);
  return exact_attention(q, k, v, &mask);
}

// ------------------------------------------------------------- tape ops

/// Kernel attention as one tape node with an analytic linear-time backward.
Var kernel_attention(Var q, Var k, Var v, bool causal, double feature_eps);

/// Low-rank attention; `w_full` is the (N_max x proj_len) projection, of which
/// the leading rows matching the sequence length are used.
Var lowrank_attention(Var q, Var k, Var v, Var w_full);

/// Block-sparse attention composed from gathers over the neighborhoods.
Var blocksparse_attention(Var q, Var k, Var v, const BlockSparseConfig& cfg, const Mask& mask);

/// Head function for `backend`. `lowrank_w` is required for LowRank; `capture`
/// is honored only by Exact.
HeadAttention make_head_attention(const AttentionBackend& backend, const Mask& mask,
                                  std::optional<Var> lowrank_w = std::nullopt,
                                  AttentionCapture* capture = nullptr);

/// Dense M x M attention weights that `backend` applies on the grid for one
/// head's q, k: softmax for Exact, normalized phi products for Kernel, masked
/// softmax for BlockSparse. LowRank has no grid-level distribution and falls
/// back to the exact softmax over the same projections.
Matrix dense_attention_weights(const AttentionBackend& backend, const Matrix& q, const Matrix& k,
                               const Mask& mask);

}  // namespace omninet

#endif  // OMNINET_EFFICIENT_ATTENTION_HPP
