#ifndef OMNINET_OMNI_HPP
#define OMNINET_OMNI_HPP

#include "omninet/attention.hpp"
#include "omninet/efficient_attention.hpp"

#include <optional>
#include <string>
#include <vector>

namespace omninet {

/// Outputs of consecutive layers of one network, each N x d.
struct LayerStack {
  std::vector<Var> layers;
  /// Original layer index of each member, strictly increasing.
  std::vector<int> layer_ids;

  Index layer_count() const { return static_cast<Index>(layers.size()); }
  Index tokens() const { return layers.front().rows(); }
};

/// perm[r] is the layer-major row (layer * N + token) that lands on sorted row
/// r, where the sorted order is token-major: r = token * L + layer.
std::vector<Index> index_sort_permutation(Index n_tokens, Index n_layers);
std::vector<Index> invert_permutation(const std::vector<Index>& perm);

template <typename Scalar>
struct IndexSorted {
  Tensor<Scalar> rows;
  /// Maps sorted rows back: rows.row(inverse[i]) is layer-major row i.
  std::vector<Index> inverse;
};

/// Token-major interleave of equally shaped layer outputs.
template <typename Scalar>
IndexSorted<Scalar> index_sort(const std::vector<Tensor<Scalar>>& layers) {
  if (layers.empty()) {
    throw std::invalid_argument("index_sort: empty stack");
  }
  const Index n = layers.front().rows();
  const Index d = layers.front().cols();
  for (const auto& layer : layers) {
    require_same_shape(layer, layers.front(), "index_sort");
  }
  const Index g = static_cast<Index>(layers.size());
  const std::vector<Index> perm = index_sort_permutation(n, g);
  IndexSorted<Scalar> out{Tensor<Scalar>(g * n, d), invert_permutation(perm)};
  for (Index r = 0; r < g * n; ++r) {
    const Index src = perm[static_cast<std::size_t>(r)];
    out.rows.row(r) = layers[static_cast<std::size_t>(src / n)].row(src % n);
  }
  return out;
}

/// Tape version of index_sort.
Var index_sort(const LayerStack& stack);

enum class LayerKind { Transformer, Omni };

struct LayerPlan {
  /// 1-based layer index.
  int layer = 0;
  LayerKind kind = LayerKind::Transformer;
  /// Layer outputs consumed by an omni block (0 is the embedding output).
  std::vector<int> consumes;
};

/// Per-layer schedule for L layers with partition size P.
struct OmniPlan {
  int layers = 0;
  int partition = 0;
  bool include_embeddings = false;
  std::vector<LayerPlan> schedule;

  std::vector<int> omni_layers() const;
};

/// Omni blocks at every layer l with l mod P == 0, consuming l-P .. l-1. The
/// embedding output (layer 0) is dropped from that range unless
/// `include_embeddings`; it is kept only when it is the sole candidate (P == 1
/// at layer 1).
OmniPlan build_plan(int layers, int partition, bool include_embeddings = false);

/// Rows (g * N) that an omni block attends over.
Index omni_sequence_length(const LayerPlan& plan, Index n_tokens);

/// Per token, the fraction of the d output dimensions won by each pooled layer.
struct PoolStats {
  int omni_layer = 0;
  std::vector<int> layer_ids;
  /// N x g; rows sum to one.
  Matrix fractions;
};

PoolStats pool_stats(const IndexMatrix& argindex, std::vector<int> layer_ids, int omni_layer = 0);

/// Attention of one query over the g x N grid, per head.
struct AttentionMap {
  int omni_layer = 0;
  Index query_token = 0;
  std::vector<int> layer_ids;
  /// Each head: g x N, entry (layer, position).
  std::vector<Matrix> heads;
};

struct OmniParams {
  MhaParams attn;
  FfnParams ffn;
  std::optional<Var> lowrank_w;
  /// g x d, one learned vector per pooled layer.
  std::optional<Var> layer_embedding;
};

struct OmniOptions {
  LnPlacement placement = LnPlacement::AsPaper;
  double dropout_rate = 0.0;
  Rng* dropout_rng = nullptr;
  /// When set, the attention row of this token (at its last pooled layer) is
  /// exported.
  std::optional<Index> attention_query;
  /// Permit the attention export for non-Exact backends by re-evaluating the
  /// block densely.
  bool dense_oracle = false;
  int omni_layer = 0;
};

struct OmniOutput {
  /// O', N x d.
  Var pooled;
  PoolStats stats;
  std::optional<AttentionMap> attention;
};

/// O = FFN(att(index_sort(stack))), O' = grouped max over each token's rows.
OmniOutput omni_block(const LayerStack& stack, const AttentionBackend& backend,
                      const OmniParams& params, bool causal, const OmniOptions& options = {});

/// Final representation x_L + O'.
Var combine_final(Var x_last, Var o_prime);

template <typename DA, typename DB>
Tensor<typename DA::Scalar> combine_final(const Eigen::MatrixBase<DA>& x_last,
                                          const Eigen::MatrixBase<DB>& o_prime) {
  require_same_shape(x_last, o_prime, "combine_final");
  return x_last + o_prime;
}

}  // namespace omninet

#endif  // OMNINET_OMNI_HPP
