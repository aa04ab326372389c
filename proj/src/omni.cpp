#include "omninet/omni.hpp"

#include <stdexcept>

namespace omninet {

std::vector<Index> index_sort_permutation(Index n_tokens, Index n_layers) {
  std::vector<Index> perm(static_cast<std::size_t>(n_tokens * n_layers));
  for (Index t = 0; t < n_tokens; ++t) {
    for (Index l = 0; l < n_layers; ++l) {
      perm[static_cast<std::size_t>(t * n_layers + l)] = l * n_tokens + t;
    }
  }
  return perm;
}

std::vector<Index> invert_permutation(const std::vector<Index>& perm) {
  std::vector<Index> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    inverse[static_cast<std::size_t>(perm[i])] = static_cast<Index>(i);
  }
  return inverse;
}

Var index_sort(const LayerStack& stack) {
  if (stack.layers.empty()) {
    throw std::invalid_argument("index_sort: empty stack");
  }
  if (stack.layers.size() == 1) {
    return stack.layers.front();
  }
  return gather_rows(concat_rows(stack.layers),
                     index_sort_permutation(stack.tokens(), stack.layer_count()));
}

std::vector<int> OmniPlan::omni_layers() const {
  std::vector<int> out;
  for (const auto& entry : schedule) {
    if (entry.kind == LayerKind::Omni) out.push_back(entry.layer);
  }
  return out;
}

OmniPlan build_plan(int layers, int partition, bool include_embeddings) {
  if (layers < 1) {
    throw std::invalid_argument("model needs at least one layer");
  }
  if (partition < 1 || partition > layers) {
    throw std::invalid_argument("partition size must satisfy 1 <= P <= L");
  }
  if (layers % partition != 0) {
    throw std::invalid_argument("L mod P != 0 (L=" + std::to_string(layers) +
                                ", P=" + std::to_string(partition) + ")");
  }
  OmniPlan plan{layers, partition, include_embeddings, {}};
  for (int l = 1; l <= layers; ++l) {
    LayerPlan entry{l, LayerKind::Transformer, {}};
    if (l % partition == 0) {
      entry.kind = LayerKind::Omni;
      int first = l - partition;
      if (first == 0 && !include_embeddings && partition > 1) {
        first = 1;
      }
      for (int src = first; src <= l - 1; ++src) entry.consumes.push_back(src);
    }
    plan.schedule.push_back(std::move(entry));
  }
  return plan;
}

Index omni_sequence_length(const LayerPlan& plan, Index n_tokens) {
  return static_cast<Index>(plan.consumes.size()) * n_tokens;
}

PoolStats pool_stats(const IndexMatrix& argindex, std::vector<int> layer_ids, int omni_layer) {
  const Index g = static_cast<Index>(layer_ids.size());
  PoolStats stats{omni_layer, std::move(layer_ids), Matrix::Zero(argindex.rows(), g)};
  const double share = 1.0 / double(argindex.cols());
  for (Index t = 0; t < argindex.rows(); ++t) {
    for (Index c = 0; c < argindex.cols(); ++c) {
      stats.fractions(t, argindex(t, c)) += share;
    }
  }
  return stats;
}

OmniOutput omni_block(const LayerStack& stack, const AttentionBackend& backend,
                      const OmniParams& params, bool causal, const OmniOptions& options) {
  if (stack.layers.empty()) {
    throw std::invalid_argument("omni_block: empty stack");
  }
  if (causal && !backend.supports_causal()) {
    throw std::invalid_argument("low-rank backend does not support causality");
  }
  if (options.attention_query && backend.kind != BackendKind::Exact && !options.dense_oracle) {
    throw std::invalid_argument("attention map requires dense backend");
  }
  const Index g = stack.layer_count();
  const Index n = stack.tokens();
  Var sorted = index_sort(stack);
  if (params.layer_embedding) {
    std::vector<Index> layer_of_row(static_cast<std::size_t>(g * n));
    for (Index r = 0; r < g * n; ++r) layer_of_row[static_cast<std::size_t>(r)] = r % g;
    sorted = add(sorted, gather_rows(*params.layer_embedding, std::move(layer_of_row)));
  }
  const Mask mask = make_mask(causal, g * n, g);
  const HeadAttention head_fn = make_head_attention(backend, mask, params.lowrank_w);
  Var attended = mha_block(sorted, params.attn, head_fn, options.placement, options.dropout_rate,
                           options.dropout_rng);
  Var mixed = ffn_block(attended, params.ffn, options.placement, options.dropout_rate,
                        options.dropout_rng);

  OmniOutput out;
  IndexMatrix argindex;
  out.pooled = grouped_max(mixed, g, &argindex);
  out.stats = pool_stats(argindex, stack.layer_ids, options.omni_layer);

  if (options.attention_query) {
    const Index token = *options.attention_query;
    if (token < 0 || token >= n) {
      throw std::out_of_range("attention query token " + std::to_string(token) + " outside " +
                              std::to_string(n) + " positions");
    }
    const Matrix& x = sorted.value();
    const Matrix q = (x * params.attn.w_query.value()).rowwise() + params.attn.b_query.value().row(0);
    const Matrix k = (x * params.attn.w_key.value()).rowwise() + params.attn.b_key.value().row(0);
    const Index dk = params.attn.head_dim();
    const Index query_row = token * g + (g - 1);
    AttentionMap map{options.omni_layer, token, stack.layer_ids, {}};
    for (Index h = 0; h < params.attn.heads; ++h) {
      const Matrix weights = dense_attention_weights(backend, q.middleCols(h * dk, dk),
                                                     k.middleCols(h * dk, dk), mask);
      Matrix grid(g, n);
      for (Index c = 0; c < g * n; ++c) {
        grid(c % g, c / g) = weights(query_row, c);
      }
      map.heads.push_back(std::move(grid));
    }
    out.attention = std::move(map);
  }
  return out;
}

Var combine_final(Var x_last, Var o_prime) {
  return add(x_last, o_prime);
}

}  // namespace omninet
