#ifndef OMNINET_ATTENTION_HPP
#define OMNINET_ATTENTION_HPP

#include "omninet/autograd.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <string>

namespace omninet {

/// Where the block layer norm sits relative to the residual add.
enum class LnPlacement {
  /// LN(sublayer(x)) + x
  AsPaper,
  /// LN(x + sublayer(x))
  PostLn,
};

LnPlacement parse_ln_placement(const std::string& text);
std::string to_string(LnPlacement placement);

/// Causality rule for one attention call.
struct Mask {
  enum class Kind { None, CausalTokens };
  Kind kind = Kind::None;
  /// Consecutive rows that belong to one token (layers per token on an
  /// index-sorted grid, 1 for a plain sequence).
  Index rows_per_token = 1;
  /// Additive 0 / kMaskedLogit matrix for the exact path; null when unmasked.
  std::shared_ptr<const Matrix> additive;

  bool causal() const { return kind == Kind::CausalTokens; }
  static Mask none() { return {}; }
};

/// Token-granular causal mask over n_tokens * layers_per_token rows laid out
/// token-major: row r may attend column c iff c / g <= r / g.
Mask build_causal_mask(Index n_tokens, Index layers_per_token);

/// Causal mask for `rows` rows, or Mask::none() when not causal.
Mask make_mask(bool causal, Index rows, Index rows_per_token);

/// Multi-head attention parameters bound on a tape. The per-head projections
/// are stored side by side: head h uses columns [h*d_k, (h+1)*d_k).
struct MhaParams {
  Var w_query, b_query;
  Var w_key, b_key;
  Var w_value, b_value;
  Var w_out, b_out;
  Var ln_gamma, ln_beta;
  Index heads = 1;

  Index head_dim() const { return w_query.cols() / heads; }
};

/// FFN parameters: inner map d -> d_ff, ReLU, outer map d_ff -> d.
struct FfnParams {
  Var w_inner, b_inner;
  Var w_outer, b_outer;
  Var ln_gamma, ln_beta;
};

/// Parameter names of an attention sublayer under `prefix`, e.g. "layers.01.attn".
std::vector<std::string> mha_param_names(const std::string& prefix);
std::vector<std::string> ffn_param_names(const std::string& prefix);

/// Random initialization of an attention sublayer into `params`.
void init_mha_params(ParamSet& params, const std::string& prefix, Index d_model, Index heads,
                     Rng& rng);
void init_ffn_params(ParamSet& params, const std::string& prefix, Index d_model, Index d_ff,
                     Rng& rng);

MhaParams bind_mha(Tape& tape, const ParamSet& params, const std::string& prefix,
                   Index heads);
FfnParams bind_ffn(Tape& tape, const ParamSet& params, const std::string& prefix);

/// Optional capture of one query row of the attention weights, per head.
struct AttentionCapture {
  Index query_row = 0;
  std::vector<Eigen::RowVectorXd> head_weights;
};

/// Computes one head's output from its projected q, k, v.
using HeadAttention = std::function<Var(Var q, Var k, Var v, Index head)>;

/// softmax(q k^T / sqrt(d_k) + mask) v for one head, recording the query row
/// into `capture` when given.
Var exact_head_attention(Var q, Var k, Var v, const Mask& mask,
                         AttentionCapture* capture = nullptr);

/// Projects x into per-head q, k, v, runs `head_fn` per head, concatenates,
/// applies W_o and wraps with layer norm and the residual.
Var mha_block(Var x, const MhaParams& params, const HeadAttention& head_fn,
              LnPlacement placement = LnPlacement::AsPaper, double dropout_rate = 0.0,
              Rng* dropout_rng = nullptr);

/// Exact softmax multi-head attention block.
Var exact_mha_block(Var x, const MhaParams& params, const Mask& mask,
                    LnPlacement placement = LnPlacement::AsPaper,
                    AttentionCapture* capture = nullptr);

/// LN(W_outer ReLU(W_inner y)) + y (or the post-LN variant).
Var ffn_block(Var y, const FfnParams& params, LnPlacement placement = LnPlacement::AsPaper,
              double dropout_rate = 0.0, Rng* dropout_rng = nullptr);

}  // namespace omninet

#endif  // OMNINET_ATTENTION_HPP
