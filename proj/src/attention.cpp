#include "omninet/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace omninet {

LnPlacement parse_ln_placement(const std::string& text) {
  if (text == "as-paper") return LnPlacement::AsPaper;
  if (text == "post-ln") return LnPlacement::PostLn;
  throw std::invalid_argument("unknown ln_placement '" + text + "' (expected as-paper|post-ln)");
}

std::string to_string(LnPlacement placement) {
  return placement == LnPlacement::AsPaper ? "as-paper" : "post-ln";
}

Mask build_causal_mask(Index n_tokens, Index layers_per_token) {
  if (n_tokens < 1 || layers_per_token < 1) {
    throw std::invalid_argument("build_causal_mask: counts must be >= 1");
  }
  const Index rows = n_tokens * layers_per_token;
  auto additive = std::make_shared<Matrix>(rows, rows);
  for (Index r = 0; r < rows; ++r) {
    const Index query_token = r / layers_per_token;
    for (Index c = 0; c < rows; ++c) {
      (*additive)(r, c) = c / layers_per_token <= query_token ? 0.0 : kMaskedLogit;
    }
  }
  Mask mask;
  mask.kind = Mask::Kind::CausalTokens;
  mask.rows_per_token = layers_per_token;
  mask.additive = std::move(additive);
  return mask;
}

Mask make_mask(bool causal, Index rows, Index rows_per_token) {
  if (!causal) {
    Mask m;
    m.rows_per_token = rows_per_token;
    return m;
  }
  if (rows % rows_per_token != 0) {
    throw ShapeError("make_mask: " + std::to_string(rows) + " rows not divisible by " +
                     std::to_string(rows_per_token));
  }
  return build_causal_mask(rows / rows_per_token, rows_per_token);
}

std::vector<std::string> mha_param_names(const std::string& prefix) {
  std::vector<std::string> names;
  for (const char* leaf :
       {"wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln_gamma", "ln_beta"}) {
    names.push_back(prefix + "." + leaf);
  }
  return names;
}

std::vector<std::string> ffn_param_names(const std::string& prefix) {
  std::vector<std::string> names;
  for (const char* leaf : {"w_inner", "b_inner", "w_outer", "b_outer", "ln_gamma", "ln_beta"}) {
    names.push_back(prefix + "." + leaf);
  }
  return names;
}

void init_mha_params(ParamSet& params, const std::string& prefix, Index d_model, Index heads,
                     Rng& rng) {
  if (heads < 1 || d_model % heads != 0) {
    throw std::invalid_argument("attention: d_model " + std::to_string(d_model) +
                                " not divisible by heads " + std::to_string(heads));
  }
  const double std_in = 1.0 / std::sqrt(double(d_model));
  for (const char* w : {"wq", "wk", "wv", "wo"}) {
    params.add(prefix + "." + w, rng.normal_matrix(d_model, d_model, std_in));
  }
  for (const char* b : {"bq", "bk", "bv", "bo"}) {
    params.add(prefix + "." + b, Matrix::Zero(1, d_model));
  }
  params.add(prefix + ".ln_gamma", Matrix::Ones(1, d_model));
  params.add(prefix + ".ln_beta", Matrix::Zero(1, d_model));
}

void init_ffn_params(ParamSet& params, const std::string& prefix, Index d_model, Index d_ff,
                     Rng& rng) {
  params.add(prefix + ".w_inner", rng.normal_matrix(d_model, d_ff, 1.0 / std::sqrt(double(d_model))));
  params.add(prefix + ".b_inner", Matrix::Zero(1, d_ff));
  params.add(prefix + ".w_outer", rng.normal_matrix(d_ff, d_model, 1.0 / std::sqrt(double(d_ff))));
  params.add(prefix + ".b_outer", Matrix::Zero(1, d_model));
  params.add(prefix + ".ln_gamma", Matrix::Ones(1, d_model));
  params.add(prefix + ".ln_beta", Matrix::Zero(1, d_model));
}

MhaParams bind_mha(Tape& tape, const ParamSet& params, const std::string& prefix, Index heads) {
  auto p = [&](const char* leaf) { return tape.parameter(params, prefix + "." + leaf); };
  MhaParams out{p("wq"), p("bq"), p("wk"), p("bk"), p("wv"), p("bv"),
                p("wo"), p("bo"), p("ln_gamma"), p("ln_beta"), heads};
  if (out.w_query.cols() % heads != 0) {
    throw std::invalid_argument(prefix + ": projection width not divisible by heads");
  }
  return out;
}

FfnParams bind_ffn(Tape& tape, const ParamSet& params, const std::string& prefix) {
  auto p = [&](const char* leaf) { return tape.parameter(params, prefix + "." + leaf); };
  return {p("w_inner"), p("b_inner"), p("w_outer"), p("b_outer"), p("ln_gamma"), p("ln_beta")};
}

Var exact_head_attention(Var q, Var k, Var v, const Mask& mask, AttentionCapture* capture) {
  const double scale_factor = 1.0 / std::sqrt(double(q.cols()));
  Var logits = scale(matmul_nt(q, k), scale_factor);
  Var weights = mask.additive ? softmax_rows(logits, mask.additive) : softmax_rows(logits);
  if (capture != nullptr) {
    capture->head_weights.push_back(weights.value().row(capture->query_row));
  }
  return matmul(weights, v);
}

namespace {

Var wrap_residual(Var x, Var sublayer, Var gamma, Var beta, LnPlacement placement) {
  if (placement == LnPlacement::AsPaper) {
    return add(layer_norm(sublayer, gamma, beta), x);
  }
  return layer_norm(add(x, sublayer), gamma, beta);
}

Var maybe_dropout(Var x, double rate, Rng* rng) {
  if (rate <= 0.0 || rng == nullptr) {
    return x;
  }
  return dropout(x, rate, *rng);
}

}  // namespace

Var mha_block(Var x, const MhaParams& params, const HeadAttention& head_fn,
              LnPlacement placement, double dropout_rate, Rng* dropout_rng) {
  if (x.cols() != params.w_query.rows()) {
    throw ShapeError("mha_block: input " + shape_string(x.value()) + " for model width " +
                     std::to_string(params.w_query.rows()));
  }
  Var q = add_row(matmul(x, params.w_query), params.b_query);
  Var k = add_row(matmul(x, params.w_key), params.b_key);
  Var v = add_row(matmul(x, params.w_value), params.b_value);
  const Index dk = params.head_dim();
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(params.heads));
  for (Index h = 0; h < params.heads; ++h) {
    heads.push_back(head_fn(slice_cols(q, h * dk, dk), slice_cols(k, h * dk, dk),
                            slice_cols(v, h * dk, dk), h));
  }
  Var mixed = heads.size() == 1 ? heads.front() : concat_cols(heads);
  Var projected = add_row(matmul(mixed, params.w_out), params.b_out);
  projected = maybe_dropout(projected, dropout_rate, dropout_rng);
  return wrap_residual(x, projected, params.ln_gamma, params.ln_beta, placement);
}

Var exact_mha_block(Var x, const MhaParams& params, const Mask& mask, LnPlacement placement,
                    AttentionCapture* capture) {
  if (mask.additive && (mask.additive->rows() != x.rows() || mask.additive->cols() != x.rows())) {
    throw ShapeError("exact_mha_block: mask " + shape_string(*mask.additive) + " for " +
                     std::to_string(x.rows()) + " rows");
  }
  return mha_block(
      x, params,
      [&](Var q, Var k, Var v, Index) { return exact_head_attention(q, k, v, mask, capture); },
      placement);
}

Var ffn_block(Var y, const FfnParams& params, LnPlacement placement, double dropout_rate,
              Rng* dropout_rng) {
  Var hidden = relu(add_row(matmul(y, params.w_inner), params.b_inner));
  Var out = add_row(matmul(hidden, params.w_outer), params.b_outer);
  out = maybe_dropout(out, dropout_rate, dropout_rng);
  return wrap_residual(y, out, params.ln_gamma, params.ln_beta, placement);
}

}  // namespace omninet
