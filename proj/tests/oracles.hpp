// Loop-level reference implementations used only by the tests. They share no
// code with the library beyond the Matrix type and ParamSet lookups.
#ifndef OMNINET_TESTS_ORACLES_HPP
#define OMNINET_TESTS_ORACLES_HPP

#include "omninet/autograd.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace oracle {

using omninet::Index;
using omninet::Matrix;

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (Index p = 0; p < a.cols(); ++p) acc += a(i, p) * b(p, j);
      out(i, j) = acc;
    }
  }
  return out;
}

inline double rel_error(const Matrix& got, const Matrix& want) {
  double num = 0.0;
  double den = 0.0;
  for (Index i = 0; i < got.rows(); ++i) {
    for (Index j = 0; j < got.cols(); ++j) {
      num = std::max(num, std::abs(got(i, j) - want(i, j)));
      den = std::max(den, std::abs(want(i, j)));
    }
  }
  return den > 0.0 ? num / den : num;
}

/// Row softmax restricted to the entries `allowed(i, j)` admits.
inline Matrix softmax(const Matrix& x, const std::function<bool(Index, Index)>& allowed) {
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    double top = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < x.cols(); ++j) {
      if (allowed(i, j)) top = std::max(top, x(i, j));
    }
    double total = 0.0;
    for (Index j = 0; j < x.cols(); ++j) {
      if (allowed(i, j)) total += std::exp(x(i, j) - top);
    }
    for (Index j = 0; j < x.cols(); ++j) {
      if (allowed(i, j)) out(i, j) = std::exp(x(i, j) - top) / total;
    }
  }
  return out;
}

inline bool everything(Index, Index) { return true; }

/// Causal over a token-major grid with g rows per token.
inline std::function<bool(Index, Index)> causal_grid(Index g) {
  return [g](Index i, Index j) { return j / g <= i / g; };
}

inline Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                         double eps = 1e-6) {
  Matrix out(x.rows(), x.cols());
  const double d = double(x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    double mean = 0.0;
    for (Index c = 0; c < x.cols(); ++c) mean += x(r, c);
    mean /= d;
    double var = 0.0;
    for (Index c = 0; c < x.cols(); ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= d;
    for (Index c = 0; c < x.cols(); ++c) {
      out(r, c) = (x(r, c) - mean) / std::sqrt(var + eps) * gamma(0, c) + beta(0, c);
    }
  }
  return out;
}

/// softmax(q k^T / sqrt(d_k) on allowed entries) v, one head.
inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v,
                        const std::function<bool(Index, Index)>& allowed) {
  Matrix logits(q.rows(), k.rows());
  for (Index i = 0; i < q.rows(); ++i) {
    for (Index j = 0; j < k.rows(); ++j) {
      double dot = 0.0;
      for (Index p = 0; p < q.cols(); ++p) dot += q(i, p) * k(j, p);
      logits(i, j) = dot / std::sqrt(double(q.cols()));
    }
  }
  return matmul(softmax(logits, allowed), v);
}

/// phi(x) = max(x, 0) + eps; weights phi(q_i).phi(k_j), row-normalized.
inline Matrix kernel_attention(const Matrix& q, const Matrix& k, const Matrix& v, bool causal,
                               double eps) {
  Matrix out = Matrix::Zero(q.rows(), v.cols());
  for (Index i = 0; i < q.rows(); ++i) {
    double total = 0.0;
    for (Index j = 0; j < k.rows(); ++j) {
      if (causal && j > i) continue;
      double w = 0.0;
      for (Index p = 0; p < q.cols(); ++p) {
        w += (std::max(q(i, p), 0.0) + eps) * (std::max(k(j, p), 0.0) + eps);
      }
      total += w;
      for (Index c = 0; c < v.cols(); ++c) out(i, c) += w * v(j, c);
    }
    for (Index c = 0; c < v.cols(); ++c) out(i, c) /= total;
  }
  return out;
}

inline Matrix add_bias(Matrix x, const Matrix& bias) {
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index c = 0; c < x.cols(); ++c) x(r, c) += bias(0, c);
  }
  return x;
}

/// LN(W_o concat_h attention_h + b_o) + x, parameters read from `prefix`.
inline Matrix mha(const Matrix& x, const omninet::ParamSet& p, const std::string& prefix,
                  Index heads, const std::function<bool(Index, Index)>& allowed) {
  const Matrix q = add_bias(matmul(x, p.at(prefix + ".wq")), p.at(prefix + ".bq"));
  const Matrix k = add_bias(matmul(x, p.at(prefix + ".wk")), p.at(prefix + ".bk"));
  const Matrix v = add_bias(matmul(x, p.at(prefix + ".wv")), p.at(prefix + ".bv"));
  const Index dk = q.cols() / heads;
  Matrix concat(x.rows(), q.cols());
  for (Index h = 0; h < heads; ++h) {
    concat.middleCols(h * dk, dk) =
        attention(q.middleCols(h * dk, dk), k.middleCols(h * dk, dk), v.middleCols(h * dk, dk),
                  allowed);
  }
  const Matrix projected = add_bias(matmul(concat, p.at(prefix + ".wo")), p.at(prefix + ".bo"));
  return layer_norm(projected, p.at(prefix + ".ln_gamma"), p.at(prefix + ".ln_beta")) + x;
}

inline Matrix ffn(const Matrix& y, const omninet::ParamSet& p, const std::string& prefix) {
  Matrix hidden = add_bias(matmul(y, p.at(prefix + ".w_inner")), p.at(prefix + ".b_inner"));
  for (Index r = 0; r < hidden.rows(); ++r) {
    for (Index c = 0; c < hidden.cols(); ++c) hidden(r, c) = std::max(hidden(r, c), 0.0);
  }
  const Matrix out = add_bias(matmul(hidden, p.at(prefix + ".w_outer")), p.at(prefix + ".b_outer"));
  return layer_norm(out, p.at(prefix + ".ln_gamma"), p.at(prefix + ".ln_beta")) + y;
}

/// pe(pos, 2i) = sin(pos / 10000^(2i/d)), pe(pos, 2i+1) = cos(same).
inline Matrix positions(Index rows, Index d) {
  Matrix pe(rows, d);
  for (Index pos = 0; pos < rows; ++pos) {
    for (Index i = 0; i < d; i += 2) {
      const double angle = double(pos) / std::pow(10000.0, double(i) / double(d));
      pe(pos, i) = std::sin(angle);
      if (i + 1 < d) pe(pos, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

/// Plain decoder-only transformer LM reading layer l's weights from
/// `layer_prefix(l)`; returns N x vocab logits.
inline Matrix vanilla_lm(const omninet::ParamSet& p, const std::vector<int>& tokens, int layers,
                         Index heads, const std::function<std::string(int)>& layer_prefix) {
  const Matrix& table = p.at("embed.tokens");
  const Index d = table.cols();
  const Index n = static_cast<Index>(tokens.size());
  Matrix x(n, d);
  for (Index i = 0; i < n; ++i) x.row(i) = table.row(tokens[static_cast<std::size_t>(i)]) * std::sqrt(double(d));
  x += positions(n, d);
  for (int l = 1; l <= layers; ++l) {
    const std::string prefix = layer_prefix(l);
    x = ffn(mha(x, p, prefix + ".attn", heads, causal_grid(1)), p, prefix + ".ffn");
  }
  x = layer_norm(x, p.at("final_ln.gamma"), p.at("final_ln.beta"));
  return add_bias(matmul(x, p.at("head.w")), p.at("head.b"));
}

/// Parameter count of a vanilla transformer with the given dimensions.
inline Index vanilla_param_count(Index vocab, Index d, Index d_ff, int layers, Index out_dim,
                                 bool cls) {
  const Index mha = 4 * (d * d + d) + 2 * d;
  const Index ffn = d * d_ff + d_ff + d_ff * d + d + 2 * d;
  return vocab * d + (cls ? d : 0) + layers * (mha + ffn) + 2 * d + d * out_dim + out_dim;
}

}  // namespace oracle

#endif  // OMNINET_TESTS_ORACLES_HPP
