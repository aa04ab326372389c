#include "omninet/efficient_attention.hpp"

#include <memory>
#include <numeric>
#include <set>

namespace omninet {

BackendKind parse_backend_kind(const std::string& text) {
  if (text == "exact") return BackendKind::Exact;
  if (text == "kernel") return BackendKind::Kernel;
  if (text == "lowrank") return BackendKind::LowRank;
  if (text == "blocksparse") return BackendKind::BlockSparse;
  throw std::invalid_argument("unknown backend '" + text +
                              "' (expected exact|kernel|lowrank|blocksparse)");
}

std::string to_string(BackendKind kind) {
  switch (kind) {
    case BackendKind::Exact: return "exact";
    case BackendKind::Kernel: return "kernel";
    case BackendKind::LowRank: return "lowrank";
    case BackendKind::BlockSparse: return "blocksparse";
  }
  return "unknown";
}

std::vector<Index> neighborhood(Index i_block, const BlockSparseConfig& cfg, Index n_blocks) {
  if (n_blocks < 1 || i_block < 0 || i_block >= n_blocks) {
    throw std::out_of_range("neighborhood: block " + std::to_string(i_block) + " of " +
                            std::to_string(n_blocks));
  }
  std::set<Index> chosen;
  for (Index b = std::max<Index>(0, i_block - cfg.window_blocks);
       b <= std::min<Index>(n_blocks - 1, i_block + cfg.window_blocks); ++b) {
    chosen.insert(b);
  }
  for (Index g = 0; g < std::min(cfg.num_global_blocks, n_blocks); ++g) {
    chosen.insert(g);
  }
  std::vector<Index> pool;
  for (Index b = 0; b < n_blocks; ++b) {
    if (!chosen.count(b)) pool.push_back(b);
  }
  Rng rng(cfg.rng_seed, static_cast<std::uint64_t>(i_block));
  const Index draws = std::min<Index>(cfg.num_random_blocks, static_cast<Index>(pool.size()));
  for (Index t = 0; t < draws; ++t) {
    const auto pick = static_cast<std::size_t>(t) +
                      static_cast<std::size_t>(rng.below(pool.size() - static_cast<std::size_t>(t)));
    std::swap(pool[static_cast<std::size_t>(t)], pool[pick]);
    chosen.insert(pool[static_cast<std::size_t>(t)]);
  }
  return {chosen.begin(), chosen.end()};
}

Matrix blocksparse_additive_mask(Index m, const BlockSparseConfig& cfg, bool causal,
                                 Index rows_per_token) {
  const Index bs = cfg.block_size;
  if (bs < 1 || m % bs != 0) {
    throw ShapeError("blocksparse mask: length " + std::to_string(m) +
                     " not divisible by block size " + std::to_string(bs));
  }
  Matrix mask = Matrix::Constant(m, m, kMaskedLogit);
  const Index n_blocks = m / bs;
  for (Index b = 0; b < n_blocks; ++b) {
    for (Index kb : neighborhood(b, cfg, n_blocks)) {
      for (Index r = b * bs; r < (b + 1) * bs; ++r) {
        for (Index c = kb * bs; c < (kb + 1) * bs; ++c) {
          if (!causal || c / rows_per_token <= r / rows_per_token) {
            mask(r, c) = 0.0;
          }
        }
      }
    }
  }
  return mask;
}

// ------------------------------------------------------------- tape ops

Var kernel_attention(Var q, Var k, Var v, bool causal, double feature_eps) {
  return q.tape->record(
      {q, k, v},
      [causal, feature_eps](Inputs in) -> Matrix {
        return kernel_attention(*in[0], *in[1], *in[2], causal, feature_eps);
      },
      [causal, feature_eps](Inputs in, const Matrix& out, const Matrix& g, InputGrads dg) {
        const Matrix& qv = *in[0];
        const Matrix& kv = *in[1];
        const Matrix& vv = *in[2];
        const Matrix a = relu_features(qv, feature_eps);
        const Matrix b = relu_features(kv, feature_eps);
        const Index m = qv.rows();
        const Index dk = qv.cols();
        const Index dv = vv.cols();
        Matrix da(m, dk);
        Matrix db(m, dk);
        Matrix dval(m, dv);
        Eigen::VectorXd dden(m);
        Matrix dnum(m, dv);
        if (!causal) {
          const Matrix s = b.transpose() * vv;
          const Eigen::RowVectorXd z = b.colwise().sum();
          for (Index r = 0; r < m; ++r) {
            const double den = a.row(r).dot(z);
            dnum.row(r) = g.row(r) / den;
            dden(r) = -g.row(r).dot(out.row(r)) / den;
          }
          da = dnum * s.transpose() + dden * z;
          const Matrix ds = a.transpose() * dnum;
          const Eigen::RowVectorXd dz = (a.transpose() * dden).transpose();
          db = vv * ds.transpose();
          db.rowwise() += dz;
          dval = b * ds;
        } else {
          Matrix s = Matrix::Zero(dk, dv);
          Eigen::RowVectorXd z = Eigen::RowVectorXd::Zero(dk);
          for (Index r = 0; r < m; ++r) {
            s.noalias() += b.row(r).transpose() * vv.row(r);
            z += b.row(r);
            const double den = a.row(r).dot(z);
            dnum.row(r) = g.row(r) / den;
            dden(r) = -g.row(r).dot(out.row(r)) / den;
            da.row(r) = dnum.row(r) * s.transpose() + dden(r) * z;
          }
          Matrix suffix_s = Matrix::Zero(dk, dv);
          Eigen::RowVectorXd suffix_z = Eigen::RowVectorXd::Zero(dk);
          for (Index j = m - 1; j >= 0; --j) {
            suffix_s.noalias() += a.row(j).transpose() * dnum.row(j);
            suffix_z += dden(j) * a.row(j);
            db.row(j) = vv.row(j) * suffix_s.transpose() + suffix_z;
            dval.row(j) = b.row(j) * suffix_s;
          }
        }
        if (dg[0]) *dg[0] += (qv.array() > 0.0).select(da, 0.0);
        if (dg[1]) *dg[1] += (kv.array() > 0.0).select(db, 0.0);
        if (dg[2]) *dg[2] += dval;
      });
}

Var lowrank_attention(Var q, Var k, Var v, Var w_full) {
  const Index m = k.rows();
  if (m > w_full.rows()) {
    throw ShapeError("lowrank_attention: sequence length " + std::to_string(m) +
                     " exceeds projection rows " + std::to_string(w_full.rows()));
  }
  if (w_full.cols() > m) {
    throw ShapeError("lowrank_attention: projected length " + std::to_string(w_full.cols()) +
                     " exceeds sequence length " + std::to_string(m));
  }
  Var w = m == w_full.rows() ? w_full : slice_rows(w_full, 0, m);
  Var wt = transpose(w);
  Var k_proj = matmul(wt, k);
  Var v_proj = matmul(wt, v);
  return exact_head_attention(q, k_proj, v_proj, Mask::none());
}

Var blocksparse_attention(Var q, Var k, Var v, const BlockSparseConfig& cfg, const Mask& mask) {
  const Index m = q.rows();
  const Index bs = cfg.block_size;
  if (bs < 1 || m % bs != 0) {
    throw ShapeError("blocksparse_attention: sequence length " + std::to_string(m) +
                     " not divisible by block size " + std::to_string(bs));
  }
  const double s = 1.0 / std::sqrt(double(q.cols()));
  const Index n_blocks = m / bs;
  const Index per_token = mask.rows_per_token;
  std::vector<Var> outputs;
  outputs.reserve(static_cast<std::size_t>(n_blocks));
  for (Index b = 0; b < n_blocks; ++b) {
    std::vector<Index> rows;
    for (Index kb : neighborhood(b, cfg, n_blocks)) {
      for (Index t = 0; t < bs; ++t) rows.push_back(kb * bs + t);
    }
    Var logits = scale(matmul_nt(slice_rows(q, b * bs, bs), gather_rows(k, rows)), s);
    Var weights;
    if (mask.causal()) {
      auto block_mask = std::make_shared<Matrix>(bs, static_cast<Index>(rows.size()));
      for (Index r = 0; r < bs; ++r) {
        const Index query_token = (b * bs + r) / per_token;
        for (std::size_t c = 0; c < rows.size(); ++c) {
          (*block_mask)(r, Index(c)) = rows[c] / per_token <= query_token ? 0.0 : kMaskedLogit;
        }
      }
      weights = softmax_rows(logits, std::move(block_mask));
    } else {
      weights = softmax_rows(logits);
    }
    outputs.push_back(matmul(weights, gather_rows(v, std::move(rows))));
  }
  return outputs.size() == 1 ? outputs.front() : concat_rows(outputs);
}

HeadAttention make_head_attention(const AttentionBackend& backend, const Mask& mask,
                                  std::optional<Var> lowrank_w, AttentionCapture* capture) {
  switch (backend.kind) {
    case BackendKind::Exact:
      return [mask, capture](Var q, Var k, Var v, Index) {
        return exact_head_attention(q, k, v, mask, capture);
      };
    case BackendKind::Kernel: {
      const double eps = backend.kernel.feature_eps;
      const bool causal = mask.causal();
      return [eps, causal](Var q, Var k, Var v, Index) {
        return kernel_attention(q, k, v, causal, eps);
      };
    }
    case BackendKind::LowRank: {
      if (mask.causal()) {
        throw std::invalid_argument("low-rank backend does not support causality");
      }
      if (!lowrank_w) {
        throw std::invalid_argument("low-rank backend requires a projection parameter");
      }
      const Var w = *lowrank_w;
      return [w](Var q, Var k, Var v, Index) { return lowrank_attention(q, k, v, w); };
    }
    case BackendKind::BlockSparse: {
      const BlockSparseConfig cfg = backend.block;
      return [cfg, mask](Var q, Var k, Var v, Index) {
        return blocksparse_attention(q, k, v, cfg, mask);
      };
    }
  }
  throw std::logic_error("unhandled backend");
}

Matrix dense_attention_weights(const AttentionBackend& backend, const Matrix& q, const Matrix& k,
                               const Mask& mask) {
  const double s = 1.0 / std::sqrt(double(q.cols()));
  switch (backend.kind) {
    case BackendKind::Kernel:
      return kernel_dense_weights(q, k, mask.causal(), backend.kernel.feature_eps);
    case BackendKind::BlockSparse: {
      const Matrix block_mask = blocksparse_additive_mask(q.rows(), backend.block, mask.causal(),
                                                          mask.rows_per_token);
      return softmax_rows(Matrix(q * k.transpose() * s), block_mask);
    }
    case BackendKind::Exact:
    case BackendKind::LowRank:
      break;
  }
  const Matrix logits = q * k.transpose() * s;
  return mask.additive ? softmax_rows(logits, *mask.additive) : softmax_rows(logits);
}

}  // namespace omninet
