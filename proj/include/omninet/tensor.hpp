#ifndef OMNINET_TENSOR_HPP
#define OMNINET_TENSOR_HPP

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace omninet {

/// Dense row-major tensor. Every quantity in the library is rank 1 or 2;
/// vectors are stored as 1 x n rows.
template <typename Scalar>
using Tensor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = Tensor<double>;
using Index = Eigen::Index;
using IndexMatrix = Eigen::Matrix<Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Additive mask entry standing in for -inf.
inline constexpr double kMaskedLogit = -1e30;

/// Default layer-norm epsilon.
inline constexpr double kLayerNormEps = 1e-6;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_string(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <typename Derived>
std::string shape_string(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

template <typename Derived>
std::vector<Index> shape(const Eigen::MatrixBase<Derived>& m) {
  return {m.rows(), m.cols()};
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const std::string& what) {
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) {
      if (!std::isfinite(static_cast<double>(m(r, c)))) {
        throw NumericError(what + ": non-finite value at (" + std::to_string(r) + ", " +
                           std::to_string(c) + ")");
      }
    }
  }
}

template <typename DA, typename DB>
void require_same_shape(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b,
                        const std::string& what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(what + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
}

/// Matrix product with 64-bit accumulation.
template <typename DA, typename DB>
Tensor<typename DA::Scalar> matmul(const Eigen::MatrixBase<DA>& a,
                                   const Eigen::MatrixBase<DB>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner extents differ, " + shape_string(a) + " * " +
                     shape_string(b));
  }
  Tensor<typename DA::Scalar> out = a * b;
  require_finite(out, "matmul");
  return out;
}

/// Row-wise softmax with max subtraction.
template <typename Derived>
Tensor<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  Tensor<Scalar> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar row_max = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - row_max).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  require_finite(out, "softmax_rows");
  return out;
}

/// Row-wise softmax of x + mask, where mask entries are 0 or kMaskedLogit.
/// A row with every entry masked violates the contract.
template <typename DX, typename DM>
Tensor<typename DX::Scalar> softmax_rows(const Eigen::MatrixBase<DX>& x,
                                         const Eigen::MatrixBase<DM>& mask) {
  using Scalar = typename DX::Scalar;
  require_same_shape(x, mask, "softmax_rows mask");
  Tensor<Scalar> shifted = x + mask;
  for (Index r = 0; r < x.rows(); ++r) {
    bool any_open = false;
    for (Index c = 0; c < x.cols() && !any_open; ++c) {
      any_open = mask(r, c) > Scalar(kMaskedLogit / 2);
    }
    if (!any_open) {
      throw std::invalid_argument("softmax_rows: row " + std::to_string(r) +
                                  " is fully masked");
    }
  }
  Tensor<Scalar> out = softmax_rows(shifted);
  // Vectorized exp clamps its argument, leaving denormals where the sentinel
  // should give exact zeros.
  for (Index r = 0; r < x.rows(); ++r) {
    for (Index c = 0; c < x.cols(); ++c) {
      if (!(mask(r, c) > Scalar(kMaskedLogit / 2))) out(r, c) = Scalar(0);
    }
  }
  return out;
}

/// Normalizes each row to zero mean and unit variance, then applies gamma/beta
/// (both 1 x d).
template <typename DX, typename DG, typename DB>
Tensor<typename DX::Scalar> layer_norm(const Eigen::MatrixBase<DX>& x,
                                       const Eigen::MatrixBase<DG>& gamma,
                                       const Eigen::MatrixBase<DB>& beta,
                                       double eps = kLayerNormEps) {
  using Scalar = typename DX::Scalar;
  const Index d = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(d) + " entries");
  }
  if (!(eps > 0)) {
    throw std::invalid_argument("layer_norm: eps must be positive");
  }
  Tensor<Scalar> out(x.rows(), d);
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).eval();
    const Scalar var = centered.square().mean();
    const Scalar inv_std = Scalar(1) / std::sqrt(var + Scalar(eps));
    for (Index c = 0; c < d; ++c) {
      out(r, c) = centered(c) * inv_std * gamma(c) + beta(c);
    }
  }
  require_finite(out, "layer_norm");
  return out;
}

template <typename Scalar>
struct GroupedMax {
  Tensor<Scalar> values;
  /// Winning row within each group, 0..g-1.
  IndexMatrix argindex;
};

/// Element-wise max over consecutive groups of `group` rows. Ties go to the
/// earliest row of the group.
template <typename Derived>
GroupedMax<typename Derived::Scalar> grouped_max(const Eigen::MatrixBase<Derived>& x,
                                                 Index group) {
  using Scalar = typename Derived::Scalar;
  if (group < 1 || x.rows() % group != 0) {
    throw ShapeError("grouped_max: " + std::to_string(x.rows()) +
                     " rows not divisible by group " + std::to_string(group));
  }
  const Index n_groups = x.rows() / group;
  GroupedMax<Scalar> out{Tensor<Scalar>(n_groups, x.cols()), IndexMatrix(n_groups, x.cols())};
  for (Index t = 0; t < n_groups; ++t) {
    for (Index c = 0; c < x.cols(); ++c) {
      Index best = 0;
      Scalar best_val = x(t * group, c);
      for (Index l = 1; l < group; ++l) {
        if (x(t * group + l, c) > best_val) {
          best_val = x(t * group + l, c);
          best = l;
        }
      }
      out.values(t, c) = best_val;
      out.argindex(t, c) = best;
    }
  }
  return out;
}

}  // namespace omninet

#endif  // OMNINET_TENSOR_HPP
