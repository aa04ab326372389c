#ifndef OMNINET_AUTOGRAD_HPP
#define OMNINET_AUTOGRAD_HPP

#include "omninet/rng.hpp"
#include "omninet/tensor.hpp"

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace omninet {

/// Named trainable tensors. std::map keeps iteration lexicographic.
class ParamSet {
 public:
  using Storage = std::map<std::string, Matrix>;

  void add(const std::string& name, Matrix value);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Matrix& at(const std::string& name) const;
  Matrix& at(const std::string& name);

  std::size_t size() const { return tensors_.size(); }
  Index total_elements() const;
  /// Copy with every tensor replaced by zeros of the same shape.
  ParamSet zeros_like() const;

  Storage::const_iterator begin() const { return tensors_.begin(); }
  Storage::const_iterator end() const { return tensors_.end(); }
  Storage::iterator begin() { return tensors_.begin(); }
  Storage::iterator end() { return tensors_.end(); }

 private:
  Storage tensors_;
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

using Inputs = std::span<const Matrix* const>;
using InputGrads = std::span<Matrix* const>;

/// Recomputes a node's value from its input values.
using ForwardFn = std::function<Matrix(Inputs)>;
/// Accumulates (+=) input gradients given the node output gradient. Entries of
/// `input_grads` are null for inputs that do not require a gradient.
using BackwardFn =
    std::function<void(Inputs inputs, const Matrix& output, const Matrix& grad_output,
                       InputGrads input_grads)>;

/// Dynamic reverse-mode tape. Nodes are appended in evaluation order, which is
/// a topological order by construction.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Leaf bound to a named parameter; repeated calls with one name share a node.
  Var parameter(const std::string& name, const Matrix& value);
  /// Binds `name` from a ParamSet.
  Var parameter(const ParamSet& params, const std::string& name) {
    return parameter(name, params.at(name));
  }

  Var record(std::vector<Var> inputs, ForwardFn forward, BackwardFn backward);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  std::size_t size() const { return nodes_.size(); }

  /// Re-executes every recorded operation from the leaves and reports whether
  /// each output matches the recording bit for bit.
  bool replay_matches() const;

  /// Gradient of a 1x1 node with respect to every node; the returned vector is
  /// indexed by node id and holds empty matrices for untouched nodes.
  std::vector<Matrix> node_gradients(Var loss) const;

  const std::map<std::string, int>& parameter_ids() const { return param_ids_; }

 private:
  struct Node {
    Matrix value;
    std::vector<int> inputs;
    ForwardFn forward;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::map<std::string, int> param_ids_;
};

/// d(loss)/d(parameter) for every entry of `params`; entries with no path to
/// the loss receive exact zeros.
ParamSet backward(const Tape& tape, Var loss, const ParamSet& params);

/// Central differences (f(p + h e) - f(p - h e)) / 2h over every coordinate.
ParamSet finite_diff_grad(const std::function<double(const ParamSet&)>& f,
                          const ParamSet& params, double h = 1e-5);

// Differentiable operations. All inputs must live on the same tape.

Var add(Var a, Var b);
Var sub(Var a, Var b);
/// a (m x n) + bias (1 x n) broadcast over rows.
Var add_row(Var a, Var bias);
Var scale(Var a, double factor);
/// Adds a constant matrix of the same shape.
Var add_constant(Var a, const Matrix& c);
Var matmul(Var a, Var b);
/// a * b^T.
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var relu(Var a);
Var softmax_rows(Var a);
/// Softmax of a + mask; the mask is a fixed additive matrix.
Var softmax_rows(Var a, std::shared_ptr<const Matrix> mask);
Var layer_norm(Var x, Var gamma, Var beta, double eps = kLayerNormEps);
/// Max over consecutive row groups; gradient goes only to the winning row.
Var grouped_max(Var x, Index group, IndexMatrix* argindex = nullptr);
/// out.row(i) = x.row(indices[i]); repeated indices accumulate gradient.
Var gather_rows(Var x, std::vector<Index> indices);
Var slice_rows(Var x, Index begin, Index count);
Var slice_cols(Var x, Index begin, Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
/// Sum of all entries, as 1x1.
Var sum(Var a);
Var sum_squares(Var a);
/// Mean token cross-entropy of row-wise logits against integer targets, 1x1.
Var cross_entropy(Var logits, std::span<const int> targets);
/// Inverted dropout with a mask drawn from `rng`. rate 0 returns `a`.
Var dropout(Var a, double rate, Rng& rng);

}  // namespace omninet

#endif  // OMNINET_AUTOGRAD_HPP
