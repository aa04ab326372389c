#include "omninet/autograd.hpp"

#include <cmath>
#include <stdexcept>

namespace omninet {

// ---------------------------------------------------------------- ParamSet

void ParamSet::add(const std::string& name, Matrix value) {
  if (!tensors_.emplace(name, std::move(value)).second) {
    throw std::invalid_argument("ParamSet: duplicate parameter '" + name + "'");
  }
}

const Matrix& ParamSet::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw std::out_of_range("ParamSet: no parameter '" + name + "'");
  }
  return it->second;
}

Matrix& ParamSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw std::out_of_range("ParamSet: no parameter '" + name + "'");
  }
  return it->second;
}

Index ParamSet::total_elements() const {
  Index total = 0;
  for (const auto& [name, t] : tensors_) {
    total += t.size();
  }
  return total;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& [name, t] : tensors_) {
    out.add(name, Matrix::Zero(t.rows(), t.cols()));
  }
  return out;
}

// ---------------------------------------------------------------- Tape

const Matrix& Var::value() const {
  return tape->value(id);
}

Var Tape::constant(Matrix value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(const std::string& name, const Matrix& value) {
  if (auto it = param_ids_.find(name); it != param_ids_.end()) {
    return {this, it->second};
  }
  Node node;
  node.value = value;
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_ids_.emplace(name, id);
  return {this, id};
}

Var Tape::record(std::vector<Var> inputs, ForwardFn forward, BackwardFn backward) {
  Node node;
  std::vector<const Matrix*> in_values;
  in_values.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.tape != this) {
      throw std::invalid_argument("Tape::record: input belongs to another tape");
    }
    node.inputs.push_back(v.id);
    node.requires_grad = node.requires_grad || nodes_[static_cast<std::size_t>(v.id)].requires_grad;
    in_values.push_back(&nodes_[static_cast<std::size_t>(v.id)].value);
  }
  node.value = forward(in_values);
  node.forward = std::move(forward);
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

bool Tape::replay_matches() const {
  std::vector<Matrix> replayed(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& node = nodes_[i];
    if (!node.forward) {
      replayed[i] = node.value;
      continue;
    }
    std::vector<const Matrix*> in_values;
    for (int id : node.inputs) {
      in_values.push_back(&replayed[static_cast<std::size_t>(id)]);
    }
    replayed[i] = node.forward(in_values);
    const Matrix& rec = node.value;
    if (replayed[i].rows() != rec.rows() || replayed[i].cols() != rec.cols()) {
      return false;
    }
    for (Index k = 0; k < rec.size(); ++k) {
      if (replayed[i].data()[k] != rec.data()[k]) {
        return false;
      }
    }
  }
  return true;
}

std::vector<Matrix> Tape::node_gradients(Var loss) const {
  if (loss.tape != this) {
    throw std::invalid_argument("backward: loss belongs to another tape");
  }
  const Matrix& loss_value = value(loss.id);
  if (loss_value.rows() != 1 || loss_value.cols() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_string(loss_value));
  }
  std::vector<Matrix> grads(nodes_.size());
  grads[static_cast<std::size_t>(loss.id)] = Matrix::Ones(1, 1);

  std::vector<const Matrix*> in_values;
  std::vector<Matrix*> in_grads;
  for (int id = loss.id; id >= 0; --id) {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    const Matrix& g = grads[static_cast<std::size_t>(id)];
    if (g.size() == 0 || !node.backward || !node.requires_grad) {
      continue;
    }
    in_values.clear();
    in_grads.clear();
    for (int in : node.inputs) {
      const Node& src = nodes_[static_cast<std::size_t>(in)];
      in_values.push_back(&src.value);
      if (src.requires_grad) {
        Matrix& slot = grads[static_cast<std::size_t>(in)];
        if (slot.size() == 0) {
          slot = Matrix::Zero(src.value.rows(), src.value.cols());
        }
        in_grads.push_back(&slot);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    node.backward(in_values, node.value, g, in_grads);
  }
  return grads;
}

ParamSet backward(const Tape& tape, Var loss, const ParamSet& params) {
  const std::vector<Matrix> grads = tape.node_gradients(loss);
  ParamSet out = params.zeros_like();
  for (const auto& [name, id] : tape.parameter_ids()) {
    if (!out.contains(name)) {
      continue;
    }
    const Matrix& g = grads[static_cast<std::size_t>(id)];
    if (g.size() != 0) {
      out.at(name) = g;
    }
  }
  return out;
}

ParamSet finite_diff_grad(const std::function<double(const ParamSet&)>& f,
                          const ParamSet& params, double h) {
  if (!(h > 0)) {
    throw std::invalid_argument("finite_diff_grad: step must be positive");
  }
  ParamSet work = params;
  ParamSet grads = params.zeros_like();
  for (auto& [name, tensor] : work) {
    Matrix& g = grads.at(name);
    for (Index k = 0; k < tensor.size(); ++k) {
      const double saved = tensor.data()[k];
      tensor.data()[k] = saved + h;
      const double up = f(work);
      tensor.data()[k] = saved - h;
      const double down = f(work);
      tensor.data()[k] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("finite_diff_grad: non-finite objective at " + name + "[" +
                           std::to_string(k) + "]");
      }
      g.data()[k] = (up - down) / (2.0 * h);
    }
  }
  return grads;
}

// ---------------------------------------------------------------- operations

namespace {

Tape& tape_of(Var a) {
  if (a.tape == nullptr) {
    throw std::invalid_argument("operation on an unbound Var");
  }
  return *a.tape;
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  return tape_of(a).record(
      {a, b}, [](Inputs in) -> Matrix { return *in[0] + *in[1]; },
      [](Inputs, const Matrix&, const Matrix& g, InputGrads dg) {
        if (dg[0]) *dg[0] += g;
        if (dg[1]) *dg[1] += g;
      });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  return tape_of(a).record(
      {a, b}, [](Inputs in) -> Matrix { return *in[0] - *in[1]; },
      [](Inputs, const Matrix&, const Matrix& g, InputGrads dg) {
        if (dg[0]) *dg[0] += g;
        if (dg[1]) *dg[1] -= g;
      });
}

Var add_row(Var a, Var bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw ShapeError("add_row: bias " + shape_string(bias.value()) + " for input " +
                     shape_string(a.value()));
  }
  return tape_of(a).record(
      {a, bias},
      [](Inputs in) -> Matrix { return in[0]->rowwise() + in[1]->row(0); },
      [](Inputs, const Matrix&, const Matrix& g, InputGrads dg) {
        if (dg[0]) *dg[0] += g;
        if (dg[1]) *dg[1] += g.colwise().sum();
      });
}

Var scale(Var a, double factor) {
  return tape_of(a).record(
      {a}, [factor](Inputs in) -> Matrix { return *in[0] * factor; },
      [factor](Inputs, const Matrix&, const Matrix& g, InputGrads dg) {
        if (dg[0]) *dg[0] += g * factor;
      });
}

Var add_constant(Var a, const Matrix& c) {
  require_same_shape(a.value(), c, "add_constant");
  auto held = std::make_shared<const Matrix>(c);
  return tape_of(a).record(
      {a}, [held](Inputs in) -> Matrix { return *in[0] + *held; },
      [](Inputs, const Matrix&, const Matrix& g, InputGrads dg) {
        if (dg[0]) *dg[0] += g;
      });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner extents differ, " + shape_string(a.value()) + " * " +
                     shape_string(b.value()));
  }
  return tape_of(a).record(
      {a, b}, [](Inputs in) -> Matrix { return omninet::matmul(*in[0], *in[1]); },
      [](Inputs in, const Matrix&, const Matrix& g, InputGrads dg) {
        if (dg[0]) dg[0]->noalias() += g * in[1]->transpose();
        if (dg[1]) dg[1]->noalias() += in[0]->transpose() * g;
      });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: column extents differ, " + shape_string(a.value()) + " vs " +
                     shape_string(b.value()));
  }
  return tape_of(a).record(
      {a, b},
      [](Inputs in) -> Matrix { return omninet::matmul(*in[0], in[1]->transpose()); },
      [](Inputs in, const Matrix&, const Matrix& g, InputGrads dg) {
        if (dg[0]) dg[0]->noalias() += g * *in[1];
        if (dg[1]) dg[1]->noalias() += g.transpose() * *in[0];
      });
}

Var transpose(Var a) {
  return tape_of(a).record(
      {a}, [](Inputs in) -> Matrix { return in[0]->transpose(); },
      [](Inputs, const Matrix&, const Matrix& g, InputGrads dg) {
        if (dg[0]) *dg[0] += g.transpose();
      });
}

Var relu(Var a) {
  return tape_of(a).record(
      {a}, [](Inputs in) -> Matrix { return in[0]->cwiseMax(0.0); },
      [](Inputs in, const Matrix&, const Matrix& g, InputGrads dg) {
        if (dg[0]) {
          *dg[0] += (in[0]->array() > 0.0).select(g, 0.0);
        }
      });
}

namespace {

void softmax_backward(const Matrix& y, const Matrix& g, Matrix& dx) {
  const Eigen::VectorXd dots = (g.array() * y.array()).rowwise().sum();
  dx.array() += y.array() * (g.colwise() - dots).array();
}

}  // namespace

Var softmax_rows(Var a) {
  return tape_of(a).record(
      {a}, [](Inputs in) -> Matrix { return omninet::softmax_rows(*in[0]); },
      [](Inputs, const Matrix& y, const Matrix& g, InputGrads dg) {
        if (dg[0]) softmax_backward(y, g, *dg[0]);
      });
}

Var softmax_rows(Var a, std::shared_ptr<const Matrix> mask) {
  require_same_shape(a.value(), *mask, "softmax_rows mask");
  return tape_of(a).record(
      {a}, [mask](Inputs in) -> Matrix { return omninet::softmax_rows(*in[0], *mask); },
      [](Inputs, const Matrix& y, const Matrix& g, InputGrads dg) {
        if (dg[0]) softmax_backward(y, g, *dg[0]);
      });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  return tape_of(x).record(
      {x, gamma, beta},
      [eps](Inputs in) -> Matrix { return omninet::layer_norm(*in[0], *in[1], *in[2], eps); },
      [eps](Inputs in, const Matrix&, const Matrix& g, InputGrads dg) {
        const Matrix& xv = *in[0];
        const Matrix& gam = *in[1];
        const Index d = xv.cols();
        for (Index r = 0; r < xv.rows(); ++r) {
          const double mean = xv.row(r).mean();
          const Eigen::RowVectorXd centered = xv.row(r).array() - mean;
          const double inv_std = 1.0 / std::sqrt(centered.squaredNorm() / double(d) + eps);
          const Eigen::RowVectorXd xhat = centered * inv_std;
          if (dg[1]) dg[1]->row(0) += g.row(r).cwiseProduct(xhat);
          if (dg[2]) dg[2]->row(0) += g.row(r);
          if (dg[0]) {
            const Eigen::RowVectorXd dxhat = g.row(r).cwiseProduct(gam.row(0));
            const double mean_dxhat = dxhat.mean();
            const double mean_dxhat_xhat = dxhat.cwiseProduct(xhat).mean();
            dg[0]->row(r).array() +=
                inv_std * (dxhat.array() - mean_dxhat - xhat.array() * mean_dxhat_xhat);
          }
        }
      });
}

Var grouped_max(Var x, Index group, IndexMatrix* argindex) {
  auto winners = std::make_shared<IndexMatrix>();
  Var out = tape_of(x).record(
      {x},
      [group, winners](Inputs in) -> Matrix {
        auto pooled = omninet::grouped_max(*in[0], group);
        *winners = std::move(pooled.argindex);
        return std::move(pooled.values);
      },
      [group, winners](Inputs, const Matrix& y, const Matrix& g, InputGrads dg) {
        if (!dg[0]) return;
        for (Index t = 0; t < y.rows(); ++t) {
          for (Index c = 0; c < y.cols(); ++c) {
            (*dg[0])(t * group + (*winners)(t, c), c) += g(t, c);
          }
        }
      });
  if (argindex != nullptr) {
    *argindex = *winners;
  }
  return out;
}

Var gather_rows(Var x, std::vector<Index> indices) {
  for (Index i : indices) {
    if (i < 0 || i >= x.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range for " +
                       shape_string(x.value()));
    }
  }
  auto idx = std::make_shared<const std::vector<Index>>(std::move(indices));
  return tape_of(x).record(
      {x},
      [idx](Inputs in) -> Matrix {
        Matrix out(static_cast<Index>(idx->size()), in[0]->cols());
        for (std::size_t i = 0; i < idx->size(); ++i) {
          out.row(static_cast<Index>(i)) = in[0]->row((*idx)[i]);
        }
        return out;
      },
      [idx](Inputs, const Matrix&, const Matrix& g, InputGrads dg) {
        if (!dg[0]) return;
        for (std::size_t i = 0; i < idx->size(); ++i) {
          dg[0]->row((*idx)[i]) += g.row(static_cast<Index>(i));
        }
      });
}

Var slice_rows(Var x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                     ") outside " + shape_string(x.value()));
  }
  return tape_of(x).record(
      {x},
      [begin, count](Inputs in) -> Matrix { return in[0]->middleRows(begin, count); },
      [begin, count](Inputs, const Matrix&, const Matrix& g, InputGrads dg) {
        if (dg[0]) dg[0]->middleRows(begin, count) += g;
      });
}

Var slice_cols(Var x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                     ") outside " + shape_string(x.value()));
  }
  return tape_of(x).record(
      {x},
      [begin, count](Inputs in) -> Matrix { return in[0]->middleCols(begin, count); },
      [begin, count](Inputs, const Matrix&, const Matrix& g, InputGrads dg) {
        if (dg[0]) dg[0]->middleCols(begin, count) += g;
      });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) {
    throw std::invalid_argument("concat_rows: no inputs");
  }
  for (const Var& p : parts) {
    if (p.cols() != parts.front().cols()) {
      throw ShapeError("concat_rows: column extents differ");
    }
  }
  return tape_of(parts.front())
      .record(
          parts,
          [](Inputs in) -> Matrix {
            Index rows = 0;
            for (const Matrix* m : in) rows += m->rows();
            Matrix out(rows, in[0]->cols());
            Index at = 0;
            for (const Matrix* m : in) {
              out.middleRows(at, m->rows()) = *m;
              at += m->rows();
            }
            return out;
          },
          [](Inputs in, const Matrix&, const Matrix& g, InputGrads dg) {
            Index at = 0;
            for (std::size_t i = 0; i < in.size(); ++i) {
              if (dg[i]) *dg[i] += g.middleRows(at, in[i]->rows());
              at += in[i]->rows();
            }
          });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) {
    throw std::invalid_argument("concat_cols: no inputs");
  }
  for (const Var& p : parts) {
    if (p.rows() != parts.front().rows()) {
      throw ShapeError("concat_cols: row extents differ");
    }
  }
  return tape_of(parts.front())
      .record(
          parts,
          [](Inputs in) -> Matrix {
            Index cols = 0;
            for (const Matrix* m : in) cols += m->cols();
            Matrix out(in[0]->rows(), cols);
            Index at = 0;
            for (const Matrix* m : in) {
              out.middleCols(at, m->cols()) = *m;
              at += m->cols();
            }
            return out;
          },
          [](Inputs in, const Matrix&, const Matrix& g, InputGrads dg) {
            Index at = 0;
            for (std::size_t i = 0; i < in.size(); ++i) {
              if (dg[i]) *dg[i] += g.middleCols(at, in[i]->cols());
              at += in[i]->cols();
            }
          });
}

Var sum(Var a) {
  return tape_of(a).record(
      {a}, [](Inputs in) -> Matrix { return Matrix::Constant(1, 1, in[0]->sum()); },
      [](Inputs, const Matrix&, const Matrix& g, InputGrads dg) {
        if (dg[0]) dg[0]->array() += g(0, 0);
      });
}

Var sum_squares(Var a) {
  return tape_of(a).record(
      {a}, [](Inputs in) -> Matrix { return Matrix::Constant(1, 1, in[0]->squaredNorm()); },
      [](Inputs in, const Matrix&, const Matrix& g, InputGrads dg) {
        if (dg[0]) *dg[0] += 2.0 * g(0, 0) * *in[0];
      });
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  if (static_cast<Index>(targets.size()) != logits.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     shape_string(logits.value()));
  }
  for (int t : targets) {
    if (t < 0 || t >= logits.cols()) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) +
                              " outside vocabulary of " + std::to_string(logits.cols()));
    }
  }
  auto tgt = std::make_shared<const std::vector<int>>(targets.begin(), targets.end());
  return tape_of(logits).record(
      {logits},
      [tgt](Inputs in) -> Matrix {
        const Matrix& z = *in[0];
        double total = 0.0;
        for (Index r = 0; r < z.rows(); ++r) {
          const double m = z.row(r).maxCoeff();
          const double lse = m + std::log((z.row(r).array() - m).exp().sum());
          total += lse - z(r, (*tgt)[static_cast<std::size_t>(r)]);
        }
        return Matrix::Constant(1, 1, total / double(z.rows()));
      },
      [tgt](Inputs in, const Matrix&, const Matrix& g, InputGrads dg) {
        if (!dg[0]) return;
        Matrix p = omninet::softmax_rows(*in[0]);
        for (Index r = 0; r < p.rows(); ++r) {
          p(r, (*tgt)[static_cast<std::size_t>(r)]) -= 1.0;
        }
        *dg[0] += p * (g(0, 0) / double(p.rows()));
      });
}

Var dropout(Var a, double rate, Rng& rng) {
  if (rate <= 0.0) {
    return a;
  }
  if (rate >= 1.0) {
    throw std::invalid_argument("dropout: rate must be below 1");
  }
  auto mask = std::make_shared<Matrix>(a.rows(), a.cols());
  for (Index k = 0; k < mask->size(); ++k) {
    mask->data()[k] = rng.uniform() < rate ? 0.0 : 1.0 / (1.0 - rate);
  }
  return tape_of(a).record(
      {a}, [mask](Inputs in) -> Matrix { return in[0]->cwiseProduct(*mask); },
      [mask](Inputs, const Matrix&, const Matrix& g, InputGrads dg) {
        if (dg[0]) *dg[0] += g.cwiseProduct(*mask);
      });
}

}  // namespace omninet
