#ifndef ROBUSTCERT_AUTODIFF_HPP
#define ROBUSTCERT_AUTODIFF_HPP

// Minimal reverse-mode differentiation over dense matrices. Every op records
// its value and, when any input needs a gradient, a closure that pushes the
// output gradient back to its inputs. The tape is single-use and not shared
// between threads.

#include <functional>
#include <vector>

#include "layers.hpp"

namespace robustcert::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  using Backprop = std::function<void(Tape&, const Matrix&)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix v) { return push(std::move(v), false, {}); }
  Var parameter(Matrix v) { return push(std::move(v), true, {}); }

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Gradient accumulated so far; zero-sized when nothing reached the node.
  const Matrix& grad(Var v) const { return nodes_[v.id].grad; }

  void accumulate(std::size_t id, const Matrix& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  void accumulate(std::size_t id, Matrix&& g) {
    Node& n = nodes_[id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = std::move(g);
    else
      n.grad += g;
  }

  /// Records an op. `backprop` is dropped when no input needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, Backprop backprop) {
    bool any = false;
    for (const Var& v : inputs) any = any || nodes_[v.id].needs_grad;
    return push(std::move(value), any, any ? std::move(backprop) : Backprop{});
  }

  template <class Range>
  Var record_many(Matrix value, const Range& inputs, Backprop backprop) {
    bool any = false;
    for (const Var& v : inputs) any = any || nodes_[v.id].needs_grad;
    return push(std::move(value), any, any ? std::move(backprop) : Backprop{});
  }

  /// Back-propagates from a 1x1 output.
  void backward(Var out) {
    if (out.tape != this || value(out.id).size() != 1) throw InvalidArgument("backward needs a scalar on this tape");
    if (!nodes_[out.id].needs_grad) return;
    nodes_[out.id].grad = Matrix::Ones(1, 1);
    for (std::size_t i = out.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      // Interior gradients are released once consumed; leaves keep theirs.
      if (n.backprop && n.grad.size() != 0) {
        const Matrix g = std::move(n.grad);
        n.grad = Matrix();
        n.backprop(*this, g);
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Backprop backprop;
  };

  Var push(Matrix v, bool needs_grad, Backprop bp) {
    nodes_.push_back(Node{std::move(v), Matrix(), needs_grad, std::move(bp)});
    return Var{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape->value(id); }

// ---------------------------------------------------------------------------
// Ops

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix v = a.value() * b.value();
  return t.record(std::move(v), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a.id)) t.accumulate(a.id, g * t.value(b.id).transpose());
    if (t.needs_grad(b.id)) t.accumulate(b.id, t.value(a.id).transpose() * g);
  });
}

/// a^T b
inline Var matmul_tn(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix v = a.value().transpose() * b.value();
  return t.record(std::move(v), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a.id)) t.accumulate(a.id, t.value(b.id) * g.transpose());
    if (t.needs_grad(b.id)) t.accumulate(b.id, t.value(a.id) * g);
  });
}

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, -g);
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  return t.record(s * a.value(), {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a.id, s * g); });
}

/// s * a for a 1x1 variable s.
inline Var scale_by(Var s, Var a) {
  Tape& t = *a.tape;
  return t.record(s.scalar() * a.value(), {s, a}, [s, a](Tape& t, const Matrix& g) {
    if (t.needs_grad(a.id)) t.accumulate(a.id, t.value(s.id)(0, 0) * g);
    if (t.needs_grad(s.id)) t.accumulate(s.id, Matrix::Constant(1, 1, g.cwiseProduct(t.value(a.id)).sum()));
  });
}

/// a with the column vector v added to every column.
inline Var add_broadcast(Var a, Var v) {
  Tape& t = *a.tape;
  Matrix out = a.value();
  out.colwise() += v.value().col(0);
  return t.record(std::move(out), {a, v}, [a, v](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g);
    if (t.needs_grad(v.id)) t.accumulate(v.id, g.rowwise().sum());
  });
}

/// diag(d) a
inline Var row_scale(Var d, Var a) {
  Tape& t = *a.tape;
  Matrix out = d.value().col(0).asDiagonal() * a.value();
  return t.record(std::move(out), {d, a}, [d, a](Tape& t, const Matrix& g) {
    if (t.needs_grad(a.id)) t.accumulate(a.id, t.value(d.id).col(0).asDiagonal() * g);
    if (t.needs_grad(d.id)) t.accumulate(d.id, g.cwiseProduct(t.value(a.id)).rowwise().sum());
  });
}

/// max(a, 0) elementwise.
inline Var pos_part(Var a) {
  Tape& t = *a.tape;
  return t.record(a.value().cwiseMax(0.0), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a.id, g.cwiseProduct((t.value(a.id).array() > 0.0).cast<double>().matrix()));
  });
}

/// max(-a, 0) elementwise.
inline Var neg_part(Var a) {
  Tape& t = *a.tape;
  return t.record((-a.value()).cwiseMax(0.0), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a.id, -g.cwiseProduct((t.value(a.id).array() < 0.0).cast<double>().matrix()));
  });
}

/// Per-row dual norm: an r x 1 result.
inline Var row_norms(Var a, DualNorm q) {
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  Matrix out(av.rows(), 1);
  if (q == DualNorm::L1)
    out.col(0) = av.cwiseAbs().rowwise().sum();
  else
    out.col(0) = av.rowwise().norm();
  return t.record(std::move(out), {a}, [a, q](Tape& t, const Matrix& g) {
    const Matrix& av = t.value(a.id);
    if (q == DualNorm::L1) {
      t.accumulate(a.id, g.col(0).asDiagonal() * av.cwiseSign());
    } else {
      Vector n = av.rowwise().norm();
      Vector s = g.col(0).cwiseQuotient(n.cwiseMax(1e-300));
      for (Eigen::Index i = 0; i < n.size(); ++i)
        if (n(i) == 0.0) s(i) = 0.0;
      t.accumulate(a.id, s.asDiagonal() * av);
    }
  });
}

/// Per-column dual norm: a c x 1 result.
inline Var col_norms(Var a, DualNorm q) {
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  Matrix out(av.cols(), 1);
  if (q == DualNorm::L1)
    out.col(0) = av.cwiseAbs().colwise().sum().transpose();
  else
    out.col(0) = av.colwise().norm().transpose();
  return t.record(std::move(out), {a}, [a, q](Tape& t, const Matrix& g) {
    const Matrix& av = t.value(a.id);
    if (q == DualNorm::L1) {
      t.accumulate(a.id, av.cwiseSign() * g.col(0).asDiagonal());
    } else {
      Vector n = av.colwise().norm().transpose();
      Vector s(n.size());
      for (Eigen::Index i = 0; i < n.size(); ++i) s(i) = n(i) == 0.0 ? 0.0 : g(i, 0) / n(i);
      t.accumulate(a.id, av * s.asDiagonal());
    }
  });
}

/// Rows idx of a.
inline Var gather_rows(Var a, std::vector<Eigen::Index> idx) {
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  const auto n = static_cast<Eigen::Index>(idx.size());
  Matrix out(n, av.cols());
  for (Eigen::Index c = 0; c < av.cols(); ++c)
    for (Eigen::Index j = 0; j < n; ++j) out(j, c) = av(idx[static_cast<std::size_t>(j)], c);
  return t.record(std::move(out), {a}, [a, idx = std::move(idx)](Tape& t, const Matrix& g) {
    Matrix ga = Matrix::Zero(t.value(a.id).rows(), t.value(a.id).cols());
    for (Eigen::Index c = 0; c < g.cols(); ++c)
      for (Eigen::Index j = 0; j < g.rows(); ++j) ga(idx[static_cast<std::size_t>(j)], c) += g(j, c);
    t.accumulate(a.id, std::move(ga));
  });
}

/// n x |idx| matrix E with E(idx[j], j) = d(idx[j]) and zeros elsewhere.
inline Var scatter_diag(Var d, std::vector<Eigen::Index> idx) {
  Tape& t = *d.tape;
  const Matrix& dv = d.value();
  Matrix out = Matrix::Zero(dv.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) out(idx[j], static_cast<Eigen::Index>(j)) = dv(idx[j], 0);
  return t.record(std::move(out), {d}, [d, idx = std::move(idx)](Tape& t, const Matrix& g) {
    Matrix gd = Matrix::Zero(t.value(d.id).rows(), 1);
    for (std::size_t j = 0; j < idx.size(); ++j) gd(idx[j], 0) += g(idx[j], static_cast<Eigen::Index>(j));
    t.accumulate(d.id, gd);
  });
}

inline Var sum(Var a) {
  Tape& t = *a.tape;
  return t.record(Matrix::Constant(1, 1, a.value().sum()), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a.id, Matrix::Constant(t.value(a.id).rows(), t.value(a.id).cols(), g(0, 0)));
  });
}

/// Entry (i, j) as a 1x1 variable.
inline Var element(Var a, Eigen::Index i, Eigen::Index j = 0) {
  Tape& t = *a.tape;
  return t.record(Matrix::Constant(1, 1, a.value()(i, j)), {a}, [a, i, j](Tape& t, const Matrix& g) {
    Matrix ga = Matrix::Zero(t.value(a.id).rows(), t.value(a.id).cols());
    ga(i, j) = g(0, 0);
    t.accumulate(a.id, ga);
  });
}

// ---------------------------------------------------------------------------
// Layer ops. The weight variable holds the dense matrix or the reshaped kernel.

struct LayerVars {
  const AffineLayer* layer = nullptr;
  Var weight;
  Var bias;  // per output channel for conv layers
};

/// W X for every column of X (no bias).
inline Var layer_apply(const LayerVars& lv, Var x) {
  Tape& t = *x.tape;
  const AffineLayer* layer = lv.layer;
  Matrix out = layer->apply_with(lv.weight.value(), x.value());
  const Var w = lv.weight;
  return t.record(std::move(out), {w, x}, [layer, w, x](Tape& t, const Matrix& g) {
    if (t.needs_grad(x.id)) t.accumulate(x.id, layer->adjoint_with(t.value(w.id), g));
    if (t.needs_grad(w.id)) t.accumulate(w.id, layer->weight_grad(t.value(x.id), g));
  });
}

/// W^T V for every column of V.
inline Var layer_adjoint(const LayerVars& lv, Var v) {
  Tape& t = *v.tape;
  const AffineLayer* layer = lv.layer;
  Matrix out = layer->adjoint_with(lv.weight.value(), v.value());
  const Var w = lv.weight;
  return t.record(std::move(out), {w, v}, [layer, w, v](Tape& t, const Matrix& g) {
    if (t.needs_grad(v.id)) t.accumulate(v.id, layer->apply_with(t.value(w.id), g));
    if (t.needs_grad(w.id)) t.accumulate(w.id, layer->weight_grad(g, t.value(v.id)));
  });
}

/// W^T as an explicit input_dim x output_dim matrix.
inline Var layer_transpose(const LayerVars& lv) {
  Tape& t = *lv.weight.tape;
  const AffineLayer* layer = lv.layer;
  const Var w = lv.weight;
  if (!layer->is_conv())
    return t.record(w.value().transpose(), {w}, [w](Tape& t, const Matrix& g) { t.accumulate(w.id, g.transpose()); });
  return t.record(detail::conv_transpose_matrix(*layer->conv(), w.value()), {w}, [layer, w](Tape& t, const Matrix& g) {
    t.accumulate(w.id, detail::conv_transpose_matrix_grad(*layer->conv(), g, t.value(w.id)));
  });
}

/// diag(d) W^T as an explicit matrix; for conv layers the backward pass only
/// visits the operator's nonzero entries.
inline Var layer_transpose_scaled(const LayerVars& lv, Var d) {
  const AffineLayer* layer = lv.layer;
  if (!layer->is_conv()) return row_scale(d, layer_transpose(lv));
  Tape& t = *d.tape;
  const Var w = lv.weight;
  const Vector dv = d.value().col(0);
  return t.record(detail::conv_transpose_matrix(*layer->conv(), w.value(), &dv), {w, d},
                  [layer, w, d](Tape& t, const Matrix& g) {
                    const Vector dv = t.value(d.id).col(0);
                    Vector gd;
                    Matrix gk = detail::conv_transpose_matrix_grad(*layer->conv(), g, t.value(w.id), &dv,
                                                                   t.needs_grad(d.id) ? &gd : nullptr);
                    if (t.needs_grad(w.id)) t.accumulate(w.id, std::move(gk));
                    if (t.needs_grad(d.id)) t.accumulate(d.id, Matrix(gd));
                  });
}

/// W_p^T diag(d) W_t^T for consecutive layers p (below) and t (above).
inline Var chained_transpose(const LayerVars& p, const LayerVars& t, Var d) {
  // Dense upper layers are full rows; GEMM through the adjoint wins there.
  if (!t.layer->is_conv()) return layer_adjoint(p, row_scale(d, layer_transpose(t)));
  Tape& tape = *d.tape;
  const AffineLayer* P = p.layer;
  const AffineLayer* T = t.layer;
  const Var wp = p.weight, wt = t.weight;
  return tape.record(detail::chained_transpose(*P, wp.value(), *T, wt.value(), d.value().col(0)), {wp, wt, d},
                     [P, T, wp, wt, d](Tape& tape, const Matrix& g) {
                       detail::ChainedGrad cg = detail::chained_transpose_grad(
                           *P, tape.value(wp.id), *T, tape.value(wt.id), tape.value(d.id).col(0), g);
                       if (tape.needs_grad(wp.id)) tape.accumulate(wp.id, std::move(cg.wp));
                       if (tape.needs_grad(wt.id)) tape.accumulate(wt.id, std::move(cg.wt));
                       if (tape.needs_grad(d.id)) tape.accumulate(d.id, Matrix(cg.d));
                     });
}

/// Rows outside idx set to zero.
inline Var mask_rows(Var a, const std::vector<Eigen::Index>& idx) {
  Tape& t = *a.tape;
  Vector keep = Vector::Zero(a.rows());
  for (Eigen::Index i : idx) keep(i) = 1.0;
  return t.record(keep.asDiagonal() * a.value(), {a},
                  [a, keep](Tape& t, const Matrix& g) { t.accumulate(a.id, Matrix(keep.asDiagonal() * g)); });
}

/// Bias expanded to one entry per output unit (n x 1).
inline Var layer_bias(const LayerVars& lv) {
  Tape& t = *lv.bias.tape;
  const AffineLayer* layer = lv.layer;
  const Var b = lv.bias;
  Matrix out = layer->expand_bias(b.value().col(0));
  return t.record(std::move(out), {b},
                  [layer, b](Tape& t, const Matrix& g) { t.accumulate(b.id, layer->reduce_bias(g.col(0))); });
}

// ---------------------------------------------------------------------------
// Losses on a logit column v (n x 1). Both are invariant to v -> v - a*1.

inline Var cross_entropy(Var v, Eigen::Index label) {
  Tape& t = *v.tape;
  const Vector x = v.value().col(0);
  const double m = x.maxCoeff();
  const double lse = m + std::log((x.array() - m).exp().sum());
  return t.record(Matrix::Constant(1, 1, lse - x(label)), {v}, [v, label](Tape& t, const Matrix& g) {
    const Vector x = t.value(v.id).col(0);
    const double m = x.maxCoeff();
    Vector p = (x.array() - m).exp().matrix();
    p /= p.sum();
    p(label) -= 1.0;
    t.accumulate(v.id, g(0, 0) * p);
  });
}

/// sum_{i != y} max(0, margin + v_i - v_y)
inline Var multiclass_hinge(Var v, Eigen::Index label, double margin = 1.0) {
  Tape& t = *v.tape;
  const Vector x = v.value().col(0);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (i != label) loss += std::max(0.0, margin + x(i) - x(label));
  return t.record(Matrix::Constant(1, 1, loss), {v}, [v, label, margin](Tape& t, const Matrix& g) {
    const Vector x = t.value(v.id).col(0);
    Vector gv = Vector::Zero(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i)
      if (i != label && margin + x(i) - x(label) > 0.0) {
        gv(i) += g(0, 0);
        gv(label) -= g(0, 0);
      }
    t.accumulate(v.id, gv);
  });
}

}  // namespace robustcert::ad

#endif  // ROBUSTCERT_AUTODIFF_HPP
