#ifndef ROBUSTCERT_DUAL_HPP
#define ROBUSTCERT_DUAL_HPP

#include <deque>
#include <optional>
#include <vector>

#include "bounds.hpp"

namespace robustcert {

/// Variables of the dual network for an objective matrix with m columns.
/// `nu[a]` lives on activation layer a (a = 1..depth; nu[depth] = -C, nu[0]
/// is unused) and `nu_hat[t] = W_t^T nu[t+1]` on activation layer t, so
/// `nu_hat[0]` is the input-space variable.
struct DualVars {
  std::vector<Matrix> nu;
  std::vector<Matrix> nu_hat;
};

/// Optional per-hidden-layer alpha values in [0, 1]; only entries at spanning
/// activations are read.
using AlphaOverride = std::vector<Vector>;

namespace detail {

inline void check_bounds_match(const Network& net, const PreActBounds& b) {
  if (b.depth() != net.depth() || b.partition.size() + 1 != net.depth())
    throw DimensionError("bounds were computed for a network of different depth");
  for (std::size_t t = 0; t < net.depth(); ++t)
    if (b.lower[t].size() != net.layer(t).output_dim() || b.upper[t].size() != net.layer(t).output_dim())
      throw DimensionError("bounds width does not match layer output", static_cast<int>(t));
}

}  // namespace detail

/// The backward pass of the dual network: nu_k = -c, nu_hat_i = W_i^T nu_{i+1},
/// and the ReLU rule per index set. With the default alpha = u/(u-l) the pass
/// through a spanning unit is the linear map nu = u/(u-l) * nu_hat.
inline DualVars dual_backward(const Network& net, const PreActBounds& bounds, const Matrix& C,
                              const std::optional<AlphaOverride>& alpha = std::nullopt) {
  detail::check_bounds_match(net, bounds);
  const std::size_t L = net.depth();
  if (C.rows() != net.output_dim())
    throw DimensionError("objective rows " + std::to_string(C.rows()) + " != output_dim", static_cast<int>(L - 1));
  if (alpha) {
    if (alpha->size() != L - 1) throw DimensionError("alpha override needs one vector per hidden layer");
    for (std::size_t a = 0; a + 1 < L; ++a) {
      if ((*alpha)[a].size() != net.layer(a).output_dim())
        throw DimensionError("alpha override width mismatch", static_cast<int>(a));
      if (((*alpha)[a].array() < 0.0).any() || ((*alpha)[a].array() > 1.0).any())
        throw InvalidArgument("alpha values must lie in [0, 1]");
    }
  }

  DualVars dv;
  dv.nu.resize(L + 1);
  dv.nu_hat.resize(L);
  dv.nu[L] = -C;
  for (std::size_t t = L; t-- > 0;) {
    dv.nu_hat[t] = net.layer(t).adjoint(dv.nu[t + 1]);
    if (t == 0) break;
    const LayerPartition& p = bounds.partition[t - 1];
    const Vector& lo = bounds.lower[t - 1];
    const Vector& hi = bounds.upper[t - 1];
    Matrix nu = dv.nu_hat[t];
    for (Eigen::Index j : p.neg) nu.row(j).setZero();
    for (Eigen::Index j : p.span) {
      const double d = hi(j) / (hi(j) - lo(j));
      if (!alpha) {
        nu.row(j) *= d;
        continue;
      }
      const double a = (*alpha)[t - 1](j);
      for (Eigen::Index c = 0; c < nu.cols(); ++c) {
        const double v = nu(j, c);
        nu(j, c) = v >= 0.0 ? d * v : a * v;
      }
    }
    dv.nu[t] = std::move(nu);
  }
  return dv;
}

/// J = -sum_i nu_{i+1}^T b_i - x^T nu_hat_1 - eps ||nu_hat_1||_q + sum_{i, j in I_i} l_ij [nu_ij]_+,
/// one entry per objective column.
inline Vector dual_objective(const Network& net, const Vector& x, double eps, const DualVars& dv,
                             const PreActBounds& bounds, DualNorm q) {
  check_eps(eps);
  detail::check_bounds_match(net, bounds);
  const std::size_t L = net.depth();
  if (dv.nu.size() != L + 1 || dv.nu_hat.size() != L) throw DimensionError("dual variables do not match network");
  if (x.size() != net.input_dim()) throw DimensionError("input length != input_dim", 0);
  const Eigen::Index m = dv.nu[L].cols();
  Vector J = Vector::Zero(m);
  for (std::size_t t = 0; t < L; ++t) J -= dv.nu[t + 1].transpose() * net.layer(t).full_bias();
  J -= dv.nu_hat[0].transpose() * x;
  for (Eigen::Index c = 0; c < m; ++c) J(c) -= eps * dual_norm(dv.nu_hat[0].col(c), q);
  for (std::size_t a = 1; a < L; ++a) {
    const LayerPartition& p = bounds.partition[a - 1];
    const Vector& lo = bounds.lower[a - 1];
    for (Eigen::Index j : p.span)
      for (Eigen::Index c = 0; c < m; ++c) J(c) += lo(j) * std::max(dv.nu[a](j, c), 0.0);
  }
  return J;
}

/// Certified lower bound on min c^T f(x + delta) over the ball, per column of C.
inline Vector dual_bound(const Network& net, const Vector& x, double eps, const Matrix& C,
                         DualNorm q = DualNorm::L1) {
  const PreActBounds b = compute_bounds(net, x, eps, q);
  return dual_objective(net, x, eps, dual_backward(net, b, C), b, q);
}

/// The matrix e_y 1^T - I: column i is e_y - e_i.
inline Matrix margin_objective(Eigen::Index classes, Eigen::Index y) {
  Matrix C = -Matrix::Identity(classes, classes);
  C.row(y).array() += 1.0;
  return C;
}

namespace ad {

/// The same bounds and objective as propagate_bounds/objective, evaluated in
/// the dual network's own order: the bound on layer t starts from W_t^T (one
/// column per unit of layer t) and walks back to the input, so each pass
/// costs width_t columns instead of one column per earlier spanning unit.
/// Holds references to `nv`; keep both alive until after backward().
class DualNetwork {
 public:
  DualNetwork(const NetworkVars& nv, const Vector& x, Var eps, DualNorm q, bool final_layer_bounds = false)
      : nv_(nv), eps_(eps), q_(q) {
    const auto& L = nv.layers;
    if (L.empty()) throw InvalidArgument("network has no layers");
    if (x.size() != L.front().layer->input_dim())
      throw DimensionError("input length " + std::to_string(x.size()) + " != input_dim", 0);
    Tape& t = *eps.tape;
    xv_ = t.constant(Matrix(x));
    for (const auto& lv : L) bias_.push_back(layer_bias(lv));
    const std::size_t last = final_layer_bounds ? L.size() : L.size() - 1;
    for (std::size_t layer = 0; layer < last; ++layer) {
      const Terms tm = basis_pass(layer);
      const Var norm = scale_by(eps_, tm.norm);
      lower_.push_back(tm.span_lo ? add(sub(tm.psi, norm), *tm.span_lo) : sub(tm.psi, norm));
      upper_.push_back(tm.span_hi ? sub(add(tm.psi, norm), *tm.span_hi) : add(tm.psi, norm));
      if (layer + 1 == L.size()) break;
      Hidden& h = hidden_.emplace_back();
      h.part = partition_layer(lower_.back().value().col(0), upper_.back().value().col(0));
      h.slope = relaxation_slope(lower_.back(), upper_.back(), h.part);
      if (!h.part.span.empty()) {
        h.span_weight = row_scale(gather_rows(h.slope, h.part.span), gather_rows(lower_.back(), h.part.span));
        h.span_full = mask_rows(row_scale(h.slope, lower_.back()), h.part.span);
      }
    }
  }

  DualNetwork(const DualNetwork&) = delete;
  DualNetwork& operator=(const DualNetwork&) = delete;

  /// J for every column of C, as an m x 1 variable.
  Var objective(const Matrix& C) const {
    const std::size_t top = nv_.layers.size() - 1;
    if (C.rows() != nv_.layers[top].layer->output_dim()) throw DimensionError("objective matrix rows != output dimension");
    Tape& t = *eps_.tape;
    const Var c = t.constant(C);
    const Terms tm = walk(top, layer_adjoint(nv_.layers[top], c), matmul_tn(c, bias_[top]), false, {});
    const Var J = sub(tm.psi, scale_by(eps_, tm.norm));
    return tm.span_lo ? add(J, *tm.span_lo) : J;
  }

  const std::vector<Var>& lower() const noexcept { return lower_; }
  const std::vector<Var>& upper() const noexcept { return upper_; }
  std::vector<LayerPartition> partitions() const {
    std::vector<LayerPartition> out;
    for (const auto& h : hidden_) out.push_back(h.part);
    return out;
  }

 private:
  struct Hidden {
    LayerPartition part;
    Var slope;
    Var span_weight;  // l_j d_j over the spanning units
    Var span_full;    // the same, zero outside the spanning units
  };
  struct Terms {
    Var psi;
    Var norm;
    std::optional<Var> span_lo, span_hi;
  };

  // Bounds on layer `top`, starting from V = W_top^T. The first step back is
  // done without the dense V: with V = W^T the span term is the layer with
  // weight [-W]_+ (or [W]_+) applied to l*d, and the bias term is W (d * b).
  Terms basis_pass(std::size_t top) const {
    const LayerVars& lv = nv_.layers[top];
    if (top == 0) return walk(0, layer_transpose(lv), bias_[0], true, {});
    const Hidden& h = hidden_[top - 1];
    Terms tm;
    if (!h.part.span.empty()) {
      tm.span_lo = layer_apply(LayerVars{lv.layer, neg_part(lv.weight), lv.bias}, h.span_full);
      tm.span_hi = layer_apply(LayerVars{lv.layer, pos_part(lv.weight), lv.bias}, h.span_full);
    }
    const Var bias = add(bias_[top], layer_apply(lv, row_scale(h.slope, bias_[top - 1])));
    const Var V = chained_transpose(nv_.layers[top - 1], lv, h.slope);
    return walk(top - 1, V, bias, true, std::move(tm));
  }

  // V lives on the input side of layer `top` with one column per bound.
  Terms walk(std::size_t top, Var V, Var bias, bool want_hi, Terms tm) const {
    for (std::size_t a = top; a > 0; --a) {
      const Hidden& h = hidden_[a - 1];
      if (!h.part.span.empty()) {
        const Var VI = gather_rows(V, h.part.span);
        const Var lo = matmul_tn(neg_part(VI), h.span_weight);
        tm.span_lo = tm.span_lo ? add(*tm.span_lo, lo) : lo;
        if (want_hi) {
          const Var hi = matmul_tn(pos_part(VI), h.span_weight);
          tm.span_hi = tm.span_hi ? add(*tm.span_hi, hi) : hi;
        }
      }
      const Var DV = row_scale(h.slope, V);
      bias = add(bias, matmul_tn(DV, bias_[a - 1]));
      V = layer_adjoint(nv_.layers[a - 1], DV);
    }
    tm.psi = add(matmul_tn(V, xv_), bias);
    tm.norm = col_norms(V, q_);
    return tm;
  }

  const NetworkVars& nv_;
  Var eps_;
  DualNorm q_;
  Var xv_;
  std::vector<Var> bias_;
  std::deque<Hidden> hidden_;
  std::vector<Var> lower_, upper_;
};

}  // namespace ad

}  // namespace robustcert

#endif  // ROBUSTCERT_DUAL_HPP
