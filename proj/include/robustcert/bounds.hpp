#ifndef ROBUSTCERT_BOUNDS_HPP
#define ROBUSTCERT_BOUNDS_HPP

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "autodiff.hpp"
#include "network.hpp"

namespace robustcert {

/// Which side of zero a pre-activation interval lies on.
enum class ActivationClass : std::uint8_t { Negative, Positive, Span };

/// Intervals narrower than this are treated as fixed activations.
inline constexpr double kDegenerateWidth = 1e-12;

/// u <= 0 -> Negative (including l = u = 0); l >= 0 -> Positive; otherwise Span,
/// except that a spanning interval narrower than kDegenerateWidth is Negative.
inline ActivationClass classify(double lower, double upper) {
  if (upper <= 0.0) return ActivationClass::Negative;
  if (lower >= 0.0) return ActivationClass::Positive;
  if (upper - lower < kDegenerateWidth) return ActivationClass::Negative;
  return ActivationClass::Span;
}

/// The I-, I+, I index sets of one hidden layer.
struct LayerPartition {
  std::vector<ActivationClass> cls;
  std::vector<Eigen::Index> neg, pos, span;

  std::size_t width() const noexcept { return cls.size(); }
};

inline LayerPartition partition_layer(const Vector& lower, const Vector& upper) {
  LayerPartition p;
  p.cls.resize(static_cast<std::size_t>(lower.size()));
  for (Eigen::Index j = 0; j < lower.size(); ++j) {
    const ActivationClass c = classify(lower(j), upper(j));
    p.cls[static_cast<std::size_t>(j)] = c;
    (c == ActivationClass::Negative ? p.neg : c == ActivationClass::Positive ? p.pos : p.span).push_back(j);
  }
  return p;
}

/// Slope of the relaxed ReLU: 0 on I-, 1 on I+, u/(u-l) on I.
inline Vector relaxation_slope(const Vector& lower, const Vector& upper, const LayerPartition& p) {
  Vector d(lower.size());
  for (Eigen::Index j = 0; j < lower.size(); ++j) {
    switch (p.cls[static_cast<std::size_t>(j)]) {
      case ActivationClass::Negative: d(j) = 0.0; break;
      case ActivationClass::Positive: d(j) = 1.0; break;
      case ActivationClass::Span: d(j) = upper(j) / (upper(j) - lower(j)); break;
    }
  }
  return d;
}

/// Pre-activation bounds for every affine layer output. `lower[t]`, `upper[t]`
/// bound the output of layer t; `partition[t]` classifies the hidden layer fed
/// by layer t (one entry per hidden layer, none for the logits).
struct PreActBounds {
  std::vector<Vector> lower;
  std::vector<Vector> upper;
  std::vector<LayerPartition> partition;
  double eps = 0.0;
  DualNorm norm = DualNorm::L1;

  std::size_t depth() const noexcept { return lower.size(); }
};

/// Work counters for one bound computation.
struct PropagationStats {
  std::size_t basis_columns = 0;   // columns in the initial identity pass
  std::size_t span_columns = 0;    // one per spanning activation
  std::size_t column_products = 0; // sum over layer applications of columns pushed through
};

namespace ad {

struct NetworkVars {
  std::vector<LayerVars> layers;
};

/// Puts the network's parameters on the tape, as parameters or constants.
inline NetworkVars bind(Tape& t, const Network& net, bool trainable) {
  NetworkVars nv;
  for (const auto& l : net.layers()) {
    LayerVars lv;
    lv.layer = &l;
    lv.weight = trainable ? t.parameter(l.weight()) : t.constant(l.weight());
    lv.bias = trainable ? t.parameter(Matrix(l.bias())) : t.constant(Matrix(l.bias()));
    nv.layers.push_back(lv);
  }
  return nv;
}

/// Differentiable u/(u-l) slopes; the partition itself is held fixed.
inline Var relaxation_slope(Var lower, Var upper, const LayerPartition& p) {
  Tape& t = *lower.tape;
  Matrix d = robustcert::relaxation_slope(lower.value().col(0), upper.value().col(0), p);
  return t.record(std::move(d), {lower, upper}, [lower, upper, &p](Tape& t, const Matrix& g) {
    const Matrix& l = t.value(lower.id);
    const Matrix& u = t.value(upper.id);
    Matrix gl = Matrix::Zero(l.rows(), 1), gu = Matrix::Zero(u.rows(), 1);
    for (Eigen::Index j : p.span) {
      const double w = u(j, 0) - l(j, 0);
      gl(j, 0) = g(j, 0) * u(j, 0) / (w * w);
      gu(j, 0) = -g(j, 0) * l(j, 0) / (w * w);
    }
    t.accumulate(lower.id, gl);
    t.accumulate(upper.id, gu);
  });
}

/// Running state of the layer-by-layer bound computation, stored column-wise:
/// `nu_hat_1` is (current width) x (input dim), the transpose of the row
/// convention W_1^T D_2 W_2^T ...; each span block holds one column per
/// spanning activation of an earlier layer.
struct SpanBlock {
  Var nu;
  Var lower;  // l over the block's spanning activations, |I| x 1
};

struct BoundPropState {
  Var nu_hat_1;
  std::vector<SpanBlock> blocks;
  Var bias_acc;  // sum of the propagated bias terms gamma_j
  Var psi;       // nu_hat_1 x + bias_acc
  std::vector<Var> lower, upper;
  std::vector<LayerPartition> partition;
  PropagationStats stats;
};

inline void attach_bounds(BoundPropState& s, Var eps, DualNorm q) {
  Var norm_term = scale_by(eps, row_norms(s.nu_hat_1, q));
  Var lo = sub(s.psi, norm_term);
  Var hi = add(s.psi, norm_term);
  for (const SpanBlock& b : s.blocks) {
    lo = add(lo, matmul(neg_part(b.nu), b.lower));
    hi = sub(hi, matmul(pos_part(b.nu), b.lower));
  }
  s.lower.push_back(lo);
  s.upper.push_back(hi);
}

/// Computes bounds for every layer output, one layer at a time. The partitions
/// live inside the returned state, so it must outlive any later backward pass.
inline std::unique_ptr<BoundPropState> propagate_bounds(const NetworkVars& nv, const Vector& x, Var eps,
                                                        DualNorm q) {
  Tape& t = *eps.tape;
  const auto& L = nv.layers;
  if (L.empty()) throw InvalidArgument("network has no layers");
  if (x.size() != L.front().layer->input_dim())
    throw DimensionError("input length " + std::to_string(x.size()) + " != input_dim", 0);
  auto s = std::make_unique<BoundPropState>();
  s->partition.reserve(L.size());
  const Var xv = t.constant(Matrix(x));
  const Eigen::Index n_in = x.size();

  if (L[0].layer->is_conv())
    s->nu_hat_1 = layer_apply(L[0], t.constant(Matrix::Identity(n_in, n_in)));
  else
    s->nu_hat_1 = L[0].weight;
  s->bias_acc = layer_bias(L[0]);
  s->stats.basis_columns = static_cast<std::size_t>(n_in);
  s->stats.column_products = static_cast<std::size_t>(n_in) + 1;
  s->psi = add(matmul(s->nu_hat_1, xv), s->bias_acc);
  attach_bounds(*s, eps, q);

  for (std::size_t layer = 1; layer < L.size(); ++layer) {
    const LayerVars& lv = L[layer];
    const Var lo = s->lower.back(), hi = s->upper.back();
    s->partition.push_back(partition_layer(lo.value().col(0), hi.value().col(0)));
    const LayerPartition& part = s->partition.back();
    const Var d = relaxation_slope(lo, hi, part);

    for (SpanBlock& b : s->blocks) {
      s->stats.column_products += static_cast<std::size_t>(b.nu.cols());
      b.nu = layer_apply(lv, row_scale(d, b.nu));
    }
    if (!part.span.empty()) {
      SpanBlock nb;
      nb.lower = gather_rows(lo, part.span);
      nb.nu = layer_apply(lv, scatter_diag(d, part.span));
      s->stats.span_columns += part.span.size();
      s->stats.column_products += part.span.size();
      s->blocks.push_back(nb);
    }
    s->bias_acc = add(layer_apply(lv, row_scale(d, s->bias_acc)), layer_bias(lv));
    s->nu_hat_1 = layer_apply(lv, row_scale(d, s->nu_hat_1));
    s->stats.column_products += static_cast<std::size_t>(n_in) + 1;
    s->psi = add(matmul(s->nu_hat_1, xv), s->bias_acc);
    attach_bounds(*s, eps, q);
  }
  return s;
}

/// Lower bound J on c^T z_hat_k for every column c of C, from a finished state.
/// Returns an m x 1 variable.
inline Var objective(const BoundPropState& s, Var eps, DualNorm q, const Matrix& C) {
  Tape& t = *eps.tape;
  if (C.rows() != s.psi.rows()) throw DimensionError("objective matrix rows != output dimension");
  const Var c = t.constant(C);
  Var J = sub(matmul_tn(c, s.psi), scale_by(eps, col_norms(matmul_tn(s.nu_hat_1, c), q)));
  for (const SpanBlock& b : s.blocks) J = add(J, matmul_tn(neg_part(matmul_tn(b.nu, c)), b.lower));
  return J;
}

}  // namespace ad

namespace detail {

inline PreActBounds extract_bounds(const ad::BoundPropState& s, double eps, DualNorm q) {
  PreActBounds b;
  b.eps = eps;
  b.norm = q;
  for (std::size_t i = 0; i < s.lower.size(); ++i) {
    b.lower.push_back(s.lower[i].value().col(0));
    b.upper.push_back(s.upper[i].value().col(0));
  }
  b.partition = s.partition;
  return b;
}

}  // namespace detail

/// Pre-activation bounds of every layer over the eps-ball around x.
inline PreActBounds compute_bounds(const Network& net, const Vector& x, double eps, DualNorm q = DualNorm::L1,
                                   PropagationStats* stats = nullptr) {
  check_eps(eps);
  ad::Tape tape;
  const auto nv = ad::bind(tape, net, false);
  const auto state = ad::propagate_bounds(nv, x, tape.constant(Matrix::Constant(1, 1, eps)), q);
  if (stats) *stats = state->stats;
  return detail::extract_bounds(*state, eps, q);
}

/// Interval propagation that treats each layer's box as independent inputs to
/// the next. Sound but loose; identical to compute_bounds on the first layer.
inline PreActBounds naive_layerwise_bounds(const Network& net, const Vector& x, double eps,
                                           DualNorm q = DualNorm::L1) {
  check_eps(eps);
  if (x.size() != net.input_dim()) throw DimensionError("input length != input_dim", 0);
  // The first layer is an affine image of the ball, so both methods give the
  // same exact interval; share the computation.
  PreActBounds b = compute_bounds(net.truncated(1), x, eps, q);
  for (std::size_t j = 1; j < net.depth(); ++j) {
    b.partition.push_back(partition_layer(b.lower.back(), b.upper.back()));
    const Vector lo = b.lower.back().cwiseMax(0.0), hi = b.upper.back().cwiseMax(0.0);
    const Vector c = 0.5 * (lo + hi), r = 0.5 * (hi - lo);
    const Vector mid = net.layer(j).forward(c);
    const Vector rad = net.layer(j).abs().apply(r);
    b.lower.push_back(mid - rad);
    b.upper.push_back(mid + rad);
  }
  return b;
}

/// Fractions (|I-|, |I+|, |I|) / width for one hidden layer.
struct IndexSetFractions {
  double neg = 0.0;
  double pos = 0.0;
  double span = 0.0;
};

inline std::vector<IndexSetFractions> index_set_stats(const PreActBounds& b) {
  std::vector<IndexSetFractions> out;
  for (const auto& p : b.partition) {
    const double w = static_cast<double>(p.width());
    if (w == 0.0) {
      out.push_back({});
      continue;
    }
    out.push_back({static_cast<double>(p.neg.size()) / w, static_cast<double>(p.pos.size()) / w,
                   static_cast<double>(p.span.size()) / w});
  }
  return out;
}

}  // namespace robustcert

#endif  // ROBUSTCERT_BOUNDS_HPP
