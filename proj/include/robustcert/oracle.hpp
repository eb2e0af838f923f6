#ifndef ROBUSTCERT_ORACLE_HPP
#define ROBUSTCERT_ORACLE_HPP

// Ground truth for small networks: the relaxed primal LP solved exactly, and
// dense enumeration of the true reachable output set.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "data.hpp"
#include "dual.hpp"
#include "lp.hpp"
#include "parallel.hpp"

namespace robustcert {

inline constexpr Eigen::Index kMaxLpVariables = 2000;

/// The relaxed primal LP together with where each network quantity lives in
/// its variable vector.
struct EncodedLp {
  LpProblem lp;
  std::vector<Eigen::Index> input;             // z_1
  std::vector<std::vector<Eigen::Index>> pre;  // pre[t][j]: output j of layer t
  std::vector<std::vector<Eigen::Index>> act;  // act[t][j]: relaxed ReLU var of hidden layer t, -1 if eliminated
  std::size_t envelope_rows = 0;               // three per spanning activation
};

namespace detail {

inline Matrix dense_weight(const AffineLayer& l) {
  if (!l.is_conv()) return l.weight();
  return l.apply(Matrix::Identity(l.input_dim(), l.input_dim()));
}

}  // namespace detail

/// min c^T z_hat_k over the triangle relaxation, l-infinity ball only. Fixed
/// activations are substituted (I- -> 0, I+ -> z_hat); each spanning
/// activation gets z >= 0, z >= z_hat, (u - l) z - u z_hat <= -u l.
inline EncodedLp build_lp(const Network& net, const PreActBounds& bounds, const Vector& x, double eps,
                          const Vector& c) {
  check_eps(eps);
  detail::check_bounds_match(net, bounds);
  if (bounds.norm != DualNorm::L1) throw InvalidArgument("the LP oracle supports the linf ball only");
  if (x.size() != net.input_dim()) throw DimensionError("input length != input_dim", 0);
  if (c.size() != net.output_dim()) throw DimensionError("objective length != output_dim");
  const std::size_t L = net.depth();

  EncodedLp e;
  Eigen::Index nv = 0;
  for (Eigen::Index j = 0; j < x.size(); ++j) e.input.push_back(nv++);
  for (std::size_t t = 0; t < L; ++t) {
    if (t > 0) {
      const LayerPartition& p = bounds.partition[t - 1];
      std::vector<Eigen::Index> a(p.width(), -1);
      for (Eigen::Index j : p.span) a[static_cast<std::size_t>(j)] = nv++;
      e.act.push_back(std::move(a));
    }
    std::vector<Eigen::Index> z(static_cast<std::size_t>(net.layer(t).output_dim()));
    for (auto& v : z) v = nv++;
    e.pre.push_back(std::move(z));
  }
  if (nv > kMaxLpVariables)
    throw InvalidArgument("LP would have " + std::to_string(nv) + " variables; the limit is " +
                          std::to_string(kMaxLpVariables));

  LpProblem& lp = e.lp;
  lp = LpProblem::free_vars(nv);
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    lp.lower(e.input[static_cast<std::size_t>(j)]) = x(j) - eps;
    lp.upper(e.input[static_cast<std::size_t>(j)]) = x(j) + eps;
  }
  Eigen::Index n_eq = 0, n_ub = 0;
  for (std::size_t t = 0; t < L; ++t) n_eq += net.layer(t).output_dim();
  for (const auto& p : bounds.partition) n_ub += 3 * static_cast<Eigen::Index>(p.span.size());
  lp.a_eq = Matrix::Zero(n_eq, nv);
  lp.b_eq = Vector::Zero(n_eq);
  lp.a_ub = Matrix::Zero(n_ub, nv);
  lp.b_ub = Vector::Zero(n_ub);

  Eigen::Index r = 0;
  for (std::size_t t = 0; t < L; ++t) {
    const Matrix W = detail::dense_weight(net.layer(t));
    const Vector b = net.layer(t).full_bias();
    // Column of the LP that carries activation j of this layer's input, or -1 for z = 0.
    auto source = [&](Eigen::Index j) -> Eigen::Index {
      const auto uj = static_cast<std::size_t>(j);
      if (t == 0) return e.input[uj];
      switch (bounds.partition[t - 1].cls[uj]) {
        case ActivationClass::Negative: return -1;
        case ActivationClass::Positive: return e.pre[t - 1][uj];
        case ActivationClass::Span: return e.act[t - 1][uj];
      }
      return -1;
    };
    for (Eigen::Index i = 0; i < W.rows(); ++i, ++r) {
      lp.a_eq(r, e.pre[t][static_cast<std::size_t>(i)]) = 1.0;
      for (Eigen::Index j = 0; j < W.cols(); ++j) {
        const Eigen::Index s = source(j);
        if (s >= 0 && W(i, j) != 0.0) lp.a_eq(r, s) -= W(i, j);
      }
      lp.b_eq(r) = b(i);
    }
  }
  r = 0;
  for (std::size_t t = 0; t + 1 < L; ++t) {
    const LayerPartition& p = bounds.partition[t];
    for (Eigen::Index j : p.span) {
      const Eigen::Index z = e.act[t][static_cast<std::size_t>(j)];
      const Eigen::Index zh = e.pre[t][static_cast<std::size_t>(j)];
      const double l = bounds.lower[t](j), u = bounds.upper[t](j);
      lp.a_ub(r, z) = -1.0;  // z >= 0
      ++r;
      lp.a_ub(r, zh) = 1.0;  // z >= z_hat
      lp.a_ub(r, z) = -1.0;
      ++r;
      lp.a_ub(r, z) = u - l;  // upper envelope
      lp.a_ub(r, zh) = -u;
      lp.b_ub(r) = -u * l;
      ++r;
      e.envelope_rows += 3;
    }
  }
  for (Eigen::Index i = 0; i < c.size(); ++i) lp.cost(e.pre[L - 1][static_cast<std::size_t>(i)]) = c(i);
  return e;
}

/// The LP point produced by an actual forward pass from `x_pert`; it is
/// feasible whenever x_pert lies in the ball the bounds were computed for.
inline Vector lp_point_from_trace(const EncodedLp& e, const Network& net, const Vector& x_pert) {
  Vector v = Vector::Zero(e.lp.num_vars());
  std::vector<Vector> pre;
  forward(net, x_pert, &pre);
  for (std::size_t j = 0; j < e.input.size(); ++j) v(e.input[j]) = x_pert(static_cast<Eigen::Index>(j));
  for (std::size_t t = 0; t < e.pre.size(); ++t)
    for (std::size_t j = 0; j < e.pre[t].size(); ++j) v(e.pre[t][j]) = pre[t](static_cast<Eigen::Index>(j));
  for (std::size_t t = 0; t < e.act.size(); ++t)
    for (std::size_t j = 0; j < e.act[t].size(); ++j)
      if (e.act[t][j] >= 0) v(e.act[t][j]) = std::max(0.0, pre[t](static_cast<Eigen::Index>(j)));
  return v;
}

struct LpBound {
  double value = 0.0;
  Vector output;  // z_hat_k at the optimum
  long pivots = 0;
};

/// Exact optimum of the relaxed LP for objective c.
inline LpBound lp_bound(const Network& net, const Vector& x, double eps, const Vector& c,
                        const PreActBounds* bounds = nullptr) {
  const PreActBounds own = bounds ? PreActBounds{} : compute_bounds(net, x, eps);
  const EncodedLp e = build_lp(net, bounds ? *bounds : own, x, eps, c);
  const LpSolution s = solve_lp(e.lp);
  if (s.status != LpStatus::Optimal) throw Error("relaxed LP was not solved to optimality");
  LpBound out;
  out.value = s.value;
  out.pivots = s.pivots;
  out.output.resize(static_cast<Eigen::Index>(e.pre.back().size()));
  for (std::size_t i = 0; i < e.pre.back().size(); ++i) out.output(static_cast<Eigen::Index>(i)) = s.x(e.pre.back()[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Planar geometry

using Point2 = Eigen::Vector2d;

/// Convex hull by Andrew's monotone chain, counter-clockwise, no repeated
/// or collinear points.
inline std::vector<Point2> convex_hull(std::vector<Point2> pts) {
  std::sort(pts.begin(), pts.end(), [](const Point2& a, const Point2& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  auto cross = [](const Point2& o, const Point2& a, const Point2& b) {
    return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
  };
  std::vector<Point2> h(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(h[k - 2], h[k - 1], p) <= 0.0) --k;
    h[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, lower = k + 1; i-- > 0;) {
    while (k >= lower && cross(h[k - 2], h[k - 1], pts[i]) <= 0.0) --k;
    h[k++] = pts[i];
  }
  h.resize(k - 1);
  return h;
}

/// Shoelace area of a simple polygon.
inline double polygon_area(const std::vector<Point2>& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Point2& p = poly[i];
    const Point2& q = poly[(i + 1) % poly.size()];
    a += p.x() * q.y() - q.x() * p.y();
  }
  return 0.5 * std::abs(a);
}

/// Keeps the part of a convex polygon with n^T z >= offset.
inline std::vector<Point2> clip_halfplane(const std::vector<Point2>& poly, const Point2& n, double offset) {
  std::vector<Point2> out;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Point2& p = poly[i];
    const Point2& q = poly[(i + 1) % poly.size()];
    const double sp = n.dot(p) - offset, sq = n.dot(q) - offset;
    if (sp >= 0.0) out.push_back(p);
    if ((sp >= 0.0) != (sq >= 0.0)) out.push_back(p + (sp / (sp - sq)) * (q - p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reachable set enumeration

struct PolytopeSample {
  Matrix inputs;   // N x d perturbed inputs
  Matrix outputs;  // N x k network outputs
  std::vector<Point2> hull;  // for k = 2
  double hull_area = 0.0;
};

inline constexpr Eigen::Index kMaxGridInputDim = 3;

/// Evaluates the network on a regular grid over the ball (grid_per_dim points
/// per input coordinate).
inline PolytopeSample sample_polytope(const Network& net, const Vector& x, double eps, int grid_per_dim = 201,
                                      int threads = 1) {
  check_eps(eps);
  const Eigen::Index d = x.size();
  if (d != net.input_dim()) throw DimensionError("input length != input_dim", 0);
  if (d > kMaxGridInputDim)
    throw InvalidArgument("grid sampling needs input dimension <= 3, got " + std::to_string(d));
  if (grid_per_dim < 2) throw InvalidArgument("grid_per_dim must be at least 2");
  const auto g = static_cast<Eigen::Index>(grid_per_dim);
  Eigen::Index n = 1;
  for (Eigen::Index i = 0; i < d; ++i) n *= g;
  PolytopeSample s;
  s.inputs.resize(n, d);
  for (Eigen::Index p = 0; p < n; ++p) {
    Eigen::Index rest = p;
    for (Eigen::Index i = d; i-- > 0;) {
      const Eigen::Index k = rest % g;
      rest /= g;
      s.inputs(p, i) = x(i) - eps + 2.0 * eps * static_cast<double>(k) / static_cast<double>(g - 1);
    }
  }
  s.outputs.resize(n, net.output_dim());
  const Eigen::Index rows = n / g;  // points per slice of the first coordinate
  parallel_for(static_cast<std::size_t>(g), threads, [&](std::size_t slice) {
    const auto b = static_cast<Eigen::Index>(slice) * rows;
    s.outputs.middleRows(b, rows) = forward_batch(net, s.inputs.middleRows(b, rows).transpose()).transpose();
  });
  if (net.output_dim() == 2) {
    std::vector<Point2> pts;
    pts.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index p = 0; p < n; ++p) pts.emplace_back(s.outputs(p, 0), s.outputs(p, 1));
    s.hull = convex_hull(std::move(pts));
    s.hull_area = polygon_area(s.hull);
  }
  return s;
}

/// Outer approximation of the reachable set of a 2-output network: the box of
/// final-layer bounds cut by c^T z >= J(c) for evenly spaced unit directions.
struct OuterBound {
  Vector lower, upper;       // final-layer box
  Matrix directions;         // 2 x m
  Vector offsets;            // J per direction
  std::vector<Point2> polygon;
  double area = 0.0;
};

inline OuterBound outer_bound_2d(const Network& net, const Vector& x, double eps, int directions = 360,
                                 DualNorm q = DualNorm::L1) {
  if (net.output_dim() != 2) throw DimensionError("outer polygon needs a 2-output network");
  if (directions < 4) throw InvalidArgument("need at least 4 directions");
  const PreActBounds b = compute_bounds(net, x, eps, q);
  OuterBound o;
  o.lower = b.lower.back();
  o.upper = b.upper.back();
  o.directions.resize(2, directions);
  for (int i = 0; i < directions; ++i) {
    const double th = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(directions);
    o.directions.col(i) << std::cos(th), std::sin(th);
  }
  o.offsets = dual_objective(net, x, eps, dual_backward(net, b, o.directions), b, q);
  o.polygon = {Point2(o.lower(0), o.lower(1)), Point2(o.upper(0), o.lower(1)), Point2(o.upper(0), o.upper(1)),
               Point2(o.lower(0), o.upper(1))};
  for (int i = 0; i < directions && !o.polygon.empty(); ++i)
    o.polygon = clip_halfplane(o.polygon, o.directions.col(i), o.offsets(i));
  o.area = polygon_area(o.polygon);
  return o;
}

// ---------------------------------------------------------------------------
// Dual bound vs exact LP

struct TightnessRow {
  std::size_t index = 0;
  int label = 0;
  int target = 0;
  double dual = 0.0;
  double lp = 0.0;
  double gap = 0.0;  // lp - dual
  std::size_t span = 0;
};

/// For each example and each target i != y: J for c = e_y - e_i against the
/// exact LP optimum.
inline std::vector<TightnessRow> tightness_report(const Network& net, const Dataset& data, double eps,
                                                  int threads = 1) {
  data.validate();
  std::vector<std::vector<TightnessRow>> per(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    const Vector x = data.example(i);
    const int y = data.labels[i];
    const PreActBounds b = compute_bounds(net, x, eps);
    const Matrix C = margin_objective(net.output_dim(), y);
    const Vector J = dual_objective(net, x, eps, dual_backward(net, b, C), b, DualNorm::L1);
    std::size_t span = 0;
    for (const auto& p : b.partition) span += p.span.size();
    for (Eigen::Index t = 0; t < C.cols(); ++t) {
      if (t == y) continue;
      TightnessRow row;
      row.index = i;
      row.label = y;
      row.target = static_cast<int>(t);
      row.dual = J(t);
      row.lp = lp_bound(net, x, eps, C.col(t), &b).value;
      row.gap = row.lp - row.dual;
      row.span = span;
      per[i].push_back(row);
    }
  });
  std::vector<TightnessRow> out;
  for (auto& v : per) out.insert(out.end(), v.begin(), v.end());
  return out;
}

inline std::string tightness_csv(const std::vector<TightnessRow>& rows) {
  std::ostringstream out;
  out << "index,label,target,dual_bound,lp_optimum,gap,span_count\n";
  for (const auto& r : rows)
    out << r.index << ',' << r.label << ',' << r.target << ',' << format_double(r.dual) << ','
        << format_double(r.lp) << ',' << format_double(r.gap) << ',' << r.span << '\n';
  return out.str();
}

}  // namespace robustcert

#endif  // ROBUSTCERT_ORACLE_HPP
