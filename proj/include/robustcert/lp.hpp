#ifndef ROBUSTCERT_LP_HPP
#define ROBUSTCERT_LP_HPP

#include <cmath>
#include <limits>
#include <vector>

#include "core.hpp"

namespace robustcert {

/// minimize c^T v  s.t.  A_eq v = b_eq,  A_ub v <= b_ub,  lower <= v <= upper.
/// Infinite entries of lower/upper mean the side is unbounded.
struct LpProblem {
  Vector cost;
  Matrix a_eq;
  Vector b_eq;
  Matrix a_ub;
  Vector b_ub;
  Vector lower;
  Vector upper;

  Eigen::Index num_vars() const noexcept { return cost.size(); }

  /// Empty problem over n free variables.
  static LpProblem free_vars(Eigen::Index n) {
    LpProblem p;
    p.cost = Vector::Zero(n);
    p.a_eq.resize(0, n);
    p.a_ub.resize(0, n);
    p.lower = Vector::Constant(n, -std::numeric_limits<double>::infinity());
    p.upper = Vector::Constant(n, std::numeric_limits<double>::infinity());
    return p;
  }

  void add_eq(const Vector& row, double rhs) {
    a_eq.conservativeResize(a_eq.rows() + 1, num_vars());
    a_eq.row(a_eq.rows() - 1) = row.transpose();
    b_eq.conservativeResize(b_eq.size() + 1);
    b_eq(b_eq.size() - 1) = rhs;
  }

  void add_ub(const Vector& row, double rhs) {
    a_ub.conservativeResize(a_ub.rows() + 1, num_vars());
    a_ub.row(a_ub.rows() - 1) = row.transpose();
    b_ub.conservativeResize(b_ub.size() + 1);
    b_ub(b_ub.size() - 1) = rhs;
  }

  void validate() const {
    const Eigen::Index n = num_vars();
    if (a_eq.cols() != n || a_ub.cols() != n || lower.size() != n || upper.size() != n ||
        b_eq.size() != a_eq.rows() || b_ub.size() != a_ub.rows())
      throw DimensionError("inconsistent LP dimensions");
    for (Eigen::Index j = 0; j < n; ++j)
      if (lower(j) > upper(j)) throw InvalidArgument("variable " + std::to_string(j) + " has lower > upper");
  }

  /// Largest constraint or bound violation at v (0 when feasible).
  double max_violation(const Vector& v) const {
    double worst = 0.0;
    if (a_eq.rows()) worst = std::max(worst, (a_eq * v - b_eq).cwiseAbs().maxCoeff());
    if (a_ub.rows()) worst = std::max(worst, (a_ub * v - b_ub).maxCoeff());
    worst = std::max(worst, (lower - v).maxCoeff());
    worst = std::max(worst, (v - upper).maxCoeff());
    return worst;
  }
};

enum class LpStatus { Optimal, Infeasible, Unbounded, IterationLimit };

struct LpSolution {
  LpStatus status = LpStatus::Optimal;
  double value = 0.0;
  Vector x;
  long pivots = 0;
};

namespace detail {

/// Dense tableau over standard form  min c^T y, A y = b (b >= 0), y >= 0.
class Tableau {
 public:
  Tableau(const Matrix& A, const Vector& b, double tol) : m_(A.rows()), n_(A.cols()), tol_(tol) {
    // Columns: n structural, m artificial, then rhs.
    t_ = Matrix::Zero(m_ + 1, n_ + m_ + 1);
    t_.topLeftCorner(m_, n_) = A;
    t_.block(0, n_, m_, m_).setIdentity();
    t_.col(n_ + m_).head(m_) = b;
    basis_.resize(static_cast<std::size_t>(m_));
    for (Eigen::Index i = 0; i < m_; ++i) basis_[static_cast<std::size_t>(i)] = n_ + i;
    active_.assign(static_cast<std::size_t>(n_ + m_), true);
  }

  /// Phase 1: minimize the sum of artificials. Returns the optimum.
  double phase1(long max_pivots, long& pivots) {
    t_.row(m_).setZero();
    for (Eigen::Index i = 0; i < m_; ++i) t_.row(m_) -= t_.row(i);
    t_.row(m_).segment(n_, m_).setZero();
    run(max_pivots, pivots);
    return -t_(m_, n_ + m_);
  }

  /// Removes artificials from the basis (dropping redundant rows), then
  /// prices out the real cost.
  void start_phase2(const Vector& c) {
    for (Eigen::Index i = 0; i < m_; ++i) {
      if (basis_[static_cast<std::size_t>(i)] < n_) continue;
      Eigen::Index col = -1;
      for (Eigen::Index j = 0; j < n_ && col < 0; ++j)
        if (std::abs(t_(i, j)) > tol_) col = j;
      if (col >= 0)
        pivot(i, col);
      else
        dead_rows_.push_back(i);
    }
    for (Eigen::Index j = n_; j < n_ + m_; ++j) active_[static_cast<std::size_t>(j)] = false;
    t_.row(m_).setZero();
    t_.row(m_).head(n_) = c.transpose();
    for (Eigen::Index i = 0; i < m_; ++i) {
      const Eigen::Index bj = basis_[static_cast<std::size_t>(i)];
      if (bj < n_ && c(bj) != 0.0) t_.row(m_) -= c(bj) * t_.row(i);
    }
  }

  /// Returns false when the objective is unbounded below. Dantzig pricing,
  /// switching to Bland's rule after a run of degenerate pivots so that
  /// cycling is impossible.
  bool run(long max_pivots, long& pivots) {
    int degenerate = 0;
    for (;;) {
      const bool bland = degenerate >= kBlandAfter;
      Eigen::Index enter = -1;
      double most = -tol_;
      for (Eigen::Index j = 0; j < n_ + m_; ++j)
        if (active_[static_cast<std::size_t>(j)] && t_(m_, j) < most) {
          enter = j;
          if (bland) break;
          most = t_(m_, j);
        }
      if (enter < 0) return true;
      // Lowest-index leaving variable among ratio ties.
      Eigen::Index leave = -1;
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index i = 0; i < m_; ++i) {
        if (is_dead(i)) continue;
        const double a = t_(i, enter);
        if (a <= tol_) continue;
        const double ratio = t_(i, n_ + m_) / a;
        if (ratio < best - tol_ ||
            (std::abs(ratio - best) <= tol_ && basis_[static_cast<std::size_t>(i)] < basis_[static_cast<std::size_t>(leave)])) {
          best = std::min(best, ratio);
          leave = i;
        }
      }
      if (leave < 0) return false;
      degenerate = best <= tol_ ? degenerate + 1 : 0;
      pivot(leave, enter);
      if (++pivots > max_pivots) throw Error("simplex iteration limit reached");
    }
  }

  double objective() const { return -t_(m_, n_ + m_); }

  Vector solution() const {
    Vector y = Vector::Zero(n_);
    for (Eigen::Index i = 0; i < m_; ++i) {
      const Eigen::Index bj = basis_[static_cast<std::size_t>(i)];
      if (bj < n_ && !is_dead(i)) y(bj) = t_(i, n_ + m_);
    }
    return y;
  }

 private:
  bool is_dead(Eigen::Index i) const {
    return std::find(dead_rows_.begin(), dead_rows_.end(), i) != dead_rows_.end();
  }

  void pivot(Eigen::Index r, Eigen::Index c) {
    t_.row(r) /= t_(r, c);
    for (Eigen::Index i = 0; i <= m_; ++i) {
      if (i == r) continue;
      const double f = t_(i, c);
      if (f != 0.0) t_.row(i) -= f * t_.row(r);
    }
    basis_[static_cast<std::size_t>(r)] = c;
  }

  static constexpr int kBlandAfter = 50;

  Eigen::Index m_, n_;
  double tol_;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t_;
  std::vector<Eigen::Index> basis_;
  std::vector<bool> active_;
  std::vector<Eigen::Index> dead_rows_;
};

}  // namespace detail

/// Exact solve by a dense two-phase simplex.
inline LpSolution solve_lp(const LpProblem& p, double tol = 1e-10, long max_pivots = 1'000'000) {
  p.validate();
  const double inf = std::numeric_limits<double>::infinity();
  const Eigen::Index n = p.num_vars();

  // Map every variable to nonnegative standard-form columns:
  //   v = lower + y            (finite lower; finite upper adds a row y <= upper - lower)
  //   v = upper - y            (only upper finite)
  //   v = y+ - y-              (free)
  struct Map {
    Eigen::Index col;
    double sign;
    double shift;
    Eigen::Index neg_col = -1;
  };
  std::vector<Map> map;
  Eigen::Index cols = 0;
  std::vector<std::pair<Eigen::Index, double>> box_rows;  // (column, width)
  for (Eigen::Index j = 0; j < n; ++j) {
    const double lo = p.lower(j), hi = p.upper(j);
    if (lo > -inf) {
      map.push_back({cols, 1.0, lo});
      if (hi < inf) box_rows.emplace_back(cols, hi - lo);
      ++cols;
    } else if (hi < inf) {
      map.push_back({cols++, -1.0, hi});
    } else {
      map.push_back({cols, 1.0, 0.0, cols + 1});
      cols += 2;
    }
  }
  const Eigen::Index n_ub = p.a_ub.rows() + static_cast<Eigen::Index>(box_rows.size());
  const Eigen::Index n_struct = cols + n_ub;  // plus one slack per inequality
  const Eigen::Index m = p.a_eq.rows() + n_ub;

  Matrix A = Matrix::Zero(m, n_struct);
  Vector b = Vector::Zero(m);
  Vector c = Vector::Zero(n_struct);
  auto put = [&](Eigen::Index row, const Eigen::Ref<const Eigen::RowVectorXd>& coeffs, double rhs) {
    double r = rhs;
    for (Eigen::Index j = 0; j < n; ++j) {
      const double a = coeffs(j);
      if (a == 0.0) continue;
      const Map& mp = map[static_cast<std::size_t>(j)];
      A(row, mp.col) += a * mp.sign;
      if (mp.neg_col >= 0) A(row, mp.neg_col) -= a;
      r -= a * mp.shift;
    }
    b(row) = r;
  };
  Eigen::Index row = 0;
  for (Eigen::Index i = 0; i < p.a_eq.rows(); ++i) put(row++, p.a_eq.row(i), p.b_eq(i));
  for (Eigen::Index i = 0; i < p.a_ub.rows(); ++i) {
    put(row, p.a_ub.row(i), p.b_ub(i));
    A(row, cols + i) = 1.0;
    ++row;
  }
  for (std::size_t k = 0; k < box_rows.size(); ++k) {
    A(row, box_rows[k].first) = 1.0;
    A(row, cols + p.a_ub.rows() + static_cast<Eigen::Index>(k)) = 1.0;
    b(row) = box_rows[k].second;
    ++row;
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    const Map& mp = map[static_cast<std::size_t>(j)];
    c(mp.col) += p.cost(j) * mp.sign;
    if (mp.neg_col >= 0) c(mp.neg_col) -= p.cost(j);
  }
  for (Eigen::Index i = 0; i < m; ++i)
    if (b(i) < 0.0) {
      A.row(i) *= -1.0;
      b(i) = -b(i);
    }

  const double scale = std::max(1.0, b.size() ? b.cwiseAbs().maxCoeff() : 0.0);
  detail::Tableau tab(A, b, tol);
  LpSolution sol;
  if (tab.phase1(max_pivots, sol.pivots) > 1e-9 * scale) {
    sol.status = LpStatus::Infeasible;
    return sol;
  }
  tab.start_phase2(c);
  if (!tab.run(max_pivots, sol.pivots)) {
    sol.status = LpStatus::Unbounded;
    return sol;
  }
  const Vector y = tab.solution();
  sol.x.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const Map& mp = map[static_cast<std::size_t>(j)];
    sol.x(j) = mp.shift + mp.sign * y(mp.col) - (mp.neg_col >= 0 ? y(mp.neg_col) : 0.0);
  }
  sol.value = p.cost.dot(sol.x);
  return sol;
}

}  // namespace robustcert

#endif  // ROBUSTCERT_LP_HPP
