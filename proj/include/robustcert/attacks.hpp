#ifndef ROBUSTCERT_ATTACKS_HPP
#define ROBUSTCERT_ATTACKS_HPP

#include <cmath>
#include <optional>
#include <sstream>

#include "certify.hpp"
#include "losses.hpp"

namespace robustcert {

using Domain = std::optional<std::pair<Vector, Vector>>;

struct AttackResult {
  bool success = false;  // prediction at `adversarial` differs from the label
  Vector adversarial;
  double loss = 0.0;
  long queries = 0;      // forward + gradient evaluations
};

/// Loss at x and its gradient with respect to x.
inline std::pair<double, Vector> input_loss_gradient(const Network& net, const Vector& x, int y,
                                                     LossKind kind = LossKind::CrossEntropy) {
  ad::Tape tape;
  const auto nv = ad::bind(tape, net, false);
  const ad::Var xv = tape.parameter(Matrix(x));
  ad::Var z = xv;
  for (std::size_t j = 0; j < net.depth(); ++j) {
    z = ad::add(ad::layer_apply(nv.layers[j], z), ad::layer_bias(nv.layers[j]));
    if (j + 1 < net.depth()) z = ad::pos_part(z);
  }
  const ad::Var l = ad::loss(kind, z, y);
  tape.backward(l);
  const Matrix& g = tape.grad(xv);
  return {l.scalar(), g.size() ? Vector(g.col(0)) : Vector::Zero(x.size())};
}

/// Projection onto the l-infinity ball around x, then onto the domain box.
inline Vector project(const Vector& x, double eps, const Vector& v, const Domain& domain) {
  Vector p = v.cwiseMax((x.array() - eps).matrix()).cwiseMin((x.array() + eps).matrix());
  if (domain) p = p.cwiseMax(domain->first).cwiseMin(domain->second);
  return p;
}

namespace detail {

inline Vector sign(const Vector& g) {
  return g.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline bool misclassified(const Network& net, const Vector& x, int y) {
  return static_cast<int>(argmax(forward(net, x))) != y;
}

}  // namespace detail

/// x' = clip(x + eps sign(grad_x L(f(x), y))).
inline AttackResult fgsm(const Network& net, const Vector& x, int y, double eps, const Domain& domain = std::nullopt,
                         LossKind kind = LossKind::CrossEntropy) {
  check_eps(eps);
  const auto [l0, g] = input_loss_gradient(net, x, y, kind);
  AttackResult r;
  r.adversarial = project(x, eps, x + eps * detail::sign(g), domain);
  const Vector out = forward(net, r.adversarial);
  r.loss = loss_value(kind, out, y);
  r.success = static_cast<int>(argmax(out)) != y;
  r.queries = 2;
  return r;
}

struct PgdOptions {
  int steps = 40;
  double step_size = std::numeric_limits<double>::quiet_NaN();  // eps / 10 when unset
  int restarts = 10;
  bool random_init = true;  // uniform start in the ball; false starts at x
  LossKind loss = LossKind::CrossEntropy;
};

/// Signed-gradient ascent with projection after every step. Stops at the
/// first misclassified iterate; otherwise returns the highest-loss iterate
/// over all restarts.
template <class Rng>
AttackResult pgd(const Network& net, const Vector& x, int y, double eps, const PgdOptions& opt, Rng& rng,
                 const Domain& domain = std::nullopt) {
  check_eps(eps);
  if (opt.steps < 1) throw InvalidArgument("pgd needs at least one step");
  if (opt.restarts < 1) throw InvalidArgument("pgd needs at least one restart");
  const double step = std::isnan(opt.step_size) ? eps / 10.0 : opt.step_size;
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  AttackResult best;
  best.adversarial = x;
  best.loss = -std::numeric_limits<double>::infinity();
  long queries = 0;
  for (int r = 0; r < opt.restarts; ++r) {
    Vector cur = x;
    if (opt.random_init)
      for (Eigen::Index i = 0; i < cur.size(); ++i) cur(i) += eps * unif(rng);
    cur = project(x, eps, cur, domain);
    for (int s = 0; s < opt.steps; ++s) {
      const auto [l, g] = input_loss_gradient(net, cur, y, opt.loss);
      cur = project(x, eps, cur + step * detail::sign(g), domain);
      const Vector out = forward(net, cur);
      queries += 2;
      const double loss = loss_value(opt.loss, out, y);
      const bool wrong = static_cast<int>(argmax(out)) != y;
      if (wrong || loss > best.loss) {
        best.adversarial = cur;
        best.loss = loss;
        best.success = wrong;
      }
      if (wrong) {
        best.queries = queries;
        return best;
      }
    }
  }
  best.queries = queries;
  return best;
}

// ---------------------------------------------------------------------------
// Dataset-level comparison

struct AttackRow {
  std::size_t index = 0;
  int label = 0;
  int predicted = 0;
  bool fgsm_success = false;
  double fgsm_loss = 0.0;
  bool pgd_success = false;
  double pgd_loss = 0.0;
  bool certified = false;
};

struct AttackOptions {
  double eps = 0.1;
  PgdOptions pgd;
  DualNorm norm = DualNorm::L1;
  std::uint64_t seed = 0;
  int threads = 1;
};

/// An example counts as an attack error when it is already misclassified or
/// the attack finds a misclassified point in the ball.
inline std::vector<AttackRow> attack_dataset(const Network& net, const Dataset& data, const AttackOptions& opt) {
  data.validate();
  std::vector<AttackRow> rows(data.size());
  parallel_for(data.size(), opt.threads, [&](std::size_t i) {
    const Vector x = data.example(i);
    const int y = data.labels[i];
    AttackRow& r = rows[i];
    r.index = i;
    r.label = y;
    r.predicted = static_cast<int>(argmax(forward(net, x)));
    const bool wrong = r.predicted != y;
    const AttackResult f = fgsm(net, x, y, opt.eps, data.domain, opt.pgd.loss);
    r.fgsm_success = wrong || f.success;
    r.fgsm_loss = f.loss;
    Rng rng = substream(opt.seed, "attack/" + std::to_string(i));
    const AttackResult p = pgd(net, x, y, opt.eps, opt.pgd, rng, data.domain);
    r.pgd_success = wrong || p.success;
    r.pgd_loss = p.loss;
    r.certified = certify_label(net, x, y, opt.eps, opt.norm).certified;
  });
  return rows;
}

struct AttackSummary {
  double eps = 0.0;
  double test_error = 0.0;
  double fgsm_error = 0.0;
  double pgd_error = 0.0;
  double robust_error_bound = 0.0;
  std::size_t certified_but_attacked = 0;  // must be zero
};

inline AttackSummary summarize(const std::vector<AttackRow>& rows, double eps) {
  AttackSummary s;
  s.eps = eps;
  if (rows.empty()) return s;
  for (const auto& r : rows) {
    s.test_error += r.predicted != r.label;
    s.fgsm_error += r.fgsm_success;
    s.pgd_error += r.pgd_success;
    s.robust_error_bound += !r.certified;
    s.certified_but_attacked += r.certified && (r.fgsm_success || r.pgd_success);
  }
  const double n = static_cast<double>(rows.size());
  s.test_error /= n;
  s.fgsm_error /= n;
  s.pgd_error /= n;
  s.robust_error_bound /= n;
  return s;
}

inline std::string attack_rows_csv(const std::vector<AttackRow>& rows) {
  std::ostringstream out;
  out << "index,label,predicted,fgsm_success,fgsm_loss,pgd_success,pgd_loss,certified\n";
  for (const auto& r : rows)
    out << r.index << ',' << r.label << ',' << r.predicted << ',' << int(r.fgsm_success) << ','
        << format_double(r.fgsm_loss) << ',' << int(r.pgd_success) << ',' << format_double(r.pgd_loss) << ','
        << int(r.certified) << '\n';
  return out.str();
}

/// One row in the layout Test / FGSM / PGD / robust bound.
inline std::string attack_summary_csv(const AttackSummary& s) {
  std::ostringstream out;
  out << "eps,test_error,fgsm_error,pgd_error,robust_error_bound\n"
      << format_double(s.eps) << ',' << format_double(s.test_error) << ',' << format_double(s.fgsm_error) << ','
      << format_double(s.pgd_error) << ',' << format_double(s.robust_error_bound) << '\n';
  return out.str();
}

}  // namespace robustcert

#endif  // ROBUSTCERT_ATTACKS_HPP
