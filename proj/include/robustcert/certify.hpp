#ifndef ROBUSTCERT_CERTIFY_HPP
#define ROBUSTCERT_CERTIFY_HPP

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "data.hpp"
#include "dual.hpp"
#include "parallel.hpp"

namespace robustcert {

struct Certificate {
  bool certified = false;
  double margin = 0.0;  // min over targets i != y of J(x, g(e_y - e_i))
};

/// J >= 0 for every target proves no perturbation within eps changes the
/// prediction away from y_star.
inline Certificate certify_label(const Network& net, const Vector& x, Eigen::Index y_star, double eps,
                                 DualNorm q = DualNorm::L1) {
  const Eigen::Index k = net.output_dim();
  if (y_star < 0 || y_star >= k) throw InvalidArgument("label out of range");
  const Vector J = dual_bound(net, x, eps, margin_objective(k, y_star), q);
  double m = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < k; ++i)
    if (i != y_star) m = std::min(m, J(i));
  return {m >= 0.0, m};
}

/// True when x is provably not an adversarial example: the certificate holds
/// at the predicted class.
inline bool detect(const Network& net, const Vector& x, double eps, DualNorm q = DualNorm::L1) {
  return certify_label(net, x, static_cast<Eigen::Index>(argmax(forward(net, x))), eps, q).certified;
}

/// Fraction of examples not certified at their true label.
inline double robust_error(const Network& net, const Dataset& data, double eps, DualNorm q = DualNorm::L1,
                           int threads = 1) {
  data.validate();
  std::vector<char> bad(data.size(), 0);
  parallel_for(data.size(), threads, [&](std::size_t i) {
    bad[i] = !certify_label(net, data.example(i), data.labels[i], eps, q).certified;
  });
  std::size_t n = 0;
  for (char b : bad) n += static_cast<std::size_t>(b);
  return static_cast<double>(n) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Largest certified radius

/// phi(eps) = min over targets of J at class y, and d phi / d eps with the
/// activation partition held fixed.
struct PhiValue {
  double value = 0.0;
  double slope = 0.0;
};

inline PhiValue certificate_phi(const Network& net, const Vector& x, Eigen::Index y, double eps, DualNorm q) {
  check_eps(eps);
  ad::Tape tape;
  const auto nv = ad::bind(tape, net, false);
  const ad::Var e = tape.parameter(Matrix::Constant(1, 1, eps));
  const ad::DualNetwork dual(nv, x, e, q);
  const ad::Var J = dual.objective(margin_objective(net.output_dim(), y));
  Eigen::Index best = -1;
  for (Eigen::Index i = 0; i < J.rows(); ++i)
    if (i != y && (best < 0 || J.value()(i, 0) < J.value()(best, 0))) best = i;
  if (best < 0) return {std::numeric_limits<double>::infinity(), 0.0};
  const ad::Var phi = ad::element(J, best, 0);
  tape.backward(phi);
  const Matrix& g = tape.grad(e);
  return {phi.scalar(), g.size() ? g(0, 0) : 0.0};
}

struct NewtonOptions {
  double tol = 1e-3;        // relative bracket width at exit
  double initial_hi = 0.01;
  double max_eps = 10.0;
  int max_iterations = 100;
};

struct MaxEpsResult {
  double eps = 0.0;
  Eigen::Index predicted = 0;
  int iterations = 0;       // evaluations after the initial bracket is found
  int bracket_evaluations = 0;
  bool capped = false;      // certificate still held at max_eps
};

/// Largest eps with phi(eps) >= 0, to relative tolerance tol, by safeguarded
/// Newton steps inside a bracket [lo, hi] with phi(lo) >= 0 > phi(hi).
inline MaxEpsResult max_certified_eps(const Network& net, const Vector& x, DualNorm q = DualNorm::L1,
                                      const NewtonOptions& opt = {}) {
  if (!(opt.tol > 0.0)) throw InvalidArgument("tol must be positive");
  MaxEpsResult r;
  r.predicted = static_cast<Eigen::Index>(argmax(forward(net, x)));
  auto phi = [&](double eps) {
    const PhiValue p = certificate_phi(net, x, r.predicted, eps, q);
    if (!std::isfinite(p.value) || !std::isfinite(p.slope))
      throw Error("certificate objective is not finite at eps=" + std::to_string(eps));
    return p;
  };

  PhiValue p_lo = phi(0.0);
  if (p_lo.value <= 0.0) return r;
  double lo = 0.0, hi = opt.initial_hi;
  PhiValue p_hi = phi(hi);
  ++r.bracket_evaluations;
  while (p_hi.value >= 0.0) {
    if (hi >= opt.max_eps) {
      r.eps = hi;
      r.capped = true;
      return r;
    }
    lo = hi;
    p_lo = p_hi;
    hi = std::min(2.0 * hi, opt.max_eps);
    p_hi = phi(hi);
    ++r.bracket_evaluations;
  }

  // Newton from the most recent point; a step that leaves the bracket is
  // halved back toward that point, then replaced by bisection. Candidates
  // keep a relative distance tol/2 from both ends so the bracket always shrinks.
  double cur = lo;
  PhiValue p_cur = p_lo;
  const double nudge = 1.0 + 0.5 * opt.tol;
  while (hi > lo * (1.0 + opt.tol) && r.iterations < opt.max_iterations) {
    const double a = lo * nudge;
    const double b = hi / nudge;
    double cand = std::numeric_limits<double>::quiet_NaN();
    if (p_cur.slope < 0.0) {
      double step = -p_cur.value / p_cur.slope;
      for (int k = 0; k < 4 && !(cur + step > lo && cur + step < hi); ++k) step *= 0.5;
      if (cur + step > lo && cur + step < hi) cand = cur + step;
    }
    if (!std::isfinite(cand)) cand = 0.5 * (lo + hi);
    if (a < b) cand = std::clamp(cand, a, b);
    const PhiValue p = phi(cand);
    ++r.iterations;
    if (p.value >= 0.0) {
      lo = cand;
      p_lo = p;
    } else {
      hi = cand;
      p_hi = p;
    }
    cur = cand;
    p_cur = p;
  }
  r.eps = lo;
  return r;
}

// ---------------------------------------------------------------------------
// Reports

struct CertificateRecord {
  std::size_t index = 0;
  std::optional<int> label;
  int predicted = 0;
  bool certified = false;
  double margin = 0.0;
  double eps = 0.0;
  std::optional<double> max_eps;
  std::optional<int> newton_iterations;
};

struct CertifyOptions {
  double eps = 0.1;
  DualNorm norm = DualNorm::L1;
  bool max_eps = false;
  NewtonOptions newton;
  int threads = 1;
};

/// Certifies each example at its true label (or at the prediction when the
/// dataset has no labels to trust, which callers signal with use_labels=false).
inline std::vector<CertificateRecord> certify_dataset(const Network& net, const Dataset& data,
                                                      const CertifyOptions& opt, bool use_labels = true) {
  data.validate();
  check_eps(opt.eps);
  std::vector<CertificateRecord> out(data.size());
  parallel_for(data.size(), opt.threads, [&](std::size_t i) {
    const Vector x = data.example(i);
    CertificateRecord& rec = out[i];
    rec.index = i;
    rec.predicted = static_cast<int>(argmax(forward(net, x)));
    if (use_labels) rec.label = data.labels[i];
    const int target = use_labels ? data.labels[i] : rec.predicted;
    const Certificate c = certify_label(net, x, target, opt.eps, opt.norm);
    rec.certified = c.certified;
    rec.margin = c.margin;
    rec.eps = opt.eps;
    if (opt.max_eps) {
      const MaxEpsResult m = max_certified_eps(net, x, opt.norm, opt.newton);
      rec.max_eps = m.eps;
      rec.newton_iterations = m.iterations;
    }
  });
  return out;
}

inline nlohmann::json to_json(const CertificateRecord& r) {
  nlohmann::json j;
  j["index"] = r.index;
  j["label"] = r.label ? nlohmann::json(*r.label) : nlohmann::json(nullptr);
  j["predicted"] = r.predicted;
  j["certified"] = r.certified;
  j["margin"] = r.margin;
  j["eps"] = r.eps;
  j["correct"] = r.label ? nlohmann::json(*r.label == r.predicted) : nlohmann::json(nullptr);
  j["max_certified_eps"] = r.max_eps ? nlohmann::json(*r.max_eps) : nlohmann::json(nullptr);
  j["newton_iterations"] = r.newton_iterations ? nlohmann::json(*r.newton_iterations) : nlohmann::json(nullptr);
  return j;
}

inline std::string certificates_jsonl(const std::vector<CertificateRecord>& recs) {
  std::string out;
  for (const auto& r : recs) out += to_json(r).dump() + '\n';
  return out;
}

struct CertifySummary {
  std::size_t n = 0;
  double eps = 0.0;
  double clean_err = 0.0;
  double robust_err = 0.0;
  std::optional<double> mean_max_eps;
};

inline CertifySummary summarize(const std::vector<CertificateRecord>& recs) {
  CertifySummary s;
  s.n = recs.size();
  if (recs.empty()) return s;
  s.eps = recs.front().eps;
  double wrong = 0, uncertified = 0, sum_eps = 0;
  bool have_eps = true;
  for (const auto& r : recs) {
    if (r.label && *r.label != r.predicted) ++wrong;
    if (!r.certified) ++uncertified;
    if (r.max_eps)
      sum_eps += *r.max_eps;
    else
      have_eps = false;
  }
  s.clean_err = wrong / static_cast<double>(s.n);
  s.robust_err = uncertified / static_cast<double>(s.n);
  if (have_eps) s.mean_max_eps = sum_eps / static_cast<double>(s.n);
  return s;
}

inline std::string summary_csv(const CertifySummary& s) {
  std::ostringstream out;
  out << "n,eps,clean_err,robust_err,mean_max_certified_eps\n"
      << s.n << ',' << format_double(s.eps) << ',' << format_double(s.clean_err) << ','
      << format_double(s.robust_err) << ',' << (s.mean_max_eps ? format_double(*s.mean_max_eps) : "") << '\n';
  return out.str();
}

}  // namespace robustcert

#endif  // ROBUSTCERT_CERTIFY_HPP
