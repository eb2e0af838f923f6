#ifndef ROBUSTCERT_LOSSES_HPP
#define ROBUSTCERT_LOSSES_HPP

#include <string>

#include "autodiff.hpp"

namespace robustcert {

/// Multi-class losses invariant to adding a constant to every logit.
enum class LossKind { CrossEntropy, MulticlassHinge, ZeroOne };

inline LossKind parse_loss(const std::string& s) {
  if (s == "cross_entropy" || s == "ce") return LossKind::CrossEntropy;
  if (s == "multiclass_hinge" || s == "hinge") return LossKind::MulticlassHinge;
  if (s == "zero_one") return LossKind::ZeroOne;
  throw InvalidArgument("unknown loss '" + s + "'");
}

inline const char* loss_name(LossKind k) {
  switch (k) {
    case LossKind::CrossEntropy: return "cross_entropy";
    case LossKind::MulticlassHinge: return "multiclass_hinge";
    case LossKind::ZeroOne: return "zero_one";
  }
  return "?";
}

/// 1 when some other logit strictly exceeds the label's logit.
inline double zero_one_loss(const Vector& v, Eigen::Index y) {
  for (Eigen::Index i = 0; i < v.size(); ++i)
    if (i != y && v(i) > v(y)) return 1.0;
  return 0.0;
}

inline double loss_value(LossKind kind, const Vector& v, Eigen::Index y) {
  if (y < 0 || y >= v.size()) throw InvalidArgument("label out of range");
  switch (kind) {
    case LossKind::CrossEntropy: {
      const double m = v.maxCoeff();
      return m + std::log((v.array() - m).exp().sum()) - v(y);
    }
    case LossKind::MulticlassHinge: {
      double s = 0.0;
      for (Eigen::Index i = 0; i < v.size(); ++i)
        if (i != y) s += std::max(0.0, 1.0 + v(i) - v(y));
      return s;
    }
    case LossKind::ZeroOne: return zero_one_loss(v, y);
  }
  return 0.0;
}

/// Gradient of loss_value with respect to the logits.
inline Vector loss_gradient(LossKind kind, const Vector& v, Eigen::Index y) {
  Vector g = Vector::Zero(v.size());
  switch (kind) {
    case LossKind::CrossEntropy: {
      const double m = v.maxCoeff();
      g = (v.array() - m).exp().matrix();
      g /= g.sum();
      g(y) -= 1.0;
      break;
    }
    case LossKind::MulticlassHinge:
      for (Eigen::Index i = 0; i < v.size(); ++i)
        if (i != y && 1.0 + v(i) - v(y) > 0.0) {
          g(i) += 1.0;
          g(y) -= 1.0;
        }
      break;
    case LossKind::ZeroOne: throw InvalidArgument("zero_one loss has no useful gradient");
  }
  return g;
}

namespace ad {

inline Var loss(LossKind kind, Var v, Eigen::Index y) {
  switch (kind) {
    case LossKind::CrossEntropy: return cross_entropy(v, y);
    case LossKind::MulticlassHinge: return multiclass_hinge(v, y);
    case LossKind::ZeroOne: break;
  }
  throw InvalidArgument("zero_one loss is for evaluation only");
}

}  // namespace ad

}  // namespace robustcert

#endif  // ROBUSTCERT_LOSSES_HPP
