#ifndef ROBUSTCERT_CORE_HPP
#define ROBUSTCERT_CORE_HPP

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace robustcert {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape disagreement between an operand and the layer consuming it.
/// `layer()` is the zero-based affine layer index, or -1 when no layer applies.
class DimensionError : public Error {
 public:
  DimensionError(const std::string& what, int layer = -1)
      : Error(layer >= 0 ? "layer " + std::to_string(layer) + ": " + what : what), layer_(layer) {}
  int layer() const noexcept { return layer_; }

 private:
  int layer_;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

/// Perturbation threat model. The dual objective penalizes the first dual
/// variable with the dual norm: l1 for an l-infinity ball, l2 for an l2 ball.
enum class DualNorm { L1, L2 };

inline const char* ball_name(DualNorm q) { return q == DualNorm::L1 ? "linf" : "l2"; }

inline DualNorm parse_ball(const std::string& s) {
  if (s == "linf") return DualNorm::L1;
  if (s == "l2") return DualNorm::L2;
  throw InvalidArgument("unknown norm '" + s + "' (expected linf or l2)");
}

/// Dense real tensor, row-major, flattened. Values must be finite.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::size_t> shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    const std::size_t n =
        std::accumulate(shape_.begin(), shape_.end(), std::size_t{1}, std::multiplies<>());
    if (n != static_cast<std::size_t>(data_.size()))
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape product " + std::to_string(n));
    if (!data_.allFinite()) throw InvalidArgument("tensor contains non-finite values");
  }
  // Copies rather than moves: argument evaluation order would let the move run before size().
  explicit Tensor(const Vector& flat) : Tensor({static_cast<std::size_t>(flat.size())}, flat) {}

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  const Vector& flat() const noexcept { return data_; }
  std::size_t size() const noexcept { return static_cast<std::size_t>(data_.size()); }

 private:
  std::vector<std::size_t> shape_;
  Vector data_;
};

inline std::size_t argmax(const Vector& v) {
  Eigen::Index i = 0;
  v.maxCoeff(&i);
  return static_cast<std::size_t>(i);
}

inline double dual_norm(const Eigen::Ref<const Vector>& v, DualNorm q) {
  return q == DualNorm::L1 ? v.lpNorm<1>() : v.norm();
}

inline void check_eps(double eps) {
  if (!(eps >= 0.0) || !std::isfinite(eps))
    throw InvalidArgument("eps must be finite and non-negative, got " + std::to_string(eps));
}

}  // namespace robustcert

#endif  // ROBUSTCERT_CORE_HPP
