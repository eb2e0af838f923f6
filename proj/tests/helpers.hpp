// Test-side reference implementations. Nothing here calls the library's
// operators; they exist to check them.
#ifndef ROBUSTCERT_TESTS_HELPERS_HPP
#define ROBUSTCERT_TESTS_HELPERS_HPP

#include <random>
#include <vector>

#include "robustcert/robustcert.hpp"

namespace testutil {

using robustcert::Matrix;
using robustcert::Vector;

/// Flattened matrix of a conv layer, by direct indexing of the definition
/// y[oc, oy, ox] = sum k[oc, ic, ki, kj] * x[ic, oy*s - p + ki, ox*s - p + kj].
inline Matrix conv_matrix(const robustcert::ConvGeometry& g, const Matrix& kernel) {
  Matrix W = Matrix::Zero(g.output_dim(), g.input_dim());
  for (int oc = 0; oc < g.out_ch; ++oc)
    for (int oy = 0; oy < g.out_h(); ++oy)
      for (int ox = 0; ox < g.out_w(); ++ox)
        for (int ic = 0; ic < g.in_ch; ++ic)
          for (int ki = 0; ki < g.kernel; ++ki)
            for (int kj = 0; kj < g.kernel; ++kj) {
              const int iy = oy * g.stride - g.pad + ki, ix = ox * g.stride - g.pad + kj;
              if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) continue;
              const int row = (oc * g.out_h() + oy) * g.out_w() + ox;
              const int col = (ic * g.in_h + iy) * g.in_w + ix;
              W(row, col) += kernel(oc, (ic * g.kernel + ki) * g.kernel + kj);
            }
  return W;
}

inline Matrix dense_of(const robustcert::AffineLayer& l) {
  return l.is_conv() ? conv_matrix(*l.conv(), l.weight()) : l.weight();
}

inline Vector bias_of(const robustcert::AffineLayer& l) {
  if (!l.is_conv()) return l.bias();
  const auto& g = *l.conv();
  Vector b(g.output_dim());
  for (int oc = 0; oc < g.out_ch; ++oc)
    for (int p = 0; p < g.positions(); ++p) b(oc * g.positions() + p) = l.bias()(oc);
  return b;
}

/// Element-by-element evaluation with explicit loops.
inline Vector reference_forward(const robustcert::Network& net, const Vector& x, std::vector<Vector>* pre = nullptr) {
  Vector z = x;
  for (std::size_t j = 0; j < net.depth(); ++j) {
    const Matrix W = dense_of(net.layer(j));
    const Vector b = bias_of(net.layer(j));
    Vector out(W.rows());
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
      double s = b(r);
      for (Eigen::Index c = 0; c < W.cols(); ++c) s += W(r, c) * z(c);
      out(r) = s;
    }
    if (pre) pre->push_back(out);
    if (j + 1 < net.depth())
      for (Eigen::Index r = 0; r < out.size(); ++r) out(r) = out(r) > 0.0 ? out(r) : 0.0;
    z = out;
  }
  return z;
}

inline robustcert::Network random_mlp(const std::vector<Eigen::Index>& widths, std::uint64_t seed,
                                      robustcert::InitLaw law = robustcert::InitLaw::GaussianBias) {
  robustcert::Rng rng = robustcert::substream(seed, "test-net");
  return robustcert::init_mlp(widths, rng, law);
}

/// Small net with two conv layers on a 1x6x6 input, then dense layers.
inline robustcert::Network small_conv_net(std::uint64_t seed, robustcert::InitLaw law = robustcert::InitLaw::GaussianBias) {
  robustcert::ConvGeometry c1{1, 2, 3, 2, 1, 6, 6};
  robustcert::ConvGeometry c2{2, 3, 2, 1, 0, c1.out_h(), c1.out_w()};
  std::vector<robustcert::LayerSpec> specs{robustcert::LayerSpec::conv2d(c1), robustcert::LayerSpec::conv2d(c2),
                                           robustcert::LayerSpec::dense(c2.output_dim(), 5),
                                           robustcert::LayerSpec::dense(5, 3)};
  robustcert::Rng rng = robustcert::substream(seed, "test-conv");
  return robustcert::init_network(specs, rng, law);
}

inline Vector uniform_vector(Eigen::Index n, double lo, double hi, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = u(rng);
  return v;
}

/// Uniform point in the l-infinity ball; with probability 1/4 snapped to a corner.
inline Vector sample_linf(const Vector& x, double eps, std::mt19937_64& rng) {
  Vector d = uniform_vector(x.size(), -eps, eps, rng);
  if (std::uniform_int_distribution<int>(0, 3)(rng) == 0)
    for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = d(i) >= 0.0 ? eps : -eps;
  return x + d;
}

/// Uniform direction in the l2 ball, radius uniform in [0, eps].
inline Vector sample_l2(const Vector& x, double eps, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vector d(x.size());
  for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = n(rng);
  const double r = std::uniform_real_distribution<double>(0.0, eps)(rng);
  return x + r * d / d.norm();
}

/// Relative error max |a - b| / max(1, |a|, |b|).
inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

}  // namespace testutil

#endif
