#ifndef ROBUSTCERT_LAYERS_HPP
#define ROBUSTCERT_LAYERS_HPP

#include <algorithm>
#include <optional>
#include <string>

#include "core.hpp"

namespace robustcert {

/// Geometry of a 2-D convolution with a square kernel, uniform stride and
/// symmetric zero padding. Activations are flattened channel-major, then
/// row-major over the spatial grid: index = c*H*W + h*W + w.
struct ConvGeometry {
  int in_ch = 1;
  int out_ch = 1;
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  int in_h = 1;
  int in_w = 1;

  int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  int positions() const { return out_h() * out_w(); }
  int patch_size() const { return in_ch * kernel * kernel; }
  int input_dim() const { return in_ch * in_h * in_w; }
  int output_dim() const { return out_ch * positions(); }

  void validate() const {
    if (in_ch <= 0 || out_ch <= 0 || kernel <= 0 || stride <= 0 || pad < 0 || in_h <= 0 || in_w <= 0)
      throw InvalidArgument("conv2d: channels, kernel, stride and input size must be positive, pad >= 0");
    if (in_h + 2 * pad < kernel || in_w + 2 * pad < kernel)
      throw InvalidArgument("conv2d: kernel larger than padded input");
  }

  bool operator==(const ConvGeometry&) const = default;
};

namespace detail {

// Columns of X are independent images. Patches has one row per (image, output
// position) and one column per (in_ch, ki, kj) kernel tap.
inline void im2col(const ConvGeometry& g, const Matrix& X, Eigen::Index c0, Eigen::Index nb, Matrix& patches) {
  const int oh = g.out_h(), ow = g.out_w(), np = g.positions(), k = g.kernel;
  patches.setZero(static_cast<Eigen::Index>(np) * nb, g.patch_size());
  for (int ic = 0; ic < g.in_ch; ++ic)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const int r = (ic * k + ki) * k + kj;
        double* dst = patches.col(r).data();
        for (Eigen::Index b = 0; b < nb; ++b) {
          const double* src = X.col(c0 + b).data() + static_cast<std::ptrdiff_t>(ic) * g.in_h * g.in_w;
          double* out = dst + b * np;
          for (int y = 0; y < oh; ++y) {
            const int ih = y * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.in_h) continue;
            for (int x = 0; x < ow; ++x) {
              const int iw = x * g.stride - g.pad + kj;
              if (iw >= 0 && iw < g.in_w) out[y * ow + x] = src[ih * g.in_w + iw];
            }
          }
        }
      }
}

inline void col2im_add(const ConvGeometry& g, const Matrix& patch_grad, Eigen::Index c0, Eigen::Index nb, Matrix& Xg) {
  const int oh = g.out_h(), ow = g.out_w(), np = g.positions(), k = g.kernel;
  for (int ic = 0; ic < g.in_ch; ++ic)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const int r = (ic * k + ki) * k + kj;
        const double* src = patch_grad.col(r).data();
        for (Eigen::Index b = 0; b < nb; ++b) {
          double* dst = Xg.col(c0 + b).data() + static_cast<std::ptrdiff_t>(ic) * g.in_h * g.in_w;
          const double* in = src + b * np;
          for (int y = 0; y < oh; ++y) {
            const int ih = y * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.in_h) continue;
            for (int x = 0; x < ow; ++x) {
              const int iw = x * g.stride - g.pad + kj;
              if (iw >= 0 && iw < g.in_w) dst[ih * g.in_w + iw] += in[y * ow + x];
            }
          }
        }
      }
}

inline Eigen::Index conv_chunk(const ConvGeometry& g) {
  const Eigen::Index per_col = static_cast<Eigen::Index>(g.positions()) * std::max(g.patch_size(), g.out_ch);
  return std::max<Eigen::Index>(1, (Eigen::Index{1} << 22) / std::max<Eigen::Index>(per_col, 1));
}

/// Y = conv(X) for every column of X; kernel is out_ch x (in_ch*k*k).
inline Matrix conv_apply(const ConvGeometry& g, const Matrix& kernel, const Matrix& X) {
  const int np = g.positions();
  Matrix Y(g.output_dim(), X.cols());
  Matrix patches, out;
  const Eigen::Index chunk = conv_chunk(g);
  for (Eigen::Index c0 = 0; c0 < X.cols(); c0 += chunk) {
    const Eigen::Index nb = std::min(chunk, X.cols() - c0);
    im2col(g, X, c0, nb, patches);
    out.noalias() = patches * kernel.transpose();
    for (Eigen::Index b = 0; b < nb; ++b)
      for (int oc = 0; oc < g.out_ch; ++oc)
        Y.col(c0 + b).segment(static_cast<Eigen::Index>(oc) * np, np) = out.col(oc).segment(b * np, np);
  }
  return Y;
}

/// Transposed convolution: the exact adjoint of conv_apply in the kernel's input.
inline Matrix conv_adjoint(const ConvGeometry& g, const Matrix& kernel, const Matrix& G) {
  const int np = g.positions();
  Matrix Xg = Matrix::Zero(g.input_dim(), G.cols());
  Matrix gm, patch_grad;
  const Eigen::Index chunk = conv_chunk(g);
  for (Eigen::Index c0 = 0; c0 < G.cols(); c0 += chunk) {
    const Eigen::Index nb = std::min(chunk, G.cols() - c0);
    gm.resize(np * nb, g.out_ch);
    for (Eigen::Index b = 0; b < nb; ++b)
      for (int oc = 0; oc < g.out_ch; ++oc)
        gm.col(oc).segment(b * np, np) = G.col(c0 + b).segment(static_cast<Eigen::Index>(oc) * np, np);
    patch_grad.noalias() = gm * kernel;
    col2im_add(g, patch_grad, c0, nb, Xg);
  }
  return Xg;
}

/// Gradient of <G, conv(X)> with respect to the kernel.
inline Matrix conv_kernel_grad(const ConvGeometry& g, const Matrix& X, const Matrix& G) {
  const int np = g.positions();
  Matrix kg = Matrix::Zero(g.out_ch, g.patch_size());
  Matrix patches, gm;
  const Eigen::Index chunk = conv_chunk(g);
  for (Eigen::Index c0 = 0; c0 < X.cols(); c0 += chunk) {
    const Eigen::Index nb = std::min(chunk, X.cols() - c0);
    im2col(g, X, c0, nb, patches);
    gm.resize(np * nb, g.out_ch);
    for (Eigen::Index b = 0; b < nb; ++b)
      for (int oc = 0; oc < g.out_ch; ++oc)
        gm.col(oc).segment(b * np, np) = G.col(c0 + b).segment(static_cast<Eigen::Index>(oc) * np, np);
    kg.noalias() += gm.transpose() * patches;
  }
  return kg;
}

/// Calls f(in_index, out_index, tap) for every nonzero entry of the operator.
template <class F>
void for_each_conv_entry(const ConvGeometry& g, F&& f) {
  const int oh = g.out_h(), ow = g.out_w(), np = g.positions(), k = g.kernel;
  for (int ic = 0; ic < g.in_ch; ++ic)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const int tap = (ic * k + ki) * k + kj;
        for (int y = 0; y < oh; ++y) {
          const int ih = y * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.in_h) continue;
          for (int x = 0; x < ow; ++x) {
            const int iw = x * g.stride - g.pad + kj;
            if (iw < 0 || iw >= g.in_w) continue;
            const Eigen::Index in = (static_cast<Eigen::Index>(ic) * g.in_h + ih) * g.in_w + iw;
            for (int oc = 0; oc < g.out_ch; ++oc) f(in, static_cast<Eigen::Index>(oc) * np + y * ow + x, oc, tap);
          }
        }
      }
}

/// diag(d) W^T written out densely (input_dim x output_dim), built directly
/// from the kernel; d = nullptr means no scaling.
inline Matrix conv_transpose_matrix(const ConvGeometry& g, const Matrix& kernel, const Vector* d = nullptr) {
  Matrix T = Matrix::Zero(g.input_dim(), g.output_dim());
  for_each_conv_entry(g, [&](Eigen::Index in, Eigen::Index out, int oc, int tap) {
    T(in, out) = d ? (*d)(in) * kernel(oc, tap) : kernel(oc, tap);
  });
  return T;
}

/// Gradients of <G, conv_transpose_matrix(kernel, d)> with respect to the
/// kernel and, when d is given, to d (written to *grad_d).
inline Matrix conv_transpose_matrix_grad(const ConvGeometry& g, const Matrix& G, const Matrix& kernel,
                                         const Vector* d = nullptr, Vector* grad_d = nullptr) {
  Matrix kg = Matrix::Zero(g.out_ch, g.patch_size());
  if (grad_d) grad_d->setZero(g.input_dim());
  for_each_conv_entry(g, [&](Eigen::Index in, Eigen::Index out, int oc, int tap) {
    const double v = G(in, out);
    kg(oc, tap) += d ? (*d)(in) * v : v;
    if (grad_d) (*grad_d)(in) += kernel(oc, tap) * v;
  });
  return kg;
}

}  // namespace detail

/// One affine map W z + b, either a dense matrix or a 2-D convolution.
/// For conv layers `weight()` is the kernel reshaped to out_ch x (in_ch*k*k)
/// in [out_ch, in_ch, kh, kw] order and `bias()` has one entry per channel.
class AffineLayer {
 public:
  AffineLayer() = default;

  static AffineLayer dense(Matrix weight, Vector bias) {
    if (bias.size() != weight.rows())
      throw DimensionError("dense bias length " + std::to_string(bias.size()) + " != out " +
                           std::to_string(weight.rows()));
    AffineLayer l;
    l.weight_ = std::move(weight);
    l.bias_ = std::move(bias);
    l.check_finite();
    return l;
  }

  static AffineLayer conv2d(const ConvGeometry& g, Matrix kernel, Vector bias) {
    g.validate();
    if (kernel.rows() != g.out_ch || kernel.cols() != g.patch_size())
      throw DimensionError("conv2d kernel must be out_ch x (in_ch*k*k)");
    if (bias.size() != g.out_ch) throw DimensionError("conv2d bias length must equal out_ch");
    AffineLayer l;
    l.conv_ = g;
    l.weight_ = std::move(kernel);
    l.bias_ = std::move(bias);
    l.check_finite();
    return l;
  }

  bool is_conv() const noexcept { return conv_.has_value(); }
  const std::optional<ConvGeometry>& conv() const noexcept { return conv_; }
  const Matrix& weight() const noexcept { return weight_; }
  const Vector& bias() const noexcept { return bias_; }
  Matrix& weight() noexcept { return weight_; }
  Vector& bias() noexcept { return bias_; }

  Eigen::Index input_dim() const { return conv_ ? conv_->input_dim() : weight_.cols(); }
  Eigen::Index output_dim() const { return conv_ ? conv_->output_dim() : weight_.rows(); }

  /// Linear part W X applied column-wise (no bias).
  Matrix apply(const Matrix& X) const { return apply_with(weight_, X); }

  Matrix apply_with(const Matrix& weight, const Matrix& X) const {
    if (X.rows() != input_dim())
      throw DimensionError("input rows " + std::to_string(X.rows()) + " != input_dim " + std::to_string(input_dim()));
    if (conv_) return detail::conv_apply(*conv_, weight, X);
    return weight * X;
  }

  /// W^T V applied column-wise, no bias.
  Matrix adjoint(const Matrix& V) const { return adjoint_with(weight_, V); }

  Matrix adjoint_with(const Matrix& weight, const Matrix& V) const {
    if (V.rows() != output_dim())
      throw DimensionError("adjoint operand rows " + std::to_string(V.rows()) + " != output_dim " +
                           std::to_string(output_dim()));
    if (conv_) return detail::conv_adjoint(*conv_, weight, V);
    return weight.transpose() * V;
  }

  /// Gradient of <G, W X> with respect to the weight matrix.
  Matrix weight_grad(const Matrix& X, const Matrix& G) const {
    if (conv_) return detail::conv_kernel_grad(*conv_, X, G);
    return G * X.transpose();
  }

  /// Bias expanded to one entry per output unit.
  Vector full_bias() const { return expand_bias(bias_); }

  Vector expand_bias(const Vector& b) const {
    if (!conv_) return b;
    const int np = conv_->positions();
    Vector out(output_dim());
    for (int oc = 0; oc < conv_->out_ch; ++oc) out.segment(static_cast<Eigen::Index>(oc) * np, np).setConstant(b(oc));
    return out;
  }

  /// Adjoint of expand_bias: sums a per-unit vector back to per-channel.
  Vector reduce_bias(const Vector& g) const {
    if (!conv_) return g;
    const int np = conv_->positions();
    Vector out(conv_->out_ch);
    for (int oc = 0; oc < conv_->out_ch; ++oc) out(oc) = g.segment(static_cast<Eigen::Index>(oc) * np, np).sum();
    return out;
  }

  Vector forward(const Vector& z) const { return apply(z) + full_bias(); }

  /// Same operator with every weight replaced by its absolute value.
  AffineLayer abs() const {
    AffineLayer l = *this;
    l.weight_ = weight_.cwiseAbs();
    return l;
  }

  std::size_t parameter_count() const { return static_cast<std::size_t>(weight_.size() + bias_.size()); }

 private:
  void check_finite() const {
    if (!weight_.allFinite() || !bias_.allFinite()) throw InvalidArgument("layer parameters must be finite");
  }

  std::optional<ConvGeometry> conv_;
  Matrix weight_;
  Vector bias_;
};

/// W^T v, column-wise for matrices.
inline Matrix adjoint_apply(const AffineLayer& layer, const Matrix& v) { return layer.adjoint(v); }

/// The adjoint applied to every output basis vector: an input_dim x output_dim matrix equal to W^T.
inline Matrix adjoint_on_basis(const AffineLayer& layer) {
  if (!layer.is_conv()) return layer.weight().transpose();
  return detail::conv_transpose_matrix(*layer.conv(), layer.weight());
}

namespace detail {

template <class F>
void for_each_entry(const AffineLayer& layer, F&& f) {
  if (layer.is_conv()) {
    for_each_conv_entry(*layer.conv(), [&](Eigen::Index in, Eigen::Index out, int oc, int tap) { f(in, out, oc, tap); });
    return;
  }
  const Matrix& w = layer.weight();
  for (Eigen::Index j = 0; j < w.cols(); ++j)
    for (Eigen::Index i = 0; i < w.rows(); ++i) f(j, i, static_cast<int>(i), static_cast<int>(j));
}

/// Nonzeros of a layer's matrix grouped by output unit, as (input, weight row,
/// weight column) triples.
struct EntryRows {
  std::vector<Eigen::Index> start;
  std::vector<Eigen::Index> in;
  std::vector<int> wr, wc;
};

inline EntryRows entry_rows(const AffineLayer& layer) {
  EntryRows r;
  const Eigen::Index n = layer.output_dim();
  std::vector<Eigen::Index> count(static_cast<std::size_t>(n) + 1, 0);
  for_each_entry(layer, [&](Eigen::Index, Eigen::Index out, int, int) { ++count[static_cast<std::size_t>(out) + 1]; });
  for (std::size_t i = 1; i < count.size(); ++i) count[i] += count[i - 1];
  r.start = count;
  const auto nnz = static_cast<std::size_t>(count.back());
  r.in.resize(nnz);
  r.wr.resize(nnz);
  r.wc.resize(nnz);
  for_each_entry(layer, [&](Eigen::Index in, Eigen::Index out, int wr, int wc) {
    const auto k = static_cast<std::size_t>(count[static_cast<std::size_t>(out)]++);
    r.in[k] = in;
    r.wr[k] = wr;
    r.wc[k] = wc;
  });
  return r;
}

/// P^T diag(d) T^T for a layer P feeding (through d) into T, accumulated from
/// nonzero entries; units with d = 0 cost nothing. wp and wt are the weights.
inline Matrix chained_transpose(const AffineLayer& P, const Matrix& wp, const AffineLayer& T, const Matrix& wt,
                                const Vector& d) {
  const EntryRows rows = entry_rows(P);
  Matrix V = Matrix::Zero(P.input_dim(), T.output_dim());
  for_each_entry(T, [&](Eigen::Index h, Eigen::Index o, int r, int c) {
    const double s = d(h) * wt(r, c);
    if (s == 0.0) return;
    for (Eigen::Index k = rows.start[h]; k < rows.start[h + 1]; ++k) V(rows.in[k], o) += s * wp(rows.wr[k], rows.wc[k]);
  });
  return V;
}

struct ChainedGrad {
  Matrix wp, wt;
  Vector d;
};

inline ChainedGrad chained_transpose_grad(const AffineLayer& P, const Matrix& wp, const AffineLayer& T,
                                          const Matrix& wt, const Vector& d, const Matrix& G) {
  const EntryRows rows = entry_rows(P);
  ChainedGrad g{Matrix::Zero(wp.rows(), wp.cols()), Matrix::Zero(wt.rows(), wt.cols()), Vector::Zero(d.size())};
  for_each_entry(T, [&](Eigen::Index h, Eigen::Index o, int r, int c) {
    const double w = wt(r, c);
    const double s = d(h) * w;
    double acc = 0.0;
    for (Eigen::Index k = rows.start[h]; k < rows.start[h + 1]; ++k) {
      const double gv = G(rows.in[k], o);
      acc += wp(rows.wr[k], rows.wc[k]) * gv;
      if (s != 0.0) g.wp(rows.wr[k], rows.wc[k]) += s * gv;
    }
    g.wt(r, c) += d(h) * acc;
    g.d(h) += w * acc;
  });
  return g;
}

}  // namespace detail

}  // namespace robustcert

#endif  // ROBUSTCERT_LAYERS_HPP
