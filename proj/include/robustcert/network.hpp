#ifndef ROBUSTCERT_NETWORK_HPP
#define ROBUSTCERT_NETWORK_HPP

#include <random>
#include <vector>

#include "layers.hpp"

namespace robustcert {

/// A k-layer ReLU network: k-1 affine layers with a ReLU between consecutive
/// layers and none after the last.
class Network {
 public:
  Network() = default;
  explicit Network(std::vector<AffineLayer> layers) : layers_(std::move(layers)) { validate(); }

  const std::vector<AffineLayer>& layers() const noexcept { return layers_; }
  std::vector<AffineLayer>& layers() noexcept { return layers_; }
  const AffineLayer& layer(std::size_t i) const { return layers_.at(i); }
  std::size_t depth() const noexcept { return layers_.size(); }
  bool empty() const noexcept { return layers_.empty(); }

  Eigen::Index input_dim() const { return layers_.front().input_dim(); }
  Eigen::Index output_dim() const { return layers_.back().output_dim(); }

  /// Width of activation layer `a`: a = 0 is the input, a = depth() the logits.
  Eigen::Index width(std::size_t a) const { return a == 0 ? input_dim() : layers_.at(a - 1).output_dim(); }

  void validate() const {
    if (layers_.empty()) throw InvalidArgument("network has no layers");
    for (std::size_t j = 0; j + 1 < layers_.size(); ++j)
      if (layers_[j].output_dim() != layers_[j + 1].input_dim())
        throw DimensionError("output_dim " + std::to_string(layers_[j].output_dim()) +
                                 " != next layer input_dim " + std::to_string(layers_[j + 1].input_dim()),
                             static_cast<int>(j));
  }

  /// The first `n` layers as a network whose last layer has no ReLU.
  Network truncated(std::size_t n) const {
    if (n == 0 || n > layers_.size()) throw InvalidArgument("truncation length out of range");
    return Network(std::vector<AffineLayer>(layers_.begin(), layers_.begin() + static_cast<std::ptrdiff_t>(n)));
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.parameter_count();
    return n;
  }

 private:
  std::vector<AffineLayer> layers_;
};

/// Evaluates the network. When `pre_activations` is non-null it receives
/// z_hat for every layer output (the last entry equals the logits).
inline Vector forward(const Network& net, const Vector& x, std::vector<Vector>* pre_activations = nullptr) {
  if (x.size() != net.input_dim())
    throw DimensionError("input length " + std::to_string(x.size()) + " != input_dim " +
                             std::to_string(net.input_dim()),
                         0);
  if (pre_activations) pre_activations->clear();
  Vector z = x;
  for (std::size_t j = 0; j < net.depth(); ++j) {
    Vector zh = net.layer(j).forward(z);
    if (pre_activations) pre_activations->push_back(zh);
    z = (j + 1 < net.depth()) ? Vector(zh.cwiseMax(0.0)) : std::move(zh);
  }
  return z;
}

inline Vector forward(const Network& net, const Tensor& x, std::vector<Vector>* pre = nullptr) {
  return forward(net, x.flat(), pre);
}

/// Batched evaluation, one example per column.
inline Matrix forward_batch(const Network& net, const Matrix& X) {
  if (X.rows() != net.input_dim()) throw DimensionError("batch rows != input_dim", 0);
  Matrix Z = X;
  for (std::size_t j = 0; j < net.depth(); ++j) {
    Matrix zh = net.layer(j).apply(Z);
    zh.colwise() += net.layer(j).full_bias();
    Z = (j + 1 < net.depth()) ? Matrix(zh.cwiseMax(0.0)) : std::move(zh);
  }
  return Z;
}

/// Gradient of <g, f(x)> with respect to x (plain backpropagation).
inline Vector input_gradient(const Network& net, const Vector& x, const Vector& output_grad) {
  std::vector<Vector> pre;
  forward(net, x, &pre);
  Vector g = output_grad;
  for (std::size_t j = net.depth(); j-- > 0;) {
    g = net.layer(j).adjoint(g);
    if (j > 0) g = g.cwiseProduct((pre[j - 1].array() > 0.0).cast<double>().matrix());
  }
  return g;
}

/// Weight initialization laws.
enum class InitLaw {
  /// Weights N(0, std = 1/sqrt(fan_in)), biases N(0, 1).
  GaussianBias,
  /// Same weight law, zero biases.
  ZeroBias,
};

/// Description of one layer for building networks.
struct LayerSpec {
  std::optional<ConvGeometry> conv;
  Eigen::Index in = 0;
  Eigen::Index out = 0;

  static LayerSpec dense(Eigen::Index in, Eigen::Index out) { return {std::nullopt, in, out}; }
  static LayerSpec conv2d(const ConvGeometry& g) { return {g, g.input_dim(), g.output_dim()}; }
};

template <class Rng>
Network init_network(const std::vector<LayerSpec>& specs, Rng& rng, InitLaw law) {
  std::vector<AffineLayer> layers;
  std::normal_distribution<double> unit(0.0, 1.0);
  for (const auto& s : specs) {
    const Eigen::Index rows = s.conv ? s.conv->out_ch : s.out;
    const Eigen::Index cols = s.conv ? s.conv->patch_size() : s.in;
    const double sd = 1.0 / std::sqrt(static_cast<double>(cols));
    Matrix w(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) w(i, j) = sd * unit(rng);
    Vector b = Vector::Zero(rows);
    if (law == InitLaw::GaussianBias)
      for (Eigen::Index i = 0; i < rows; ++i) b(i) = unit(rng);
    layers.push_back(s.conv ? AffineLayer::conv2d(*s.conv, std::move(w), std::move(b))
                            : AffineLayer::dense(std::move(w), std::move(b)));
  }
  return Network(std::move(layers));
}

/// Fully connected network with the given widths, e.g. {2, 100, 100, 2}.
template <class Rng>
Network init_mlp(const std::vector<Eigen::Index>& widths, Rng& rng, InitLaw law) {
  if (widths.size() < 2) throw InvalidArgument("an MLP needs at least input and output widths");
  std::vector<LayerSpec> specs;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) specs.push_back(LayerSpec::dense(widths[i], widths[i + 1]));
  return init_network(specs, rng, law);
}

/// Two stride-2 conv layers (16 and 32 channels) followed by dense layers of
/// `hidden` and `classes` units, for single-channel square images.
inline std::vector<LayerSpec> conv_classifier_specs(int side = 28, int kernel = 4, int pad = 1, int hidden = 100,
                                                    int classes = 10) {
  ConvGeometry c1{1, 16, kernel, 2, pad, side, side};
  c1.validate();
  ConvGeometry c2{16, 32, kernel, 2, pad, c1.out_h(), c1.out_w()};
  c2.validate();
  return {LayerSpec::conv2d(c1), LayerSpec::conv2d(c2), LayerSpec::dense(c2.output_dim(), hidden),
          LayerSpec::dense(hidden, classes)};
}

}  // namespace robustcert

#endif  // ROBUSTCERT_NETWORK_HPP
