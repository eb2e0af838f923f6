#ifndef ROBUSTCERT_TRAINING_HPP
#define ROBUSTCERT_TRAINING_HPP

#include <algorithm>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <variant>

#include "data.hpp"
#include "dual.hpp"
#include "losses.hpp"
#include "parallel.hpp"

namespace robustcert {

/// Upper bounds on the logit gaps f(x')_i - f(x')_y over the ball: entry i is
/// -J(x, g(e_y - e_i)); entry y is 0.
inline Vector robust_logits(const Network& net, const Vector& x, Eigen::Index y, double eps,
                            DualNorm q = DualNorm::L1) {
  if (y < 0 || y >= net.output_dim()) throw InvalidArgument("label out of range");
  return -dual_bound(net, x, eps, margin_objective(net.output_dim(), y), q);
}

/// Per-batch robust and clean losses. `loss` and `clean_loss` are batch means.
struct RobustLossReport {
  std::vector<Vector> robust_logits;
  std::vector<Vector> clean_logits;
  std::vector<bool> robust_err;
  std::vector<bool> clean_err;
  std::vector<double> robust_losses;
  std::vector<double> clean_losses;
  double loss = 0.0;
  double clean_loss = 0.0;

  std::size_t size() const noexcept { return robust_err.size(); }
  double robust_error_rate() const {
    return static_cast<double>(std::count(robust_err.begin(), robust_err.end(), true)) / static_cast<double>(size());
  }
  double clean_error_rate() const {
    return static_cast<double>(std::count(clean_err.begin(), clean_err.end(), true)) / static_cast<double>(size());
  }
};

inline Network zeros_like(const Network& net) {
  Network g = net;
  for (auto& l : g.layers()) {
    l.weight().setZero();
    l.bias().setZero();
  }
  return g;
}

inline std::vector<std::size_t> all_indices(const Dataset& data) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

namespace detail {

struct ExampleOut {
  Vector robust_logits;
  Vector clean_logits;
  double robust_loss = 0.0;
  double clean_loss = 0.0;
  std::vector<Matrix> gw;
  std::vector<Vector> gb;
};

inline void collect_grads(const ad::Tape& tape, const ad::NetworkVars& nv, ExampleOut& out) {
  for (const auto& lv : nv.layers) {
    const Matrix& gw = tape.grad(lv.weight);
    const Matrix& gb = tape.grad(lv.bias);
    out.gw.push_back(gw.size() ? gw : Matrix::Zero(lv.weight.rows(), lv.weight.cols()));
    out.gb.push_back(gb.size() ? Vector(gb.col(0)) : Vector::Zero(lv.bias.rows()));
  }
}

/// Robust logits differentiated on a tape.
inline ExampleOut robust_example(const Network& net, const Vector& x, int y, double eps, LossKind kind, DualNorm q,
                                 double weight, bool want_grad) {
  ExampleOut out;
  out.clean_logits = forward(net, x);
  out.clean_loss = loss_value(kind, out.clean_logits, y);
  ad::Tape tape;
  const auto nv = ad::bind(tape, net, want_grad);
  const ad::Var eps_v = tape.constant(Matrix::Constant(1, 1, eps));
  const ad::DualNetwork dual(nv, x, eps_v, q);
  const ad::Var v = ad::scale(dual.objective(margin_objective(net.output_dim(), y)), -1.0);
  out.robust_logits = v.value().col(0);
  if (!want_grad) {
    out.robust_loss = loss_value(kind, out.robust_logits, y);
    return out;
  }
  const ad::Var l = ad::loss(kind, v, y);
  out.robust_loss = l.scalar();
  tape.backward(ad::scale(l, weight));
  collect_grads(tape, nv, out);
  return out;
}

inline ExampleOut clean_example(const Network& net, const Vector& x, int y, LossKind kind, double weight) {
  ExampleOut out;
  ad::Tape tape;
  const auto nv = ad::bind(tape, net, true);
  ad::Var z = tape.constant(Matrix(x));
  for (std::size_t j = 0; j < net.depth(); ++j) {
    z = ad::add(ad::layer_apply(nv.layers[j], z), ad::layer_bias(nv.layers[j]));
    if (j + 1 < net.depth()) z = ad::pos_part(z);
  }
  out.clean_logits = z.value().col(0);
  const ad::Var l = ad::loss(kind, z, y);
  out.clean_loss = l.scalar();
  tape.backward(ad::scale(l, weight));
  collect_grads(tape, nv, out);
  return out;
}

inline void fill_report(const Dataset& data, std::span<const std::size_t> batch, std::vector<ExampleOut>& outs,
                        RobustLossReport& rep, bool have_robust) {
  const double n = static_cast<double>(batch.size());
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const int y = data.labels[batch[k]];
    auto& o = outs[k];
    rep.clean_err.push_back(static_cast<int>(argmax(o.clean_logits)) != y);
    rep.clean_losses.push_back(o.clean_loss);
    rep.clean_loss += o.clean_loss / n;
    if (have_robust) {
      rep.robust_err.push_back(zero_one_loss(o.robust_logits, y) > 0.0);
      rep.robust_losses.push_back(o.robust_loss);
      rep.loss += o.robust_loss / n;
      rep.robust_logits.push_back(std::move(o.robust_logits));
    }
    rep.clean_logits.push_back(std::move(o.clean_logits));
  }
}

inline Network reduce_grads(const Network& net, const std::vector<ExampleOut>& outs) {
  Network g = zeros_like(net);
  for (const auto& o : outs)
    for (std::size_t j = 0; j < net.depth(); ++j) {
      g.layers()[j].weight() += o.gw[j];
      g.layers()[j].bias() += o.gb[j];
    }
  return g;
}

inline void check_batch(const Network& net, const Dataset& data, std::span<const std::size_t> batch) {
  if (batch.empty()) throw InvalidArgument("batch is empty");
  if (data.dim() != net.input_dim()) throw DimensionError("dataset dimension != network input_dim", 0);
  for (std::size_t i : batch)
    if (i >= data.size()) throw InvalidArgument("batch index out of range");
}

}  // namespace detail

/// Mean robust loss L(-J(x, g(e_y 1^T - I)), y) over the batch, evaluated with
/// the dual network's backward pass.
inline RobustLossReport robust_loss(const Network& net, const Dataset& data, std::span<const std::size_t> batch,
                                    double eps, LossKind kind = LossKind::CrossEntropy, DualNorm q = DualNorm::L1,
                                    int threads = 1) {
  detail::check_batch(net, data, batch);
  std::vector<detail::ExampleOut> outs(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t k) {
    const Vector x = data.example(batch[k]);
    const int y = data.labels[batch[k]];
    auto& o = outs[k];
    o.clean_logits = forward(net, x);
    o.clean_loss = loss_value(kind, o.clean_logits, y);
    o.robust_logits = robust_logits(net, x, y, eps, q);
    o.robust_loss = loss_value(kind, o.robust_logits, y);
  });
  RobustLossReport rep;
  detail::fill_report(data, batch, outs, rep, true);
  return rep;
}

struct GradResult {
  Network grad;  // same layout as the network
  RobustLossReport report;
};

/// Gradient of the mean robust loss with respect to every weight and bias.
/// Index sets are held fixed; the slopes u/(u-l) and all bounds are differentiated.
inline GradResult robust_grad(const Network& net, const Dataset& data, std::span<const std::size_t> batch, double eps,
                              LossKind kind = LossKind::CrossEntropy, DualNorm q = DualNorm::L1, int threads = 1) {
  detail::check_batch(net, data, batch);
  check_eps(eps);
  std::vector<detail::ExampleOut> outs(batch.size());
  const double w = 1.0 / static_cast<double>(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t k) {
    outs[k] = detail::robust_example(net, data.example(batch[k]), data.labels[batch[k]], eps, kind, q, w, true);
  });
  GradResult r{detail::reduce_grads(net, outs), {}};
  detail::fill_report(data, batch, outs, r.report, true);
  return r;
}

/// Gradient of the mean clean loss.
inline GradResult clean_grad(const Network& net, const Dataset& data, std::span<const std::size_t> batch,
                             LossKind kind = LossKind::CrossEntropy, int threads = 1) {
  detail::check_batch(net, data, batch);
  std::vector<detail::ExampleOut> outs(batch.size());
  const double w = 1.0 / static_cast<double>(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t k) {
    outs[k] = detail::clean_example(net, data.example(batch[k]), data.labels[batch[k]], kind, w);
  });
  GradResult r{detail::reduce_grads(net, outs), {}};
  detail::fill_report(data, batch, outs, r.report, false);
  return r;
}

// ---------------------------------------------------------------------------
// Optimizers

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct SgdConfig {
  double lr = 0.01;
};

using OptimizerConfig = std::variant<AdamConfig, SgdConfig>;

class Optimizer {
 public:
  Optimizer(const Network& net, OptimizerConfig cfg) : cfg_(cfg), m_(zeros_like(net)), v_(zeros_like(net)) {}

  void step(Network& net, const Network& grad) {
    ++t_;
    if (const auto* sgd = std::get_if<SgdConfig>(&cfg_)) {
      for (std::size_t j = 0; j < net.depth(); ++j) {
        net.layers()[j].weight() -= sgd->lr * grad.layer(j).weight();
        net.layers()[j].bias() -= sgd->lr * grad.layer(j).bias();
      }
      return;
    }
    const auto& a = std::get<AdamConfig>(cfg_);
    const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(t_));
    auto update = [&](auto& param, const auto& g, auto& m, auto& v) {
      m = a.beta1 * m + (1.0 - a.beta1) * g;
      v = a.beta2 * v + (1.0 - a.beta2) * g.cwiseAbs2();
      param.array() -= a.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + a.eps);
    };
    for (std::size_t j = 0; j < net.depth(); ++j) {
      update(net.layers()[j].weight(), grad.layer(j).weight(), m_.layers()[j].weight(), v_.layers()[j].weight());
      update(net.layers()[j].bias(), grad.layer(j).bias(), m_.layers()[j].bias(), v_.layers()[j].bias());
    }
  }

 private:
  OptimizerConfig cfg_;
  Network m_, v_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop

/// Linear ramp from `start` to `end` over the first `ramp_epochs` epochs, then constant.
struct EpsSchedule {
  double start = 0.1;
  double end = 0.1;
  int ramp_epochs = 0;

  double at(int epoch) const {
    if (ramp_epochs <= 0 || epoch >= ramp_epochs) return end;
    return start + (end - start) * static_cast<double>(epoch) / static_cast<double>(ramp_epochs);
  }
};

struct EpochMetrics {
  int epoch = 0;
  double eps = 0.0;
  double clean_loss = 0.0;
  double clean_err = 0.0;
  double robust_loss = 0.0;
  double robust_err_bound = 0.0;
};

struct BatchRecord {
  int epoch = 0;
  std::size_t batch = 0;
  double eps = 0.0;
  const RobustLossReport* report = nullptr;
};

struct TrainConfig {
  bool robust = true;
  EpsSchedule eps{0.1, 0.1, 0};
  OptimizerConfig optimizer = AdamConfig{};
  std::size_t batch_size = 50;  // 0 means full batch
  int epochs = 1;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::CrossEntropy;
  DualNorm norm = DualNorm::L1;
  int threads = 1;
  bool shuffle = true;
  /// Stop (without applying the step) once a full-batch epoch certifies every example.
  bool stop_when_certified = false;
  /// For standard training, also evaluate the robust bound each batch.
  bool track_robust = true;
  std::function<void(const BatchRecord&)> on_batch;
  std::function<void(const EpochMetrics&)> on_epoch;
  /// Called with the network after every completed epoch.
  std::function<void(int, const Network&)> on_checkpoint;

  void validate() const {
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
    if (eps.ramp_epochs < 0 || eps.ramp_epochs > epochs) throw InvalidArgument("ramp_epochs must be in [0, epochs]");
    if (robust && !(eps.end > 0.0)) throw InvalidArgument("eps target must be positive");
    if (robust && eps.ramp_epochs > 0 && !(eps.start > 0.0 && eps.start <= eps.end))
      throw InvalidArgument("eps schedule needs 0 < start <= target");
    if (loss == LossKind::ZeroOne) throw InvalidArgument("cannot train on the zero_one loss");
  }
};

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

struct TrainResult {
  Network net;
  std::vector<EpochMetrics> metrics;
  std::size_t steps = 0;
  bool stopped_early = false;
};

inline std::string metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::ostringstream out;
  out << "epoch,eps,clean_loss,clean_err,robust_loss,robust_err_bound\n";
  for (const auto& r : rows)
    out << r.epoch << ',' << format_double(r.eps) << ',' << format_double(r.clean_loss) << ','
        << format_double(r.clean_err) << ',' << format_double(r.robust_loss) << ',' << format_double(r.robust_err_bound)
        << '\n';
  return out.str();
}

inline TrainResult train(Network net, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  data.validate();
  if (data.dim() != net.input_dim()) throw DimensionError("dataset dimension != network input_dim", 0);
  Rng shuffle_rng = substream(cfg.seed, "shuffle");
  Optimizer opt(net, cfg.optimizer);
  TrainResult result;
  std::vector<std::size_t> order = all_indices(data);
  const std::size_t bs = cfg.batch_size == 0 ? data.size() : std::min(cfg.batch_size, data.size());
  const bool full_batch = bs == data.size();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double eps = cfg.eps.at(epoch);
    if (cfg.shuffle && !full_batch) std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochMetrics m;
    m.epoch = epoch;
    m.eps = eps;
    const bool have_robust = cfg.robust || cfg.track_robust;
    std::size_t seen = 0;
    bool stop = false;
    for (std::size_t b = 0, start = 0; start < order.size(); ++b, start += bs) {
      const std::span<const std::size_t> batch(order.data() + start, std::min(bs, order.size() - start));
      GradResult g = cfg.robust ? robust_grad(net, data, batch, eps, cfg.loss, cfg.norm, cfg.threads)
                                : clean_grad(net, data, batch, cfg.loss, cfg.threads);
      if (!cfg.robust && cfg.track_robust) {
        RobustLossReport r = robust_loss(net, data, batch, eps, cfg.loss, cfg.norm, cfg.threads);
        g.report.robust_logits = std::move(r.robust_logits);
        g.report.robust_err = std::move(r.robust_err);
        g.report.robust_losses = std::move(r.robust_losses);
        g.report.loss = r.loss;
      }
      const auto& rep = g.report;
      const double objective = cfg.robust ? rep.loss : rep.clean_loss;
      if (!std::isfinite(objective))
        throw TrainingDiverged("loss is not finite at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(b));
      const double n = static_cast<double>(batch.size());
      m.clean_loss += rep.clean_loss * n;
      m.clean_err += rep.clean_error_rate() * n;
      if (have_robust) {
        m.robust_loss += rep.loss * n;
        m.robust_err_bound += rep.robust_error_rate() * n;
      }
      seen += batch.size();
      if (cfg.on_batch) cfg.on_batch(BatchRecord{epoch, b, eps, &rep});
      if (cfg.stop_when_certified && cfg.robust && full_batch && rep.robust_error_rate() == 0.0) {
        stop = true;
        break;
      }
      opt.step(net, g.grad);
      ++result.steps;
    }
    const double total = static_cast<double>(seen);
    m.clean_loss /= total;
    m.clean_err /= total;
    if (have_robust) {
      m.robust_loss /= total;
      m.robust_err_bound /= total;
    } else {
      m.robust_loss = m.robust_err_bound = std::numeric_limits<double>::quiet_NaN();
    }
    result.metrics.push_back(m);
    if (cfg.on_epoch) cfg.on_epoch(m);
    if (cfg.on_checkpoint) cfg.on_checkpoint(epoch, net);
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }
  result.net = std::move(net);
  return result;
}

}  // namespace robustcert

#endif  // ROBUSTCERT_TRAINING_HPP
