// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails. Every check computes its reference values on
// the test side (sampling, closed forms, finite differences, the exact LP).
#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <string>
#include <vector>

#include "../helpers.hpp"

using namespace robustcert;

namespace {

int failures = 0;

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

void report(const char* name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("%s %s: %s\n", pass ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Certified examples attacked with PGD (40 steps, 10 restarts), pooled over every suite.
struct SoundnessLog {
  std::size_t certified = 0;
  std::size_t flips = 0;
  std::vector<std::string> suites;
} sound;

void attack_if_certified(const Network& net, const Vector& x, int y, double eps, const Domain& dom,
                         std::uint64_t seed) {
  if (!certify_label(net, x, y, eps).certified) return;
  ++sound.certified;
  Rng rng = substream(seed, "acceptance-pgd");
  if (pgd(net, x, y, eps, PgdOptions{}, rng, dom).success) ++sound.flips;
}

Vector predicted_margin(Eigen::Index y, Eigen::Index other, Eigen::Index k) {
  Vector c = Vector::Zero(k);
  c(y) = 1.0;
  c(other) = -1.0;
  return c;
}

double sampled_min(const Network& net, const Vector& x, double eps, const Vector& c, int samples,
                   std::mt19937_64& rng) {
  double best = std::numeric_limits<double>::infinity();
  for (int s = 0; s < samples; ++s) best = std::min(best, c.dot(testutil::reference_forward(net, testutil::sample_linf(x, eps, rng))));
  return best;
}

bool nothing_spans(const PreActBounds& b) {
  return std::all_of(b.partition.begin(), b.partition.end(), [](const LayerPartition& p) { return p.span.empty(); });
}

// ---------------------------------------------------------------------------

Network two_d_training() {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset data = gen_2d(1);
  Rng rng = substream(1, "init");
  TrainConfig cfg;
  cfg.eps = {0.08, 0.08, 0};
  cfg.optimizer = AdamConfig{1e-3};
  cfg.batch_size = 0;
  cfg.epochs = 5000;
  cfg.seed = 1;
  cfg.stop_when_certified = true;
  const TrainResult r = train(init_mlp({2, 100, 100, 100, 100, 2}, rng, InitLaw::ZeroBias), data, cfg);
  const double secs = seconds_since(t0);

  std::size_t certified = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    certified += certify_label(r.net, data.example(i), data.labels[i], 0.08).certified;
  report("2d-robust-training", certified == data.size() && r.steps <= 5000 && secs < 120.0,
         fmt("%zu/%zu points certified at eps 0.08 after %zu full-batch Adam steps, %.1f s", certified, data.size(),
             r.steps, secs));

  for (std::size_t i = 0; i < data.size(); ++i) attack_if_certified(r.net, data.example(i), data.labels[i], 0.08, data.domain, i);
  sound.suites.push_back("2d");
  return r.net;
}

void newton_search(const Network& net) {
  const Dataset data = gen_2d(1);
  int reach = 0, bracketed = 0, worst_iter = 0, worst_total = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector x = data.example(i);
    const MaxEpsResult m = max_certified_eps(net, x);
    reach += m.eps >= 0.08;
    worst_iter = std::max(worst_iter, m.iterations);
    worst_total = std::max(worst_total, m.iterations + m.bracket_evaluations);
    const bool below = certify_label(net, x, m.predicted, m.eps * (1 - 2e-3)).certified;
    const bool above = certify_label(net, x, m.predicted, m.eps * (1 + 2e-3)).certified;
    bracketed += m.eps > 0.0 && below && !above && !m.capped;
  }
  report("newton-eps-search", reach >= 10 && bracketed == static_cast<int>(data.size()) && worst_iter <= 15,
         fmt("%d/12 points reach 0.08, %d/12 bracketed at +-0.2%%, max %d Newton iterations (%d with bracketing)", reach,
             bracketed, worst_iter, worst_total));
}

void linear_closed_form() {
  std::mt19937_64 rng(41);
  double worst_j = 0.0, worst_eps = 0.0;
  for (int t = 0; t < 20; ++t) {
    Matrix W(4, 5);
    for (Eigen::Index r = 0; r < 4; ++r) W.row(r) = testutil::uniform_vector(5, -1, 1, rng).transpose();
    const Vector b = testutil::uniform_vector(4, -0.5, 0.5, rng);
    const Vector x = testutil::uniform_vector(5, 0, 1, rng);
    const Vector c = testutil::uniform_vector(4, -1, 1, rng);
    const Network net({AffineLayer::dense(W, b)});
    const double eps = 0.1;

    const double closed = c.dot(W * x + b) - eps * (W.transpose() * c).lpNorm<1>();
    worst_j = std::max(worst_j, std::abs(dual_bound(net, x, eps, Matrix(c))(0) - closed));

    const Vector z = W * x + b;
    Eigen::Index y = 0;
    z.maxCoeff(&y);
    double ratio = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < 4; ++i)
      if (i != y) ratio = std::min(ratio, (z(y) - z(i)) / (W.row(y) - W.row(i)).lpNorm<1>());
    NewtonOptions opt;
    opt.tol = 1e-9;
    worst_eps = std::max(worst_eps, std::abs(max_certified_eps(net, x, DualNorm::L1, opt).eps - ratio));
  }
  report("linear-closed-form", worst_j <= 1e-10 && worst_eps <= 1e-6,
         fmt("20 one-layer nets: max |J - closed form| %.2e, max |eps* - margin ratio| %.2e", worst_j, worst_eps));
}

double robust_fd_check(const Network& net, const Dataset& d, double eps) {
  const auto idx = all_indices(d);
  const GradResult g = robust_grad(net, d, idx, eps);
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t j = 0; j < net.depth(); ++j) {
    for (int part = 0; part < 2; ++part) {
      const Eigen::Index n = part == 0 ? net.layer(j).weight().size() : net.layer(j).bias().size();
      for (Eigen::Index k = 0; k < n; ++k) {
        Network plus = net, minus = net;
        double* p = part == 0 ? plus.layers()[j].weight().data() : plus.layers()[j].bias().data();
        double* m = part == 0 ? minus.layers()[j].weight().data() : minus.layers()[j].bias().data();
        p[k] += h;
        m[k] -= h;
        const double fd = (robust_loss(plus, d, idx, eps).loss - robust_loss(minus, d, idx, eps).loss) / (2 * h);
        const double an = part == 0 ? g.grad.layer(j).weight().data()[k] : g.grad.layer(j).bias().data()[k];
        worst = std::max(worst, testutil::rel_err(fd, an));
      }
    }
  }
  return worst;
}

Dataset random_dataset(Eigen::Index dim, int classes, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Dataset d;
  d.inputs.resize(static_cast<Eigen::Index>(n), dim);
  for (std::size_t i = 0; i < n; ++i) {
    d.inputs.row(static_cast<Eigen::Index>(i)) = testutil::uniform_vector(dim, 0, 1, rng).transpose();
    d.labels.push_back(static_cast<int>(rng() % static_cast<unsigned>(classes)));
  }
  d.num_classes = classes;
  return d;
}

void gradient_check() {
  const double dense = robust_fd_check(testutil::random_mlp({3, 8, 8, 3}, 51), random_dataset(3, 3, 6, 52), 0.1);
  const double conv = robust_fd_check(testutil::small_conv_net(53), random_dataset(36, 3, 4, 54), 0.05);
  report("robust-gradient-fd", dense < 1e-4 && conv < 1e-4,
         fmt("every parameter, step 1e-5: max relative error dense %.2e, conv %.2e", dense, conv));
}

void bound_soundness() {
  std::mt19937_64 rng(61);
  std::size_t violations = 0, not_contained = 0, first_differs = 0;
  double worst_excess = 0.0;
  for (int t = 0; t < 20; ++t) {
    const Network net = testutil::random_mlp({4, 20, 20, 20, 3}, 600 + t);
    const Vector x = testutil::uniform_vector(4, 0, 1, rng);
    const double eps = 0.1;
    const PreActBounds b = compute_bounds(net, x, eps);
    const PreActBounds nb = naive_layerwise_bounds(net, x, eps);
    for (int s = 0; s < 10000; ++s) {
      std::vector<Vector> pre;
      testutil::reference_forward(net, testutil::sample_linf(x, eps, rng), &pre);
      for (std::size_t l = 0; l < pre.size(); ++l)
        violations += ((pre[l] - b.lower[l]).array() < -1e-9).any() || ((b.upper[l] - pre[l]).array() < -1e-9).any();
    }
    // Both methods agree exactly on a layer whose inputs never span, so only rounding separates them there.
    for (std::size_t l = 0; l < net.depth(); ++l) {
      const double excess = std::max((nb.lower[l] - b.lower[l]).maxCoeff(), (b.upper[l] - nb.upper[l]).maxCoeff());
      worst_excess = std::max(worst_excess, excess);
      not_contained += excess > 1e-9;
    }
    first_differs += b.lower[0] != nb.lower[0] || b.upper[0] != nb.upper[0];
    const Eigen::Index y = static_cast<Eigen::Index>(argmax(forward(net, x)));
    attack_if_certified(net, x, static_cast<int>(y), eps, std::nullopt, 600 + t);
  }
  sound.suites.push_back("bounds");
  report("bound-soundness-and-dominance", violations == 0 && not_contained == 0 && first_differs == 0,
         fmt("20 nets x 1e4 samples: %zu interval violations; %zu layers outside naive (max excess %.1e); %zu first "
             "layers differ",
             violations, not_contained, worst_excess, first_differs));
}

void sandwich() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(31);
  std::size_t instances = 0, dual_above = 0, lp_above = 0, exact_checked = 0, exact_failed = 0;
  double worst_exact = 0.0;
  for (int t = 0; t < 50; ++t) {
    std::vector<Eigen::Index> widths{2};
    const int hidden = 1 + static_cast<int>(rng() % 3);
    for (int h = 0; h < hidden; ++h) widths.push_back(2 + static_cast<Eigen::Index>(rng() % 9));
    widths.push_back(2);
    const Network net = testutil::random_mlp(widths, 300 + t);
    const Vector x = testutil::uniform_vector(2, 0, 1, rng);
    const Vector c = predicted_margin(0, 1, 2);
    for (double eps : {0.05, 0.1, 0.25}) {
      const PreActBounds b = compute_bounds(net, x, eps);
      const double J = dual_objective(net, x, eps, dual_backward(net, b, Matrix(c)), b, DualNorm::L1)(0);
      const double lp = lp_bound(net, x, eps, c, &b).value;
      const double truth = sampled_min(net, x, eps, c, 10000, rng);
      ++instances;
      dual_above += J > lp + 1e-6;
      lp_above += lp > truth + 1e-6;
      if (nothing_spans(b)) {
        ++exact_checked;
        worst_exact = std::max(worst_exact, std::abs(J - lp));
        exact_failed += std::abs(J - lp) > 1e-6;
      }
      const Eigen::Index y = static_cast<Eigen::Index>(argmax(forward(net, x)));
      attack_if_certified(net, x, static_cast<int>(y), eps, std::nullopt, 300 + t);
    }
  }
  sound.suites.push_back("sandwich");
  const double secs = seconds_since(t0);
  report("dual-lp-truth-sandwich", dual_above == 0 && lp_above == 0 && exact_failed == 0 && secs < 300.0,
         fmt("%zu instances: %zu with J > LP, %zu with LP > sampled min; %zu without spanning units, max |J - LP| %.1e; "
             "%.1f s",
             instances, dual_above, lp_above, exact_checked, worst_exact, secs));
}

void tightness_trend() {
  const std::vector<double> eps_list{0.05, 0.1, 0.25};
  const int nets = 10;
  std::vector<double> gap(eps_list.size(), 0.0), naive_w(eps_list.size(), 0.0), dual_w(eps_list.size(), 0.0);
  const Vector x = Vector::Constant(2, 0.5);
  const Vector c = predicted_margin(0, 1, 2);
  for (int s = 0; s < nets; ++s) {
    const Network net = testutil::random_mlp({2, 100, 100, 100, 100, 2}, 700 + s);
    for (std::size_t e = 0; e < eps_list.size(); ++e) {
      const double eps = eps_list[e];
      const PreActBounds b = compute_bounds(net, x, eps);
      const PreActBounds nb = naive_layerwise_bounds(net, x, eps);
      const double J = dual_objective(net, x, eps, dual_backward(net, b, Matrix(c)), b, DualNorm::L1)(0);
      gap[e] += (lp_bound(net, x, eps, c, &b).value - J) / nets;
      naive_w[e] += (nb.upper.back() - nb.lower.back()).sum();
      dual_w[e] += (b.upper.back() - b.lower.back()).sum();
      const Eigen::Index y = static_cast<Eigen::Index>(argmax(forward(net, x)));
      attack_if_certified(net, x, static_cast<int>(y), eps, std::nullopt, 700 + s);
    }
  }
  sound.suites.push_back("trend");
  bool monotone = true, wide = true;
  std::string detail = "2-100-100-100-100-2 random nets, mean LP - J gap";
  for (std::size_t e = 0; e < eps_list.size(); ++e) {
    if (e > 0) monotone = monotone && gap[e] >= gap[e - 1];
    wide = wide && naive_w[e] > 10.0 * dual_w[e];
    detail += fmt(" %.4f (eps %.2f, naive/dual width %.0fx)", gap[e], eps_list[e], naive_w[e] / dual_w[e]);
  }
  report("tightness-vs-eps-trend", monotone && wide, detail);
}

void alpha_dominance() {
  std::mt19937_64 rng(71);
  int trailing = 0;
  double worst = 0.0;
  const int instances = 20;
  for (int t = 0; t < instances; ++t) {
    const Network net = testutil::random_mlp({2, 10, 10, 2}, 800 + t);
    const Vector x = testutil::uniform_vector(2, 0, 1, rng);
    const double eps = 0.25;
    const Eigen::Index y = static_cast<Eigen::Index>(argmax(forward(net, x)));
    const Matrix C(predicted_margin(y, 1 - y, 2));
    const PreActBounds b = compute_bounds(net, x, eps);
    const double J0 = dual_objective(net, x, eps, dual_backward(net, b, C), b, DualNorm::L1)(0);
    double best = -std::numeric_limits<double>::infinity();
    for (int d = 0; d < 100; ++d) {
      AlphaOverride a;
      for (std::size_t l = 0; l + 1 < net.depth(); ++l) a.push_back(testutil::uniform_vector(b.lower[l].size(), 0, 1, rng));
      best = std::max(best, dual_objective(net, x, eps, dual_backward(net, b, C, a), b, DualNorm::L1)(0));
    }
    trailing += J0 < best - 1e-6;
    worst = std::max(worst, best - J0);
  }
  report("alpha-dominance", trailing == 0,
         fmt("%d/%d instances where a random alpha beats the default by > 1e-6 (largest margin %.3e)", trailing,
             instances, worst));
}

void mnist_desk_scale() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string dir = ROBUSTCERT_DATA_DIR "/mnist-5k/";
  const Dataset train_set =
      load_idx(dir + "train-images-idx3-ubyte.gz", dir + "train-labels-idx1-ubyte.gz", 2000);
  const Dataset test_set = load_idx(dir + "t10k-images-idx3-ubyte.gz", dir + "t10k-labels-idx1-ubyte.gz", 500);
  Rng rng = substream(0, "init");
  const Network init = init_network(conv_classifier_specs(), rng, InitLaw::ZeroBias);

  std::size_t batches = 0, loss_order_violations = 0;
  TrainConfig cfg;
  cfg.eps = {0.05, 0.1, 3};
  cfg.optimizer = AdamConfig{1e-3};
  cfg.batch_size = 50;
  cfg.epochs = 5;
  cfg.seed = 0;
  cfg.on_batch = [&](const BatchRecord& r) {
    ++batches;
    bool ok = r.report->loss >= r.report->clean_loss - 1e-12;
    for (std::size_t i = 0; i < r.report->size(); ++i)
      ok = ok && r.report->robust_losses[i] >= r.report->clean_losses[i] - 1e-12;
    loss_order_violations += !ok;
  };
  const TrainResult r = train(init, train_set, cfg);

  AttackOptions opt;
  opt.eps = 0.1;
  const auto rows = attack_dataset(r.net, test_set, opt);
  const AttackSummary s = summarize(rows, opt.eps);
  for (const auto& row : rows) {
    sound.certified += row.certified;
    sound.flips += row.certified && row.pgd_success;
  }
  sound.suites.push_back("mnist");
  const double secs = seconds_since(t0);
  const bool ordered = s.test_error <= s.pgd_error && s.pgd_error <= s.robust_error_bound;
  report("mnist-desk-scale",
         ordered && s.robust_error_bound < 1.0 && loss_order_violations == 0 && batches == 200 && secs < 1800.0,
         fmt("500 test at eps 0.1: clean %.3f <= PGD %.3f <= robust bound %.3f; %zu/%zu batches with robust < clean "
             "loss; %.0f s",
             s.test_error, s.pgd_error, s.robust_error_bound, loss_order_violations, batches, secs));
}

}  // namespace

// With arguments, runs only the named groups: 2d, linear, grad, bounds,
// sandwich, trend, alpha, mnist.
int main(int argc, char** argv) {
  const std::vector<std::string> only(argv + 1, argv + argc);
  auto want = [&](const char* g) { return only.empty() || std::find(only.begin(), only.end(), g) != only.end(); };
  if (want("2d")) newton_search(two_d_training());
  if (want("linear")) linear_closed_form();
  if (want("grad")) gradient_check();
  if (want("bounds")) bound_soundness();
  if (want("sandwich")) sandwich();
  if (want("trend")) tightness_trend();
  if (want("alpha")) alpha_dominance();
  if (want("mnist")) mnist_desk_scale();

  std::string suites;
  for (const auto& s : sound.suites) suites += (suites.empty() ? "" : ",") + s;
  report("certificate-soundness", sound.flips == 0 && sound.certified > 0,
         fmt("%zu certified examples across %s, %zu flipped by PGD", sound.certified, suites.c_str(), sound.flips));

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
