// Robust training on twelve random 2D points, then certification and the
// largest certified radius per point.
#include <cstdio>
#include <cstdlib>

#include "robustcert/robustcert.hpp"

using namespace robustcert;

int main(int argc, char** argv) {
  const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 1;
  const double eps = 0.08;
  const Dataset data = gen_2d(seed);
  Rng rng = substream(seed, "init");
  const Network init = init_mlp({2, 100, 100, 100, 100, 2}, rng, InitLaw::ZeroBias);

  TrainConfig cfg;
  cfg.eps = {eps, eps, 0};
  cfg.epochs = 5000;
  cfg.batch_size = 0;
  cfg.seed = seed;
  cfg.stop_when_certified = true;
  cfg.on_epoch = [](const EpochMetrics& m) {
    if (m.epoch % 500 == 0)
      std::printf("step %5d  robust loss %.4f  robust error %.3f\n", m.epoch, m.robust_loss, m.robust_err_bound);
  };
  const TrainResult r = train(init, data, cfg);
  std::printf("%zu steps, robust error %.3f\n\n", r.steps, r.metrics.back().robust_err_bound);

  std::printf("  x0      x1     label  certified  max eps\n");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Vector x = data.example(i);
    const Certificate c = certify_label(r.net, x, data.labels[i], eps);
    const MaxEpsResult m = max_certified_eps(r.net, x);
    std::printf("%.3f  %.3f  %d      %-9s  %.4f\n", x(0), x(1), data.labels[i], c.certified ? "yes" : "no", m.eps);
  }
  return 0;
}
