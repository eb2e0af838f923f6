#include <gtest/gtest.h>

#include "helpers.hpp"

using namespace robustcert;

TEST(InputGradient, MatchesFiniteDifferences) {
  const Network net = testutil::random_mlp({3, 10, 10, 4}, 100);
  const Vector x{{0.2, 0.5, 0.9}};
  const auto [l, g] = input_loss_gradient(net, x, 2);
  EXPECT_NEAR(l, loss_value(LossKind::CrossEntropy, forward(net, x), 2), 1e-12);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < 3; ++i) {
    Vector xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    const double fd = (loss_value(LossKind::CrossEntropy, forward(net, xp), 2) -
                       loss_value(LossKind::CrossEntropy, forward(net, xm), 2)) / (2 * h);
    EXPECT_NEAR(g(i), fd, 1e-6);
  }
}

TEST(Project, ClipsToBallThenDomain) {
  const Vector x{{0.5, 0.95}};
  const Domain dom = std::make_pair(Vector::Zero(2), Vector::Ones(2));
  const Vector p = project(x, 0.1, Vector{{2.0, 2.0}}, dom);
  EXPECT_DOUBLE_EQ(p(0), 0.6);
  EXPECT_DOUBLE_EQ(p(1), 1.0);
}

TEST(Fgsm, MovesEveryCoordinateByEps) {
  const Network net = testutil::random_mlp({4, 10, 3}, 101);
  const Vector x = Vector::Constant(4, 0.5);
  const AttackResult r = fgsm(net, x, 0, 0.1);
  const auto [l, g] = input_loss_gradient(net, x, 0);
  for (Eigen::Index i = 0; i < 4; ++i)
    if (g(i) != 0.0) {
      EXPECT_NEAR(std::abs(r.adversarial(i) - x(i)), 0.1, 1e-12);
    }
}

TEST(Pgd, OneFullStepFromTheCenterIsFgsm) {
  const Network net = testutil::random_mlp({3, 12, 3}, 102);
  const Vector x{{0.3, 0.3, 0.3}};
  PgdOptions opt;
  opt.steps = 1;
  opt.step_size = 0.05;
  opt.restarts = 1;
  opt.random_init = false;
  Rng rng = substream(0, "t");
  const AttackResult p = pgd(net, x, 1, 0.05, opt, rng);
  const AttackResult f = fgsm(net, x, 1, 0.05);
  EXPECT_EQ(p.adversarial, f.adversarial);
}

TEST(Pgd, StaysInsideTheBallAndDomain) {
  const Network net = testutil::random_mlp({2, 16, 16, 2}, 103);
  const Domain dom = std::make_pair(Vector::Zero(2), Vector::Ones(2));
  Rng rng = substream(1, "t");
  std::mt19937_64 xr(2);
  for (int t = 0; t < 20; ++t) {
    const Vector x = testutil::uniform_vector(2, 0, 1, xr);
    const AttackResult r = pgd(net, x, 0, 0.1, PgdOptions{}, rng, dom);
    EXPECT_LE((r.adversarial - x).lpNorm<Eigen::Infinity>(), 0.1 + 1e-15);
    EXPECT_GE(r.adversarial.minCoeff(), 0.0);
    EXPECT_LE(r.adversarial.maxCoeff(), 1.0);
  }
}

TEST(Pgd, FindsTheFlipOnALinearBoundary) {
  // f = (x0, 0.5): class 0 iff x0 > 0.5. From x0 = 0.55 an eps of 0.1 crosses.
  const Network net({AffineLayer::dense(Matrix{{1.0}, {0.0}}, Vector{{0.0, 0.5}})});
  Rng rng = substream(2, "t");
  EXPECT_TRUE(pgd(net, Vector{{0.55}}, 0, 0.1, PgdOptions{}, rng).success);
  EXPECT_FALSE(pgd(net, Vector{{0.75}}, 0, 0.1, PgdOptions{}, rng).success);
}

TEST(Pgd, RejectsBadOptions) {
  const Network net = testutil::random_mlp({2, 3, 2}, 104);
  Rng rng = substream(3, "t");
  PgdOptions o;
  o.steps = 0;
  EXPECT_THROW(pgd(net, Vector::Zero(2), 0, 0.1, o, rng), InvalidArgument);
}

TEST(AttackDataset, CertifiedExamplesAreNeverAttacked) {
  const Network net = testutil::random_mlp({2, 20, 20, 2}, 105);
  Dataset d = gen_2d(6, 12);
  for (std::size_t i = 0; i < d.size(); ++i) d.labels[i] = static_cast<int>(argmax(forward(net, d.example(i))));
  AttackOptions opt;
  opt.eps = 0.02;
  opt.pgd.restarts = 2;
  const auto rows = attack_dataset(net, d, opt);
  const AttackSummary s = summarize(rows, opt.eps);
  EXPECT_EQ(s.certified_but_attacked, 0u);
  EXPECT_EQ(s.test_error, 0.0);
  EXPECT_LE(s.pgd_error, s.robust_error_bound);
}
