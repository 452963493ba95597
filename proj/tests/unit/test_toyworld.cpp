#include <doctest.h>

#include "dmd/figure3.hpp"

#include <algorithm>
#include <cmath>

using namespace dmd;

namespace {

GaussianMixture<double> symmetric(double m, double s) {
  return GaussianMixture<double>({{0.5, RowVector<double>{{-m, 0.0}}, s, 0}, {0.5, RowVector<double>{{m, 0.0}}, s, 1}});
}

}  // namespace

TEST_CASE("mixture construction checks") {
  CHECK_THROWS_AS(GaussianMixture<double>(std::vector<MixtureComponent<double>>{}), DomainError);
  CHECK_THROWS_AS(GaussianMixture<double>({{0.4, RowVector<double>{{0.0}}, 1.0, -1}}), DomainError);
  CHECK_THROWS_AS(GaussianMixture<double>({{1.0, RowVector<double>{{0.0}}, 0.0, -1}}), DomainError);
  CHECK_THROWS_AS(GaussianMixture<double>({{0.5, RowVector<double>{{0.0}}, 1.0, -1},
                                           {0.5, RowVector<double>{{0.0, 1.0}}, 1.0, -1}}),
                  DomainError);
}

TEST_CASE("single component sample mean within 3 s / sqrt(n)") {
  const double s = 1.7;
  auto mix = GaussianMixture<double>::gaussian(RowVector<double>{{2.0, -1.0}}, s);
  Rng rng(4);
  const int n = 20000;
  const MatrixXd x = mix.sample(n, rng);
  const RowVector<double> mean = x.colwise().mean();
  CHECK(std::abs(mean(0) - 2.0) < 3 * s / std::sqrt(double(n)));
  CHECK(std::abs(mean(1) + 1.0) < 3 * s / std::sqrt(double(n)));
}

TEST_CASE("zero-weight component is never drawn") {
  GaussianMixture<double> mix({{1.0, RowVector<double>{{0.0}}, 1.0, -1}, {0.0, RowVector<double>{{100.0}}, 1.0, -1}});
  Rng rng(5);
  std::vector<int> which;
  mix.sample(5000, rng, &which);
  for (int k : which) CHECK(k == 0);
}

TEST_CASE("two-mode component counts pass a binomial test") {
  const auto mix = two_mode_mixture();
  Rng rng(6);
  const int n = 10000;
  std::vector<int> which;
  mix.sample(n, rng, &which);
  const double ones = double(std::count(which.begin(), which.end(), 1));
  // two-sided alpha = 0.01: |k - n/2| < 2.576 sqrt(n/4)
  CHECK(std::abs(ones - n / 2.0) < 2.576 * std::sqrt(n / 4.0));
}

TEST_CASE("diffused score: symmetry and single-component closed form") {
  const auto s = NoiseSchedule<double>::build(ScheduleKind::vp, 1000, 0.002, 80);
  const auto mix = symmetric(3.0, 0.7);
  for (int t : {0, 250, 999}) CHECK(diffused_score(mix, s, MatrixXd(MatrixXd::Zero(1, 2)), t).cwiseAbs().maxCoeff() < 1e-15);

  const double sd = 0.8;
  auto single = GaussianMixture<double>::gaussian(RowVector<double>{{1.0, -2.0}}, sd);
  Rng rng(7);
  const MatrixXd x = standard_normal<double>(10, 2, rng);
  for (int t : {10, 500, 990}) {
    const double a = s.alpha(t), sg = s.sigma(t);
    const MatrixXd expect = -(x.rowwise() - a * RowVector<double>{{1.0, -2.0}}) / (a * a * sd * sd + sg * sg);
    CHECK((diffused_score(single, s, x, t) - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("diffused score matches finite differences of the log density") {
  const auto s = NoiseSchedule<double>::build(ScheduleKind::vp, 1000, 0.002, 80);
  GaussianMixture<double> mix({{0.3, RowVector<double>{{-1.0, 2.0}}, 0.6, -1},
                               {0.5, RowVector<double>{{2.0, 0.5}}, 1.1, -1},
                               {0.2, RowVector<double>{{0.0, -3.0}}, 0.4, -1}});
  Rng rng(8);
  const MatrixXd x = 2.0 * standard_normal<double>(20, 2, rng);
  for (int t : {50, 300, 800}) {
    const double a = s.alpha(t), sg = s.sigma(t);
    const MatrixXd score = diffused_score(mix, s, x, t);
    const double h = 1e-5;
    MatrixXd fd(x.rows(), 2);
    for (int d = 0; d < 2; ++d) {
      MatrixXd xp = x, xm = x;
      xp.col(d).array() += h;
      xm.col(d).array() -= h;
      fd.col(d) = (mix.log_density(xp, a, sg) - mix.log_density(xm, a, sg)) / (2 * h);
    }
    CHECK((score - fd).norm() / score.norm() < 1e-6);
  }
}

TEST_CASE("diffused score approaches the data score as t -> 0") {
  const auto s = NoiseSchedule<double>::build(ScheduleKind::vp, 1000, 0.002, 80);
  const auto mix = two_mode_mixture();
  const MatrixXd grid = score_grid<double>(mix, 1.0, 0.0, 21);
  const MatrixXd data = mix.score(grid, 1.0, 0.0);
  double previous = 1e300;
  for (int t : {200, 50, 10, 0}) {
    const double err = (diffused_score(mix, s, grid, t) - data).norm() / data.norm();
    CHECK(err < previous);
    previous = err;
  }
  CHECK(previous < 1e-4);
}

TEST_CASE("kl_gaussian closed forms") {
  VectorXd m0 = VectorXd::Zero(1), m1 = VectorXd::Ones(1);
  MatrixXd c1 = MatrixXd::Identity(1, 1), c4 = 4 * MatrixXd::Identity(1, 1);
  CHECK(kl_gaussian<double>(m0, c1, m0, c1) == doctest::Approx(0.0));
  CHECK(kl_gaussian<double>(m0, c1, m1, c1) == doctest::Approx(0.5));
  CHECK(kl_gaussian<double>(m0, c4, m0, c1) == doctest::Approx(0.5 * (4 - 1 - std::log(4.0))).epsilon(1e-12));
  CHECK(kl_gaussian<double>(m0, c4, m0, c1) == doctest::Approx(0.8069).epsilon(1e-4));
  VectorXd v(2);
  v << 1, 2;
  CHECK(kl_gaussian_diag<double>(VectorXd::Zero(2), v, VectorXd::Zero(2), v) == doctest::Approx(0.0));
  CHECK_THROWS_AS(kl_gaussian<double>(m0, -c1, m0, c1), DomainError);
  CHECK_THROWS_AS(kl_gaussian<double>(m0, c1, m0, MatrixXd::Zero(1, 1)), DomainError);
}

TEST_CASE("affine pushforward law") {
  AffineGaussian<double> law{MatrixXd::Constant(1, 1, 2.0), RowVector<double>::Constant(1, 0.5)};
  CHECK(law.covariance()(0, 0) == 4.0);
  const MatrixXd x = (MatrixXd(3, 1) << -1.0, 0.0, 2.0).finished();
  const double a = 0.6, sg = 0.8;
  const MatrixXd expect = -(x.array() - a * 0.5) / (a * a * 4 + sg * sg);
  CHECK((law.score(x, a, sg) - expect).cwiseAbs().maxCoeff() < 1e-14);
  auto as_mix = GaussianMixture<double>::gaussian(RowVector<double>::Constant(1, 0.5), 2.0);
  CHECK((law.score(x, a, sg) - as_mix.score(x, a, sg)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("figure-3 benchmark configuration") {
  const auto f = figure3_config();
  CHECK(f.target.size() == 2);
  const auto& c0 = f.target.component(0);
  const auto& c1 = f.target.component(1);
  CHECK((c0.mean - c1.mean).norm() / c0.std >= 6.0);
  // inter-mode density at the midpoint relative to the peak
  const MatrixXd mid = ((c0.mean + c1.mean) / 2).eval();
  const double peak = f.target.log_density(MatrixXd(c0.mean), 1.0, 0.0)(0);
  CHECK(std::exp(f.target.log_density(mid, 1.0, 0.0)(0) - peak) < 1e-6);

  CHECK(f.arms[0].name == "full");
  CHECK(f.arms[1].name == "no_regression");
  CHECK(f.arms[2].name == "no_dm");
  const auto& full = f.arms[0].config;
  const auto& noreg = f.arms[1].config;
  const auto& nodm = f.arms[2].config;
  CHECK(full.lambda_reg == 0.25);
  CHECK(full.use_dm);
  CHECK(noreg.lambda_reg == 0.0);
  CHECK(noreg.use_dm);
  CHECK(nodm.lambda_reg == 0.25);
  CHECK(!nodm.use_dm);
  for (const auto* c : {&noreg, &nodm}) {
    CHECK(c->iterations == full.iterations);
    CHECK(c->dm_batch == full.dm_batch);
    CHECK(c->reg_batch == full.reg_batch);
    CHECK(c->generator_opt.lr == full.generator_opt.lr);
    CHECK(c->fake_opt.lr == full.fake_opt.lr);
    CHECK(c->start_shift == full.start_shift);
    CHECK(c->weighting == full.weighting);
    CHECK(c->seed == full.seed);
  }
}
