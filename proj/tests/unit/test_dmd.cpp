#include <doctest.h>

#include "../support/affine_dmd.hpp"
#include "dmd/dmd.hpp"

#include <cmath>

using namespace dmd;
using dmd::testing::affine_generator;

namespace {

NoiseSchedule<double> vp() { return NoiseSchedule<double>::build(ScheduleKind::vp, 1000, 0.002, 80); }

GaussianMixture<double> pair_target() {
  return GaussianMixture<double>({{0.5, RowVector<double>{{-2.0, 0.0}}, 0.5, 0},
                                  {0.5, RowVector<double>{{2.0, 0.0}}, 0.5, 1}});
}

Denoiser<double> random_denoiser(Prediction p, int classes, std::uint64_t seed) {
  Denoiser<double> d(vp(), 2, {16, 16}, Activation::silu, p, 0.5, classes);
  Rng rng(seed);
  d.mutable_net().initialize(rng);
  d.freeze();
  return d;
}

struct Fixture {
  Denoiser<double> teacher;
  PairedDataset<double> pairs;
};

Fixture small_fixture() {
  TeacherConfig c;
  c.hidden = {16, 16};
  c.steps = 150;
  c.batch = 64;
  c.seed = 31;
  Fixture f{train_teacher(pair_target(), vp(), c), {}};
  Rng rng(32);
  f.pairs = generate_pairs<double>(f.teacher, 64, Solver::heun, 6, rng);
  return f;
}

DmdConfig short_run() {
  DmdConfig c;
  c.iterations = 15;
  c.dm_batch = 32;
  c.reg_batch = 16;
  c.seed = 33;
  return c;
}

}  // namespace

TEST_CASE("generator initialization reproduces the teacher at the last bin") {
  for (auto p : {Prediction::eps, Prediction::mean}) {
    const auto teacher = random_denoiser(p, 0, 1);
    const auto g = init_generator(teacher);
    Rng rng(2);
    const MatrixXd z = standard_normal<double>(64, 2, rng);
    const int last = teacher.schedule().bins() - 1;
    CHECK((g.forward(z) - teacher.mean(z, last)).cwiseAbs().maxCoeff() <= 1e-12);
  }
  const auto cond = random_denoiser(Prediction::mean, 2, 3);
  const auto g = init_generator(cond);
  Rng rng(4);
  const MatrixXd z = standard_normal<double>(6, 2, rng);
  const std::vector<int> labels{0, 1, 2, 0, 1, 2};
  CHECK((g.forward(z, labels) - cond.mean(z, cond.schedule().bins() - 1, labels)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("generator owns its parameters") {
  const auto teacher = random_denoiser(Prediction::mean, 0, 5);
  const auto before = teacher.net().parameters();
  auto g = init_generator(teacher);
  g.net().parameters().array() += 1.0;
  g.shift_output(RowVector<double>{{1.0, -1.0}});
  CHECK(teacher.net().parameters() == before);
}

TEST_CASE("output shift moves every sample") {
  auto g = init_generator(random_denoiser(Prediction::mean, 0, 6));
  Rng rng(7);
  const MatrixXd z = standard_normal<double>(10, 2, rng);
  const MatrixXd before = g.forward(z);
  g.shift_output(RowVector<double>{{-4.0, 0.5}});
  const MatrixXd delta = g.forward(z) - before;
  CHECK((delta.col(0).array() + 4.0).abs().maxCoeff() < 1e-12);
  CHECK((delta.col(1).array() - 0.5).abs().maxCoeff() < 1e-12);
}

TEST_CASE("compute_weight") {
  const auto s = vp();
  const RowVector<double> x{{1.0, -2.0}}, mu{{0.0, 0.0}};
  CHECK(compute_weight(s, 300, x, mu, Weighting::alg2_code) == doctest::Approx(1.5));
  CHECK(compute_weight(s, 300, x, mu, Weighting::paper_eq8) ==
        doctest::Approx(s.sigma(300) * s.sigma(300) / s.alpha(300) * 1.5));
  CHECK(compute_weight(s, 300, x, x, Weighting::alg2_code) == weight_floor);
  CHECK(compute_weight(s, 300, x, x, Weighting::paper_eq8) == 0.0);
  CHECK_THROWS_AS(compute_weight(s, 3, x, RowVector<double>::Zero(3), Weighting::alg2_code), ShapeError);
  CHECK(weighting_from_string("paper-eq8") == Weighting::paper_eq8);
  CHECK_THROWS_AS(weighting_from_string("eq8"), DomainError);
}

TEST_CASE("identical real and fake give a zero update") {
  const auto teacher = random_denoiser(Prediction::mean, 0, 8);
  const auto fake = teacher.as_fake();
  const auto g = init_generator(teacher);
  Rng rng(9);
  for (auto mode : {Weighting::alg2_code, Weighting::paper_eq8}) {
    const auto dm = dm_gradient<double>(g, teacher, fake, standard_normal<double>(32, 2, rng), rng, mode);
    CHECK(dm.sample_grad.cwiseAbs().maxCoeff() == 0.0);
    CHECK(dm.grad.cwiseAbs().maxCoeff() == 0.0);
    CHECK(dm.surrogate_loss == 0.0);
  }
}

TEST_CASE("direction points from fake toward real on every bin") {
  // real N(0,1), fake N(1.5,1): mu_fake - mu_real = 1.5 sigma^2 > 0 everywhere
  const auto s = vp();
  AnalyticMixtureModel<double> real(GaussianMixture<double>::gaussian(RowVector<double>::Zero(1), 1.0), s);
  AnalyticAffineModel<double> fake(AffineGaussian<double>{MatrixXd::Ones(1, 1), RowVector<double>::Constant(1, 1.5)},
                                   s);
  Rng rng(10);
  const MatrixXd x = 1.5 + standard_normal<double>(8, 1, rng).array();
  for (auto mode : {Weighting::alg2_code, Weighting::paper_eq8}) {
    int wrong = 0;
    for (int t = 1; t < s.bins(); ++t) {
      const std::vector<int> bins(8, t);
      const MatrixXd eps = standard_normal<double>(8, 1, rng);
      const MatrixXd g = dm_direction<double>(real, fake, x, bins, eps, mode);
      wrong += int((g.array() <= 0.0).count());
    }
    CHECK(wrong == 0);
  }
}

TEST_CASE("direction is divided by the batch size") {
  const auto s = vp();
  AnalyticMixtureModel<double> real(pair_target(), s);
  AnalyticMixtureModel<double> fake(GaussianMixture<double>::gaussian(RowVector<double>::Zero(2), 1.0), s);
  Rng rng(11);
  const MatrixXd x = standard_normal<double>(4, 2, rng), eps = standard_normal<double>(4, 2, rng);
  const std::vector<int> bins{100, 300, 500, 700};
  MatrixXd x2(8, 2), e2(8, 2);
  x2 << x, x;
  e2 << eps, eps;
  std::vector<int> b2 = bins;
  b2.insert(b2.end(), bins.begin(), bins.end());
  const MatrixXd g = dm_direction<double>(real, fake, x, bins, eps, Weighting::alg2_code);
  const MatrixXd g2 = dm_direction<double>(real, fake, x2, b2, e2, Weighting::alg2_code);
  CHECK((g2.topRows(4) * 2.0 - g).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("surrogate gradient is the chain rule through the generator") {
  const auto s = vp();
  AnalyticMixtureModel<double> real(GaussianMixture<double>::gaussian(RowVector<double>::Zero(1), 1.0), s);
  AnalyticAffineModel<double> fake(
      AffineGaussian<double>{MatrixXd::Constant(1, 1, 2.0), RowVector<double>::Constant(1, 1.0)}, s);
  const auto gen = affine_generator(2.0, 1.0);
  Rng rng(12);
  const MatrixXd z = standard_normal<double>(50, 1, rng);
  const auto dm = dm_gradient<double>(gen, real, fake, z, rng, Weighting::alg2_code);
  // G = a z + b: dL/da = sum g_i z_i, dL/db = sum g_i
  const double ga = (dm.sample_grad.col(0).array() * z.col(0).array()).sum();
  const double gb = dm.sample_grad.sum();
  CHECK(dm.grad(0) == doctest::Approx(ga).epsilon(1e-12));
  CHECK(dm.grad(1) == doctest::Approx(gb).epsilon(1e-12));
  CHECK(dm.surrogate_loss == doctest::Approx(0.5 * dm.sample_grad.squaredNorm()).epsilon(1e-12));
  CHECK((dm.x - gen.forward(z)).cwiseAbs().maxCoeff() == 0.0);
  for (int t : dm.bins) CHECK((t >= s.t_min() && t <= s.t_max()));
}

TEST_CASE("regression loss") {
  const auto gen = affine_generator(0.0, 0.0);
  const MatrixXd z = MatrixXd::Ones(3, 1), y = MatrixXd::Constant(3, 1, 2.0);
  const auto l = regression_loss<double>(gen, z, y, RegressionDistance::squared_l2, 0.25);
  CHECK(l.loss == doctest::Approx(1.0));
  // d/db of 0.25 mean (b - 2)^2 at b = 0 is -1; d/da is -1 too since z = 1
  CHECK(l.grad(0) == doctest::Approx(-1.0));
  CHECK(l.grad(1) == doctest::Approx(-1.0));
  const MatrixXd identity = MatrixXd::Ones(1, 1);
  CHECK(regression_loss<double>(gen, z, y, RegressionDistance::random_feature, 0.25, {}, &identity).loss ==
        doctest::Approx(1.0));
  CHECK_THROWS_AS(regression_loss<double>(gen, z, y, RegressionDistance::random_feature, 0.25), ShapeError);
  CHECK_THROWS_AS(regression_loss<double>(gen, z, MatrixXd::Ones(2, 1), RegressionDistance::squared_l2, 0.25),
                  ShapeError);
  CHECK(regression_loss<double>(gen, z, y, RegressionDistance::squared_l2, 0.0).loss == 0.0);
}

TEST_CASE("random features preserve squared distance in expectation") {
  Rng rng(13);
  const MatrixXd d = standard_normal<double>(1, 3, rng);
  double total = 0;
  const int seeds = 2000;
  for (int k = 0; k < seeds; ++k) total += (d * random_feature_map<double>(3, 16, std::uint64_t(k))).squaredNorm();
  // each draw is ||d||^2 chi^2_16 / 16: sd ||d||^2 sqrt(2/16)
  CHECK(std::abs(total / seeds - d.squaredNorm()) < 4 * d.squaredNorm() * std::sqrt(2.0 / 16 / seeds));
}

TEST_CASE("fake updates touch only the fake model") {
  const auto teacher = random_denoiser(Prediction::mean, 0, 14);
  auto fake = teacher.as_fake();
  const auto gen = init_generator(teacher);
  const auto teacher_before = teacher.net().parameters();
  const auto gen_before = gen.net().parameters();
  AdamW<double> opt(fake.net().parameters().size(), {1e-3, 0.9, 0.999, 1e-8, 0.0, 10.0});
  Rng rng(15);
  fake_score_step(fake, gen.forward(standard_normal<double>(32, 2, rng)), opt, rng);
  CHECK(fake.net().parameters() != teacher_before);
  CHECK(teacher.net().parameters() == teacher_before);
  CHECK(gen.net().parameters() == gen_before);

  auto base_copy = teacher;
  CHECK_THROWS_AS(fake_score_step(base_copy, MatrixXd(MatrixXd::Zero(4, 2)), opt, rng), Error);
}

TEST_CASE("distillation leaves the teacher untouched and is deterministic") {
  const auto f = small_fixture();
  const auto before = f.teacher.net().parameters();
  const auto a = dmd_train(f.teacher, f.pairs, short_run());
  const auto b = dmd_train(f.teacher, f.pairs, short_run());
  CHECK(f.teacher.net().parameters() == before);
  REQUIRE(a.log.size() == 15);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].iter == int(i));
    CHECK(a.log[i].kl_surrogate == b.log[i].kl_surrogate);
    CHECK(a.log[i].reg_loss == b.log[i].reg_loss);
    CHECK(a.log[i].fake_denoise_loss == b.log[i].fake_denoise_loss);
    CHECK(a.log[i].grad_norm == b.log[i].grad_norm);
    CHECK(std::isfinite(a.log[i].grad_norm));
  }
  CHECK(a.generator.net().parameters() == b.generator.net().parameters());
  CHECK(a.fake.role() == DenoiserRole::fake);

  auto cfg = short_run();
  cfg.seed = 34;
  CHECK(dmd_train(f.teacher, f.pairs, cfg).generator.net().parameters() != a.generator.net().parameters());
}

TEST_CASE("distillation input checks") {
  auto f = small_fixture();
  auto stale = f.pairs;
  stale.meta.teacher_hash ^= 1;
  CHECK_THROWS_WITH_AS(dmd_train(f.teacher, stale, short_run()), doctest::Contains("teacher hash"), DomainError);
  auto unfrozen = f.teacher.as_fake();
  CHECK_THROWS_AS(dmd_train(unfrozen, f.pairs, short_run()), Error);
  auto cfg = short_run();
  cfg.start_shift = {1.0};
  CHECK_THROWS_AS(dmd_train(f.teacher, f.pairs, cfg), ShapeError);
  cfg = short_run();
  cfg.lambda_reg = -1;
  CHECK_THROWS_AS(dmd_train(f.teacher, f.pairs, cfg), DomainError);
}

TEST_CASE("ablated terms drop out of the objective") {
  const auto f = small_fixture();
  auto no_reg = short_run();
  no_reg.lambda_reg = 0.0;
  const auto a = dmd_train(f.teacher, f.pairs, no_reg);
  for (const auto& row : a.log) CHECK(row.reg_loss == 0.0);

  // with lambda = 0 the paired targets cannot influence the generator
  auto scrambled = f.pairs;
  scrambled.y.array() += 100.0;
  const auto b = dmd_train(f.teacher, scrambled, no_reg);
  CHECK(a.generator.net().parameters() == b.generator.net().parameters());

  auto no_dm = short_run();
  no_dm.use_dm = false;
  const auto c = dmd_train(f.teacher, f.pairs, no_dm);
  for (const auto& row : c.log) {
    CHECK(row.kl_surrogate == 0.0);
    CHECK(row.reg_loss > 0.0);
  }
}

TEST_CASE("affine generator converges to the real law") {
  const auto r = dmd::testing::run_affine_dmd(2.0, 1.0, 1500, 16);
  INFO("a " << r.a << " b " << r.b);
  CHECK(std::abs(r.a - 1.0) <= 0.05);
  CHECK(std::abs(r.b) <= 0.05);
}
