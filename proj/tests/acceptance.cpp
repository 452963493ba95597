// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include "support/affine_dmd.hpp"
#include "dmd/gradcheck.hpp"
#include "dmd/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace dmd;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool ok, const std::string& what, const std::string& detail) {
  if (!ok) ++failures;
  std::printf("%s criterion %d: %s [%s]\n", ok ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
}

/// Runs a criterion body, turning an escaped exception into a FAIL line.
void guarded(int id, const std::string& what, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(id, false, what, std::string("exception: ") + e.what());
  }
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

void gradient_suite() {
  const auto t0 = Clock::now();
  const auto results = run_grad_checks(default_grad_checks(), 0, 1e-4);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string worst_name;
  bool all = true;
  for (const auto& r : results) {
    all = all && r.passed;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = r.name;
    }
  }
  report(1, all && secs <= 30, "gradient suite within 1e-4 of finite differences",
         std::to_string(results.size()) + " checks, worst " + fmt(worst) + " (" + worst_name + "), " + fmt(secs) + " s");
}

void prediction_round_trip() {
  double worst = 0;
  Rng rng(1);
  for (auto kind : {ScheduleKind::vp, ScheduleKind::edm}) {
    const auto s = NoiseSchedule<double>::build(kind, 1000, 0.002, 80);
    for (int t = 0; t < s.bins(); ++t) {
      const MatrixXd x0 = standard_normal<double>(4, 2, rng), eps = standard_normal<double>(4, 2, rng);
      const MatrixXd xt = diffuse(s, x0, t, eps);
      const MatrixXd e = convert_prediction<double>(s, t, xt, x0, Prediction::mean);
      const MatrixXd m = convert_prediction<double>(s, t, xt, e, Prediction::eps);
      const MatrixXd e2 = convert_prediction<double>(s, t, xt, m, Prediction::mean);
      worst = std::max({worst, (m - x0).cwiseAbs().maxCoeff() / std::max(1.0, x0.cwiseAbs().maxCoeff()),
                        (e - eps).cwiseAbs().maxCoeff() / std::max(1.0, eps.cwiseAbs().maxCoeff()),
                        (e2 - e).cwiseAbs().maxCoeff() / std::max(1.0, e.cwiseAbs().maxCoeff())});
    }
  }
  report(2, worst <= 1e-12, "eps <-> mean round trip on every bin of vp and edm", "worst " + fmt(worst));
}

void identity_flow() {
  const auto s = NoiseSchedule<double>::build(ScheduleKind::vp, 1000, 0.002, 80);
  Rng rng(2);
  const MatrixXd z = standard_normal<double>(512, 2, rng);
  AnalyticMixtureModel<double> unit(GaussianMixture<double>::gaussian(RowVector<double>::Zero(2), 1.0), s);
  const double e_id = (heun_sample<double>(unit, z, 100) - z).cwiseAbs().maxCoeff();
  const double c = 2.0;
  AnalyticMixtureModel<double> scaled(GaussianMixture<double>::gaussian(RowVector<double>::Zero(2), c), s);
  const double e_c = (euler_sample<double>(scaled, z, 1000) - c * z).cwiseAbs().maxCoeff();
  report(3, e_id <= 1e-3 && e_c <= 1e-2, "identity flow (Heun, 100 steps) and scaled flow (Euler, 1000 steps)",
         "identity " + fmt(e_id) + ", scaled (c = 2) " + fmt(e_c) + " over 512 x 2 draws");
}

struct Shared {
  RunConfig cfg;
  Denoiser<double> teacher;
  bool have_teacher = false;
};

void teacher_fidelity(Shared& sh) {
  sh.cfg = resolve_config("train-teacher", {});
  const auto t0 = Clock::now();
  sh.teacher = train_teacher<double>(sh.cfg.mixture(), NoiseSchedule<double>::build(sh.cfg.schedule), sh.cfg.teacher);
  const double secs = seconds_since(t0);
  sh.have_teacher = true;
  const auto errs = teacher_score_errors(sh.teacher, sh.cfg.mixture());
  const bool ok = std::all_of(errs.begin(), errs.end(), [](double e) { return e <= 0.05; }) && secs <= 120;
  report(4, ok, "two-mode teacher score within 5% on a 41x41 grid at t = 100, 500, 900",
         "errors " + fmt(errs[0]) + ", " + fmt(errs[1]) + ", " + fmt(errs[2]) + "; trained in " + fmt(secs) + " s");
}

void zero_fixed_point(const Shared& sh) {
  const auto fake = sh.teacher.as_fake();
  const auto gen = init_generator(sh.teacher);
  Rng rng(5);
  double worst = 0;
  for (int k = 0; k < 20; ++k) {
    for (auto mode : {Weighting::alg2_code, Weighting::paper_eq8}) {
      const auto dm = dm_gradient<double>(gen, sh.teacher, fake, standard_normal<double>(128, 2, rng), rng, mode);
      worst = std::max({worst, dm.grad.cwiseAbs().maxCoeff(), dm.sample_grad.cwiseAbs().maxCoeff()});
    }
  }
  report(5, worst == 0.0, "distribution-matching gradient vanishes when fake equals real",
         "max |grad| " + fmt(worst) + " over 40 batches");
}

void affine_convergence() {
  // sign oracle: fake N(b, 1) against real N(0, 1) under vp gives
  // mu_fake - mu_real = b sigma_t^2, so the b-gradient has the sign of b
  const auto s = NoiseSchedule<double>::build(ScheduleKind::vp, 1000, 0.002, 80);
  AnalyticMixtureModel<double> real(GaussianMixture<double>::gaussian(RowVector<double>::Zero(1), 1.0), s);
  Rng rng(6);
  int sign_errors = 0;
  for (double b : {1.5, -1.5}) {
    AnalyticAffineModel<double> fake(AffineGaussian<double>{MatrixXd::Ones(1, 1), RowVector<double>::Constant(1, b)},
                                     s);
    const auto gen = dmd::testing::affine_generator(1.0, b);
    for (int t = 0; t < s.bins(); ++t) {
      const MatrixXd z = standard_normal<double>(64, 1, rng);
      const MatrixXd x = gen.forward(z);
      const std::vector<int> bins(64, t);
      const double grad_b = dm_direction<double>(real, fake, x, bins, standard_normal<double>(64, 1, rng),
                                                 Weighting::alg2_code)
                                .sum();
      if (!(grad_b * b > 0)) ++sign_errors;
    }
  }
  const auto t0 = Clock::now();
  const auto r = dmd::testing::run_affine_dmd(2.0, 1.0, 1500, 7);
  const double secs = seconds_since(t0);
  const bool ok = std::abs(r.a - 1) <= 0.05 && std::abs(r.b) <= 0.05 && secs <= 60 && sign_errors == 0;
  report(6, ok, "affine generator reaches N(0,1); b-gradient sign correct on every bin",
         "a " + fmt(r.a) + ", b " + fmt(r.b) + " after 1500 iterations in " + fmt(secs) + " s; " +
             std::to_string(sign_errors) + " sign errors over 2000 bins");
}

void figure3(const Shared& sh) {
  RunConfig cfg = resolve_config("ablate", {});
  Rng pair_rng(stage_seed(cfg.seed, "pairs"));
  const auto t0 = Clock::now();
  const auto pairs = generate_pairs<double>(sh.teacher, cfg.pairs.count, cfg.pairs.solver, cfg.pairs.steps, pair_rng,
                                            {}, cfg.pairs.omega);
  std::vector<double> mmd_full, mmd_noreg, mmd_nodm, mmd_teacher;
  int full_ok = 0, noreg_drop = 0;
  std::string recalls;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RunConfig c = resolve_config("ablate", CommandOptions{{}, seed, {}, {}, {}});
    const auto arms = run_ablation(sh.teacher, pairs, c);
    full_ok += arms[0].report.mode_recall == 1.0;
    noreg_drop += arms[1].report.mode_recall < 1.0;
    mmd_full.push_back(arms[0].report.mmd);
    mmd_noreg.push_back(arms[1].report.mmd);
    mmd_nodm.push_back(arms[2].report.mmd);
    const MatrixXd ts = teacher_samples(sh.teacher, c, c.eval.reference_samples, stage_seed(seed, "eval-teacher-b"));
    mmd_teacher.push_back(mmd_rbf<double>(arms[0].samples, ts));
    recalls += (seed ? " " : "") + fmt(arms[0].report.mode_recall) + "/" + fmt(arms[1].report.mode_recall);
  }
  const double secs = seconds_since(t0);
  report(7, full_ok >= 4 && noreg_drop >= 3 && secs <= 15 * 60,
         "two-mode ablation: full keeps both modes, no-regression drops one",
         "full recall 1 in " + std::to_string(full_ok) + "/5, no-regression recall < 1 in " +
             std::to_string(noreg_drop) + "/5 (full/no_reg per seed: " + recalls + "); " + fmt(secs) + " s");

  const double floor = teacher_mmd_floor(sh.teacher, cfg, stage_seed(cfg.seed, "eval-teacher-floor"));
  const double mf = median(mmd_full), mr = median(mmd_noreg), md = median(mmd_nodm), mt = median(mmd_teacher);
  report(8, mf < mr && mf < md && mt <= 2 * floor, "median MMD ordering and full-vs-teacher within 2x noise floor",
         "median MMD full " + fmt(mf) + ", no_regression " + fmt(mr) + ", no_dm " + fmt(md) + "; full vs teacher " +
             fmt(mt) + " against floor " + fmt(floor));
}

void guided_distillation() {
  RunConfig cfg = resolve_config("train-teacher", {});
  cfg.teacher.conditional = true;
  const auto mix = cfg.mixture();
  const auto t0 = Clock::now();
  const auto teacher = train_teacher<double>(mix, NoiseSchedule<double>::build(cfg.schedule), cfg.teacher);
  Rng rng(stage_seed(cfg.seed, "pairs"));
  const auto pairs = generate_pairs<double>(teacher, 1024, Solver::heun, 18, rng, {}, 3.0);
  DmdConfig dc = figure3_base_config();
  dc.start_shift.clear();
  dc.omega = 3.0;
  dc.iterations = 1000;
  dc.seed = stage_seed(cfg.seed, "distill");
  const auto res = dmd_train<double>(teacher, pairs, dc);
  Rng zr(9);
  double worst_leak = 0, min_recall = 1;
  std::string detail;
  for (int c = 0; c < 2; ++c) {
    const std::vector<int> labels(4096, c);
    const MatrixXd x = res.generator.forward(standard_normal<double>(4096, 2, zr), labels);
    const auto own = mode_recall<double>(x, mix.conditional(c), 3.0, 0.2);
    const auto both = mode_recall<double>(x, mix, 3.0, 0.2);
    const double leak = both.shares[std::size_t(1 - c)];
    worst_leak = std::max(worst_leak, leak);
    min_recall = std::min(min_recall, own.recall);
    detail += "class " + std::to_string(c) + ": recall " + fmt(own.recall) + ", leakage " + fmt(leak) + "; ";
  }
  report(9, min_recall == 1.0 && worst_leak < 0.05, "guided (w = 3) conditional distillation stays on class",
         detail + fmt(seconds_since(t0)) + " s");
}

void determinism() {
  const fs::path root = fs::temp_directory_path() / ("dmd_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path config = root / "small.toml";
  {
    RunConfig c = default_run_config();
    c.seed = 5;
    c.teacher.hidden = {32, 32};
    c.teacher.steps = 400;
    c.teacher.batch = 64;
    c.pairs.count = 128;
    c.distill.iterations = 40;
    c.eval.samples = 256;
    c.eval.reference_samples = 256;
    c.eval.floor_resamples = 4;
    write_file_atomic(config, serialize_run_config(c));
  }
  const char* verbs[] = {"train-teacher", "gen-pairs", "distill", "sample", "eval", "ablate"};
  bool ran = true;
  for (const char* run : {"a", "b"}) {
    CommandOptions o;
    o.config = config;
    o.out = (root / run).string();
    for (const char* v : verbs) {
      std::ostringstream out, err;
      if (run_command(v, o, out, err) != exit_code::ok) {
        ran = false;
        std::cerr << v << ": " << err.str();
      }
    }
  }
  int compared = 0, differing = 0;
  for (const auto& entry : fs::directory_iterator(root / "a")) {
    const auto ext = entry.path().extension();
    if (ext != ".csv" && ext != ".ckpt" && ext != ".bin" && ext != ".svg") continue;
    ++compared;
    const fs::path twin = root / "b" / entry.path().filename();
    if (!fs::exists(twin) || read_file(entry.path()) != read_file(twin)) ++differing;
  }
  fs::remove_all(root);
  report(10, ran && compared >= 10 && differing == 0, "scripted pipeline repeated twice is byte-identical",
         std::to_string(compared) + " artifacts compared, " + std::to_string(differing) + " differ");
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  const auto t0 = Clock::now();
  Shared sh;
  guarded(1, "gradient suite", gradient_suite);
  guarded(2, "prediction round trip", prediction_round_trip);
  guarded(3, "identity flow", identity_flow);
  guarded(4, "teacher fidelity", [&] { teacher_fidelity(sh); });
  if (sh.have_teacher) {
    guarded(5, "zero fixed point", [&] { zero_fixed_point(sh); });
  } else {
    report(5, false, "zero fixed point", "no teacher");
  }
  guarded(6, "affine convergence", affine_convergence);
  if (sh.have_teacher) {
    guarded(7, "two-mode ablation", [&] { figure3(sh); });
  } else {
    report(7, false, "two-mode ablation", "no teacher");
    report(8, false, "median MMD ordering", "no teacher");
  }
  guarded(9, "guided distillation", guided_distillation);
  guarded(10, "determinism", determinism);
  std::printf("%d of 10 criteria failed; total %.1f s\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
