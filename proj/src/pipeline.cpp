#include "dmd/pipeline.hpp"

#include "dmd/gradcheck.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>

namespace dmd {

namespace fs = std::filesystem;

namespace {

std::uint64_t teacher_hash_of(const Denoiser<double>& d) { return hash_parameters(d.net().parameters()); }

template <typename F>
void write_text(const fs::path& path, F&& fill) {
  std::ostringstream os;
  fill(os);
  write_file_atomic(path, os.str());
}

[[noreturn]] void stale(const fs::path& path, const std::string& why) {
  throw PrerequisiteError("stale prerequisite " + path.string() + ": " + why + "; rerun the producing command",
                          path);
}

fs::path require(const fs::path& dir, const char* name, const char* producer) {
  fs::path p = dir / name;
  if (!fs::exists(p))
    throw PrerequisiteError("missing prerequisite " + p.string() + " (run `" + producer + "` first)", p);
  return p;
}

/// Loads a checkpoint and checks its stage hash against the current config.
Checkpoint load_checked(const fs::path& dir, const char* name, const char* producer, std::uint64_t expected) {
  const fs::path p = require(dir, name, producer);
  Checkpoint c;
  Lineage l;
  try {
    c = load_checkpoint(p);
    l = lineage_of(c.meta);
  } catch (const FormatError& e) {
    throw PrerequisiteError("unreadable prerequisite " + p.string() + ": " + e.what(), p);
  }
  if (l.stage_hash != expected)
    stale(p, "built from settings " + hex64(l.stage_hash) + ", current settings are " + hex64(expected));
  return c;
}

Denoiser<double> load_teacher(const fs::path& dir, const RunConfig& cfg) {
  auto c = load_checked(dir, artifact::teacher, "train-teacher", stage_hash(cfg, Stage::teacher));
  try {
    auto d = denoiser_from_checkpoint(c);
    if (lineage_of(c.meta).teacher_hash != teacher_hash_of(d)) stale(dir / artifact::teacher, "parameter hash mismatch");
    return d;
  } catch (const FormatError& e) {
    throw PrerequisiteError(std::string("unreadable prerequisite ") + (dir / artifact::teacher).string() + ": " +
                                e.what(),
                            dir / artifact::teacher);
  }
}

PairedDataset<double> load_checked_pairs(const fs::path& dir, const RunConfig& cfg, const Denoiser<double>& teacher) {
  const fs::path p = require(dir, artifact::pairs, "gen-pairs");
  Lineage l;
  PairedDataset<double> ds;
  try {
    ds = load_pairs(p, &l);
  } catch (const FormatError& e) {
    throw PrerequisiteError("unreadable prerequisite " + p.string() + ": " + e.what(), p);
  }
  if (l.stage_hash != stage_hash(cfg, Stage::pairs))
    stale(p, "built from settings " + hex64(l.stage_hash) + ", current settings are " +
                 hex64(stage_hash(cfg, Stage::pairs)));
  if (ds.meta.teacher_hash != teacher_hash_of(teacher)) stale(p, "generated by a different teacher");
  return ds;
}

Generator<double> load_generator(const fs::path& dir, const RunConfig& cfg, const Denoiser<double>* teacher) {
  auto c = load_checked(dir, artifact::generator, "distill", stage_hash(cfg, Stage::distill));
  if (teacher && lineage_of(c.meta).teacher_hash != teacher_hash_of(*teacher))
    stale(dir / artifact::generator, "distilled from a different teacher");
  try {
    return generator_from_checkpoint(c);
  } catch (const FormatError& e) {
    throw PrerequisiteError("unreadable prerequisite " + (dir / artifact::generator).string() + ": " + e.what(),
                            dir / artifact::generator);
  }
}

Lineage lineage_for(const RunConfig& cfg, Stage stage, int step, std::uint64_t teacher_hash) {
  return {step, config_hash(cfg), stage_hash(cfg, stage), teacher_hash};
}

double percentile95(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto k = static_cast<std::size_t>(std::ceil(0.95 * double(v.size()))) - 1;
  return v[std::min(k, v.size() - 1)];
}

std::optional<double> bandwidth_of(const RunConfig& cfg) {
  return cfg.eval.bandwidth > 0 ? std::optional<double>(cfg.eval.bandwidth) : std::nullopt;
}

MatrixXd target_samples(const RunConfig& cfg, long n, std::uint64_t seed) {
  Rng rng(seed);
  return cfg.mixture().sample(n, rng);
}

double target_mmd_floor(const RunConfig& cfg, std::uint64_t seed) {
  std::vector<double> v;
  for (int k = 0; k < cfg.eval.floor_resamples; ++k) {
    const std::uint64_t s = stage_seed(seed, "floor-" + std::to_string(k));
    v.push_back(mmd_rbf<double>(target_samples(cfg, cfg.eval.samples, s),
                                target_samples(cfg, cfg.eval.reference_samples, s + 1), bandwidth_of(cfg)));
  }
  return percentile95(std::move(v));
}

void log_report(std::ostream& out, const std::string& label, const MetricsReport& r, double floor) {
  out << label << ": mmd " << format_double(r.mmd) << " (floor " << format_double(floor) << "), sliced W2 "
      << format_double(r.sliced_wasserstein) << ", mode recall " << format_double(r.mode_recall) << "\n";
}

// ---- commands ----

int cmd_train_teacher(const RunConfig& cfg, const fs::path& dir, std::ostream& out) {
  const auto mix = cfg.mixture();
  const auto sched = NoiseSchedule<double>::build(cfg.schedule);
  std::vector<TrainLogEntry> log;
  const auto t0 = std::chrono::steady_clock::now();
  const int every = std::max(1, cfg.teacher.steps / 10);
  auto teacher = train_teacher<double>(mix, sched, cfg.teacher, &log, [&](int step, const Denoiser<double>&) {
    if (step % every == 0) spdlog::info("teacher step {}/{} loss {:.5g}", step, cfg.teacher.steps, log.back().loss);
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint(dir / artifact::teacher,
                  denoiser_checkpoint(teacher, lineage_for(cfg, Stage::teacher, cfg.teacher.steps,
                                                           teacher_hash_of(teacher))));
  write_text(dir / artifact::teacher_log, [&](std::ostream& os) { write_train_log_csv(os, log); });

  std::vector<int> bins;
  for (int t : score_check_bins)
    if (t < sched.bins()) bins.push_back(t);
  const auto errs = teacher_score_errors(teacher, mix, bins);
  write_text(dir / artifact::teacher_score, [&](std::ostream& os) {
    os << "t,relative_score_error\n";
    for (std::size_t i = 0; i < bins.size(); ++i) os << bins[i] << "," << format_double(errs[i]) << "\n";
  });
  out << "teacher trained in " << secs << " s, final loss " << format_double(log.back().loss) << "\n";
  for (std::size_t i = 0; i < bins.size(); ++i)
    out << "score error at t=" << bins[i] << ": " << format_double(errs[i]) << "\n";
  out << "wrote " << (dir / artifact::teacher).string() << "\n";
  return exit_code::ok;
}

int cmd_gen_pairs(const RunConfig& cfg, const fs::path& dir, std::ostream& out) {
  const auto teacher = load_teacher(dir, cfg);
  Rng rng(stage_seed(cfg.seed, "pairs"));
  std::vector<int> labels = draw_labels(cfg.mixture(), teacher.class_count(), cfg.pairs.count, rng);
  auto ds = generate_pairs(teacher, cfg.pairs.count, cfg.pairs.solver, cfg.pairs.steps, rng, std::move(labels),
                           cfg.pairs.omega);
  save_pairs(dir / artifact::pairs, ds, lineage_for(cfg, Stage::pairs, 0, teacher_hash_of(teacher)));
  out << "wrote " << ds.size() << " pairs to " << (dir / artifact::pairs).string() << "\n";
  return exit_code::ok;
}

int cmd_distill(const RunConfig& cfg, const fs::path& dir, std::ostream& out) {
  const auto teacher = load_teacher(dir, cfg);
  const auto pairs = load_checked_pairs(dir, cfg, teacher);
  const int every = std::max(1, cfg.distill.iterations / 10);
  auto res = dmd_train<double>(teacher, pairs, cfg.distill, [&](const DistillLogRow& r, const Generator<double>&) {
    if ((r.iter + 1) % every == 0)
      spdlog::info("distill iter {}/{} kl {:.5g} reg {:.5g} fake {:.5g}", r.iter + 1, cfg.distill.iterations,
                   r.kl_surrogate, r.reg_loss, r.fake_denoise_loss);
  });
  const auto th = teacher_hash_of(teacher);
  save_checkpoint(dir / artifact::generator,
                  generator_checkpoint(res.generator, lineage_for(cfg, Stage::distill, cfg.distill.iterations, th)));
  save_checkpoint(dir / artifact::fake,
                  denoiser_checkpoint(res.fake, lineage_for(cfg, Stage::distill, cfg.distill.iterations, th)));
  write_text(dir / artifact::distill_log, [&](std::ostream& os) { write_distill_log_csv(os, res.log); });
  out << "distilled " << cfg.distill.iterations << " iterations; wrote " << (dir / artifact::generator).string()
      << "\n";
  return exit_code::ok;
}

int cmd_sample(const RunConfig& cfg, const fs::path& dir, long n, std::ostream& out) {
  if (n < 1) throw ConfigError("--n must be >= 1", "n", 0);
  const auto gen = load_generator(dir, cfg, nullptr);
  std::vector<int> labels;
  const MatrixXd x = generator_samples(gen, cfg.mixture(), n, stage_seed(cfg.seed, "sample"), &labels);
  write_text(dir / artifact::samples, [&](std::ostream& os) { write_points_csv(os, x, labels); });
  out << "wrote " << n << " samples to " << (dir / artifact::samples).string() << "\n";
  return exit_code::ok;
}

int cmd_eval(const RunConfig& cfg, const fs::path& dir, std::ostream& out) {
  const auto teacher = load_teacher(dir, cfg);
  const auto gen = load_generator(dir, cfg, &teacher);
  const auto mix = cfg.mixture();
  const auto opt = eval_options(cfg);
  const std::uint64_t seed = stage_seed(cfg.seed, "eval");
  const MatrixXd x = generator_samples(gen, mix, cfg.eval.samples, seed);
  const MatrixXd ref = target_samples(cfg, cfg.eval.reference_samples, stage_seed(cfg.seed, "eval-reference"));
  const MatrixXd ta = teacher_samples(teacher, cfg, cfg.eval.samples, stage_seed(cfg.seed, "eval-teacher-a"));
  const MatrixXd tb =
      teacher_samples(teacher, cfg, cfg.eval.reference_samples, stage_seed(cfg.seed, "eval-teacher-b"));
  const double target_floor = target_mmd_floor(cfg, stage_seed(cfg.seed, "eval-target-floor"));
  const double teacher_floor = teacher_mmd_floor(teacher, cfg, stage_seed(cfg.seed, "eval-teacher-floor"));

  std::vector<MetricsRow> rows{{"generator_vs_target", evaluate_samples(x, ref, mix, opt, seed), target_floor},
                               {"generator_vs_teacher", evaluate_samples(x, tb, mix, opt, seed), teacher_floor},
                               {"teacher_vs_teacher", evaluate_samples(ta, tb, mix, opt, seed), teacher_floor}};
  for (const auto& r : rows)
    if (!std::isfinite(r.report.mmd) || !std::isfinite(r.report.sliced_wasserstein))
      throw NumericError("eval: non-finite metric for " + r.label);
  write_text(dir / artifact::metrics, [&](std::ostream& os) { write_metrics_csv(os, rows); });
  for (const auto& r : rows) log_report(out, r.label, r.report, r.noise_floor);
  out << "wrote " << (dir / artifact::metrics).string() << "\n";
  return exit_code::ok;
}

int cmd_ablate(const RunConfig& cfg, const fs::path& dir, std::ostream& out) {
  const auto teacher = load_teacher(dir, cfg);
  const auto pairs = load_checked_pairs(dir, cfg, teacher);
  auto arms = run_ablation(teacher, pairs, cfg);
  const double floor = target_mmd_floor(cfg, stage_seed(cfg.seed, "eval-target-floor"));
  std::vector<MetricsRow> rows;
  std::vector<ScatterPanel> panels;
  for (const auto& a : arms) {
    rows.push_back({a.name, a.report, floor});
    panels.push_back({a.name, a.samples.topRows(std::min<Eigen::Index>(a.samples.rows(), 2000))});
    write_text(dir / ("ablation_" + a.name + "_log.csv"),
               [&](std::ostream& os) { write_distill_log_csv(os, a.log); });
  }
  write_text(dir / artifact::ablation, [&](std::ostream& os) { write_metrics_csv(os, rows); });
  write_text(dir / artifact::ablation_svg,
             [&](std::ostream& os) { write_scatter_svg(os, panels, cfg.mixture()); });
  for (const auto& r : rows) log_report(out, r.label, r.report, r.noise_floor);
  out << "wrote " << (dir / artifact::ablation).string() << " and " << (dir / artifact::ablation_svg).string()
      << "\n";
  return exit_code::ok;
}

int cmd_grad_check(const RunConfig& cfg, const fs::path& dir, std::ostream& out) {
  constexpr double tolerance = 1e-3;
  const auto results = run_grad_checks(default_grad_checks(), cfg.seed, tolerance);
  write_text(dir / artifact::grad_check, [&](std::ostream& os) { write_grad_check_csv(os, results); });
  write_grad_check_csv(out, results);
  const bool ok = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
  if (!ok) throw NumericError("gradient check failed above " + format_double(tolerance));
  return exit_code::ok;
}

}  // namespace

RunConfig resolve_config(std::string_view verb, const CommandOptions& opts) {
  RunConfig cfg = opts.config.empty() ? default_run_config() : load_run_config(opts.config);
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.out) cfg.output_dir = *opts.out;
  if (opts.steps) {
    const int s = *opts.steps;
    if (s < 1) throw ConfigError("--steps must be >= 1", "steps", 0);
    if (verb == "train-teacher") cfg.teacher.steps = s;
    else if (verb == "gen-pairs") cfg.pairs.steps = s;
    else if (verb == "distill" || verb == "ablate") cfg.distill.iterations = s;
  }
  cfg.teacher.seed = stage_seed(cfg.seed, "teacher");
  cfg.distill.seed = stage_seed(cfg.seed, "distill");
  return cfg;
}

int run_command(std::string_view verb, const CommandOptions& opts, std::ostream& out, std::ostream& err) {
  static constexpr std::string_view verbs[] = {"train-teacher", "gen-pairs", "distill", "sample",
                                               "eval",          "ablate",    "grad-check"};
  if (std::find(std::begin(verbs), std::end(verbs), verb) == std::end(verbs)) {
    err << "error: unknown command '" << verb << "'\n";
    return exit_code::usage;
  }
  try {
    const RunConfig cfg = resolve_config(verb, opts);
    const fs::path dir = cfg.output_dir;
    fs::create_directories(dir);
    write_file_atomic(dir / artifact::resolved_config, serialize_run_config(cfg));
    spdlog::debug("{} with config hash {}", verb, hex64(config_hash(cfg)));
    if (verb == "train-teacher") return cmd_train_teacher(cfg, dir, out);
    if (verb == "gen-pairs") return cmd_gen_pairs(cfg, dir, out);
    if (verb == "distill") return cmd_distill(cfg, dir, out);
    if (verb == "sample") return cmd_sample(cfg, dir, opts.n.value_or(cfg.eval.samples), out);
    if (verb == "eval") return cmd_eval(cfg, dir, out);
    if (verb == "ablate") return cmd_ablate(cfg, dir, out);
    return cmd_grad_check(cfg, dir, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return exit_code::config;
  } catch (const PrerequisiteError& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::prerequisite;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return exit_code::numeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code::usage;
  }
}

std::vector<double> teacher_score_errors(const MeanModel<double>& teacher, const GaussianMixture<double>& target,
                                         std::span<const int> bins) {
  std::vector<double> out;
  const auto& s = teacher.schedule();
  for (int t : bins) {
    const MatrixXd grid = score_grid<double>(target, s.alpha(t), s.sigma(t), 41);
    out.push_back(score_relative_error<double>(teacher, target, grid, t, true));
  }
  return out;
}

std::vector<int> draw_labels(const GaussianMixture<double>& target, int class_count, long n, Rng& rng) {
  std::vector<int> labels;
  if (class_count <= 0) return labels;
  std::vector<double> w;
  for (const auto& c : target.components()) w.push_back(c.weight);
  std::discrete_distribution<int> pick(w.begin(), w.end());
  labels.reserve(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) labels.push_back(target.component(std::size_t(pick(rng))).label);
  return labels;
}

MatrixXd generator_samples(const Generator<double>& g, const GaussianMixture<double>& target, long n,
                           std::uint64_t seed, std::vector<int>* labels) {
  Rng rng(seed);
  const MatrixXd z = standard_normal<double>(n, g.data_dim(), rng);
  std::vector<int> l = draw_labels(target, g.class_count(), n, rng);
  MatrixXd x = g.forward(z, l);
  if (labels) *labels = std::move(l);
  return x;
}

MatrixXd teacher_samples(const Denoiser<double>& teacher, const RunConfig& cfg, long n, std::uint64_t seed) {
  Rng rng(seed);
  const MatrixXd z = standard_normal<double>(n, teacher.data_dim(), rng);
  const std::vector<int> labels = draw_labels(cfg.mixture(), teacher.class_count(), n, rng);
  return solve_pairs<double>(teacher, z, cfg.pairs.solver, cfg.pairs.steps, labels, cfg.pairs.omega);
}

double teacher_mmd_floor(const Denoiser<double>& teacher, const RunConfig& cfg, std::uint64_t seed) {
  std::vector<double> v;
  for (int k = 0; k < cfg.eval.floor_resamples; ++k) {
    const std::uint64_t s = stage_seed(seed, "floor-" + std::to_string(k));
    v.push_back(mmd_rbf<double>(teacher_samples(teacher, cfg, cfg.eval.samples, s),
                                teacher_samples(teacher, cfg, cfg.eval.reference_samples, s + 1),
                                bandwidth_of(cfg)));
  }
  return percentile95(std::move(v));
}

EvalOptions eval_options(const RunConfig& cfg) {
  EvalOptions o;
  o.radius_stds = cfg.eval.radius_stds;
  o.min_share = cfg.eval.min_share;
  o.projections = cfg.eval.projections;
  o.bandwidth = cfg.eval.bandwidth;
  return o;
}

std::vector<ArmOutcome> run_ablation(const Denoiser<double>& teacher, const PairedDataset<double>& pairs,
                                     const RunConfig& cfg) {
  DmdConfig no_reg = cfg.distill;
  no_reg.lambda_reg = 0.0;
  DmdConfig no_dm = cfg.distill;
  no_dm.use_dm = false;
  const std::pair<const char*, DmdConfig> arms[] = {{"full", cfg.distill}, {"no_regression", no_reg}, {"no_dm", no_dm}};

  const auto mix = cfg.mixture();
  const auto opt = eval_options(cfg);
  const std::uint64_t seed = stage_seed(cfg.seed, "eval");
  const MatrixXd ref = target_samples(cfg, cfg.eval.reference_samples, stage_seed(cfg.seed, "eval-reference"));
  std::vector<ArmOutcome> out;
  for (const auto& [name, dc] : arms) {
    spdlog::info("ablation arm {}", name);
    auto res = dmd_train<double>(teacher, pairs, dc);
    ArmOutcome a;
    a.name = name;
    a.samples = generator_samples(res.generator, mix, cfg.eval.samples, seed);
    a.report = evaluate_samples(a.samples, ref, mix, opt, seed);
    a.generator = std::move(res.generator);
    a.log = std::move(res.log);
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace dmd
