#pragma once

#include "dmd/config.hpp"
#include "dmd/io.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace dmd {

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int usage = 1;
inline constexpr int config = 2;
inline constexpr int prerequisite = 3;
inline constexpr int numeric = 4;
}  // namespace exit_code

/// A required artifact is absent or was produced under different settings.
struct PrerequisiteError : Error {
  PrerequisiteError(const std::string& message, std::filesystem::path missing)
      : Error(message), artifact(std::move(missing)) {}
  std::filesystem::path artifact;
};

struct CommandOptions {
  /// Empty selects the built-in two-mode configuration.
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  /// train-teacher: teacher steps; gen-pairs: solver steps; distill and
  /// ablate: distillation iterations.
  std::optional<int> steps;
  /// sample: number of points (default eval.samples).
  std::optional<long> n;
};

/// Artifact names inside the output directory.
namespace artifact {
inline constexpr const char* teacher = "teacher.ckpt";
inline constexpr const char* teacher_log = "teacher_loss.csv";
inline constexpr const char* teacher_score = "teacher_score_error.csv";
inline constexpr const char* pairs = "pairs.bin";
inline constexpr const char* generator = "generator.ckpt";
inline constexpr const char* fake = "fake.ckpt";
inline constexpr const char* distill_log = "distill_log.csv";
inline constexpr const char* samples = "samples.csv";
inline constexpr const char* metrics = "metrics.csv";
inline constexpr const char* ablation = "ablation.csv";
inline constexpr const char* ablation_svg = "ablation.svg";
inline constexpr const char* grad_check = "grad_check.csv";
inline constexpr const char* resolved_config = "config.toml";
}  // namespace artifact

/// Loads the config (or the default) and applies the command-line overrides
/// for `verb`.
RunConfig resolve_config(std::string_view verb, const CommandOptions& opts);

/// Runs one verb and maps failures to exit codes; diagnostics go to `err`.
int run_command(std::string_view verb, const CommandOptions& opts, std::ostream& out, std::ostream& err);

// ---- library-level stages, shared by the commands and the tests ----

inline constexpr int score_check_bins[3] = {100, 500, 900};

/// Density-weighted relative L2 score error on a 41 x 41 grid (41 points in
/// 1-D) spanning +-3 diffused stds, at each requested bin.
std::vector<double> teacher_score_errors(const MeanModel<double>& teacher, const GaussianMixture<double>& target,
                                         std::span<const int> bins = score_check_bins);

/// Labels for n draws of a conditional model: the class of a mixture
/// component picked by weight. Empty for unconditional models.
std::vector<int> draw_labels(const GaussianMixture<double>& target, int class_count, long n, Rng& rng);

MatrixXd generator_samples(const Generator<double>& g, const GaussianMixture<double>& target, long n,
                           std::uint64_t seed, std::vector<int>* labels = nullptr);
/// Deterministic teacher samples from the configured pair solver.
MatrixXd teacher_samples(const Denoiser<double>& teacher, const RunConfig& cfg, long n, std::uint64_t seed);

/// 95th percentile of teacher-vs-teacher MMD over eval.floor_resamples
/// independent resamples.
double teacher_mmd_floor(const Denoiser<double>& teacher, const RunConfig& cfg, std::uint64_t seed);

EvalOptions eval_options(const RunConfig& cfg);

struct ArmOutcome {
  std::string name;
  MetricsReport report;
  MatrixXd samples;
  Generator<double> generator;
  std::vector<DistillLogRow> log;
};

/// The three ablation arms (full, no_regression, no_dm), identical apart
/// from the ablated term, each scored against fresh target samples.
std::vector<ArmOutcome> run_ablation(const Denoiser<double>& teacher, const PairedDataset<double>& pairs,
                                     const RunConfig& cfg);

}  // namespace dmd
