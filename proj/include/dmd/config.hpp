#pragma once

#include "dmd/figure3.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace dmd {

struct PairsConfig {
  int count = 640;
  Solver solver = Solver::heun;
  int steps = 18;
  double omega = 1.0;
};

struct EvalConfig {
  int samples = 4096;
  int reference_samples = 4096;
  double radius_stds = 3.0;
  double min_share = 0.2;
  int projections = 128;
  /// <= 0 selects the median heuristic.
  double bandwidth = 0.0;
  /// Same-distribution resamples behind the reported MMD noise floor.
  int floor_resamples = 20;
};

/// One run: target, schedule, teacher, pairs, distillation and evaluation.
/// Defaults reproduce the two-mode benchmark's full arm.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  std::vector<MixtureComponent<double>> target;
  ScheduleSpec schedule;
  TeacherConfig teacher;
  PairsConfig pairs;
  DmdConfig distill;
  EvalConfig eval;

  GaussianMixture<double> mixture() const { return GaussianMixture<double>(target); }
  /// The schedule with the distillation window applied.
  NoiseSchedule<double> build_schedule() const;
};

RunConfig default_run_config();

/// Bad or missing configuration; carries the dotted field path and the
/// 1-based source line when known (0 otherwise).
struct ConfigError : Error {
  ConfigError(const std::string& message, std::string field_path, int source_line)
      : Error(message), field(std::move(field_path)), line(source_line) {}
  std::string field;
  int line = 0;
};

/// Required keys: seed, target.components, schedule.kind. Everything else
/// falls back to the defaults; unknown keys are rejected.
RunConfig parse_run_config(std::string_view text, const std::string& source = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);

/// Canonical TOML with every field written out.
std::string serialize_run_config(const RunConfig& cfg);

std::uint64_t config_hash(const RunConfig& cfg);

enum class Stage { teacher, pairs, distill };

/// Hash of the settings a stage's artifact depends on (its own section
/// plus every upstream section and the seed).
std::uint64_t stage_hash(const RunConfig& cfg, Stage stage);

/// Independent per-stage seed derived from the run seed.
std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage);

}  // namespace dmd
