#pragma once

#include "dmd/dmd.hpp"
#include "dmd/eval.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace dmd {

/// Binary container: 8-byte magic, u64 little-endian JSON length, UTF-8
/// JSON metadata, then little-endian f64 payload. The payload length must
/// match metadata "param_count" exactly.
struct Checkpoint {
  nlohmann::json meta;
  VectorXd params;
};

inline constexpr std::string_view checkpoint_magic = "DMDCKPT1";
inline constexpr std::string_view pairs_magic = "DMDPAIRS";
inline constexpr int checkpoint_format_version = 1;

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws FormatError on bad magic, version, truncation or trailing bytes.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Where an artifact came from.
struct Lineage {
  int step = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t stage_hash = 0;
  std::uint64_t teacher_hash = 0;
};

Lineage lineage_of(const nlohmann::json& meta);

Checkpoint denoiser_checkpoint(const Denoiser<double>& d, const Lineage& lineage);
/// Rebuilt denoisers keep the stored role; base-role models come back frozen.
Denoiser<double> denoiser_from_checkpoint(const Checkpoint& ckpt);

Checkpoint generator_checkpoint(const Generator<double>& g, const Lineage& lineage);
Generator<double> generator_from_checkpoint(const Checkpoint& ckpt);

/// Pair files reuse the container with their own magic; payload is z, y
/// and (when labelled) labels, row-major.
std::string encode_pairs(const PairedDataset<double>& ds, const Lineage& lineage);
PairedDataset<double> decode_pairs(std::string_view bytes, Lineage* lineage = nullptr);
void save_pairs(const std::filesystem::path& path, const PairedDataset<double>& ds, const Lineage& lineage);
PairedDataset<double> load_pairs(const std::filesystem::path& path, Lineage* lineage = nullptr);

/// Shortest decimal that reads back to the same double.
std::string format_double(double v);

void write_points_csv(std::ostream& os, const MatrixXd& points, std::span<const int> labels = {});
void write_train_log_csv(std::ostream& os, const std::vector<TrainLogEntry>& log);
void write_distill_log_csv(std::ostream& os, const std::vector<DistillLogRow>& log);

/// One metrics row; `label` names the run or arm in the first column.
struct MetricsRow {
  std::string label;
  MetricsReport report;
  double noise_floor = 0;
};
void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows);

struct ScatterPanel {
  std::string title;
  MatrixXd points;
};

/// Side-by-side 2-D scatter panels sharing one coordinate frame, with the
/// target mode centres marked. Standalone SVG with a fixed viewBox.
void write_scatter_svg(std::ostream& os, const std::vector<ScatterPanel>& panels,
                       const GaussianMixture<double>& target);

/// Writes through a temporary file and renames, so readers never see a
/// partial artifact.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace dmd
