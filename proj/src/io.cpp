#include "dmd/io.hpp"

#include <bit>
#include <charconv>
#include <fstream>
#include <sstream>

namespace dmd {

using nlohmann::json;

namespace {

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(std::string_view bytes, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
  return v;
}

std::string encode_container(std::string_view magic, const json& meta, const double* data, std::size_t n) {
  const std::string text = meta.dump();
  std::string out;
  out.reserve(magic.size() + 8 + text.size() + 8 * n);
  out.append(magic);
  put_u64(out, text.size());
  out.append(text);
  for (std::size_t i = 0; i < n; ++i) put_u64(out, std::bit_cast<std::uint64_t>(data[i]));
  return out;
}

/// Splits a container into metadata and payload after checking the magic,
/// version and exact payload length against `count_key`.
std::pair<json, std::vector<double>> decode_container(std::string_view bytes, std::string_view magic,
                                                      const char* count_key) {
  const std::string what(magic);
  if (bytes.size() < magic.size() + 8 || bytes.substr(0, magic.size()) != magic)
    throw FormatError(what + ": bad magic or truncated header");
  const std::uint64_t len = get_u64(bytes, magic.size());
  const std::size_t body = magic.size() + 8;
  if (len > bytes.size() - body) throw FormatError(what + ": truncated metadata");
  json meta;
  try {
    meta = json::parse(bytes.substr(body, len));
  } catch (const json::exception& e) {
    throw FormatError(what + ": metadata is not valid JSON: " + e.what());
  }
  if (!meta.is_object()) throw FormatError(what + ": metadata must be a JSON object");
  try {
    const int version = meta.at("format_version").get<int>();
    if (version != checkpoint_format_version)
      throw FormatError(what + ": unsupported format version " + std::to_string(version));
    const auto count = meta.at(count_key).get<std::uint64_t>();
    const std::size_t payload = bytes.size() - body - len;
    if (payload % 8 != 0 || payload / 8 != count)
      throw FormatError(what + ": payload holds " + std::to_string(payload) + " bytes, metadata promises " +
                        std::to_string(count) + " values");
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i)
      values[i] = std::bit_cast<double>(get_u64(bytes, body + len + 8 * i));
    return {std::move(meta), std::move(values)};
  } catch (const json::exception& e) {
    throw FormatError(what + ": malformed metadata: " + e.what());
  }
}

json schedule_json(const NoiseSchedule<double>& s) {
  const auto& spec = s.spec();
  json j = {{"kind", to_string(spec.kind)},
            {"bins", spec.bins},
            {"sigma_min", spec.sigma_min},
            {"sigma_max", spec.sigma_max},
            {"t_min_frac", spec.t_min_frac},
            {"t_max_frac", spec.t_max_frac},
            {"t_min", s.t_min()},
            {"t_max", s.t_max()}};
  if (spec.kind == ScheduleKind::custom) {
    std::vector<double> a, sg;
    for (int t = 0; t < s.bins(); ++t) {
      a.push_back(s.alpha(t));
      sg.push_back(s.sigma(t));
    }
    j["alpha"] = a;
    j["sigma"] = sg;
  }
  return j;
}

NoiseSchedule<double> schedule_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  const int t_min = j.at("t_min").get<int>(), t_max = j.at("t_max").get<int>();
  if (kind == "custom")
    return NoiseSchedule<double>::from_arrays(j.at("alpha").get<std::vector<double>>(),
                                              j.at("sigma").get<std::vector<double>>(), t_min, t_max);
  ScheduleSpec spec;
  spec.kind = schedule_kind_from_string(kind);
  spec.bins = j.at("bins").get<int>();
  spec.sigma_min = j.at("sigma_min").get<double>();
  spec.sigma_max = j.at("sigma_max").get<double>();
  spec.t_min_frac = j.at("t_min_frac").get<double>();
  spec.t_max_frac = j.at("t_max_frac").get<double>();
  auto s = NoiseSchedule<double>::build(spec);
  s.set_bounds(t_min, t_max);
  return s;
}

void put_lineage(json& j, const Lineage& l) {
  j["step"] = l.step;
  j["config_hash"] = hex64(l.config_hash);
  j["stage_hash"] = hex64(l.stage_hash);
  j["teacher_hash"] = hex64(l.teacher_hash);
}

std::uint64_t parse_hex(const json& j, const char* key) {
  const std::string s = j.at(key).get<std::string>();
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw FormatError(std::string("bad hash in ") + key);
  return v;
}

json net_json(const Mlp<double>& net) {
  std::vector<std::string> acts;
  for (auto a : net.hidden_activations()) acts.emplace_back(to_string(a));
  return {{"widths", net.widths()}, {"activations", acts}};
}

Mlp<double> net_from_json(const json& meta, const VectorXd& params) {
  std::vector<Activation> acts;
  for (const auto& a : meta.at("activations")) acts.push_back(activation_from_string(a.get<std::string>()));
  Mlp<double> net(meta.at("widths").get<std::vector<int>>(), acts);
  if (net.parameters().size() != params.size())
    throw FormatError("checkpoint: " + std::to_string(params.size()) + " parameters for a network needing " +
                      std::to_string(net.parameters().size()));
  net.set_parameters(params);
  return net;
}

/// Runs a metadata reader, turning JSON and domain errors into FormatError.
template <typename F>
auto guarded(const char* what, F&& f) {
  try {
    return f();
  } catch (const FormatError&) {
    throw;
  } catch (const json::exception& e) {
    throw FormatError(std::string(what) + ": malformed metadata: " + e.what());
  } catch (const Error& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  }
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  json meta = ckpt.meta;
  meta["format_version"] = checkpoint_format_version;
  meta["param_count"] = static_cast<std::uint64_t>(ckpt.params.size());
  return encode_container(checkpoint_magic, meta, ckpt.params.data(), static_cast<std::size_t>(ckpt.params.size()));
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  auto [meta, values] = decode_container(bytes, checkpoint_magic, "param_count");
  Checkpoint c;
  c.meta = std::move(meta);
  c.params = Eigen::Map<const VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

Lineage lineage_of(const json& meta) {
  return guarded("lineage", [&] {
    Lineage l;
    l.step = meta.at("step").get<int>();
    l.config_hash = parse_hex(meta, "config_hash");
    l.stage_hash = parse_hex(meta, "stage_hash");
    l.teacher_hash = parse_hex(meta, "teacher_hash");
    return l;
  });
}

Checkpoint denoiser_checkpoint(const Denoiser<double>& d, const Lineage& lineage) {
  Checkpoint c;
  c.meta = net_json(d.net());
  c.meta["kind"] = "denoiser";
  c.meta["role"] = to_string(d.role());
  c.meta["frozen"] = d.frozen();
  c.meta["schedule"] = schedule_json(d.schedule());
  c.meta["prediction"] = to_string(d.prediction());
  c.meta["sigma_data"] = d.sigma_data();
  c.meta["data_dim"] = d.data_dim();
  c.meta["class_count"] = d.class_count();
  put_lineage(c.meta, lineage);
  c.params = d.net().parameters();
  return c;
}

Denoiser<double> denoiser_from_checkpoint(const Checkpoint& ckpt) {
  return guarded("denoiser checkpoint", [&] {
    const auto& m = ckpt.meta;
    if (m.at("kind").get<std::string>() != "denoiser") throw FormatError("checkpoint does not hold a denoiser");
    Mlp<double> net = net_from_json(m, ckpt.params);
    const auto& widths = net.widths();
    const auto& acts = net.hidden_activations();
    for (auto a : acts)
      if (a != acts.front()) throw FormatError("denoiser checkpoint: mixed hidden activations");
    std::vector<int> hidden(widths.begin() + 1, widths.end() - 1);
    Denoiser<double> d(schedule_from_json(m.at("schedule")), m.at("data_dim").get<int>(), hidden,
                       acts.empty() ? Activation::identity : acts.front(),
                       prediction_from_string(m.at("prediction").get<std::string>()),
                       m.at("sigma_data").get<double>(), m.at("class_count").get<int>());
    if (d.net().widths() != widths) throw FormatError("denoiser checkpoint: widths inconsistent with data dim");
    d.mutable_net().set_parameters(ckpt.params);
    const std::string role = m.at("role").get<std::string>();
    if (role != "base" && role != "fake") throw FormatError("denoiser checkpoint: unknown role " + role);
    d.set_role(role == "base" ? DenoiserRole::base : DenoiserRole::fake);
    if (m.at("frozen").get<bool>()) d.freeze();
    return d;
  });
}

Checkpoint generator_checkpoint(const Generator<double>& g, const Lineage& lineage) {
  Checkpoint c;
  c.meta = net_json(g.net());
  c.meta["kind"] = "generator";
  c.meta["role"] = "generator";
  c.meta["skip"] = g.skip();
  c.meta["out"] = g.out();
  c.meta["data_dim"] = g.data_dim();
  c.meta["class_count"] = g.class_count();
  put_lineage(c.meta, lineage);
  c.params = g.net().parameters();
  return c;
}

Generator<double> generator_from_checkpoint(const Checkpoint& ckpt) {
  return guarded("generator checkpoint", [&] {
    const auto& m = ckpt.meta;
    if (m.at("kind").get<std::string>() != "generator") throw FormatError("checkpoint does not hold a generator");
    return Generator<double>(net_from_json(m, ckpt.params), m.at("skip").get<double>(), m.at("out").get<double>(),
                             m.at("data_dim").get<int>(), m.at("class_count").get<int>());
  });
}

std::string encode_pairs(const PairedDataset<double>& ds, const Lineage& lineage) {
  const auto n = static_cast<std::size_t>(ds.size());
  const auto dim = static_cast<std::size_t>(ds.dim());
  if (ds.y.rows() != ds.z.rows() || ds.y.cols() != ds.z.cols()) throw ShapeError("pairs: z and y differ in shape");
  if (ds.labelled() && ds.labels.size() != n) throw ShapeError("pairs: need one label per pair");
  json meta = {{"format_version", checkpoint_format_version},
               {"pair_format_version", ds.meta.format_version},
               {"count", n},
               {"dim", dim},
               {"solver", to_string(ds.meta.solver)},
               {"steps", ds.meta.steps},
               {"omega", ds.meta.omega},
               {"has_labels", ds.labelled()}};
  put_lineage(meta, lineage);
  meta["teacher_hash"] = hex64(ds.meta.teacher_hash);
  std::vector<double> payload;
  payload.reserve(n * (2 * dim + 1));
  payload.insert(payload.end(), ds.z.data(), ds.z.data() + ds.z.size());
  payload.insert(payload.end(), ds.y.data(), ds.y.data() + ds.y.size());
  for (int l : ds.labels) payload.push_back(static_cast<double>(l));
  meta["value_count"] = payload.size();
  return encode_container(pairs_magic, meta, payload.data(), payload.size());
}

PairedDataset<double> decode_pairs(std::string_view bytes, Lineage* lineage) {
  auto [meta, values] = decode_container(bytes, pairs_magic, "value_count");
  return guarded("pair file", [&] {
    const auto n = meta.at("count").get<std::size_t>();
    const auto dim = meta.at("dim").get<std::size_t>();
    const bool has_labels = meta.at("has_labels").get<bool>();
    if (values.size() != n * (2 * dim + (has_labels ? 1 : 0)))
      throw FormatError("pair file: payload does not match count and dim");
    PairedDataset<double> ds;
    ds.z = Eigen::Map<const MatrixXd>(values.data(), Eigen::Index(n), Eigen::Index(dim));
    ds.y = Eigen::Map<const MatrixXd>(values.data() + n * dim, Eigen::Index(n), Eigen::Index(dim));
    if (has_labels)
      for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(static_cast<int>(values[2 * n * dim + i]));
    ds.meta.format_version = meta.at("pair_format_version").get<std::uint32_t>();
    ds.meta.solver = solver_from_string(meta.at("solver").get<std::string>());
    ds.meta.steps = meta.at("steps").get<int>();
    ds.meta.omega = meta.at("omega").get<double>();
    ds.meta.teacher_hash = parse_hex(meta, "teacher_hash");
    if (lineage) *lineage = lineage_of(meta);
    return ds;
  });
}

void save_pairs(const std::filesystem::path& path, const PairedDataset<double>& ds, const Lineage& lineage) {
  write_file_atomic(path, encode_pairs(ds, lineage));
}

PairedDataset<double> load_pairs(const std::filesystem::path& path, Lineage* lineage) {
  return decode_pairs(read_file(path), lineage);
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_points_csv(std::ostream& os, const MatrixXd& points, std::span<const int> labels) {
  if (!labels.empty() && static_cast<Eigen::Index>(labels.size()) != points.rows())
    throw ShapeError("points csv: need one label per row");
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    for (Eigen::Index j = 0; j < points.cols(); ++j) os << (j ? "," : "") << format_double(points(i, j));
    if (!labels.empty()) os << "," << labels[static_cast<std::size_t>(i)];
    os << "\n";
  }
}

void write_train_log_csv(std::ostream& os, const std::vector<TrainLogEntry>& log) {
  os << "step,loss\n";
  for (const auto& e : log) os << e.step << "," << format_double(e.loss) << "\n";
}

void write_distill_log_csv(std::ostream& os, const std::vector<DistillLogRow>& log) {
  os << "iter,kl_surrogate,reg_loss,fake_denoise_loss,grad_norm\n";
  for (const auto& r : log)
    os << r.iter << "," << format_double(r.kl_surrogate) << "," << format_double(r.reg_loss) << ","
       << format_double(r.fake_denoise_loss) << "," << format_double(r.grad_norm) << "\n";
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
  std::size_t modes = 0;
  for (const auto& r : rows) modes = std::max(modes, r.report.mode_shares.size());
  os << "run,mmd,sliced_wasserstein,mode_recall";
  for (std::size_t k = 0; k < modes; ++k) os << ",share_" << k;
  os << ",mmd_noise_floor,samples,reference_samples,seed\n";
  for (const auto& r : rows) {
    const auto& m = r.report;
    os << r.label << "," << format_double(m.mmd) << "," << format_double(m.sliced_wasserstein) << ","
       << format_double(m.mode_recall);
    for (std::size_t k = 0; k < modes; ++k)
      os << "," << (k < m.mode_shares.size() ? format_double(m.mode_shares[k]) : "");
    os << "," << format_double(r.noise_floor) << "," << m.samples << "," << m.reference_samples << "," << m.seed
       << "\n";
  }
}

void write_scatter_svg(std::ostream& os, const std::vector<ScatterPanel>& panels,
                       const GaussianMixture<double>& target) {
  constexpr double panel = 300, pad = 20, title = 24;
  const std::size_t n = std::max<std::size_t>(panels.size(), 1);
  const double width = n * panel + (n + 1) * pad;
  const double height = panel + title + 2 * pad;

  // one frame for every panel: target modes +- 4 stds, widened to fit samples
  double lo[2] = {1e300, 1e300}, hi[2] = {-1e300, -1e300};
  auto grow = [&](double x, double y) {
    lo[0] = std::min(lo[0], x), hi[0] = std::max(hi[0], x);
    lo[1] = std::min(lo[1], y), hi[1] = std::max(hi[1], y);
  };
  const bool two_d = target.dim() >= 2;
  for (const auto& c : target.components()) {
    const double y = two_d ? c.mean(1) : 0.0;
    grow(c.mean(0) - 4 * c.std, y - 4 * c.std);
    grow(c.mean(0) + 4 * c.std, y + 4 * c.std);
  }
  for (const auto& p : panels)
    for (Eigen::Index i = 0; i < p.points.rows(); ++i)
      if (p.points.row(i).allFinite()) grow(p.points(i, 0), two_d ? p.points(i, 1) : 0.0);
  const double span = std::max(hi[0] - lo[0], hi[1] - lo[1]);
  const double cx = 0.5 * (lo[0] + hi[0]), cy = 0.5 * (lo[1] + hi[1]);
  auto px = [&](double x) { return panel * (0.5 + (x - cx) / span); };
  auto py = [&](double y) { return panel * (0.5 - (y - cy) / span); };
  auto num = [](double v) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(2);
    s << v;
    return s.str();
  };

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << num(width) << " " << num(height)
     << "\" width=\"" << num(width) << "\" height=\"" << num(height) << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t k = 0; k < panels.size(); ++k) {
    const double ox = pad + k * (panel + pad), oy = pad + title;
    os << "<g transform=\"translate(" << num(ox) << "," << num(oy) << ")\">\n"
       << "<text x=\"" << num(panel / 2) << "\" y=\"-8\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       << "font-size=\"14\">" << panels[k].title << "</text>\n"
       << "<rect width=\"" << num(panel) << "\" height=\"" << num(panel)
       << "\" fill=\"none\" stroke=\"#888\"/>\n";
    const auto& pts = panels[k].points;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      if (!pts.row(i).allFinite()) continue;
      const double x = px(pts(i, 0)), y = py(two_d ? pts(i, 1) : 0.0);
      if (x < 0 || x > panel || y < 0 || y > panel) continue;
      os << "<circle cx=\"" << num(x) << "\" cy=\"" << num(y) << "\" r=\"1.2\" fill=\"#1f5fa8\" fill-opacity=\"0.35\"/>\n";
    }
    for (const auto& c : target.components())
      os << "<circle cx=\"" << num(px(c.mean(0))) << "\" cy=\"" << num(py(two_d ? c.mean(1) : 0.0)) << "\" r=\""
         << num(panel * 2 * c.std / span) << "\" fill=\"none\" stroke=\"#d33\" stroke-width=\"1.5\"/>\n";
    os << "</g>\n";
  }
  os << "</svg>\n";
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace dmd
