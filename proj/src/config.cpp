#include "dmd/config.hpp"

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace dmd {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, res.ptr);
  // TOML floats need a '.' or exponent, otherwise they read back as integers.
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

template <typename T, typename F>
std::string fmt_array(const std::vector<T>& values, F&& f) {
  std::string out = "[";
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? ", " : "") + f(values[i]);
  return out + "]";
}

void write_optimizer(std::ostream& os, const std::string& table, const AdamWOptions<double>& o) {
  os << "\n[" << table << "]\n"
     << "lr = " << fmt_double(o.lr) << "\n"
     << "beta1 = " << fmt_double(o.beta1) << "\n"
     << "beta2 = " << fmt_double(o.beta2) << "\n"
     << "eps = " << fmt_double(o.eps) << "\n"
     << "weight_decay = " << fmt_double(o.weight_decay) << "\n"
     << "clip_norm = " << fmt_double(o.clip_norm) << "\n";
}

std::string section_target(const RunConfig& c) {
  std::ostringstream os;
  for (const auto& comp : c.target) {
    os << "\n[[target.components]]\n"
       << "weight = " << fmt_double(comp.weight) << "\n"
       << "mean = "
       << fmt_array(std::vector<double>(comp.mean.data(), comp.mean.data() + comp.mean.size()), fmt_double)
       << "\n"
       << "std = " << fmt_double(comp.std) << "\n"
       << "label = " << comp.label << "\n";
  }
  return os.str();
}

std::string section_schedule(const RunConfig& c) {
  std::ostringstream os;
  os << "\n[schedule]\n"
     << "kind = " << quote(to_string(c.schedule.kind)) << "\n"
     << "bins = " << c.schedule.bins << "\n"
     << "sigma_min = " << fmt_double(c.schedule.sigma_min) << "\n"
     << "sigma_max = " << fmt_double(c.schedule.sigma_max) << "\n";
  return os.str();
}

std::string section_teacher(const RunConfig& c) {
  const auto& t = c.teacher;
  std::ostringstream os;
  os << "\n[teacher]\n"
     << "hidden = " << fmt_array(t.hidden, [](int v) { return std::to_string(v); }) << "\n"
     << "activation = " << quote(to_string(t.activation)) << "\n"
     << "prediction = " << quote(to_string(t.prediction)) << "\n"
     << "sigma_data = " << fmt_double(t.sigma_data) << "\n"
     << "steps = " << t.steps << "\n"
     << "batch = " << t.batch << "\n"
     << "lr_floor = " << fmt_double(t.lr_floor) << "\n"
     << "label_dropout = " << fmt_double(t.label_dropout) << "\n"
     << "conditional = " << (t.conditional ? "true" : "false") << "\n"
     << "low_noise_fraction = " << fmt_double(t.low_noise_fraction) << "\n";
  write_optimizer(os, "teacher.optimizer", t.optimizer);
  return os.str();
}

std::string section_pairs(const RunConfig& c) {
  std::ostringstream os;
  os << "\n[pairs]\n"
     << "count = " << c.pairs.count << "\n"
     << "solver = " << quote(to_string(c.pairs.solver)) << "\n"
     << "steps = " << c.pairs.steps << "\n"
     << "omega = " << fmt_double(c.pairs.omega) << "\n";
  return os.str();
}

std::string section_distill(const RunConfig& c) {
  const auto& d = c.distill;
  std::ostringstream os;
  os << "\n[distill]\n"
     << "lambda_reg = " << fmt_double(d.lambda_reg) << "\n"
     << "use_dm = " << (d.use_dm ? "true" : "false") << "\n"
     << "omega = " << fmt_double(d.omega) << "\n"
     << "t_min_frac = " << fmt_double(d.t_min_frac) << "\n"
     << "t_max_frac = " << fmt_double(d.t_max_frac) << "\n"
     << "dm_batch = " << d.dm_batch << "\n"
     << "reg_batch = " << d.reg_batch << "\n"
     << "iterations = " << d.iterations << "\n"
     << "fake_steps_per_generator_step = " << d.fake_steps_per_generator_step << "\n"
     << "weighting = " << quote(to_string(d.weighting)) << "\n"
     << "distance = " << quote(to_string(d.distance)) << "\n"
     << "feature_dim = " << d.feature_dim << "\n"
     << "start_shift = " << fmt_array(d.start_shift, fmt_double) << "\n";
  write_optimizer(os, "distill.generator_optimizer", d.generator_opt);
  write_optimizer(os, "distill.fake_optimizer", d.fake_opt);
  return os.str();
}

std::string section_eval(const RunConfig& c) {
  const auto& e = c.eval;
  std::ostringstream os;
  os << "\n[eval]\n"
     << "samples = " << e.samples << "\n"
     << "reference_samples = " << e.reference_samples << "\n"
     << "radius_stds = " << fmt_double(e.radius_stds) << "\n"
     << "min_share = " << fmt_double(e.min_share) << "\n"
     << "projections = " << e.projections << "\n"
     << "bandwidth = " << fmt_double(e.bandwidth) << "\n"
     << "floor_resamples = " << e.floor_resamples << "\n";
  return os.str();
}

// ---- parsing ----

int line_of(const toml::node& n) { return static_cast<int>(n.source().begin.line); }

[[noreturn]] void fail(const std::string& path, int line, const std::string& what) {
  std::string msg = path + ": " + what;
  if (line > 0) msg += " (line " + std::to_string(line) + ")";
  throw ConfigError(msg, path, line);
}

/// Table wrapper that remembers which keys were read so leftovers can be
/// reported as unknown.
class Section {
 public:
  Section(const toml::table* t, std::string path) : table_(t), path_(std::move(path)) {}

  bool present() const { return table_ != nullptr; }
  const std::string& path() const { return path_; }
  std::string key_path(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

  const toml::node* get(std::string_view key) {
    if (!table_) return nullptr;
    used_.insert(std::string(key));
    return table_->get(key);
  }

  Section sub(std::string_view key) {
    const toml::node* n = get(key);
    if (!n) return {nullptr, key_path(key)};
    if (!n->is_table()) fail(key_path(key), line_of(*n), "expected a table");
    return {n->as_table(), key_path(key)};
  }

  void read(std::string_view key, double& out) {
    if (const auto* n = get(key)) {
      if (auto v = n->as_floating_point()) out = v->get();
      else if (auto i = n->as_integer()) out = static_cast<double>(i->get());
      else fail(key_path(key), line_of(*n), "expected a number");
    }
  }

  void read(std::string_view key, int& out) {
    if (const auto* n = get(key)) {
      auto i = n->as_integer();
      if (!i) fail(key_path(key), line_of(*n), "expected an integer");
      if (i->get() < std::numeric_limits<int>::min() || i->get() > std::numeric_limits<int>::max())
        fail(key_path(key), line_of(*n), "integer out of range");
      out = static_cast<int>(i->get());
    }
  }

  void read(std::string_view key, bool& out) {
    if (const auto* n = get(key)) {
      auto b = n->as_boolean();
      if (!b) fail(key_path(key), line_of(*n), "expected true or false");
      out = b->get();
    }
  }

  void read(std::string_view key, std::string& out) {
    if (const auto* n = get(key)) {
      auto s = n->as_string();
      if (!s) fail(key_path(key), line_of(*n), "expected a string");
      out = s->get();
    }
  }

  /// Enum fields go through their from_string converter; conversion errors
  /// are rethrown as config errors with the field path.
  template <typename E, typename Conv>
  void read_enum(std::string_view key, E& out, Conv&& conv) {
    if (const auto* n = get(key)) {
      auto s = n->as_string();
      if (!s) fail(key_path(key), line_of(*n), "expected a string");
      try {
        out = conv(s->get());
      } catch (const Error& e) {
        fail(key_path(key), line_of(*n), e.what());
      }
    }
  }

  template <typename T>
  void read_array(std::string_view key, std::vector<T>& out) {
    if (const auto* n = get(key)) {
      auto arr = n->as_array();
      if (!arr) fail(key_path(key), line_of(*n), "expected an array");
      std::vector<T> values;
      for (const auto& el : *arr) {
        if constexpr (std::is_same_v<T, int>) {
          auto i = el.as_integer();
          if (!i) fail(key_path(key), line_of(el), "expected integers");
          values.push_back(static_cast<int>(i->get()));
        } else {
          if (auto f = el.as_floating_point()) values.push_back(f->get());
          else if (auto i = el.as_integer()) values.push_back(static_cast<double>(i->get()));
          else fail(key_path(key), line_of(el), "expected numbers");
        }
      }
      out = std::move(values);
    }
  }

  void reject_unknown() const {
    if (!table_) return;
    for (const auto& [k, v] : *table_)
      if (!used_.count(std::string(k.str()))) fail(key_path(k.str()), line_of(v), "unknown key");
  }

 private:
  const toml::table* table_;
  std::string path_;
  std::set<std::string> used_;
};

void read_optimizer(Section&& s, AdamWOptions<double>& o) {
  s.read("lr", o.lr);
  s.read("beta1", o.beta1);
  s.read("beta2", o.beta2);
  s.read("eps", o.eps);
  s.read("weight_decay", o.weight_decay);
  s.read("clip_norm", o.clip_norm);
  s.reject_unknown();
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

NoiseSchedule<double> RunConfig::build_schedule() const {
  auto s = NoiseSchedule<double>::build(schedule);
  s.set_window(distill.t_min_frac, distill.t_max_frac);
  return s;
}

RunConfig default_run_config() {
  const Figure3Setup f = figure3_config();
  RunConfig c;
  c.seed = 0;
  c.target = f.target.components();
  c.schedule = f.schedule;
  c.teacher = f.teacher;
  c.pairs.count = f.pair_count;
  c.pairs.solver = f.solver;
  c.pairs.steps = f.solver_steps;
  c.distill = f.arms[0].config;
  c.eval.samples = f.eval_samples;
  c.eval.reference_samples = f.eval_samples;
  c.eval.radius_stds = f.eval.radius_stds;
  c.eval.min_share = f.eval.min_share;
  c.eval.projections = f.eval.projections;
  c.eval.bandwidth = f.eval.bandwidth;
  return c;
}

RunConfig parse_run_config(std::string_view text, const std::string& source) {
  toml::table doc;
  try {
    doc = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    const int line = static_cast<int>(e.source().begin.line);
    throw ConfigError(source + ":" + std::to_string(line) + ": " + std::string(e.description()), "", line);
  }

  RunConfig c = default_run_config();
  c.target.clear();
  Section root(&doc, "");

  {
    const toml::node* n = root.get("seed");
    if (!n) fail("seed", 0, "required field is missing");
    auto i = n->as_integer();
    if (!i || i->get() < 0) fail("seed", line_of(*n), "expected a non-negative integer");
    c.seed = static_cast<std::uint64_t>(i->get());
  }
  root.read("output_dir", c.output_dir);

  {
    Section target = root.sub("target");
    const toml::node* comps = target.get("components");
    if (!comps) fail("target.components", 0, "required field is missing");
    const auto* arr = comps->as_array();
    if (!arr || arr->empty() || !arr->is_array_of_tables())
      fail("target.components", line_of(*comps), "expected a non-empty array of tables");
    for (std::size_t k = 0; k < arr->size(); ++k) {
      Section s((*arr)[k].as_table(), "target.components[" + std::to_string(k) + "]");
      MixtureComponent<double> comp;
      std::vector<double> mean;
      s.read("weight", comp.weight);
      s.read("std", comp.std);
      s.read("label", comp.label);
      if (!s.get("mean")) fail(s.key_path("mean"), line_of((*arr)[k]), "required field is missing");
      s.read_array("mean", mean);
      comp.mean = Eigen::Map<const RowVector<double>>(mean.data(), static_cast<Eigen::Index>(mean.size()));
      s.reject_unknown();
      c.target.push_back(std::move(comp));
    }
    target.reject_unknown();
    try {
      GaussianMixture<double> check(c.target);
    } catch (const Error& e) {
      fail("target.components", line_of(*comps), e.what());
    }
  }

  {
    Section s = root.sub("schedule");
    const toml::node* kind = s.get("kind");
    if (!kind) fail("schedule.kind", 0, "required field is missing");
    s.read_enum("kind", c.schedule.kind, schedule_kind_from_string);
    s.read("bins", c.schedule.bins);
    s.read("sigma_min", c.schedule.sigma_min);
    s.read("sigma_max", c.schedule.sigma_max);
    s.reject_unknown();
    try {
      NoiseSchedule<double>::build(c.schedule);
    } catch (const Error& e) {
      fail("schedule", line_of(*kind), e.what());
    }
  }

  {
    Section s = root.sub("teacher");
    auto& t = c.teacher;
    s.read_array("hidden", t.hidden);
    s.read_enum("activation", t.activation, activation_from_string);
    s.read_enum("prediction", t.prediction, prediction_from_string);
    s.read("sigma_data", t.sigma_data);
    s.read("steps", t.steps);
    s.read("batch", t.batch);
    s.read("lr_floor", t.lr_floor);
    s.read("label_dropout", t.label_dropout);
    s.read("conditional", t.conditional);
    s.read("low_noise_fraction", t.low_noise_fraction);
    read_optimizer(s.sub("optimizer"), t.optimizer);
    s.reject_unknown();
    for (int w : t.hidden)
      if (w < 1) fail("teacher.hidden", 0, "widths must be positive");
    if (t.steps < 1 || t.batch < 1) fail("teacher", 0, "steps and batch must be >= 1");
    if (!(t.low_noise_fraction >= 0.0 && t.low_noise_fraction < 1.0))
      fail("teacher.low_noise_fraction", 0, "must lie in [0, 1)");
  }

  {
    Section s = root.sub("pairs");
    s.read("count", c.pairs.count);
    s.read_enum("solver", c.pairs.solver, solver_from_string);
    s.read("steps", c.pairs.steps);
    s.read("omega", c.pairs.omega);
    s.reject_unknown();
    if (c.pairs.count < 1) fail("pairs.count", 0, "must be >= 1");
    if (c.pairs.steps < 1) fail("pairs.steps", 0, "must be >= 1");
  }

  {
    Section s = root.sub("distill");
    auto& d = c.distill;
    s.read("lambda_reg", d.lambda_reg);
    s.read("use_dm", d.use_dm);
    s.read("omega", d.omega);
    s.read("t_min_frac", d.t_min_frac);
    s.read("t_max_frac", d.t_max_frac);
    s.read("dm_batch", d.dm_batch);
    s.read("reg_batch", d.reg_batch);
    s.read("iterations", d.iterations);
    s.read("fake_steps_per_generator_step", d.fake_steps_per_generator_step);
    s.read_enum("weighting", d.weighting, weighting_from_string);
    s.read_enum("distance", d.distance, regression_distance_from_string);
    s.read("feature_dim", d.feature_dim);
    s.read_array("start_shift", d.start_shift);
    read_optimizer(s.sub("generator_optimizer"), d.generator_opt);
    read_optimizer(s.sub("fake_optimizer"), d.fake_opt);
    s.reject_unknown();
    try {
      d.validate();
    } catch (const Error& e) {
      fail("distill", 0, e.what());
    }
    if (!d.start_shift.empty() && d.start_shift.size() != static_cast<std::size_t>(c.target.front().mean.size()))
      fail("distill.start_shift", 0, "needs one entry per data dimension");
  }

  {
    Section s = root.sub("eval");
    auto& e = c.eval;
    s.read("samples", e.samples);
    s.read("reference_samples", e.reference_samples);
    s.read("radius_stds", e.radius_stds);
    s.read("min_share", e.min_share);
    s.read("projections", e.projections);
    s.read("bandwidth", e.bandwidth);
    s.read("floor_resamples", e.floor_resamples);
    s.reject_unknown();
    if (e.samples < 1 || e.reference_samples < 1) fail("eval.samples", 0, "must be >= 1");
    if (e.projections < 1) fail("eval.projections", 0, "must be >= 1");
    if (!(e.radius_stds > 0)) fail("eval.radius_stds", 0, "must be > 0");
    if (e.floor_resamples < 1) fail("eval.floor_resamples", 0, "must be >= 1");
  }

  root.reject_unknown();

  c.teacher.seed = stage_seed(c.seed, "teacher");
  c.distill.seed = stage_seed(c.seed, "distill");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string(), "", 0);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.string());
}

std::string serialize_run_config(const RunConfig& c) {
  std::ostringstream os;
  os << "seed = " << c.seed << "\n"
     << "output_dir = " << quote(c.output_dir) << "\n";
  os << section_target(c) << section_schedule(c) << section_teacher(c) << section_pairs(c) << section_distill(c)
     << section_eval(c);
  return os.str();
}

std::uint64_t config_hash(const RunConfig& c) {
  // output_dir is where artifacts live, not what they are.
  RunConfig copy = c;
  copy.output_dir.clear();
  return hash_string(serialize_run_config(copy));
}

std::uint64_t stage_hash(const RunConfig& c, Stage stage) {
  std::string key = "seed=" + std::to_string(c.seed) + section_target(c) + section_schedule(c) + section_teacher(c);
  if (stage == Stage::teacher) return hash_string("teacher\n" + key);
  key += section_pairs(c);
  if (stage == Stage::pairs) return hash_string("pairs\n" + key);
  return hash_string("distill\n" + key + section_distill(c));
}

std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage) {
  return splitmix64(seed ^ fnv1a({reinterpret_cast<const unsigned char*>(stage.data()), stage.size()}));
}

}  // namespace dmd
