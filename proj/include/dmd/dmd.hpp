#pragma once

#include "dmd/sampler.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dmd {

/// One-step generator: x = skip z + out F([z, one-hot label]).
///
/// skip and out are fixed scalars inherited from the teacher's output
/// mapping at the last bin; only the network parameters train.
template <typename Scalar>
class Generator {
 public:
  using Mat = Matrix<Scalar>;

  Generator() = default;
  Generator(Mlp<Scalar> net, Scalar skip, Scalar out, int data_dim, int class_count = 0)
      : net_(std::move(net)), skip_(skip), out_(out), data_dim_(data_dim), class_count_(class_count) {
    const int expected = data_dim + (class_count > 0 ? class_count + 1 : 0);
    if (net_.input_width() != expected || net_.output_width() != data_dim)
      throw ShapeError("generator: network is " + std::to_string(net_.input_width()) + " -> " +
                       std::to_string(net_.output_width()) + ", expected " + std::to_string(expected) + " -> " +
                       std::to_string(data_dim));
  }

  const Mlp<Scalar>& net() const { return net_; }
  Mlp<Scalar>& net() { return net_; }
  Scalar skip() const { return skip_; }
  Scalar out() const { return out_; }
  int data_dim() const { return data_dim_; }
  int class_count() const { return class_count_; }
  bool conditional() const { return class_count_ > 0; }

  Mat network_input(const Mat& z, std::span<const int> labels) const {
    if (z.cols() != data_dim_)
      throw ShapeError("generator: z has " + std::to_string(z.cols()) + " coordinates, expected " +
                       std::to_string(data_dim_));
    if (!conditional()) {
      if (!labels.empty()) throw DomainError("generator: unconditional generator given labels");
      return z;
    }
    if (static_cast<Eigen::Index>(labels.size()) != z.rows())
      throw DomainError("generator: conditional generator needs one label per row");
    Mat in = Mat::Zero(z.rows(), net_.input_width());
    in.leftCols(data_dim_) = z;
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const int label = labels[static_cast<std::size_t>(i)];
      if (label < 0 || label > class_count_) throw DomainError("generator: label out of range");
      in(i, data_dim_ + label) = Scalar(1);
    }
    return in;
  }

  Mat forward(const Mat& z, std::span<const int> labels = {}) const {
    return skip_ * z + out_ * net_.forward(network_input(z, labels));
  }

  /// Moves every output by `shift` through the last-layer bias.
  void shift_output(const RowVector<Scalar>& shift) {
    if (shift.size() != data_dim_) throw ShapeError("generator: shift has wrong dimension");
    if (out_ == Scalar(0)) throw DomainError("generator: cannot shift through a zero output scale");
    const std::size_t last = net_.layer_count() - 1;
    net_.bias(last) += shift / out_;
  }

  struct Recorded {
    NodeId x;
    MlpTrace trace;
  };

  Recorded record(Tape<Scalar>& tape, const Mat& z, std::span<const int> labels = {}) const {
    MlpTrace trace = mlp_forward(net_, tape.constant(network_input(z, labels)), tape, true);
    NodeId x = tape.add(tape.scale(trace.output, out_), tape.constant(skip_ * z));
    return {x, trace};
  }

 private:
  Mlp<Scalar> net_;
  Scalar skip_ = Scalar(0);
  Scalar out_ = Scalar(1);
  int data_dim_ = 0;
  int class_count_ = 0;
};

/// Copies the teacher into a generator with G(z) = mu_base(z, T-1): the
/// last-bin time embedding is folded into the first-layer bias and the
/// input scaling into the first-layer weights.
template <typename Scalar>
Generator<Scalar> init_generator(const Denoiser<Scalar>& teacher) {
  const int dim = teacher.data_dim();
  const int classes = teacher.class_count();
  const auto& tnet = teacher.net();
  if (tnet.input_width() != Denoiser<Scalar>::input_width(dim, classes) || tnet.output_width() != dim ||
      tnet.layer_count() < 1)
    throw ShapeError("init_generator: teacher network does not have the denoiser layout");
  const int last = teacher.schedule().bins() - 1;
  const auto c = teacher.coefficients(last);

  std::vector<int> widths = tnet.widths();
  widths[0] = dim + (classes > 0 ? classes + 1 : 0);
  Mlp<Scalar> net(widths, tnet.hidden_activations());
  for (std::size_t l = 1; l < tnet.layer_count(); ++l) {
    net.weight(l) = tnet.weight(l);
    net.bias(l) = tnet.bias(l);
  }
  auto w0 = tnet.weight(0);
  auto gw0 = net.weight(0);
  gw0.topRows(dim) = c.c_in * w0.topRows(dim);
  if (classes > 0) gw0.bottomRows(classes + 1) = w0.bottomRows(classes + 1);
  const Scalar time_feature = Scalar(last) / Scalar(teacher.schedule().bins());
  const Scalar log_ratio = std::log(teacher.schedule().noise_ratio(last)) / Scalar(4);
  net.bias(0) = tnet.bias(0) + time_feature * w0.row(dim) + log_ratio * w0.row(dim + 1);
  return Generator<Scalar>(std::move(net), c.skip, c.out, dim, classes);
}

enum class Weighting { alg2_code, paper_eq8 };

inline const char* to_string(Weighting w) { return w == Weighting::alg2_code ? "alg2-code" : "paper-eq8"; }

inline Weighting weighting_from_string(const std::string& s) {
  if (s == "alg2-code") return Weighting::alg2_code;
  if (s == "paper-eq8") return Weighting::paper_eq8;
  throw DomainError("unknown weighting mode '" + s + "' (expected alg2-code or paper-eq8)");
}

enum class RegressionDistance { squared_l2, random_feature };

inline const char* to_string(RegressionDistance d) {
  return d == RegressionDistance::squared_l2 ? "squared-l2" : "random-feature";
}

inline RegressionDistance regression_distance_from_string(const std::string& s) {
  if (s == "squared-l2") return RegressionDistance::squared_l2;
  if (s == "random-feature") return RegressionDistance::random_feature;
  throw DomainError("unknown regression distance '" + s + "' (expected squared-l2 or random-feature)");
}

struct DmdConfig {
  double lambda_reg = 0.25;
  /// Toggles the distribution-matching term; false gives the regression-only ablation.
  bool use_dm = true;
  double omega = 1.0;
  double t_min_frac = 0.02;
  double t_max_frac = 0.98;
  int dm_batch = 128;
  int reg_batch = 64;
  AdamWOptions<double> generator_opt{5e-5, 0.9, 0.999, 1e-8, 0.01, 10.0};
  AdamWOptions<double> fake_opt{5e-5, 0.9, 0.999, 1e-8, 0.01, 10.0};
  int iterations = 2000;
  int fake_steps_per_generator_step = 1;
  Weighting weighting = Weighting::alg2_code;
  RegressionDistance distance = RegressionDistance::squared_l2;
  int feature_dim = 16;
  /// Offset added to the initialized generator's outputs; empty leaves the
  /// teacher initialization untouched. Lets several objectives start from
  /// one shared, deliberately placed configuration.
  std::vector<double> start_shift;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lambda_reg >= 0.0)) throw DomainError("dmd config: lambda_reg must be >= 0");
    if (dm_batch < 1 || reg_batch < 1) throw DomainError("dmd config: batch sizes must be >= 1");
    if (iterations < 0) throw DomainError("dmd config: iterations must be >= 0");
    if (fake_steps_per_generator_step < 0) throw DomainError("dmd config: fake step ratio must be >= 0");
    if (!(omega >= 0.0)) throw DomainError("dmd config: guidance scale must be >= 0");
    if (!(0.0 <= t_min_frac && t_min_frac <= t_max_frac && t_max_frac < 1.0))
      throw DomainError("dmd config: need 0 <= t_min_frac <= t_max_frac < 1");
    if (feature_dim < 1) throw DomainError("dmd config: feature_dim must be >= 1");
  }
};

inline constexpr double weight_floor = 1e-8;

/// Per-sample normalizer of the distribution-matching direction.
///
/// paper-eq8: w = (sigma^2 / alpha) * mean|mu_real - x|.
/// alg2-code: w = max(mean|x - mu_real|, 1e-8), used as a divisor.
template <typename Scalar, typename A, typename B>
Scalar compute_weight(const NoiseSchedule<Scalar>& s, int t, const Eigen::MatrixBase<A>& x,
                      const Eigen::MatrixBase<B>& mu_real, Weighting mode) {
  if (x.size() != mu_real.size()) throw ShapeError("compute_weight: x and mu_real differ in size");
  const Scalar mean_abs = (x - mu_real).cwiseAbs().sum() / Scalar(x.size());
  if (mode == Weighting::paper_eq8) return s.sigma(t) * s.sigma(t) / s.alpha(t) * mean_abs;
  return std::max(mean_abs, Scalar(weight_floor));
}

template <typename Scalar>
struct DmGradient {
  Vector<Scalar> grad;
  Scalar surrogate_loss = Scalar(0);
  /// Gradient of the surrogate with respect to each generated sample.
  Matrix<Scalar> sample_grad;
  Matrix<Scalar> x;
  std::vector<int> bins;
};

/// Per-sample distribution-matching direction on fixed diffusion draws.
/// Rows are already divided by the batch size.
template <typename Scalar>
Matrix<Scalar> dm_direction(const MeanModel<Scalar>& real, const MeanModel<Scalar>& fake, const Matrix<Scalar>& x,
                            std::span<const int> bins, const Matrix<Scalar>& eps, Weighting mode,
                            std::span<const int> labels = {}) {
  const auto& s = real.schedule();
  const Matrix<Scalar> x_t = diffuse<Scalar>(s, x, std::vector<int>(bins.begin(), bins.end()), eps);
  const Matrix<Scalar> mu_real = real.mean(x_t, bins, labels);
  const Matrix<Scalar> mu_fake = fake.mean(x_t, bins, labels);
  Matrix<Scalar> g(x.rows(), x.cols());
  const Scalar inv_batch = Scalar(1) / Scalar(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const int t = bins[static_cast<std::size_t>(i)];
    const Scalar w = compute_weight(s, t, x.row(i), mu_real.row(i), mode);
    if (mode == Weighting::alg2_code) {
      g.row(i) = (mu_fake.row(i) - mu_real.row(i)) / w;
    } else {
      // w * alpha * (s_fake - s_real), with s_fake - s_real = alpha (mu_fake - mu_real) / sigma^2
      const Scalar a = s.alpha(t), sg = s.sigma(t);
      g.row(i) = w * a * a / (sg * sg) * (mu_fake.row(i) - mu_real.row(i));
    }
    if (!g.row(i).allFinite())
      throw NumericError("dm_gradient: non-finite direction for sample " + std::to_string(i));
    g.row(i) *= inv_batch;
  }
  return g;
}

/// Distribution-matching gradient through the generator, realized by the
/// surrogate 0.5 ||x - stopgrad(x - g)||^2 whose x-gradient is exactly g.
template <typename Scalar>
DmGradient<Scalar> dm_gradient(const Generator<Scalar>& gen, const MeanModel<Scalar>& real,
                               const MeanModel<Scalar>& fake, const Matrix<Scalar>& z, Rng& rng, Weighting mode,
                               std::span<const int> labels = {}) {
  const auto& s = real.schedule();
  DmGradient<Scalar> out;
  Tape<Scalar> tape;
  auto rec = gen.record(tape, z, labels);
  out.x = tape.value(rec.x);
  out.bins.resize(static_cast<std::size_t>(z.rows()));
  for (auto& t : out.bins) t = sample_timestep(s, rng);
  const Matrix<Scalar> eps = standard_normal<Scalar>(z.rows(), z.cols(), rng);
  out.sample_grad = dm_direction(real, fake, out.x, out.bins, eps, mode, labels);
  NodeId target = tape.constant(out.x - out.sample_grad);
  NodeId diff = tape.sub(rec.x, target);
  NodeId loss = tape.scale(tape.sum(tape.mul(diff, diff)), Scalar(0.5));
  tape.backward(loss);
  out.surrogate_loss = tape.value(loss)(0, 0);
  out.grad = parameter_gradient(gen.net(), tape, rec.trace);
  return out;
}

/// Fixed random linear features for the feature-space regression distance;
/// entries N(0, 1/k) so the distance matches squared L2 in expectation.
template <typename Scalar>
Matrix<Scalar> random_feature_map(int dim, int k, std::uint64_t seed) {
  Rng rng(seed ^ 0x5eedfea7u);
  Matrix<Scalar> r = standard_normal<Scalar>(dim, k, rng);
  return r / std::sqrt(Scalar(k));
}

/// lambda_reg * mean_i l(G(z_i), y_i) with its parameter gradient.
template <typename Scalar>
LossAndGrad<Scalar> regression_loss(const Generator<Scalar>& gen, const Matrix<Scalar>& z, const Matrix<Scalar>& y,
                                    RegressionDistance distance, Scalar lambda_reg,
                                    std::span<const int> labels = {}, const Matrix<Scalar>* features = nullptr) {
  if (z.rows() < 1) throw DomainError("regression_loss: empty batch");
  if (y.rows() != z.rows() || y.cols() != gen.data_dim()) throw ShapeError("regression_loss: y does not match z");
  Tape<Scalar> tape;
  auto rec = gen.record(tape, z, labels);
  NodeId diff = tape.sub(rec.x, tape.constant(y));
  if (distance == RegressionDistance::random_feature) {
    if (!features || features->rows() != gen.data_dim())
      throw ShapeError("regression_loss: random-feature distance needs a dim x k feature map");
    diff = tape.matmul(diff, tape.constant(*features));
  }
  NodeId loss = tape.scale(tape.sum(tape.mul(diff, diff)), lambda_reg / Scalar(z.rows()));
  tape.backward(loss);
  return {tape.value(loss)(0, 0), parameter_gradient(gen.net(), tape, rec.trace)};
}

/// One denoising step of the fake model on detached generator samples.
template <typename Scalar>
Scalar fake_score_step(Denoiser<Scalar>& fake, const Matrix<Scalar>& samples, AdamW<Scalar>& opt, Rng& rng,
                       std::span<const int> labels = {}) {
  if (fake.role() != DenoiserRole::fake || fake.frozen())
    throw Error("fake_score_step: model is not a trainable fake-role denoiser");
  auto lg = denoising_loss(fake, samples, rng, labels);
  opt.step(fake.mutable_net().parameters(), std::move(lg.grad));
  return lg.loss;
}

struct DistillLogRow {
  int iter = 0;
  double kl_surrogate = 0;
  double reg_loss = 0;
  double fake_denoise_loss = 0;
  double grad_norm = 0;
};

template <typename Scalar>
struct DistillResult {
  Generator<Scalar> generator;
  Denoiser<Scalar> fake;
  std::vector<DistillLogRow> log;
};

template <typename Scalar>
AdamWOptions<Scalar> cast_options(const AdamWOptions<double>& o) {
  return {Scalar(o.lr), Scalar(o.beta1), Scalar(o.beta2), Scalar(o.eps), Scalar(o.weight_decay), Scalar(o.clip_norm)};
}

/// Full distillation loop: per iteration one generator step on the
/// distribution-matching and regression terms (fresh noise and paired data
/// respectively), then fake-model denoising steps on the detached samples.
template <typename Scalar>
DistillResult<Scalar> dmd_train(const Denoiser<Scalar>& teacher, const PairedDataset<Scalar>& pairs,
                                const DmdConfig& cfg,
                                const std::function<void(const DistillLogRow&, const Generator<Scalar>&)>& on_iter = {}) {
  cfg.validate();
  if (!teacher.frozen()) throw Error("dmd_train: teacher must be frozen");
  const auto teacher_hash = hash_parameters(teacher.net().parameters());
  if (pairs.meta.teacher_hash != teacher_hash)
    throw DomainError("dmd_train: paired dataset teacher hash " + hex64(pairs.meta.teacher_hash) +
                      " does not match teacher " + hex64(teacher_hash));
  if (pairs.size() < 1 && cfg.lambda_reg > 0.0) throw DomainError("dmd_train: empty paired dataset");
  if (pairs.dim() != teacher.data_dim()) throw ShapeError("dmd_train: paired dataset dim differs from teacher");

  // private copy carrying the configured timestep window
  Denoiser<Scalar> base = teacher;
  base.set_timestep_window(cfg.t_min_frac, cfg.t_max_frac);

  DistillResult<Scalar> result;
  result.generator = init_generator(base);
  result.fake = base.as_fake();
  auto& gen = result.generator;
  auto& fake = result.fake;
  if (!cfg.start_shift.empty()) {
    if (static_cast<int>(cfg.start_shift.size()) != teacher.data_dim())
      throw ShapeError("dmd_train: start_shift must have one entry per data dimension");
    gen.shift_output(Eigen::Map<const Eigen::Matrix<double, 1, Eigen::Dynamic>>(cfg.start_shift.data(),
                                                                                 teacher.data_dim())
                         .template cast<Scalar>());
  }

  std::unique_ptr<GuidedModel<Scalar>> guided;
  const MeanModel<Scalar>* real = &base;
  if (base.conditional() && cfg.omega != 1.0) {
    guided = std::make_unique<GuidedModel<Scalar>>(base, base.class_count(), Scalar(cfg.omega));
    real = guided.get();
  }

  Rng rng(cfg.seed);
  AdamW<Scalar> gen_opt(gen.net().parameters().size(), cast_options<Scalar>(cfg.generator_opt));
  AdamW<Scalar> fake_opt(fake.net().parameters().size(), cast_options<Scalar>(cfg.fake_opt));
  const Matrix<Scalar> features =
      random_feature_map<Scalar>(teacher.data_dim(), cfg.feature_dim, cfg.seed);
  std::uniform_int_distribution<Eigen::Index> pick_pair(0, std::max<Eigen::Index>(pairs.size() - 1, 0));
  std::uniform_int_distribution<int> pick_label(0, std::max(teacher.class_count() - 1, 0));
  const int dim = teacher.data_dim();

  for (int iter = 0; iter < cfg.iterations; ++iter) {
    // distribution-matching stream: fresh noise
    Matrix<Scalar> z = standard_normal<Scalar>(cfg.dm_batch, dim, rng);
    std::vector<int> labels;
    if (teacher.conditional())
      for (int i = 0; i < cfg.dm_batch; ++i) labels.push_back(pick_label(rng));
    // regression stream: paired data
    Matrix<Scalar> z_ref(cfg.reg_batch, dim), y_ref(cfg.reg_batch, dim);
    std::vector<int> ref_labels;
    for (int i = 0; i < cfg.reg_batch && pairs.size() > 0; ++i) {
      const Eigen::Index k = pick_pair(rng);
      z_ref.row(i) = pairs.z.row(k);
      y_ref.row(i) = pairs.y.row(k);
      if (pairs.labelled()) ref_labels.push_back(pairs.labels[static_cast<std::size_t>(k)]);
    }

    DistillLogRow row;
    row.iter = iter;
    Vector<Scalar> grad = Vector<Scalar>::Zero(gen.net().parameters().size());
    Matrix<Scalar> x;
    if (cfg.use_dm) {
      auto dm = dm_gradient(gen, *real, fake, z, rng, cfg.weighting, labels);
      grad += dm.grad;
      row.kl_surrogate = double(dm.surrogate_loss);
      x = std::move(dm.x);
    } else {
      x = gen.forward(z, labels);
    }
    if (cfg.lambda_reg > 0.0 && pairs.size() > 0) {
      auto reg = regression_loss(gen, z_ref, y_ref, cfg.distance, Scalar(cfg.lambda_reg), ref_labels, &features);
      grad += reg.grad;
      row.reg_loss = double(reg.loss);
    }
    row.grad_norm = double(gen_opt.step(gen.net().parameters(), std::move(grad)));

    for (int k = 0; k < cfg.fake_steps_per_generator_step; ++k)
      row.fake_denoise_loss = double(fake_score_step(fake, x, fake_opt, rng, labels));

    result.log.push_back(row);
    if (on_iter) on_iter(row, gen);
  }
  if (hash_parameters(teacher.net().parameters()) != teacher_hash)
    throw Error("dmd_train: teacher parameters changed during distillation");
  return result;
}

}  // namespace dmd
