#pragma once

#include "dmd/mlp.hpp"
#include "dmd/optim.hpp"
#include "dmd/schedule.hpp"
#include "dmd/toyworld.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace dmd {

/// Anything that predicts the clean mean E[x_0 | x_t] at integer bins.
///
/// `bins` holds either one bin for the whole batch or one per row. `labels`
/// is empty for unconditional use; otherwise one class per row, where the
/// value class_count() selects the null (unconditional) class.
template <typename Scalar>
class MeanModel {
 public:
  virtual ~MeanModel() = default;
  virtual const NoiseSchedule<Scalar>& schedule() const = 0;
  virtual Matrix<Scalar> mean(const Matrix<Scalar>& x_t, std::span<const int> bins,
                              std::span<const int> labels) const = 0;

  Matrix<Scalar> mean(const Matrix<Scalar>& x_t, int t, std::span<const int> labels = {}) const {
    return mean(x_t, std::span<const int>(&t, 1), labels);
  }
};

inline int bin_for_row(std::span<const int> bins, Eigen::Index row) {
  return bins.size() == 1 ? bins[0] : bins[static_cast<std::size_t>(row)];
}

inline void check_bins(std::span<const int> bins, Eigen::Index rows) {
  if (bins.size() != 1 && static_cast<Eigen::Index>(bins.size()) != rows)
    throw ShapeError("expected one bin or one bin per row, got " + std::to_string(bins.size()) + " for " +
                     std::to_string(rows) + " rows");
}

/// s = -(x_t - alpha_t mu) / sigma_t^2 for every row.
template <typename Scalar>
Matrix<Scalar> score_from_mean(const NoiseSchedule<Scalar>& s, const Matrix<Scalar>& x_t, const Matrix<Scalar>& mu,
                               std::span<const int> bins) {
  check_bins(bins, x_t.rows());
  Matrix<Scalar> out(x_t.rows(), x_t.cols());
  for (Eigen::Index i = 0; i < x_t.rows(); ++i) {
    const int t = bin_for_row(bins, i);
    const Scalar sg = s.sigma(t);
    if (sg == Scalar(0)) throw DomainError("score: sigma is zero at bin " + std::to_string(t));
    out.row(i) = -(x_t.row(i) - s.alpha(t) * mu.row(i)) / (sg * sg);
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> score_from_denoiser(const MeanModel<Scalar>& d, const Matrix<Scalar>& x_t, int t,
                                   std::span<const int> labels = {}) {
  const int bins[1] = {t};
  return score_from_mean(d.schedule(), x_t, d.mean(x_t, bins, labels), bins);
}

/// Closed-form posterior mean of a Gaussian mixture target.
template <typename Scalar>
class AnalyticMixtureModel final : public MeanModel<Scalar> {
 public:
  AnalyticMixtureModel(GaussianMixture<Scalar> mix, NoiseSchedule<Scalar> schedule)
      : mix_(std::move(mix)), schedule_(std::move(schedule)) {}

  using MeanModel<Scalar>::mean;
  const NoiseSchedule<Scalar>& schedule() const override { return schedule_; }
  const GaussianMixture<Scalar>& mixture() const { return mix_; }

  Matrix<Scalar> mean(const Matrix<Scalar>& x_t, std::span<const int> bins,
                      std::span<const int> labels) const override {
    check_bins(bins, x_t.rows());
    Matrix<Scalar> out(x_t.rows(), x_t.cols());
    const int null_label = mix_.class_count();
    for (Eigen::Index i = 0; i < x_t.rows(); ++i) {
      const int t = bin_for_row(bins, i);
      const Scalar a = schedule_.alpha(t), s = schedule_.sigma(t);
      const int label = labels.empty() ? null_label : labels[static_cast<std::size_t>(i)];
      const Matrix<Scalar> row = x_t.row(i);
      out.row(i) = (label == null_label ? mix_ : mix_.conditional(label)).posterior_mean(row, a, s);
    }
    return out;
  }

 private:
  GaussianMixture<Scalar> mix_;
  NoiseSchedule<Scalar> schedule_;
};

/// Posterior mean when the data law is the pushforward of x = A z + b.
template <typename Scalar>
class AnalyticAffineModel final : public MeanModel<Scalar> {
 public:
  AnalyticAffineModel(AffineGaussian<Scalar> law, NoiseSchedule<Scalar> schedule)
      : law_(std::move(law)), schedule_(std::move(schedule)) {}

  using MeanModel<Scalar>::mean;
  const NoiseSchedule<Scalar>& schedule() const override { return schedule_; }
  AffineGaussian<Scalar>& law() { return law_; }

  Matrix<Scalar> mean(const Matrix<Scalar>& x_t, std::span<const int> bins, std::span<const int>) const override {
    check_bins(bins, x_t.rows());
    Matrix<Scalar> out(x_t.rows(), x_t.cols());
    for (Eigen::Index i = 0; i < x_t.rows(); ++i) {
      const int t = bin_for_row(bins, i);
      const Matrix<Scalar> row = x_t.row(i);
      out.row(i) = law_.posterior_mean(row, schedule_.alpha(t), schedule_.sigma(t));
    }
    return out;
  }

 private:
  AffineGaussian<Scalar> law_;
  NoiseSchedule<Scalar> schedule_;
};

enum class DenoiserRole { base, fake };

inline const char* to_string(DenoiserRole r) { return r == DenoiserRole::base ? "base" : "fake"; }

/// Time-conditioned MLP denoiser.
///
/// Network input is [c_in x_t, t/T, log(sigma_t/alpha_t)/4, one-hot label]. The raw
/// output F is mapped to a clean-mean prediction mu = skip_t x_t + out_t F:
/// eps nets use skip = 1/alpha, out = -sigma/alpha; mean nets use the EDM
/// preconditioning on x_t / alpha with data scale sigma_data.
template <typename Scalar>
class Denoiser final : public MeanModel<Scalar> {
 public:
  using Mat = Matrix<Scalar>;

  struct Coefficients {
    Scalar c_in;
    Scalar skip;
    Scalar out;
  };

  Denoiser() = default;

  Denoiser(NoiseSchedule<Scalar> schedule, int data_dim, std::vector<int> hidden, Activation act,
           Prediction prediction, Scalar sigma_data, int class_count = 0)
      : schedule_(std::move(schedule)),
        data_dim_(data_dim),
        prediction_(prediction),
        sigma_data_(sigma_data),
        class_count_(class_count) {
    if (data_dim < 1) throw ShapeError("denoiser: data dim must be >= 1");
    if (!(sigma_data > Scalar(0))) throw DomainError("denoiser: sigma_data must be positive");
    std::vector<int> widths{input_width(data_dim, class_count)};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(data_dim);
    net_ = Mlp<Scalar>(widths, act);
  }

  using MeanModel<Scalar>::mean;

  static int input_width(int data_dim, int class_count) {
    return data_dim + 2 + (class_count > 0 ? class_count + 1 : 0);
  }

  const NoiseSchedule<Scalar>& schedule() const override { return schedule_; }
  const Mlp<Scalar>& net() const { return net_; }
  Mlp<Scalar>& mutable_net() {
    if (frozen_) throw Error("denoiser: parameters of a frozen " + std::string(to_string(role_)) + " model are immutable");
    return net_;
  }
  int data_dim() const { return data_dim_; }
  Prediction prediction() const { return prediction_; }
  Scalar sigma_data() const { return sigma_data_; }
  int class_count() const { return class_count_; }
  bool conditional() const { return class_count_ > 0; }
  int null_label() const { return class_count_; }
  DenoiserRole role() const { return role_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  /// A trainable fake-role copy with identical parameters.
  Denoiser as_fake() const {
    Denoiser copy = *this;
    copy.role_ = DenoiserRole::fake;
    copy.frozen_ = false;
    return copy;
  }

  void set_role(DenoiserRole role) { role_ = role; }

  /// Narrows the [T_min, T_max] window used for timestep sampling.
  void set_timestep_window(double t_min_frac, double t_max_frac) { schedule_.set_window(t_min_frac, t_max_frac); }

  Coefficients coefficients(int t) const {
    const Scalar a = schedule_.alpha(t), s = schedule_.sigma(t);
    const Scalar sd = sigma_data_;
    Coefficients c{};
    c.c_in = Scalar(1) / std::sqrt(a * a * sd * sd + s * s);
    if (prediction_ == Prediction::eps) {
      c.skip = Scalar(1) / a;
      c.out = -s / a;
    } else {
      const Scalar r = s / a;
      c.skip = sd * sd / (r * r + sd * sd) / a;
      c.out = r * sd / std::sqrt(r * r + sd * sd);
    }
    return c;
  }

  /// Network input rows for a batch; exposed so the generator can reuse
  /// the exact layout when baking the time embedding.
  Mat network_input(const Mat& x_t, std::span<const int> bins, std::span<const int> labels) const {
    check_bins(bins, x_t.rows());
    if (x_t.cols() != data_dim_)
      throw ShapeError("denoiser: x_t has " + std::to_string(x_t.cols()) + " coordinates, expected " +
                       std::to_string(data_dim_));
    if (conditional() && static_cast<Eigen::Index>(labels.size()) != x_t.rows())
      throw DomainError("denoiser: conditional model needs one label per row");
    if (!conditional() && !labels.empty()) throw DomainError("denoiser: unconditional model given labels");
    Mat in = Mat::Zero(x_t.rows(), net_.input_width());
    for (Eigen::Index i = 0; i < x_t.rows(); ++i) {
      const int t = bin_for_row(bins, i);
      in.row(i).head(data_dim_) = coefficients(t).c_in * x_t.row(i);
      in(i, data_dim_) = Scalar(t) / Scalar(schedule_.bins());
      in(i, data_dim_ + 1) = std::log(schedule_.noise_ratio(t)) / Scalar(4);
      if (conditional()) {
        const int label = labels[static_cast<std::size_t>(i)];
        if (label < 0 || label > class_count_)
          throw DomainError("denoiser: label " + std::to_string(label) + " outside [0, " +
                            std::to_string(class_count_) + "]");
        in(i, data_dim_ + 2 + label) = Scalar(1);
      }
    }
    return in;
  }

  /// Raw network output mapped to a clean-mean prediction.
  Mat mean(const Mat& x_t, std::span<const int> bins, std::span<const int> labels) const override {
    Mat f = net_.forward(network_input(x_t, bins, labels));
    Mat mu(x_t.rows(), x_t.cols());
    for (Eigen::Index i = 0; i < x_t.rows(); ++i) {
      const auto c = coefficients(bin_for_row(bins, i));
      mu.row(i) = c.skip * x_t.row(i) + c.out * f.row(i);
    }
    return mu;
  }

  /// Records the mean prediction on a tape with x_t held constant.
  struct Recorded {
    NodeId mean;
    MlpTrace trace;
  };

  Recorded record(Tape<Scalar>& tape, const Mat& x_t, std::span<const int> bins, std::span<const int> labels,
                  bool trainable) const {
    NodeId in = tape.constant(network_input(x_t, bins, labels));
    MlpTrace trace = mlp_forward(net_, in, tape, trainable);
    Mat skip_x(x_t.rows(), x_t.cols());
    Mat out_scale(x_t.rows(), 1);
    for (Eigen::Index i = 0; i < x_t.rows(); ++i) {
      const auto c = coefficients(bin_for_row(bins, i));
      skip_x.row(i) = c.skip * x_t.row(i);
      out_scale(i, 0) = c.out;
    }
    NodeId mu = tape.add(tape.mul_rows(trace.output, tape.constant(out_scale)), tape.constant(skip_x));
    return {mu, trace};
  }

 private:
  NoiseSchedule<Scalar> schedule_;
  Mlp<Scalar> net_;
  int data_dim_ = 0;
  Prediction prediction_ = Prediction::eps;
  Scalar sigma_data_ = Scalar(0.5);
  int class_count_ = 0;
  DenoiserRole role_ = DenoiserRole::base;
  bool frozen_ = false;
};

/// Mean prediction of a denoiser at one bin.
template <typename Scalar>
Matrix<Scalar> denoise(const MeanModel<Scalar>& d, const Matrix<Scalar>& x_t, int t, std::span<const int> labels = {}) {
  return d.mean(x_t, t, labels);
}

/// Per-bin weight of the denoising loss: SNR + 1/sigma_data^2 for edm
/// schedules, SNR otherwise.
template <typename Scalar>
Scalar denoising_weight(const NoiseSchedule<Scalar>& s, int t, Scalar sigma_data) {
  const Scalar snr = s.snr(t);
  return s.kind() == ScheduleKind::edm ? snr + Scalar(1) / (sigma_data * sigma_data) : snr;
}

template <typename Scalar>
struct LossAndGrad {
  Scalar loss = Scalar(0);
  Vector<Scalar> grad;
};

/// Weighted denoising loss on explicit bins and noise, with its parameter
/// gradient: mean(w_t (mu(x_t, t) - x_0)^2).
template <typename Scalar>
LossAndGrad<Scalar> denoising_loss_at(const Denoiser<Scalar>& d, const Matrix<Scalar>& x0, std::span<const int> bins,
                                      const Matrix<Scalar>& eps, std::span<const int> labels = {},
                                      std::span<const Scalar> importance = {}) {
  if (x0.rows() < 1) throw DomainError("denoising_loss: empty batch");
  check_bins(bins, x0.rows());
  if (!importance.empty() && static_cast<Eigen::Index>(importance.size()) != x0.rows())
    throw ShapeError("denoising_loss: one importance weight per row required");
  const auto& s = d.schedule();
  Matrix<Scalar> x_t(x0.rows(), x0.cols());
  Matrix<Scalar> weight(x0.rows(), 1);
  for (Eigen::Index i = 0; i < x0.rows(); ++i) {
    const int t = bin_for_row(bins, i);
    x_t.row(i) = s.alpha(t) * x0.row(i) + s.sigma(t) * eps.row(i);
    weight(i, 0) = denoising_weight(s, t, d.sigma_data());
    if (!importance.empty()) weight(i, 0) *= importance[static_cast<std::size_t>(i)];
  }
  Tape<Scalar> tape;
  auto rec = d.record(tape, x_t, bins, labels, true);
  NodeId diff = tape.sub(rec.mean, tape.constant(x0));
  NodeId loss = tape.mean(tape.mul_rows(tape.mul(diff, diff), tape.constant(weight)));
  tape.backward(loss);
  return {tape.value(loss)(0, 0), parameter_gradient(d.net(), tape, rec.trace)};
}

/// Draws one uniform bin over [0, T-1] and one noise vector per row, then
/// evaluates denoising_loss_at.
template <typename Scalar>
LossAndGrad<Scalar> denoising_loss(const Denoiser<Scalar>& d, const Matrix<Scalar>& x0, Rng& rng,
                                   std::span<const int> labels = {}) {
  if (x0.rows() < 1) throw DomainError("denoising_loss: empty batch");
  std::vector<int> bins(static_cast<std::size_t>(x0.rows()));
  for (auto& t : bins) t = sample_any_timestep(d.schedule(), rng);
  Matrix<Scalar> eps = standard_normal<Scalar>(x0.rows(), x0.cols(), rng);
  return denoising_loss_at(d, x0, bins, eps, labels);
}

/// Uniform-bin denoising loss estimated with a mixture proposal: with
/// probability q a bin is drawn from [0, T/4), otherwise from all bins.
/// Each row carries weight p_uniform / p_proposal.
template <typename Scalar>
LossAndGrad<Scalar> emphasised_loss(const Denoiser<Scalar>& d, const Matrix<Scalar>& x0, Rng& rng,
                                    std::span<const int> labels, double q) {
  const int T = d.schedule().bins();
  const int low = std::max(1, T / 4);
  std::bernoulli_distribution pick_low(q);
  std::uniform_int_distribution<int> any(0, T - 1), lowbin(0, low - 1);
  std::vector<int> bins(static_cast<std::size_t>(x0.rows()));
  std::vector<Scalar> w(bins.size());
  for (std::size_t i = 0; i < bins.size(); ++i) {
    bins[i] = pick_low(rng) ? lowbin(rng) : any(rng);
    const double p = (1.0 - q) / T + (bins[i] < low ? q / low : 0.0);
    w[i] = Scalar((1.0 / T) / p);
  }
  Matrix<Scalar> eps = standard_normal<Scalar>(x0.rows(), x0.cols(), rng);
  return denoising_loss_at(d, x0, bins, eps, labels, std::span<const Scalar>(w));
}

struct TeacherConfig {
  std::vector<int> hidden{64, 64, 64};
  Activation activation = Activation::silu;
  Prediction prediction = Prediction::mean;
  double sigma_data = 0.5;
  int steps = 16000;
  int batch = 256;
  AdamWOptions<double> optimizer{2e-3, 0.9, 0.999, 1e-8, 0.0, 10.0};
  /// Cosine decay of the learning rate down to lr * lr_floor.
  double lr_floor = 0.0;
  /// Probability of replacing a label by the null class (conditional targets).
  double label_dropout = 0.1;
  bool conditional = false;
  /// Fraction of each batch whose bins are drawn from the low-noise quarter
  /// [0, T/4) instead of all bins. Rows are importance weighted so the
  /// expected loss is still the uniform-bin objective.
  double low_noise_fraction = 0.4;
  std::uint64_t seed = 0;
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0;
};

/// Cosine learning-rate factor at step k of n, decaying from 1 to floor.
inline double cosine_factor(int k, int n, double floor) {
  if (n <= 1) return 1.0;
  const double f = 0.5 * (1.0 + std::cos(std::numbers::pi * double(k) / double(n - 1)));
  return floor + (1.0 - floor) * f;
}

/// Trains a base denoiser on fresh draws from the target every step and
/// returns it frozen.
template <typename Scalar>
Denoiser<Scalar> train_teacher(const GaussianMixture<Scalar>& target, const NoiseSchedule<Scalar>& schedule,
                               const TeacherConfig& cfg, std::vector<TrainLogEntry>* log = nullptr,
                               const std::function<void(int, const Denoiser<Scalar>&)>& on_step = {}) {
  if (cfg.steps < 1 || cfg.batch < 1) throw DomainError("train_teacher: steps and batch must be >= 1");
  const int classes = cfg.conditional ? target.class_count() : 0;
  if (cfg.conditional && !target.labelled())
    throw DomainError("train_teacher: conditional teacher needs a labelled mixture");
  Rng rng(cfg.seed);
  Denoiser<Scalar> d(schedule, target.dim(), cfg.hidden, cfg.activation, cfg.prediction, Scalar(cfg.sigma_data),
                     classes);
  d.mutable_net().initialize(rng);
  AdamWOptions<Scalar> opt{Scalar(cfg.optimizer.lr), Scalar(cfg.optimizer.beta1), Scalar(cfg.optimizer.beta2),
                           Scalar(cfg.optimizer.eps), Scalar(cfg.optimizer.weight_decay),
                           Scalar(cfg.optimizer.clip_norm)};
  AdamW<Scalar> adam(d.net().parameters().size(), opt);
  std::bernoulli_distribution drop(cfg.label_dropout);
  std::vector<int> which;
  std::vector<int> labels;
  for (int step = 0; step < cfg.steps; ++step) {
    Matrix<Scalar> x0 = target.sample(cfg.batch, rng, &which);
    labels.clear();
    if (classes > 0)
      for (int k : which) labels.push_back(drop(rng) ? classes : target.component(std::size_t(k)).label);
    auto lg = cfg.low_noise_fraction > 0 ? emphasised_loss(d, x0, rng, labels, cfg.low_noise_fraction)
                                         : denoising_loss(d, x0, rng, labels);
    if (!std::isfinite(double(lg.loss)))
      throw NumericError("train_teacher: non-finite loss at step " + std::to_string(step));
    adam.set_lr(Scalar(cfg.optimizer.lr * cosine_factor(step, cfg.steps, cfg.lr_floor)));
    adam.step(d.mutable_net().parameters(), std::move(lg.grad));
    if (log) log->push_back({step, double(lg.loss)});
    if (on_step) on_step(step + 1, d);
  }
  d.set_role(DenoiserRole::base);
  d.freeze();
  return d;
}

/// Classifier-free guided prediction:
/// eps' = eps(x_t, null) + w (eps(x_t, c) - eps(x_t, null)), returned as a mean.
template <typename Scalar>
Matrix<Scalar> guided_denoise(const MeanModel<Scalar>& cond, int class_count, const Matrix<Scalar>& x_t,
                              std::span<const int> bins, std::span<const int> labels, Scalar omega) {
  if (!(omega >= Scalar(0))) throw DomainError("guided_denoise: guidance scale must be >= 0");
  if (static_cast<Eigen::Index>(labels.size()) != x_t.rows())
    throw DomainError("guided_denoise: one label per row required");
  const auto& s = cond.schedule();
  std::vector<int> null_labels(labels.size(), class_count);
  Matrix<Scalar> mu_c = cond.mean(x_t, bins, labels);
  Matrix<Scalar> mu_u = cond.mean(x_t, bins, null_labels);
  Matrix<Scalar> out(x_t.rows(), x_t.cols());
  for (Eigen::Index i = 0; i < x_t.rows(); ++i) {
    const int t = bin_for_row(bins, i);
    const Matrix<Scalar> xi = x_t.row(i);
    const Matrix<Scalar> eps_c = convert_prediction<Scalar>(s, t, xi, mu_c.row(i), Prediction::mean);
    const Matrix<Scalar> eps_u = convert_prediction<Scalar>(s, t, xi, mu_u.row(i), Prediction::mean);
    const Matrix<Scalar> eps = eps_u + omega * (eps_c - eps_u);
    out.row(i) = convert_prediction<Scalar>(s, t, xi, eps, Prediction::eps);
  }
  return out;
}

/// MeanModel view of a conditional model under a fixed guidance scale.
template <typename Scalar>
class GuidedModel final : public MeanModel<Scalar> {
 public:
  GuidedModel(const MeanModel<Scalar>& cond, int class_count, Scalar omega)
      : cond_(cond), class_count_(class_count), omega_(omega) {
    if (!(omega >= Scalar(0))) throw DomainError("guided model: guidance scale must be >= 0");
  }
  using MeanModel<Scalar>::mean;
  const NoiseSchedule<Scalar>& schedule() const override { return cond_.schedule(); }
  Matrix<Scalar> mean(const Matrix<Scalar>& x_t, std::span<const int> bins,
                      std::span<const int> labels) const override {
    return guided_denoise(cond_, class_count_, x_t, bins, labels, omega_);
  }

 private:
  const MeanModel<Scalar>& cond_;
  int class_count_;
  Scalar omega_;
};

}  // namespace dmd
