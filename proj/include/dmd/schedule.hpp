#pragma once

#include "dmd/core.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace dmd {

enum class ScheduleKind { vp, edm, custom };

inline const char* to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::vp: return "vp";
    case ScheduleKind::edm: return "edm";
    case ScheduleKind::custom: return "custom";
  }
  return "?";
}

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "vp") return ScheduleKind::vp;
  if (s == "edm") return ScheduleKind::edm;
  throw DomainError("unknown schedule kind '" + s + "' (expected vp or edm)");
}

enum class Prediction { mean, eps };

inline const char* to_string(Prediction p) { return p == Prediction::mean ? "mean" : "eps"; }

inline Prediction prediction_from_string(const std::string& s) {
  if (s == "mean") return Prediction::mean;
  if (s == "eps") return Prediction::eps;
  throw DomainError("unknown prediction type '" + s + "' (expected mean or eps)");
}

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::vp;
  int bins = 1000;
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double t_min_frac = 0.02;
  double t_max_frac = 0.98;
  friend bool operator==(const ScheduleSpec&, const ScheduleSpec&) = default;
};

/// Discretized (alpha_t, sigma_t) over integer bins 0..T-1, noise growing with t.
///
/// edm: alpha = 1 and sigma follows the rho = 7 interpolation between
/// sigma_min and sigma_max. vp: a cosine map alpha = cos(u), sigma = sin(u)
/// with u linear in t and chosen so sigma/alpha spans [sigma_min, sigma_max].
template <typename Scalar>
class NoiseSchedule {
 public:
  static constexpr Scalar edm_rho = Scalar(7);

  NoiseSchedule() = default;

  static NoiseSchedule build(const ScheduleSpec& spec) {
    if (spec.bins < 2) throw DomainError("schedule: need at least 2 bins");
    if (!(spec.sigma_min > 0.0) || !(spec.sigma_min < spec.sigma_max))
      throw DomainError("schedule: require 0 < sigma_min < sigma_max");
    NoiseSchedule s;
    s.spec_ = spec;
    const int T = spec.bins;
    s.alpha_.resize(T);
    s.sigma_.resize(T);
    const Scalar smin = Scalar(spec.sigma_min), smax = Scalar(spec.sigma_max);
    if (spec.kind == ScheduleKind::edm) {
      const Scalar lo = std::pow(smin, Scalar(1) / edm_rho), hi = std::pow(smax, Scalar(1) / edm_rho);
      for (int t = 0; t < T; ++t) {
        const Scalar f = Scalar(t) / Scalar(T - 1);
        s.alpha_[t] = Scalar(1);
        s.sigma_[t] = std::pow(lo + f * (hi - lo), edm_rho);
      }
      s.sigma_[0] = smin;
      s.sigma_[T - 1] = smax;
    } else if (spec.kind == ScheduleKind::vp) {
      const Scalar lo = std::atan(smin), hi = std::atan(smax);
      for (int t = 0; t < T; ++t) {
        const Scalar u = lo + (Scalar(t) / Scalar(T - 1)) * (hi - lo);
        s.alpha_[t] = std::cos(u);
        s.sigma_[t] = std::sin(u);
      }
    } else {
      throw DomainError("schedule: custom schedules are built from explicit arrays");
    }
    s.set_window(spec.t_min_frac, spec.t_max_frac);
    return s;
  }

  static NoiseSchedule build(ScheduleKind kind, int bins, double sigma_min, double sigma_max) {
    ScheduleSpec spec;
    spec.kind = kind;
    spec.bins = bins;
    spec.sigma_min = sigma_min;
    spec.sigma_max = sigma_max;
    return build(spec);
  }

  /// Arbitrary tabulated schedule; mostly for tests.
  static NoiseSchedule from_arrays(std::vector<Scalar> alpha, std::vector<Scalar> sigma, int t_min,
                                   int t_max) {
    if (alpha.size() != sigma.size() || alpha.size() < 2)
      throw DomainError("schedule: alpha/sigma arrays must match and hold at least 2 bins");
    NoiseSchedule s;
    s.spec_.kind = ScheduleKind::custom;
    s.spec_.bins = static_cast<int>(alpha.size());
    s.alpha_ = std::move(alpha);
    s.sigma_ = std::move(sigma);
    s.spec_.sigma_min = double(s.sigma_.front());
    s.spec_.sigma_max = double(s.sigma_.back());
    s.set_bounds(t_min, t_max);
    return s;
  }

  void set_window(double t_min_frac, double t_max_frac) {
    spec_.t_min_frac = t_min_frac;
    spec_.t_max_frac = t_max_frac;
    const int T = bins();
    auto at = [T](double f) { return std::clamp(static_cast<int>(std::lround(f * T)), 0, T - 1); };
    set_bounds(at(t_min_frac), at(t_max_frac));
  }

  void set_bounds(int t_min, int t_max) {
    if (!(0 <= t_min && t_min <= t_max && t_max <= bins() - 1))
      throw DomainError("schedule: require 0 <= T_min <= T_max <= T-1, got [" + std::to_string(t_min) +
                        ", " + std::to_string(t_max) + "]");
    t_min_ = t_min;
    t_max_ = t_max;
  }

  int bins() const { return static_cast<int>(alpha_.size()); }
  int t_min() const { return t_min_; }
  int t_max() const { return t_max_; }
  ScheduleKind kind() const { return spec_.kind; }
  const ScheduleSpec& spec() const { return spec_; }

  Scalar alpha(int t) const { return alpha_.at(check(t)); }
  Scalar sigma(int t) const { return sigma_.at(check(t)); }
  Scalar snr(int t) const { return alpha(t) * alpha(t) / (sigma(t) * sigma(t)); }
  /// sigma_t / alpha_t, the noise level of x_t / alpha_t.
  Scalar noise_ratio(int t) const { return sigma(t) / alpha(t); }

  int check(int t) const {
    if (t < 0 || t >= bins())
      throw DomainError("timestep bin " + std::to_string(t) + " outside [0, " + std::to_string(bins() - 1) +
                        "]");
    return t;
  }

 private:
  ScheduleSpec spec_;
  std::vector<Scalar> alpha_;
  std::vector<Scalar> sigma_;
  int t_min_ = 0;
  int t_max_ = 0;
};

/// x_t = alpha_t x + sigma_t eps.
template <typename Scalar>
Matrix<Scalar> diffuse(const NoiseSchedule<Scalar>& s, const Matrix<Scalar>& x, int t,
                       const Matrix<Scalar>& eps) {
  if (x.rows() != eps.rows() || x.cols() != eps.cols()) throw ShapeError("diffuse: x and eps differ in shape");
  return s.alpha(t) * x + s.sigma(t) * eps;
}

/// Per-row bins.
template <typename Scalar>
Matrix<Scalar> diffuse(const NoiseSchedule<Scalar>& s, const Matrix<Scalar>& x, const std::vector<int>& t,
                       const Matrix<Scalar>& eps) {
  if (x.rows() != eps.rows() || x.cols() != eps.cols()) throw ShapeError("diffuse: x and eps differ in shape");
  if (static_cast<Eigen::Index>(t.size()) != x.rows()) throw ShapeError("diffuse: one bin per row required");
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    out.row(i) = s.alpha(t[i]) * x.row(i) + s.sigma(t[i]) * eps.row(i);
  return out;
}

/// Converts a prediction of x_t's clean mean to its noise, or back:
/// mu = (x_t - sigma eps) / alpha, eps = (x_t - alpha mu) / sigma.
template <typename Scalar>
Matrix<Scalar> convert_prediction(const NoiseSchedule<Scalar>& s, int t, const Matrix<Scalar>& x_t,
                                  const Matrix<Scalar>& value, Prediction from) {
  if (x_t.rows() != value.rows() || x_t.cols() != value.cols())
    throw ShapeError("convert_prediction: x_t and value differ in shape");
  const Scalar a = s.alpha(t), sg = s.sigma(t);
  if (from == Prediction::eps) {
    if (a == Scalar(0)) throw DomainError("convert_prediction: alpha is zero at bin " + std::to_string(t));
    return (x_t - sg * value) / a;
  }
  if (sg == Scalar(0)) throw DomainError("convert_prediction: sigma is zero at bin " + std::to_string(t));
  return (x_t - a * value) / sg;
}

/// Uniform integer bin in [T_min, T_max].
template <typename Scalar>
int sample_timestep(const NoiseSchedule<Scalar>& s, Rng& rng) {
  std::uniform_int_distribution<int> dist(s.t_min(), s.t_max());
  return dist(rng);
}

/// Uniform integer bin in [0, T-1].
template <typename Scalar>
int sample_any_timestep(const NoiseSchedule<Scalar>& s, Rng& rng) {
  std::uniform_int_distribution<int> dist(0, s.bins() - 1);
  return dist(rng);
}

}  // namespace dmd
