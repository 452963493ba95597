#pragma once

#include "dmd/schedule.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace dmd {

template <typename Scalar>
struct MixtureComponent {
  Scalar weight = Scalar(1);
  RowVector<Scalar> mean;
  Scalar std = Scalar(1);
  /// Class label for conditional targets; -1 when unlabelled.
  int label = -1;
};

/// Isotropic Gaussian mixture with closed-form diffused marginals.
template <typename Scalar>
class GaussianMixture {
 public:
  using Mat = Matrix<Scalar>;

  GaussianMixture() = default;

  explicit GaussianMixture(std::vector<MixtureComponent<Scalar>> components)
      : components_(std::move(components)) {
    if (components_.empty()) throw DomainError("mixture: need at least one component");
    dim_ = static_cast<int>(components_.front().mean.size());
    if (dim_ < 1) throw DomainError("mixture: component mean is empty");
    Scalar total = 0;
    for (std::size_t k = 0; k < components_.size(); ++k) {
      const auto& c = components_[k];
      if (c.mean.size() != dim_) throw DomainError("mixture: component " + std::to_string(k) + " has wrong dim");
      if (!(c.weight >= Scalar(0))) throw DomainError("mixture: negative weight in component " + std::to_string(k));
      if (!(c.std > Scalar(0))) throw DomainError("mixture: std must be positive in component " + std::to_string(k));
      total += c.weight;
    }
    if (std::abs(total - Scalar(1)) > Scalar(1e-12))
      throw DomainError("mixture: weights must sum to 1 (got " + std::to_string(double(total)) + ")");
  }

  /// Single isotropic Gaussian N(mean, std^2 I).
  static GaussianMixture gaussian(RowVector<Scalar> mean, Scalar std) {
    return GaussianMixture({MixtureComponent<Scalar>{Scalar(1), std::move(mean), std, -1}});
  }

  int dim() const { return dim_; }
  std::size_t size() const { return components_.size(); }
  const std::vector<MixtureComponent<Scalar>>& components() const { return components_; }
  const MixtureComponent<Scalar>& component(std::size_t k) const { return components_.at(k); }

  bool labelled() const {
    return std::all_of(components_.begin(), components_.end(), [](const auto& c) { return c.label >= 0; });
  }

  int class_count() const {
    int n = 0;
    for (const auto& c : components_) n = std::max(n, c.label + 1);
    return n;
  }

  /// Components carrying the label, renormalized.
  GaussianMixture conditional(int label) const {
    std::vector<MixtureComponent<Scalar>> kept;
    Scalar total = 0;
    for (const auto& c : components_)
      if (c.label == label) {
        kept.push_back(c);
        total += c.weight;
      }
    if (kept.empty() || !(total > Scalar(0)))
      throw DomainError("mixture: no component with label " + std::to_string(label));
    for (auto& c : kept) c.weight /= total;
    Scalar sum = 0;
    for (std::size_t k = 0; k + 1 < kept.size(); ++k) sum += kept[k].weight;
    kept.back().weight = Scalar(1) - sum;
    return GaussianMixture(std::move(kept));
  }

  /// Draws n points; when `which` is given it receives each point's component.
  Mat sample(Eigen::Index n, Rng& rng, std::vector<int>* which = nullptr) const {
    if (n < 1) throw DomainError("mixture: sample count must be >= 1");
    std::vector<Scalar> w;
    for (const auto& c : components_) w.push_back(c.weight);
    std::discrete_distribution<int> pick(w.begin(), w.end());
    std::normal_distribution<Scalar> normal(Scalar(0), Scalar(1));
    Mat out(n, dim_);
    if (which) which->assign(static_cast<std::size_t>(n), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int k = pick(rng);
      const auto& c = components_[static_cast<std::size_t>(k)];
      for (int d = 0; d < dim_; ++d) out(i, d) = c.mean(d) + c.std * normal(rng);
      if (which) (*which)[static_cast<std::size_t>(i)] = k;
    }
    return out;
  }

  /// Per-row log density of the diffused marginal at (alpha, sigma).
  Vector<Scalar> log_density(const Mat& x, Scalar alpha, Scalar sigma) const {
    check_dim(x);
    Vector<Scalar> out(x.rows());
    std::vector<Scalar> terms(components_.size());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (std::size_t k = 0; k < components_.size(); ++k) terms[k] = component_log_density(k, x.row(i), alpha, sigma);
      out(i) = log_sum_exp(terms);
    }
    return out;
  }

  /// Exact score of sum_k w_k N(alpha mu_k, (alpha^2 s_k^2 + sigma^2) I).
  Mat score(const Mat& x, Scalar alpha, Scalar sigma) const {
    check_dim(x);
    Mat out = Mat::Zero(x.rows(), dim_);
    std::vector<Scalar> terms(components_.size());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (std::size_t k = 0; k < components_.size(); ++k) terms[k] = component_log_density(k, x.row(i), alpha, sigma);
      const Scalar lse = log_sum_exp(terms);
      for (std::size_t k = 0; k < components_.size(); ++k) {
        const Scalar r = std::exp(terms[k] - lse);
        if (r == Scalar(0)) continue;
        const auto& c = components_[k];
        const Scalar var = alpha * alpha * c.std * c.std + sigma * sigma;
        out.row(i) -= r * (x.row(i) - alpha * c.mean) / var;
      }
    }
    return out;
  }

  /// E[x_0 | x_t] from Tweedie's formula.
  Mat posterior_mean(const Mat& x, Scalar alpha, Scalar sigma) const {
    return (x + sigma * sigma * score(x, alpha, sigma)) / alpha;
  }

  Scalar component_log_density(std::size_t k, const RowVector<Scalar>& x, Scalar alpha, Scalar sigma) const {
    const auto& c = components_[k];
    if (c.weight == Scalar(0)) return -std::numeric_limits<Scalar>::infinity();
    const Scalar var = alpha * alpha * c.std * c.std + sigma * sigma;
    const Scalar sq = (x - alpha * c.mean).squaredNorm();
    return std::log(c.weight) - Scalar(0.5) * Scalar(dim_) * std::log(Scalar(2) * std::numbers::pi_v<Scalar> * var) -
           Scalar(0.5) * sq / var;
  }

  /// Mean and per-coordinate variance of the undiffused mixture.
  std::pair<RowVector<Scalar>, RowVector<Scalar>> moments() const {
    RowVector<Scalar> mean = RowVector<Scalar>::Zero(dim_);
    for (const auto& c : components_) mean += c.weight * c.mean;
    RowVector<Scalar> var = RowVector<Scalar>::Zero(dim_);
    for (const auto& c : components_)
      var += c.weight * ((c.mean - mean).array().square() + c.std * c.std).matrix();
    return {mean, var};
  }

 private:
  void check_dim(const Mat& x) const {
    if (x.cols() != dim_)
      throw ShapeError("mixture: points have " + std::to_string(x.cols()) + " coordinates, expected " +
                       std::to_string(dim_));
  }

  static Scalar log_sum_exp(const std::vector<Scalar>& v) {
    const Scalar m = *std::max_element(v.begin(), v.end());
    if (!std::isfinite(m)) return m;
    Scalar s = 0;
    for (Scalar x : v) s += std::exp(x - m);
    return m + std::log(s);
  }

  std::vector<MixtureComponent<Scalar>> components_;
  int dim_ = 0;
};

template <typename Scalar>
Matrix<Scalar> diffused_score(const GaussianMixture<Scalar>& mix, const NoiseSchedule<Scalar>& s,
                              const Matrix<Scalar>& x, int t) {
  return mix.score(x, s.alpha(t), s.sigma(t));
}

/// Law of x = A z + b for z ~ N(0, I); the pushforward of an affine generator.
template <typename Scalar>
struct AffineGaussian {
  Matrix<Scalar> A;
  RowVector<Scalar> b;

  Matrix<Scalar> covariance() const { return A * A.transpose(); }

  /// Score of the diffused law N(alpha b, alpha^2 A A^T + sigma^2 I).
  Matrix<Scalar> score(const Matrix<Scalar>& x, Scalar alpha, Scalar sigma) const {
    const auto n = b.size();
    Matrix<Scalar> cov = alpha * alpha * covariance() + sigma * sigma * Matrix<Scalar>::Identity(n, n);
    Eigen::LDLT<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> ldlt(cov);
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> centered = (x.rowwise() - alpha * b).transpose();
    return -ldlt.solve(centered).transpose();
  }

  Matrix<Scalar> posterior_mean(const Matrix<Scalar>& x, Scalar alpha, Scalar sigma) const {
    return (x + sigma * sigma * score(x, alpha, sigma)) / alpha;
  }
};

/// KL(N(mean_a, cov_a) || N(mean_b, cov_b)).
template <typename Scalar>
Scalar kl_gaussian(const Vector<Scalar>& mean_a, const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& cov_a,
                   const Vector<Scalar>& mean_b, const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& cov_b) {
  const auto n = mean_a.size();
  if (mean_b.size() != n || cov_a.rows() != n || cov_a.cols() != n || cov_b.rows() != n || cov_b.cols() != n)
    throw ShapeError("kl_gaussian: dimension mismatch");
  Eigen::LLT<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> la(cov_a), lb(cov_b);
  if (la.info() != Eigen::Success) throw DomainError("kl_gaussian: cov_a is not positive definite");
  if (lb.info() != Eigen::Success) throw DomainError("kl_gaussian: cov_b is not positive definite");
  const Scalar trace = lb.solve(cov_a).trace();
  const Vector<Scalar> d = mean_b - mean_a;
  const Scalar maha = d.dot(lb.solve(d));
  Scalar logdet_a = 0, logdet_b = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    logdet_a += Scalar(2) * std::log(la.matrixL()(i, i));
    logdet_b += Scalar(2) * std::log(lb.matrixL()(i, i));
  }
  return Scalar(0.5) * (trace + maha - Scalar(n) + logdet_b - logdet_a);
}

/// Diagonal-covariance overload.
template <typename Scalar>
Scalar kl_gaussian_diag(const Vector<Scalar>& mean_a, const Vector<Scalar>& var_a, const Vector<Scalar>& mean_b,
                        const Vector<Scalar>& var_b) {
  return kl_gaussian<Scalar>(mean_a, var_a.asDiagonal().toDenseMatrix(), mean_b, var_b.asDiagonal().toDenseMatrix());
}

}  // namespace dmd
