#pragma once

#include "dmd/diffusion.hpp"
#include "dmd/toyworld.hpp"

#include <algorithm>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace dmd {

/// Median pairwise distance over the pooled sample, capped at max_points
/// rows from each set for cost.
template <typename Scalar>
Scalar median_bandwidth(const Matrix<Scalar>& X, const Matrix<Scalar>& Y, Eigen::Index max_points = 512) {
  Matrix<Scalar> pool(std::min(X.rows(), max_points) + std::min(Y.rows(), max_points), X.cols());
  pool << X.topRows(std::min(X.rows(), max_points)), Y.topRows(std::min(Y.rows(), max_points));
  std::vector<Scalar> d;
  d.reserve(static_cast<std::size_t>(pool.rows() * (pool.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < pool.rows(); ++i)
    for (Eigen::Index j = i + 1; j < pool.rows(); ++j) d.push_back((pool.row(i) - pool.row(j)).norm());
  if (d.empty()) return Scalar(1);
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  return *mid > Scalar(0) ? *mid : Scalar(1);
}

namespace detail {

/// Sum of exp(-||a_i - b_j||^2 / (2 h^2)) over all pairs, in row blocks.
template <typename Scalar>
Scalar kernel_block_sum(const Matrix<Scalar>& A, const Matrix<Scalar>& B, Scalar bandwidth, Eigen::Index block) {
  const Scalar gamma = Scalar(1) / (Scalar(2) * bandwidth * bandwidth);
  const Vector<Scalar> bn = B.rowwise().squaredNorm();
  Scalar total = 0;
  for (Eigen::Index r0 = 0; r0 < A.rows(); r0 += block) {
    const Eigen::Index rows = std::min(block, A.rows() - r0);
    const Matrix<Scalar> a = A.middleRows(r0, rows);
    const Vector<Scalar> an = a.rowwise().squaredNorm();
    Matrix<Scalar> d2 = Scalar(-2) * a.lazyProduct(B.transpose());
    d2.colwise() += an;
    d2.rowwise() += bn.transpose();
    total += (-gamma * d2.array().max(Scalar(0))).exp().sum();
  }
  return total;
}

}  // namespace detail

/// Biased RBF-kernel MMD:
/// sqrt(mean k(x,x') + mean k(y,y') - 2 mean k(x,y)). A bandwidth <= 0 or
/// nullopt selects the median heuristic.
template <typename Scalar>
Scalar mmd_rbf(const Matrix<Scalar>& X, const Matrix<Scalar>& Y, std::optional<Scalar> bandwidth = std::nullopt,
               Eigen::Index block = 256) {
  if (X.rows() < 1 || Y.rows() < 1) throw DomainError("mmd: both sample sets must be nonempty");
  if (X.cols() != Y.cols()) throw ShapeError("mmd: sample sets differ in dimension");
  const Scalar h = bandwidth && *bandwidth > Scalar(0) ? *bandwidth : median_bandwidth(X, Y);
  const Scalar nx = Scalar(X.rows()), ny = Scalar(Y.rows());
  const Scalar kxx = detail::kernel_block_sum(X, X, h, block) / (nx * nx);
  const Scalar kyy = detail::kernel_block_sum(Y, Y, h, block) / (ny * ny);
  const Scalar kxy = detail::kernel_block_sum(X, Y, h, block) / (nx * ny);
  return std::sqrt(std::max(kxx + kyy - Scalar(2) * kxy, Scalar(0)));
}

/// 1-D W2 between two empirical laws via their quantile functions.
template <typename Scalar>
Scalar wasserstein2_1d(std::vector<Scalar> a, std::vector<Scalar> b) {
  if (a.empty() || b.empty()) throw DomainError("wasserstein: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = double(a.size()), nb = double(b.size());
  std::size_t i = 0, j = 0;
  double q = 0, acc = 0;
  while (i < a.size() && j < b.size()) {
    const double next = std::min(double(i + 1) / na, double(j + 1) / nb);
    const double d = double(a[i] - b[j]);
    acc += (next - q) * d * d;
    q = next;
    if (double(i + 1) / na <= next) ++i;
    if (double(j + 1) / nb <= next) ++j;
  }
  return Scalar(std::sqrt(acc));
}

/// Mean over random unit directions of the 1-D W2 between projections.
template <typename Scalar>
Scalar sliced_wasserstein(const Matrix<Scalar>& X, const Matrix<Scalar>& Y, int n_projections, Rng& rng) {
  if (n_projections < 1) throw DomainError("sliced_wasserstein: need at least one projection");
  if (X.cols() != Y.cols()) throw ShapeError("sliced_wasserstein: sample sets differ in dimension");
  Scalar total = 0;
  for (int p = 0; p < n_projections; ++p) {
    Vector<Scalar> u = standard_normal<Scalar>(X.cols(), 1, rng);
    while (u.norm() == Scalar(0)) u = standard_normal<Scalar>(X.cols(), 1, rng);
    u.normalize();
    const Vector<Scalar> px = X * u, py = Y * u;
    total += wasserstein2_1d(std::vector<Scalar>(px.data(), px.data() + px.size()),
                             std::vector<Scalar>(py.data(), py.data() + py.size()));
  }
  return total / Scalar(n_projections);
}

template <typename Scalar>
struct ModeRecall {
  Scalar recall = Scalar(0);
  std::vector<Scalar> shares;
};

/// Assigns each sample to its nearest component mean, keeping it only if it
/// lies within radius_in_stds of that component's std. A mode is recovered
/// when its share of all samples reaches min_share.
template <typename Scalar>
ModeRecall<Scalar> mode_recall(const Matrix<Scalar>& X, const GaussianMixture<Scalar>& mix, Scalar radius_in_stds,
                               Scalar min_share) {
  if (!(radius_in_stds > Scalar(0))) throw DomainError("mode_recall: radius must be positive");
  if (X.cols() != mix.dim()) throw ShapeError("mode_recall: sample dimension differs from mixture");
  const auto K = mix.size();
  std::vector<Eigen::Index> counts(K, 0);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    std::size_t best = 0;
    Scalar best_d = std::numeric_limits<Scalar>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      const Scalar d = (X.row(i) - mix.component(k).mean).norm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    if (best_d <= radius_in_stds * mix.component(best).std) ++counts[best];
  }
  ModeRecall<Scalar> out;
  std::size_t recovered = 0;
  for (std::size_t k = 0; k < K; ++k) {
    const Scalar share = X.rows() > 0 ? Scalar(counts[k]) / Scalar(X.rows()) : Scalar(0);
    out.shares.push_back(share);
    if (share >= min_share && counts[k] > 0) ++recovered;
  }
  out.recall = Scalar(recovered) / Scalar(K);
  return out;
}

struct MetricsReport {
  double mmd = 0;
  double sliced_wasserstein = 0;
  double mode_recall = 0;
  std::vector<double> mode_shares;
  long samples = 0;
  long reference_samples = 0;
  std::uint64_t seed = 0;
};

struct EvalOptions {
  double radius_stds = 3.0;
  double min_share = 0.2;
  int projections = 128;
  /// <= 0 selects the median heuristic.
  double bandwidth = 0.0;
};

template <typename Scalar>
MetricsReport evaluate_samples(const Matrix<Scalar>& samples, const Matrix<Scalar>& reference,
                               const GaussianMixture<Scalar>& mix, const EvalOptions& opt, std::uint64_t seed) {
  MetricsReport r;
  r.mmd = double(mmd_rbf<Scalar>(samples, reference,
                                 opt.bandwidth > 0 ? std::optional<Scalar>(Scalar(opt.bandwidth)) : std::nullopt));
  Rng rng(seed);
  r.sliced_wasserstein = double(sliced_wasserstein(samples, reference, opt.projections, rng));
  auto mr = mode_recall(samples, mix, Scalar(opt.radius_stds), Scalar(opt.min_share));
  r.mode_recall = double(mr.recall);
  for (auto s : mr.shares) r.mode_shares.push_back(double(s));
  r.samples = long(samples.rows());
  r.reference_samples = long(reference.rows());
  r.seed = seed;
  return r;
}

/// Square grid of points spanning +-span_stds diffused stds around the
/// diffused component means along every axis (2-D: side x side points).
template <typename Scalar>
Matrix<Scalar> score_grid(const GaussianMixture<Scalar>& mix, Scalar alpha, Scalar sigma, int side,
                          Scalar span_stds = Scalar(3)) {
  const int dim = mix.dim();
  if (dim > 2) throw DomainError("score_grid: only 1-D and 2-D targets are supported");
  RowVector<Scalar> lo = RowVector<Scalar>::Constant(dim, std::numeric_limits<Scalar>::infinity());
  RowVector<Scalar> hi = RowVector<Scalar>::Constant(dim, -std::numeric_limits<Scalar>::infinity());
  for (const auto& c : mix.components()) {
    const Scalar sd = std::sqrt(alpha * alpha * c.std * c.std + sigma * sigma);
    lo = lo.cwiseMin(((alpha * c.mean).array() - span_stds * sd).matrix());
    hi = hi.cwiseMax(((alpha * c.mean).array() + span_stds * sd).matrix());
  }
  const Eigen::Index n = dim == 1 ? side : Eigen::Index(side) * side;
  Matrix<Scalar> g(n, dim);
  auto coord = [&](int d, int k) { return lo(d) + (hi(d) - lo(d)) * Scalar(k) / Scalar(side - 1); };
  for (int i = 0; i < side; ++i) {
    if (dim == 1) {
      g(i, 0) = coord(0, i);
      continue;
    }
    for (int j = 0; j < side; ++j) {
      g(Eigen::Index(i) * side + j, 0) = coord(0, i);
      g(Eigen::Index(i) * side + j, 1) = coord(1, j);
    }
  }
  return g;
}

/// Relative L2 error of a model's score against the mixture's exact
/// diffused score on a set of points; optionally weighted by the diffused
/// density at each point.
template <typename Scalar>
Scalar score_relative_error(const MeanModel<Scalar>& model, const GaussianMixture<Scalar>& mix,
                            const Matrix<Scalar>& points, int t, bool density_weighted) {
  const auto& s = model.schedule();
  const Matrix<Scalar> exact = mix.score(points, s.alpha(t), s.sigma(t));
  const Matrix<Scalar> approx = score_from_denoiser(model, points, t);
  Vector<Scalar> w = Vector<Scalar>::Ones(points.rows());
  if (density_weighted) {
    const Vector<Scalar> lp = mix.log_density(points, s.alpha(t), s.sigma(t));
    w = (lp.array() - lp.maxCoeff()).exp().matrix();
  }
  const Scalar num = (w.array() * (approx - exact).rowwise().squaredNorm().array()).sum();
  const Scalar den = (w.array() * exact.rowwise().squaredNorm().array()).sum();
  return std::sqrt(num / den);
}

}  // namespace dmd
