#pragma once

#include "dmd/diffusion.hpp"

#include <cstring>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace dmd {

enum class Solver { euler, heun };

inline const char* to_string(Solver s) { return s == Solver::euler ? "euler" : "heun"; }

inline Solver solver_from_string(const std::string& s) {
  if (s == "euler") return Solver::euler;
  if (s == "heun") return Solver::heun;
  throw DomainError("unknown solver '" + s + "' (expected euler or heun)");
}

/// Bins visited by an n-step solve: T-1 down to 0, evenly spaced in bin
/// index and rounded. On edm schedules this is the rho = 7 Karras grid.
inline std::vector<int> solver_bins(int bins, int steps) {
  if (steps < 1) throw DomainError("sampler: steps must be >= 1");
  std::vector<int> out(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i)
    out[static_cast<std::size_t>(i)] =
        static_cast<int>(std::lround(double(bins - 1) * (1.0 - double(i) / double(steps))));
  return out;
}

/// Deterministic probability-flow solve from noise z to a clean sample.
///
/// vp schedules (alpha = cos u, sigma = sin u) integrate x_t itself in u,
///   dx/du = -(sigma / alpha) x + (x - alpha mu) / (sigma alpha),
/// from x_{T-1} = z; a unit-Gaussian target makes the field vanish. Other
/// schedules integrate the scaled state x = x_t / alpha against
/// s = sigma / alpha, dx/ds = (x - mu) / s, from sigma_{T-1} z, which is the
/// EDM ODE. Heun applies the second-order corrector on every step (no churn).
template <typename Scalar>
Matrix<Scalar> sample_ode(const MeanModel<Scalar>& model, const Matrix<Scalar>& z, int steps, Solver solver,
                          std::span<const int> labels = {}) {
  const auto& s = model.schedule();
  const auto grid = solver_bins(s.bins(), steps);
  const bool vp = s.kind() == ScheduleKind::vp;
  auto time = [&](int t) { return vp ? std::atan2(s.sigma(t), s.alpha(t)) : s.noise_ratio(t); };
  auto slope = [&](const Matrix<Scalar>& x, int t) {
    const Scalar a = s.alpha(t), sg = s.sigma(t);
    if (vp) return Matrix<Scalar>(-(sg / a) * x + (x - a * model.mean(x, t, labels)) / (sg * a));
    return Matrix<Scalar>((x - model.mean(a * x, t, labels)) / s.noise_ratio(t));
  };
  Matrix<Scalar> x = vp ? z : Matrix<Scalar>(s.noise_ratio(grid.front()) * z);
  for (int i = 0; i < steps; ++i) {
    const int t0 = grid[static_cast<std::size_t>(i)], t1 = grid[static_cast<std::size_t>(i) + 1];
    const Scalar h = time(t1) - time(t0);
    if (h == Scalar(0)) continue;
    Matrix<Scalar> d0 = slope(x, t0);
    Matrix<Scalar> next = x + h * d0;
    if (solver == Solver::heun) {
      Matrix<Scalar> d1 = slope(next, t1);
      next = x + (h / Scalar(2)) * (d0 + d1);
    }
    if (!next.allFinite()) throw NumericError("sampler: non-finite state at step " + std::to_string(i));
    x = std::move(next);
  }
  return vp ? x : Matrix<Scalar>(s.alpha(grid.back()) * x);
}

template <typename Scalar>
Matrix<Scalar> euler_sample(const MeanModel<Scalar>& model, const Matrix<Scalar>& z, int steps,
                            std::span<const int> labels = {}) {
  return sample_ode(model, z, steps, Solver::euler, labels);
}

template <typename Scalar>
Matrix<Scalar> heun_sample(const MeanModel<Scalar>& model, const Matrix<Scalar>& z, int steps,
                           std::span<const int> labels = {}) {
  return sample_ode(model, z, steps, Solver::heun, labels);
}

struct PairMetadata {
  std::uint32_t format_version = 1;
  Solver solver = Solver::heun;
  int steps = 18;
  double omega = 1.0;
  std::uint64_t teacher_hash = 0;
};

/// Noise/output pairs produced by a deterministic solve of a frozen teacher.
template <typename Scalar>
struct PairedDataset {
  Matrix<Scalar> z;
  Matrix<Scalar> y;
  std::vector<int> labels;
  PairMetadata meta;

  Eigen::Index size() const { return z.rows(); }
  int dim() const { return static_cast<int>(z.cols()); }
  bool labelled() const { return !labels.empty(); }
};

/// Solves every z with the teacher. For conditional teachers, labels give
/// one class per row and omega the guidance scale (1 = plain conditional).
template <typename Scalar>
Matrix<Scalar> solve_pairs(const Denoiser<Scalar>& teacher, const Matrix<Scalar>& z, Solver solver, int steps,
                           std::span<const int> labels, Scalar omega) {
  if (teacher.conditional()) {
    GuidedModel<Scalar> guided(teacher, teacher.class_count(), omega);
    return sample_ode<Scalar>(guided, z, steps, solver, labels);
  }
  return sample_ode<Scalar>(teacher, z, steps, solver, {});
}

template <typename Scalar>
PairedDataset<Scalar> generate_pairs(const Denoiser<Scalar>& teacher, Eigen::Index n, Solver solver, int steps,
                                     Rng& rng, std::vector<int> labels = {}, Scalar omega = Scalar(1)) {
  if (n < 1) throw DomainError("generate_pairs: n must be >= 1");
  if (teacher.conditional()) {
    if (labels.empty()) {
      std::uniform_int_distribution<int> pick(0, teacher.class_count() - 1);
      labels.resize(static_cast<std::size_t>(n));
      for (auto& l : labels) l = pick(rng);
    }
    if (static_cast<Eigen::Index>(labels.size()) != n) throw DomainError("generate_pairs: need one label per pair");
  } else if (!labels.empty()) {
    throw DomainError("generate_pairs: unconditional teacher given labels");
  }
  PairedDataset<Scalar> ds;
  ds.z = standard_normal<Scalar>(n, teacher.data_dim(), rng);
  ds.labels = std::move(labels);
  ds.y = solve_pairs(teacher, ds.z, solver, steps, ds.labels, omega);
  ds.meta.solver = solver;
  ds.meta.steps = steps;
  ds.meta.omega = double(omega);
  ds.meta.teacher_hash = hash_parameters(teacher.net().parameters());
  return ds;
}

/// Checks lineage and regenerates every stride-th record; throws on the
/// first mismatch.
template <typename Scalar>
void verify_pairs(const PairedDataset<Scalar>& ds, const Denoiser<Scalar>& teacher, Eigen::Index stride = 1) {
  const auto hash = hash_parameters(teacher.net().parameters());
  if (hash != ds.meta.teacher_hash)
    throw DomainError("paired dataset was generated by teacher " + hex64(ds.meta.teacher_hash) +
                      ", not by the supplied teacher " + hex64(hash));
  if (stride < 1) stride = 1;
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < ds.size(); i += stride) rows.push_back(i);
  Matrix<Scalar> z(static_cast<Eigen::Index>(rows.size()), ds.dim());
  std::vector<int> labels;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    z.row(static_cast<Eigen::Index>(k)) = ds.z.row(rows[k]);
    if (ds.labelled()) labels.push_back(ds.labels[static_cast<std::size_t>(rows[k])]);
  }
  Matrix<Scalar> y = solve_pairs(teacher, z, ds.meta.solver, ds.meta.steps, labels, Scalar(ds.meta.omega));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    for (Eigen::Index c = 0; c < y.cols(); ++c) {
      const Scalar a = y(static_cast<Eigen::Index>(k), c), b = ds.y(rows[k], c);
      if (std::memcmp(&a, &b, sizeof(Scalar)) != 0)
        throw DomainError("paired dataset record " + std::to_string(rows[k]) + " does not regenerate bit-exactly");
    }
  }
}

}  // namespace dmd
