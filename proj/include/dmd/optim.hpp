#pragma once

#include "dmd/core.hpp"

#include <string>

namespace dmd {

template <typename Scalar>
struct AdamWOptions {
  Scalar lr = Scalar(5e-5);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps = Scalar(1e-8);
  Scalar weight_decay = Scalar(0.01);
  /// Global L2 clip applied before the update; 0 disables clipping.
  Scalar clip_norm = Scalar(10);
};

/// Rescales grads to L2 norm max_norm when they exceed it. Returns the norm
/// measured before clipping.
template <typename Scalar>
Scalar clip_grad_norm(Vector<Scalar>& grads, Scalar max_norm) {
  if (!(max_norm > Scalar(0))) throw DomainError("clip_grad_norm: max_norm must be positive");
  if (!grads.allFinite()) throw NumericError("clip_grad_norm: non-finite gradient");
  const Scalar norm = grads.norm();
  if (norm > max_norm) grads *= max_norm / norm;
  return norm;
}

/// Bias-corrected Adam with decoupled weight decay.
template <typename Scalar>
class AdamW {
 public:
  AdamW() = default;
  AdamW(Eigen::Index size, AdamWOptions<Scalar> options)
      : options_(options), m_(Vector<Scalar>::Zero(size)), v_(Vector<Scalar>::Zero(size)) {}

  /// Applies one update in place; returns the pre-clip gradient norm.
  Scalar step(Vector<Scalar>& params, Vector<Scalar> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw ShapeError("adamw: expected " + std::to_string(m_.size()) + " parameters, got " +
                       std::to_string(params.size()) + " params / " + std::to_string(grads.size()) +
                       " grads");
    if (!grads.allFinite()) {
      Eigen::Index bad = 0;
      for (; bad < grads.size() && std::isfinite(grads[bad]); ++bad) {}
      throw NumericError("adamw: non-finite gradient at index " + std::to_string(bad) + " (step " +
                         std::to_string(step_ + 1) + ")");
    }
    Scalar norm = grads.norm();
    if (options_.clip_norm > Scalar(0)) norm = clip_grad_norm(grads, options_.clip_norm);

    ++step_;
    const Scalar b1 = options_.beta1, b2 = options_.beta2;
    m_ = b1 * m_ + (Scalar(1) - b1) * grads;
    v_ = b2 * v_ + (Scalar(1) - b2) * grads.cwiseAbs2();
    const Scalar c1 = Scalar(1) - std::pow(b1, Scalar(step_));
    const Scalar c2 = Scalar(1) - std::pow(b2, Scalar(step_));
    params *= Scalar(1) - options_.lr * options_.weight_decay;
    params.array() -= options_.lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + options_.eps);
    return norm;
  }

  long step_count() const { return step_; }
  const Vector<Scalar>& first_moment() const { return m_; }
  const Vector<Scalar>& second_moment() const { return v_; }
  const AdamWOptions<Scalar>& options() const { return options_; }
  void set_lr(Scalar lr) { options_.lr = lr; }

 private:
  AdamWOptions<Scalar> options_;
  Vector<Scalar> m_;
  Vector<Scalar> v_;
  long step_ = 0;
};

}  // namespace dmd
