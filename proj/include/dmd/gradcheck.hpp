#pragma once

#include "dmd/core.hpp"

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace dmd {

/// Norm-wise relative error ||a - b|| / max(||a||, ||b||), or the absolute
/// error when both are tiny.
double relative_error(const VectorXd& a, const VectorXd& b);

/// Central-difference gradient of f at x with step h.
VectorXd finite_difference_gradient(const std::function<double(const VectorXd&)>& f, const VectorXd& x,
                                    double h = 1e-5);

/// A named check that returns its worst relative error for a given seed.
struct GradCheck {
  std::string name;
  std::function<double(std::uint64_t seed)> run;
};

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0;
  bool passed = false;
};

/// Every backward rule on the tape, the MLP, and the denoising, regression
/// and distribution-matching surrogate gradients.
std::vector<GradCheck> default_grad_checks();

/// A custom square op whose backward rule is deliberately wrong; used to
/// show the report flags broken rules.
GradCheck corrupted_backward_check();

std::vector<GradCheckResult> run_grad_checks(const std::vector<GradCheck>& checks, std::uint64_t seed,
                                             double tolerance);

/// name,max_rel_error,passed
void write_grad_check_csv(std::ostream& out, const std::vector<GradCheckResult>& results);

}  // namespace dmd
