#pragma once

#include <functional>
#include <span>

#include "msr/tensor.hpp"

namespace msr {

/// Builds a scalar loss on the given tape from the current parameter values.
/// Must be deterministic: the checker re-invokes it under perturbed values.
using LossBuilder = std::function<Var(Tape&)>;

/// Central-difference gradient check.
///
/// Runs the builder once for analytic gradients, then perturbs every element
/// of every parameter by +/-eps and compares. Returns the max over elements of
///   |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
double finite_diff_check(const LossBuilder& build, std::span<Tensor* const> params,
                         double eps = 1e-5);

double finite_diff_check(const LossBuilder& build, std::initializer_list<Tensor*> params,
                         double eps = 1e-5);

/// Ladder variant for deep compositions: every element is checked at each
/// step size and scored by its best-conditioned estimate. A single eps cannot
/// serve both O(1) and O(1e-10) gradient magnitudes at f64 precision.
/// Elements where analytic and numeric agree within 1e-10 absolutely score 0:
/// with an O(1) loss, f64 central differences carry ~1e-12 of rounding noise,
/// so relative error is meaningless below that scale.
double finite_diff_check(const LossBuilder& build, std::span<Tensor* const> params,
                         std::span<const double> eps_ladder);

double finite_diff_check_deep(const LossBuilder& build, std::span<Tensor* const> params);
double finite_diff_check_deep(const LossBuilder& build,
                              std::initializer_list<Tensor*> params);

}  // namespace msr
