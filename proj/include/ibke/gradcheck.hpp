// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "ibke/tensor.hpp"

namespace ibke {

/// |a-b| / max(|a|, |b|, floor). Two exact zeros give 0.
double relative_error(double a, double b, double floor = 1e-8);

/// Central-difference check of f at x. x must be a leaf; it is perturbed in
/// place and restored. Returns the max relative error over all coordinates.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double step = 1e-5);

struct ParamCoord {
  Tensor param;  // leaf with requires_grad
  std::size_t index = 0;
};

struct CoordCheck {
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

/// Compares backward() of `loss` with central differences on selected scalar
/// coordinates of (possibly different) leaves. `loss` must be deterministic.
std::vector<CoordCheck> check_coordinates(const std::function<Tensor()>& loss,
                                          std::span<const ParamCoord> coords, double step = 1e-5,
                                          double floor = 1e-8);

}  // namespace ibke
