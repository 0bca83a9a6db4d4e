// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#include "ibke/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ibke/errors.hpp"

namespace ibke {

double relative_error(double a, double b, double floor) {
  const double diff = std::abs(a - b);
  if (diff == 0.0) return 0.0;
  return diff / std::max({std::abs(a), std::abs(b), floor});
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double step) {
  if (!x.is_leaf()) throw ContractError("finite_diff_check: x must be a leaf");
  x.set_requires_grad(true);
  x.zero_grad();
  f(x).backward();
  std::vector<double> analytic(x.numel(), 0.0);
  if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());

  double worst = 0.0;
  auto v = x.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double orig = v[i];
    v[i] = orig + step;
    const double up = f(x).item();
    v[i] = orig - step;
    const double down = f(x).item();
    v[i] = orig;
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * step)));
  }
  return worst;
}

std::vector<CoordCheck> check_coordinates(const std::function<Tensor()>& loss,
                                          std::span<const ParamCoord> coords, double step, double floor) {
  for (const auto& c : coords) {
    if (!c.param.is_leaf() || !c.param.requires_grad()) {
      throw ContractError("check_coordinates: coordinates must live on trainable leaves");
    }
    c.param.node()->grad.clear();
  }
  loss().backward();
  std::vector<CoordCheck> out;
  out.reserve(coords.size());
  for (const auto& c : coords) {
    CoordCheck r;
    r.analytic = c.param.has_grad() ? c.param.grad()[c.index] : 0.0;
    auto& slot = c.param.node()->value[c.index];
    const double orig = slot;
    slot = orig + step;
    const double up = loss().item();
    slot = orig - step;
    const double down = loss().item();
    slot = orig;
    r.numeric = (up - down) / (2.0 * step);
    r.rel_error = relative_error(r.analytic, r.numeric, floor);
    out.push_back(r);
  }
  return out;
}

}  // namespace ibke
