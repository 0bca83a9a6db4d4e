// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "ibke/tensor.hpp"

namespace ibke {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed list of leaves. Parameters without a gradient in a
/// step are skipped (their moments are left untouched).
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options);

  void step();
  void zero_grad();
  long steps_taken() const { return t_; }
  const AdamOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  AdamOptions options_;
  long t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::vector<Tensor>& params, double max_norm);

/// True when every gradient entry is finite.
bool grads_finite(const std::vector<Tensor>& params);

}  // namespace ibke
