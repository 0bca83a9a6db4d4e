// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Per-layer gradient decomposition of an edit request. For an edit target W_i
// with input h_i and output y_i = h_i·W_i, the gradient of the edit loss is
// ∂ℓ/∂W_i = h_iᵀ u_i with u_i = ∂ℓ/∂y_i. The signal handed to the hypernetwork
// is s_i = h_i ⊕ u_i, detached from the base model.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ibke/model.hpp"
#include "ibke/tensor.hpp"

namespace ibke {

struct EditRequest {
  std::vector<int> prompt;  // starts with <bos>
  std::vector<int> target;
  std::string text;  // human-readable "prompt -> target", for logs
  std::string case_id;

  /// ContractError on an empty prompt/target or a sequence beyond `context`.
  void validate(std::size_t context) const;
};

struct EditSignal {
  std::size_t layer_id = 0;
  Tensor h;  // l_e × d_in
  Tensor u;  // l_e × d_out
  Tensor s;  // l_e × (d_in + d_out)
  std::size_t length() const { return h.rows(); }
};

struct SignalOptions {
  /// Sum the edit loss over target positions (u scales with target length);
  /// false averages instead.
  bool sum_over_target = true;
};

/// One forward/backward pass of the edit loss through `model`, with the edit
/// targets replaced by `current` where given. Returns one signal per edit slot.
std::vector<EditSignal> compute_edit_signal(const LanguageModel& model, const EditRequest& edit,
                                            const EditWeights* current = nullptr, const SignalOptions& options = {});

/// hᵀu as a plain d_in × d_out tensor.
Tensor signal_gradient(const EditSignal& signal);

/// Max relative error over edit layers between hᵀu and the autodiff gradient
/// of the edit loss taken directly with respect to each W_i.
double verify_decomposition(const LanguageModel& model, const EditRequest& edit, const EditWeights* current = nullptr,
                            const SignalOptions& options = {});

/// Writes h and u of every layer ("layer<i>/h", "layer<i>/u") as a tensor archive.
void dump_edit_signal(const std::vector<EditSignal>& signals, const EditRequest& edit,
                      const std::filesystem::path& dir);

}  // namespace ibke
