// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#include "ibke/edit_signal.hpp"

#include <algorithm>
#include <cmath>

#include "ibke/archive.hpp"
#include "ibke/errors.hpp"
#include "ibke/gradcheck.hpp"

namespace ibke {
namespace {

struct Pass {
  ForwardResult fwd;
  EditWeights weights;  // leaf copies with requires_grad
};

// Runs the edit loss with fresh differentiable copies of the edit targets so
// that both ∂ℓ/∂y_i (interior) and ∂ℓ/∂W_i (leaf) are populated.
Pass run_edit_loss(const LanguageModel& model, const EditRequest& edit, const EditWeights* current,
                   const SignalOptions& options) {
  edit.validate(model.config().context_length);
  if (current && current->size() != model.n_edit_slots())
    throw ContractError("edit signal: edit weight slot count mismatch");
  Pass p;
  p.weights.resize(model.n_edit_slots());
  for (std::size_t k = 0; k < model.n_edit_slots(); ++k) {
    const Tensor& base = (current && (*current)[k].defined()) ? (*current)[k] : model.edit_target(k);
    p.weights[k] = base.detach();
    p.weights[k].set_requires_grad(true);
  }
  auto input = teacher_forced_input(edit.prompt, edit.target);
  std::vector<int> labels(input.size(), -1);
  for (std::size_t i = 0; i < edit.target.size(); ++i) labels[edit.prompt.size() - 1 + i] = edit.target[i];
  p.fwd = forward(model, input, &p.weights);
  auto loss = cross_entropy(p.fwd.logits, labels, options.sum_over_target ? Reduction::Sum : Reduction::Mean);
  loss.backward();
  return p;
}

}  // namespace

void EditRequest::validate(std::size_t context) const {
  if (prompt.empty()) throw ContractError("edit request " + case_id + ": empty prompt");
  if (target.empty()) throw ContractError("edit request " + case_id + ": empty target");
  if (prompt.size() + target.size() - 1 > context)
    throw ContractError("edit request " + case_id + ": prompt+target exceeds context length");
}

std::vector<EditSignal> compute_edit_signal(const LanguageModel& model, const EditRequest& edit,
                                            const EditWeights* current, const SignalOptions& options) {
  auto p = run_edit_loss(model, edit, current, options);
  std::vector<EditSignal> out;
  for (std::size_t k = 0; k < model.n_edit_slots(); ++k) {
    const auto& y = p.fwd.edit_outputs[k];
    EditSignal sig;
    sig.layer_id = model.config().edit_layer_ids[k];
    sig.h = p.fwd.edit_inputs[k].detach();
    // An output that never reaches the loss has no gradient buffer.
    std::vector<double> g(y.numel(), 0.0);
    if (y.has_grad()) std::copy(y.grad().begin(), y.grad().end(), g.begin());
    sig.u = Tensor(y.shape(), std::move(g));
    sig.s = concat_cols(sig.h, sig.u);
    out.push_back(std::move(sig));
  }
  return out;
}

Tensor signal_gradient(const EditSignal& signal) { return matmul_tn(signal.h.detach(), signal.u.detach()); }

double verify_decomposition(const LanguageModel& model, const EditRequest& edit, const EditWeights* current,
                            const SignalOptions& options) {
  auto signals = compute_edit_signal(model, edit, current, options);
  auto p = run_edit_loss(model, edit, current, options);
  double worst = 0.0;
  for (std::size_t k = 0; k < signals.size(); ++k) {
    const auto g = signal_gradient(signals[k]);
    auto decomposed = g.values();
    const auto& w = p.weights[k];
    std::vector<double> direct(w.numel(), 0.0);
    if (w.has_grad()) std::copy(w.grad().begin(), w.grad().end(), direct.begin());
    for (std::size_t i = 0; i < direct.size(); ++i) worst = std::max(worst, relative_error(decomposed[i], direct[i]));
  }
  return worst;
}

void dump_edit_signal(const std::vector<EditSignal>& signals, const EditRequest& edit,
                      const std::filesystem::path& dir) {
  TensorMap tensors;
  for (const auto& s : signals) {
    const auto prefix = "layer" + std::to_string(s.layer_id) + "/";
    tensors[prefix + "h"] = s.h;
    tensors[prefix + "u"] = s.u;
  }
  write_archive(dir, tensors, {{"case_id", edit.case_id}, {"text", edit.text}, {"prompt", edit.prompt},
                               {"target", edit.target}});
}

}  // namespace ibke
