// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training objective of the editor:
//
//   total = ℓ_SG + ℓ_IL + β / (|E|·n·l_m·d_m) · Σ_e Σ_i ITM(e, i)
//
// ℓ_SG is the mean (over generality items) negative log-likelihood of each
// target under the edited model, ℓ_IL the mean KL[edited ‖ original] over
// teacher-forced locality positions.

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ibke/edit_signal.hpp"
#include "ibke/hypernet.hpp"
#include "ibke/model.hpp"
#include "ibke/synth.hpp"

namespace ibke {

struct LabeledPrompt {
  std::vector<int> prompt;
  std::vector<int> target;
  std::string tag;  // criterion tag for generality items
};

struct LocalityItem {
  std::vector<int> prompt;
  std::vector<int> target;
  /// Original-model log-probabilities at the target positions
  /// (target.size() × vocab). Filled lazily when empty.
  std::vector<double> reference;
};

struct TokenizedCase {
  std::string id;
  std::string split;
  std::string relation;
  EditRequest edit;
  std::vector<LabeledPrompt> generality;
  std::vector<LocalityItem> locality;
  int subject = -1;  // first prompt token after <bos>, used to keep batches disjoint
};

TokenizedCase tokenize_case(const EditCase& c, const SymbolTable& symbols);
std::vector<TokenizedCase> tokenize_cases(std::span<const EditCase> cases, const SymbolTable& symbols);

/// One completion probe per corpus sentence with a determined final word
/// (every kind except alias listings).
std::vector<CompletionProbe> fact_probes(const Corpus& corpus);

/// Replaces every locality target with the model's greedy continuation of the
/// same length, so locality measures agreement with the unedited model.
void freeze_locality_targets(const LanguageModel& model, const SymbolTable& symbols, std::vector<EditCase>& cases);

/// Fills LocalityItem::reference from the unedited model.
void compute_references(const LanguageModel& original, std::vector<TokenizedCase>& cases);

struct TrainBatch {
  std::vector<EditRequest> edits;
  std::vector<LabeledPrompt> generality;  // includes each edit pair
  std::vector<LocalityItem> locality;
  double beta = 0.1;
};

/// Assembles G(E) (edit pairs first, then generality items) and L(E).
TrainBatch make_train_batch(std::span<const TokenizedCase* const> cases, double beta);

Tensor sg_loss(const LanguageModel& model, const EditWeights* edits, std::span<const LabeledPrompt> generality);

/// KL of `edited` (model + edits) against `original`, averaged over all
/// teacher-forced target positions of L. Items with a cached reference skip
/// the original-model pass.
Tensor il_loss(const LanguageModel& edited, const EditWeights* edits, const LanguageModel& original,
               std::span<const LocalityItem> locality);

struct EditLosses {
  Tensor sg;
  Tensor il;
};

/// ℓ_SG and ℓ_IL from a single packed forward pass. Every locality item must
/// carry its reference.
EditLosses edit_losses(const LanguageModel& model, const EditWeights* edits, std::span<const LabeledPrompt> generality,
                       std::span<const LocalityItem> locality);

Tensor total_loss(const Tensor& sg, const Tensor& il, std::span<const Tensor> itm_terms, double beta,
                  std::size_t n_edits, std::size_t n_layers, std::size_t l_m, std::size_t d_m);

struct LossLogRow {
  std::size_t step = 0;
  double sg = 0, il = 0, itm_mean = 0, total = 0, beta = 0;
};

void write_loss_csv(std::span<const LossLogRow> rows, const std::filesystem::path& path);

}  // namespace ibke
