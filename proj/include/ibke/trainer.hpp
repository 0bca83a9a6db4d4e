// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Edit-training loop: only hypernetwork parameters learn; the base model is
// read-only throughout. Validation total loss (ε = 0) drives early stopping
// and checkpoint selection.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibke/hypernet.hpp"
#include "ibke/model.hpp"
#include "ibke/objectives.hpp"

namespace ibke {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t max_batch_size = 1;
  std::size_t max_steps = 20000;
  std::size_t early_stop_patience = 3000;
  std::size_t val_interval = 250;
  std::size_t checkpoint_interval = 0;  // 0: keep only the best checkpoint in memory
  std::filesystem::path checkpoint_dir;
  std::size_t log_interval = 10;
  double beta = 0.1;
  std::size_t l_m = 10;
  std::size_t d_m = 128;
  bool no_ib = false;            // β = 0 and ε = 0 during training
  bool no_scale_factor = false;  // σ(scale) pinned to 1
  bool scale_scores = false;
  BatchMode batch_mode = BatchMode::Sequential;
  bool sum_signal_loss = true;
  double grad_clip = 1.0;
  double init_eta = 1e-1;
  bool zero_residual = true;
  bool normalize_signal = true;
  std::uint64_t seed = 1;

  /// ContractError on the first invalid field.
  void validate() const;
  HypernetConfig hypernet() const;
  double effective_beta() const { return no_ib ? 0.0 : beta; }
  SampleMode train_sampling() const { return no_ib ? SampleMode::Infer : SampleMode::Train; }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing fields keep their defaults; unknown fields raise ParseError.
void from_json(const nlohmann::json& j, TrainConfig& c);

std::map<std::string, TrainConfig> ablation_variants(const TrainConfig& config);

struct ValRow {
  std::size_t step = 0;
  double total = 0, sg = 0, il = 0;
};

struct TrainResult {
  Hypernet hypernet;  // best validation checkpoint
  std::size_t best_step = 0;
  double best_val = 0;
  std::vector<LossLogRow> log;
  std::vector<ValRow> validation;
  std::size_t steps_run = 0;
  bool early_stopped = false;
  std::optional<std::string> aborted;  // reason, when training hit a non-finite loss
};

struct StepLosses {
  Tensor total, sg, il;
  double itm_mean = 0.0;
};

/// Edits `cases` as one batch with `mode` sampling and evaluates the training
/// objective. Differentiable in the hypernetwork parameters when they require grad.
StepLosses batch_objective(const LanguageModel& model, const Hypernet& hypernet,
                           std::span<const TokenizedCase* const> cases, const TrainConfig& config, SampleMode mode,
                           std::mt19937_64& rng);

/// Validation objective of `hypernet` over `cases` (infer mode, batches of the
/// configured size). Returns {total, sg, il} averaged over batches.
ValRow validation_loss(const LanguageModel& model, const Hypernet& hypernet, std::span<const TokenizedCase> cases,
                       const TrainConfig& config);

/// Locality references must already be attached (compute_references).
TrainResult train(const LanguageModel& model, std::span<const TokenizedCase> train_cases,
                  std::span<const TokenizedCase> val_cases, const TrainConfig& config);

/// Batches of up to `max_batch` cases with no repeated subject, in a
/// seed-determined order covering every case once.
std::vector<std::vector<std::size_t>> plan_batches(std::span<const TokenizedCase> cases, std::size_t max_batch,
                                                   std::mt19937_64& rng);

/// Fine-tuning baseline: Adam on the edit loss, updating only edit targets.
EditWeights ft_baseline_edit(const LanguageModel& model, const EditRequest& edit, std::size_t steps, double lr);

void save_checkpoint(const Hypernet& hypernet, const TrainConfig& config, const std::filesystem::path& dir);
/// Compatibility notes (ablation flags or β differing from `expected`) are
/// appended to `warnings`.
Hypernet load_checkpoint(const std::filesystem::path& dir, const ModelConfig& model, const TrainConfig& expected,
                         std::vector<std::string>* warnings = nullptr);

}  // namespace ibke
