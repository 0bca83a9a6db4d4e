// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Edit metrics, all teacher-forced and percentage-valued unless noted:
//   reliability  top-1 token hits on the edit target
//   generality   top-5 token hits on generality targets (per criterion tag)
//   locality     original top-1 ∈ edited top-5 at locality positions
//   js           1 − mean Jensen–Shannon divergence (base 2), in [0, 1]
// Per-case values are averaged over that case's tokens, aggregates over cases.

#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibke/hypernet.hpp"
#include "ibke/model.hpp"
#include "ibke/objectives.hpp"
#include "ibke/trainer.hpp"

namespace ibke {

/// Produces the edited weights for one case.
using Editor = std::function<EditWeights(const TokenizedCase&)>;

Editor null_editor(const LanguageModel& model);
Editor ibke_editor(const LanguageModel& model, const Hypernet& hypernet, const EditOptions& options = {});
Editor ft_editor(const LanguageModel& model, std::size_t steps, double lr);

struct EvalOptions {
  std::size_t generality_k = 5;
  std::size_t locality_k = 5;
  bool strict_locality = false;         // original top-1 == edited top-1
  bool generality_all_tokens = false;   // an item hits only if every token does
};

struct CaseMetrics {
  std::string id;
  std::string relation;
  double reliability = 0;
  std::optional<double> generality;
  std::optional<double> locality;
  std::optional<double> js_similarity;
  std::map<std::string, double> by_criterion;
};

/// Metrics of one case under `edits` (nullptr: the unedited model).
CaseMetrics evaluate_case(const LanguageModel& model, const EditWeights* edits, const TokenizedCase& c,
                          const EvalOptions& options = {});

struct EvalReport {
  std::vector<CaseMetrics> cases;
  double reliability = 0;
  double generality = 0;   // NaN when no case has generality items
  double locality = 0;     // NaN when no case has locality items
  double js_similarity = 0;
  std::map<std::string, double> generality_by_criterion;
  nlohmann::json metadata;
};

EvalReport evaluate(const LanguageModel& model, std::span<const TokenizedCase> cases, const Editor& editor,
                    const EvalOptions& options = {});

void to_json(nlohmann::json& j, const EvalReport& r);
void write_report(const EvalReport& r, const std::filesystem::path& path);
void write_case_csv(const EvalReport& r, const std::filesystem::path& path);

// Single-metric entry points. Each throws ContractError on an empty case list
// or when no case has the items the metric needs.
double reliability(const LanguageModel& model, std::span<const TokenizedCase> cases, const Editor& editor);
double generality(const LanguageModel& model, std::span<const TokenizedCase> cases, const Editor& editor,
                  const EvalOptions& options = {});
double locality(const LanguageModel& model, std::span<const TokenizedCase> cases, const Editor& editor,
                const EvalOptions& options = {});
double js_similarity(const LanguageModel& model, std::span<const TokenizedCase> cases, const Editor& editor);

/// Jensen–Shannon divergence with base-2 logarithms.
double js_divergence(std::span<const double> p, std::span<const double> q);

// ---- analysis ---------------------------------------------------------------

struct PruneRow {
  double fraction = 0;
  double rel_confidence = 0;  // probability of the edit target
  double rel_rank = 0;        // 1-based vocabulary rank of the edit target
  double gen_confidence = 0;
  double gen_rank = 0;
  double js_similarity = 0;
};

/// For each fraction, re-applies the edit with the lowest post-sigmoid gates
/// (pooled over the case's layers and tokens) set to zero and averages the
/// metrics over `cases`.
std::vector<PruneRow> prune_scan(const LanguageModel& model, const Hypernet& hypernet,
                                 std::span<const TokenizedCase> cases, std::span<const double> fractions,
                                 const EditOptions& options = {});
void write_prune_csv(std::span<const PruneRow> rows, const std::filesystem::path& path);

/// Signed area of js(0) − js(f) over f ∈ [0, upto] (trapezoid rule).
double js_degradation_area(std::span<const PruneRow> rows, double upto = 0.5);

/// Post-sigmoid gate values of one infer-mode edit per case, all layers.
std::vector<std::vector<double>> edit_gates(const LanguageModel& model, const Hypernet& hypernet,
                                            std::span<const TokenizedCase> cases, const EditOptions& options = {});
/// Fraction of gate values below `threshold`.
double gate_sparsity(const std::vector<std::vector<double>>& gates, double threshold = 0.1);

/// One JSONL row per case and edit layer: {case_id, layer_id, relation, mu,
/// scale, confidence}. Returns the number of rows written.
std::size_t export_latents(const LanguageModel& model, const Hypernet& hypernet, std::span<const TokenizedCase> cases,
                           const std::filesystem::path& path, const EditOptions& options = {});

struct SweepRow {
  std::size_t l_m = 0;
  double beta = 0;
  double reliability = 0, generality = 0, locality = 0;
  std::string error;  // non-empty when the cell failed (metrics NaN)
};

/// Trains one editor per (l_m, β) cell on `train_cases`/`val_cases` and
/// evaluates it on `test_cases`.
std::vector<SweepRow> sweep(const LanguageModel& model, std::span<const TokenizedCase> train_cases,
                            std::span<const TokenizedCase> val_cases, std::span<const TokenizedCase> test_cases,
                            const TrainConfig& base, std::span<const std::size_t> l_ms, std::span<const double> betas);
void write_sweep_csv(std::span<const SweepRow> rows, const std::filesystem::path& path);

}  // namespace ibke
