// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end run configuration and the on-disk layout shared by the CLI and
// the acceptance driver:
//
//   <out>/data/    cases.jsonl, corpus.jsonl, symbols.json
//   <out>/model/   pretrained language model
//   <out>/editor/  hypernetwork checkpoint

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibke/eval.hpp"
#include "ibke/model.hpp"
#include "ibke/objectives.hpp"
#include "ibke/synth.hpp"
#include "ibke/trainer.hpp"

namespace ibke {

struct WorldConfig {
  std::uint64_t seed = 7;
  int n_entities = 120;
  int n_relations = 12;
  int n_facts = 600;
};

struct RunConfig {
  WorldConfig world;
  CaseOptions cases;
  ModelConfig model;  // vocab_size is taken from the data
  PretrainOptions pretrain;
  TrainConfig train;
  EvalOptions eval;
  std::size_t ft_steps = 20;
  double ft_lr = 1e-2;
  std::vector<std::size_t> sweep_l_m = {1, 5, 10};
  std::vector<double> sweep_beta = {0.0, 0.1, 1.0, 10.0};
  std::vector<double> prune_fractions = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};

  /// Sets every seed (world, model init, pretraining, edit training).
  void set_seed(std::uint64_t seed);
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Sections and fields are optional; unknown keys raise ParseError.
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

struct Dataset {
  Corpus corpus;
  std::vector<EditCase> cases;
};

Dataset generate_dataset(const RunConfig& config);
void write_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

/// Pretrains config.model (vocabulary from the corpus) and reports accuracy
/// on fact_probes(corpus).
PretrainResult pretrain_model(const RunConfig& config, const Corpus& corpus);

struct SplitCases {
  std::vector<TokenizedCase> train, val, test;
};

/// Freezes locality targets against `model`, tokenizes and attaches
/// references, then splits by the cases' split labels.
SplitCases prepare_cases(const LanguageModel& model, const SymbolTable& symbols, std::vector<EditCase> cases);

void write_validation_csv(std::span<const ValRow> rows, const std::filesystem::path& path);
void write_pretrain_csv(std::span<const PretrainLogRow> rows, const std::filesystem::path& path);

}  // namespace ibke
