// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only micro transformer. Pre-norm residual blocks, learned absolute
// positions, GELU FFN, no biases on projections. The FFN output projection
// of each layer listed in edit_layer_ids is an edit target W_i (d_ffn ×
// d_model); forward() reports its input h_i and output h_i·W_i.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibke/archive.hpp"
#include "ibke/tensor.hpp"

namespace ibke {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t context_length = 16;
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ffn = 128;
  std::vector<std::size_t> edit_layer_ids = {1, 2};
  bool tied_head = false;
  double init_std = 0.02;
  std::uint64_t seed = 1;

  /// Throws ContractError describing the first violated invariant.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct TransformerBlock {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;  // d_model × d_model
  Tensor ln2_gain, ln2_bias;
  Tensor w_in;   // d_model × d_ffn
  Tensor w_out;  // d_ffn × d_model (edit target when the layer is editable)
};

/// Replacement weights for the edit targets, one slot per entry of
/// edit_layer_ids. Undefined slots fall back to the base weights.
using EditWeights = std::vector<Tensor>;

class LanguageModel {
 public:
  explicit LanguageModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::size_t n_edit_slots() const { return config_.edit_layer_ids.size(); }

  /// Deep copy; the clone shares no storage with this model.
  LanguageModel clone() const;

  TensorMap named_parameters() const;
  std::vector<Tensor> parameters() const;
  void set_trainable(bool on);

  const Tensor& edit_target(std::size_t slot) const;
  /// Slot index of a layer id, if that layer is editable.
  std::optional<std::size_t> slot_of_layer(std::size_t layer) const;

  void save(const std::filesystem::path& dir) const;
  static LanguageModel load(const std::filesystem::path& dir);

  // exposed for tests that manipulate parameter blocks directly
  Tensor token_embedding, position_embedding;
  std::vector<TransformerBlock> blocks;
  Tensor final_ln_gain, final_ln_bias;
  Tensor head;  // d_model × vocab (unused when tied)

 private:
  ModelConfig config_;
};

struct ForwardResult {
  Tensor logits;                      // T × vocab
  std::vector<Tensor> edit_inputs;    // per slot: h_i, T × d_ffn
  std::vector<Tensor> edit_outputs;   // per slot: h_i·W_i, T × d_model
};

/// Runs the model over `tokens`. With `segments`, the rows hold several
/// independent sequences back to back (positions restart per segment).
/// `edits` substitutes edit-target weights without touching the model.
ForwardResult forward(const LanguageModel& model, std::span<const int> tokens, const EditWeights* edits = nullptr,
                      std::span<const std::size_t> segments = {});

/// Next-token cross-entropy over all positions (mean).
Tensor lm_loss(const LanguageModel& model, std::span<const int> tokens, const EditWeights* edits = nullptr);

/// Teacher-forced loss of `target` after `prompt`: the model reads
/// prompt ⊕ target[:-1] and is scored at the target positions only.
Tensor sequence_loss(const LanguageModel& model, std::span<const int> prompt, std::span<const int> target,
                     Reduction reduction, const EditWeights* edits = nullptr);

/// Input tokens for teacher forcing: prompt ⊕ target[:-1].
std::vector<int> teacher_forced_input(std::span<const int> prompt, std::span<const int> target);

struct TokenProb {
  int token;
  double prob;
};

/// Next-token distribution after `prompt` (with optional edited weights).
std::vector<double> next_token_probs(const LanguageModel& model, std::span<const int> prompt,
                                     const EditWeights* edits = nullptr);

/// Top-k next tokens by probability; ties go to the lower token id.
std::vector<TokenProb> predict_topk(const LanguageModel& model, std::span<const int> prompt, std::size_t k,
                                    const EditWeights* edits = nullptr);

/// Top-k ranking of an arbitrary probability row (same tie rule).
std::vector<TokenProb> topk_of(std::span<const double> probs, std::size_t k);

struct PretrainOptions {
  std::size_t steps = 3000;
  double lr = 3e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  std::size_t log_interval = 100;
  /// Held-out check: fraction of (prompt, answer) pairs completed correctly.
  double accuracy_threshold = 0.95;
  std::size_t checkpoint_interval = 0;  // 0 disables on-disk checkpoints
  std::filesystem::path checkpoint_dir;
};

struct PretrainLogRow {
  std::size_t step;
  double loss;
};

struct CompletionProbe {
  std::vector<int> prompt;
  int answer;
};

struct PretrainResult {
  LanguageModel model;
  std::vector<PretrainLogRow> log;
  std::optional<double> accuracy;  // on the probes, when given
};

/// Pretrains from `config`'s initialization on the corpus with Adam, linear
/// warm-up and cosine decay. Throws TrainingError if the loss diverges.
PretrainResult pretrain(const ModelConfig& config, const std::vector<std::vector<int>>& corpus,
                        const PretrainOptions& options, std::span<const CompletionProbe> probes = {});

/// Fraction of probes whose answer is the top-1 prediction.
double completion_accuracy(const LanguageModel& model, std::span<const CompletionProbe> probes);

}  // namespace ibke
