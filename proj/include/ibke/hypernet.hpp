// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0
//
// The two-stage editing hypernetwork. Stage one cross-attends a learnable
// query sequence ζ (l_m × d_m) over the edit signal s to produce a Gaussian
// latent N(μ, diag v²); stage two cross-attends s over a sample z and turns
// the result into a residual and a per-token gate:
//
//   s̃ = CA_s(s, z),   ŝ = σ(s̃ W_s) ⊙ (s + s̃ W_r),   Ŵ = W − η ĥᵀû
//
// where ĥ / û are the first d_in / last d_out columns of ŝ.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibke/archive.hpp"
#include "ibke/edit_signal.hpp"
#include "ibke/model.hpp"
#include "ibke/tensor.hpp"

namespace ibke {

struct HypernetConfig {
  std::size_t l_m = 10;
  std::size_t d_m = 128;
  /// Scale attention scores by 1/√d_m (off: scores used raw).
  bool scale_scores = false;
  /// Pin σ(scale) to 1 (the no-scale-factor ablation).
  bool pin_gate = false;
  double init_eta = 1e-2;
  /// Start W_r at zero so the initial edit is the gated raw gradient.
  bool zero_residual = false;
  /// Divide s by its root-mean-square before it enters the hypernetwork.
  bool normalize_signal = false;
  double zeta_std = 0.02;
  double logvar_clamp = 10.0;
  std::uint64_t seed = 1;
};

void to_json(nlohmann::json& j, const HypernetConfig& c);
void from_json(const nlohmann::json& j, HypernetConfig& c);

struct CrossAttention {
  Tensor wq, wk, wv;
};

/// Parameters of one edit layer's hypernetwork.
struct LayerHypernet {
  std::size_t layer_id = 0;
  std::size_t d_in = 0;   // d_ffn
  std::size_t d_out = 0;  // d_model
  Tensor zeta;            // l_m × d_m
  CrossAttention ca_mu;   // wq d_m×d_m, wk/wv (d_in+d_out)×d_m
  CrossAttention ca_v;
  CrossAttention ca_s;  // wq (d_in+d_out)×d_m, wk/wv d_m×d_m
  Tensor w_r;           // d_m × (d_in+d_out)
  Tensor w_s;           // d_m × 1
  Tensor log_eta;       // 1 × 1

  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
};

class Hypernet {
 public:
  Hypernet() = default;
  Hypernet(const ModelConfig& model, const HypernetConfig& config);

  const HypernetConfig& config() const { return config_; }
  HypernetConfig& mutable_config() { return config_; }
  std::size_t n_layers() const { return layers_.size(); }
  const LayerHypernet& layer(std::size_t slot) const { return layers_.at(slot); }
  LayerHypernet& layer(std::size_t slot) { return layers_.at(slot); }

  TensorMap named_parameters() const;  // "layer<id>/<name>"
  std::vector<Tensor> parameters() const;
  void set_trainable(bool on);
  Hypernet clone() const;

  /// Tensor archive with one "layer<id>/" group per edit layer.
  void save(const std::filesystem::path& dir, const nlohmann::json& extra_metadata = {}) const;
  /// Loads parameters into this hypernet's layout. Shape or layer mismatches
  /// raise ArchiveError. Gate, score-scaling and normalization flags come from
  /// the checkpoint; where they differ from `expected` a note goes to `warnings`.
  static Hypernet load(const std::filesystem::path& dir, const ModelConfig& model, const HypernetConfig& expected,
                       std::vector<std::string>* warnings = nullptr, nlohmann::json* metadata = nullptr);

 private:
  HypernetConfig config_;
  std::vector<LayerHypernet> layers_;
};

/// softmax_rows((query·W_q)(context·W_k)ᵀ · score_scale) · (context·W_v).
Tensor cross_attention(const Tensor& query, const Tensor& context, const CrossAttention& block,
                       double score_scale = 1.0);

struct LatentGaussian {
  Tensor mu;      // l_m × d_m
  Tensor logvar;  // clamped log v²
  Tensor v;       // standard deviations, exp(logvar / 2)
};

LatentGaussian encode_latent(const Tensor& s, const LayerHypernet& params, const HypernetConfig& config);

enum class SampleMode { Train, Infer };

struct EditLatent {
  Tensor z;
  Tensor eps;  // undefined in infer mode
  bool deterministic = true;
};

EditLatent sample_latent(const LatentGaussian& g, SampleMode mode, std::mt19937_64& rng);

/// KL[N(μ, diag v²) ‖ N(0, I)] in closed form.
Tensor itm_loss(const LatentGaussian& g);

struct RefinedSignal {
  Tensor s_hat;        // l_e × (d_in + d_out)
  Tensor scale_logit;  // l_e × 1, before the sigmoid
  Tensor gate;         // l_e × 1, applied gate (after pinning / pruning)
};

/// `keep` optionally masks rows of the gate (0 prunes a token, 1 keeps it).
RefinedSignal refine_signal(const Tensor& s, const EditLatent& z, const LayerHypernet& params,
                            const HypernetConfig& config, std::span<const double> keep = {});

/// s as the hypernetwork sees it (RMS-normalized when configured).
Tensor hypernet_input(const Tensor& s, const HypernetConfig& c);

/// Ŵ = W − η ĥᵀû with η a 1×1 tensor; W itself is left untouched.
Tensor apply_edit(const Tensor& w, const Tensor& s_hat, const Tensor& eta);

enum class BatchMode { Sequential, Parallel };

struct EditOptions {
  SampleMode sample = SampleMode::Infer;
  /// Sequential: each request's signal is computed against the weights left
  /// by the previous requests. Parallel: all signals use the original weights.
  BatchMode batch = BatchMode::Sequential;
  SignalOptions signal;
};

struct EditTrace {
  std::string case_id;
  std::size_t layer_id = 0;
  std::size_t slot = 0;
  LatentGaussian latent;
  Tensor itm;
  RefinedSignal refined;
};

struct EditResult {
  EditWeights weights;  // one per slot; pass to forward() as the edited model
  std::vector<EditTrace> traces;  // request-major, slot-minor
};

/// Per-request, per-slot gate masks for pruning analysis; empty = no pruning.
using GateMasks = std::vector<std::vector<std::vector<double>>>;

/// Edits all requests in order. In train mode the result stays differentiable
/// with respect to the hypernetwork parameters.
EditResult edit_batch(const LanguageModel& model, std::span<const EditRequest> batch, const Hypernet& hypernet,
                      const EditOptions& options, std::mt19937_64& rng, const GateMasks* masks = nullptr);

}  // namespace ibke
