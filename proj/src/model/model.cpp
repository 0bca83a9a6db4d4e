// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#include "ibke/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "ibke/errors.hpp"
#include "ibke/optim.hpp"

namespace ibke {

using nlohmann::json;

void ModelConfig::validate() const {
  if (vocab_size == 0) throw ContractError("model config: vocab_size must be positive");
  if (n_heads == 0 || d_model % n_heads != 0) throw ContractError("model config: d_model must be divisible by n_heads");
  if (n_layers == 0 || d_ffn == 0 || context_length == 0) throw ContractError("model config: zero-sized dimension");
  for (auto id : edit_layer_ids) {
    if (id >= n_layers) throw ContractError("model config: edit layer " + std::to_string(id) + " >= n_layers");
  }
  auto sorted = edit_layer_ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ContractError("model config: duplicate edit layer id");
  }
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"vocab_size", c.vocab_size}, {"context_length", c.context_length}, {"n_layers", c.n_layers},
           {"d_model", c.d_model},       {"n_heads", c.n_heads},               {"d_ffn", c.d_ffn},
           {"edit_layer_ids", c.edit_layer_ids}, {"tied_head", c.tied_head},   {"init_std", c.init_std},
           {"seed", c.seed}};
}

void from_json(const json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.context_length = j.value("context_length", d.context_length);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_ffn = j.value("d_ffn", d.d_ffn);
  c.edit_layer_ids = j.value("edit_layer_ids", d.edit_layer_ids);
  c.tied_head = j.value("tied_head", d.tied_head);
  c.init_std = j.value("init_std", d.init_std);
  c.seed = j.value("seed", d.seed);
}

namespace {

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor ones_row(std::size_t n) { return Tensor::full({1, n}, 1.0); }
Tensor zeros_row(std::size_t n) { return Tensor::zeros({1, n}); }

}  // namespace

LanguageModel::LanguageModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const auto d = config_.d_model;
  const double std0 = config_.init_std;
  const double std_proj = std0 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  token_embedding = normal({config_.vocab_size, d}, std0, rng);
  position_embedding = normal({config_.context_length, d}, std0, rng);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    TransformerBlock b;
    b.ln1_gain = ones_row(d);
    b.ln1_bias = zeros_row(d);
    b.wq = normal({d, d}, std0, rng);
    b.wk = normal({d, d}, std0, rng);
    b.wv = normal({d, d}, std0, rng);
    b.wo = normal({d, d}, std_proj, rng);
    b.ln2_gain = ones_row(d);
    b.ln2_bias = zeros_row(d);
    b.w_in = normal({d, config_.d_ffn}, std0, rng);
    b.w_out = normal({config_.d_ffn, d}, std_proj, rng);
    blocks.push_back(std::move(b));
  }
  final_ln_gain = ones_row(d);
  final_ln_bias = zeros_row(d);
  if (!config_.tied_head) head = normal({d, config_.vocab_size}, std0, rng);
}

TensorMap LanguageModel::named_parameters() const {
  TensorMap m;
  m["token_embedding"] = token_embedding;
  m["position_embedding"] = position_embedding;
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto p = "blocks." + std::to_string(l) + ".";
    const auto& b = blocks[l];
    m[p + "ln1_gain"] = b.ln1_gain;
    m[p + "ln1_bias"] = b.ln1_bias;
    m[p + "wq"] = b.wq;
    m[p + "wk"] = b.wk;
    m[p + "wv"] = b.wv;
    m[p + "wo"] = b.wo;
    m[p + "ln2_gain"] = b.ln2_gain;
    m[p + "ln2_bias"] = b.ln2_bias;
    m[p + "w_in"] = b.w_in;
    m[p + "w_out"] = b.w_out;
  }
  m["final_ln_gain"] = final_ln_gain;
  m["final_ln_bias"] = final_ln_bias;
  if (!config_.tied_head) m["head"] = head;
  return m;
}

std::vector<Tensor> LanguageModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void LanguageModel::set_trainable(bool on) {
  for (auto& t : parameters()) t.set_requires_grad(on);
}

LanguageModel LanguageModel::clone() const {
  LanguageModel m(*this);  // shares tensors; replace each with a deep copy
  m.token_embedding = token_embedding.clone();
  m.position_embedding = position_embedding.clone();
  for (auto& b : m.blocks) {
    for (Tensor* t : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain, &b.ln2_bias, &b.w_in, &b.w_out}) {
      *t = t->clone();
    }
  }
  m.final_ln_gain = final_ln_gain.clone();
  m.final_ln_bias = final_ln_bias.clone();
  if (head.defined()) m.head = head.clone();
  return m;
}

const Tensor& LanguageModel::edit_target(std::size_t slot) const {
  if (slot >= config_.edit_layer_ids.size()) throw IndexError("edit_target: slot " + std::to_string(slot));
  return blocks[config_.edit_layer_ids[slot]].w_out;
}

std::optional<std::size_t> LanguageModel::slot_of_layer(std::size_t layer) const {
  const auto& ids = config_.edit_layer_ids;
  auto it = std::find(ids.begin(), ids.end(), layer);
  if (it == ids.end()) return std::nullopt;
  return static_cast<std::size_t>(it - ids.begin());
}

void LanguageModel::save(const std::filesystem::path& dir) const {
  write_archive(dir, named_parameters(), {{"kind", "language_model"}});
  std::ofstream out(dir / "config.json");
  out << json(config_).dump(2) << '\n';
  if (!out) throw ArchiveError("model: cannot write " + (dir / "config.json").string());
}

LanguageModel LanguageModel::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "config.json");
  if (!in) throw ArchiveError("model: missing " + (dir / "config.json").string());
  ModelConfig cfg;
  try {
    cfg = json::parse(in).get<ModelConfig>();
  } catch (const json::exception& e) {
    throw ArchiveError(std::string("model: bad config.json: ") + e.what());
  }
  auto tensors = read_archive(dir);
  LanguageModel m(cfg);
  auto expected = m.named_parameters();
  if (tensors.size() != expected.size()) throw ArchiveError("model: archive parameter count does not match config");
  for (auto& [name, t] : expected) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ArchiveError("model: archive lacks " + name);
    if (it->second.shape() != t.shape()) throw ArchiveError("model: shape mismatch for " + name);
    auto dst = t.mutable_values();
    std::copy(it->second.values().begin(), it->second.values().end(), dst.begin());
  }
  return m;
}

ForwardResult forward(const LanguageModel& model, std::span<const int> tokens, const EditWeights* edits,
                      std::span<const std::size_t> segments) {
  const auto& cfg = model.config();
  if (tokens.empty()) throw ContractError("forward: empty token sequence");
  std::vector<std::size_t> seg(segments.begin(), segments.end());
  if (seg.empty()) seg.push_back(tokens.size());
  std::vector<int> positions;
  positions.reserve(tokens.size());
  for (auto len : seg) {
    if (len == 0) throw ContractError("forward: empty segment");
    if (len > cfg.context_length) {
      throw ContractError("forward: sequence of " + std::to_string(len) + " exceeds context length " +
                          std::to_string(cfg.context_length));
    }
    for (std::size_t p = 0; p < len; ++p) positions.push_back(static_cast<int>(p));
  }
  if (positions.size() != tokens.size()) throw ContractError("forward: segments do not cover the tokens");
  if (edits && edits->size() != model.n_edit_slots()) throw ContractError("forward: edit weight slot count mismatch");

  ForwardResult out;
  out.edit_inputs.resize(model.n_edit_slots());
  out.edit_outputs.resize(model.n_edit_slots());

  const double score_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model / cfg.n_heads));
  Tensor x = add(gather_rows(model.token_embedding, tokens), gather_rows(model.position_embedding, positions));
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const auto& b = model.blocks[l];
    Tensor a = layer_norm(x, b.ln1_gain, b.ln1_bias);
    Tensor att = causal_self_attention(matmul(a, b.wq), matmul(a, b.wk), matmul(a, b.wv), cfg.n_heads, score_scale, seg);
    x = add(x, matmul(att, b.wo));
    Tensor h = gelu(matmul(layer_norm(x, b.ln2_gain, b.ln2_bias), b.w_in));
    const Tensor* w_out = &b.w_out;
    auto slot = model.slot_of_layer(l);
    if (slot && edits && (*edits)[*slot].defined()) w_out = &(*edits)[*slot];
    Tensor y = matmul(h, *w_out);
    if (slot) {
      out.edit_inputs[*slot] = h;
      out.edit_outputs[*slot] = y;
    }
    x = add(x, y);
  }
  Tensor xf = layer_norm(x, model.final_ln_gain, model.final_ln_bias);
  out.logits = cfg.tied_head ? matmul_nt(xf, model.token_embedding) : matmul(xf, model.head);
  return out;
}

Tensor lm_loss(const LanguageModel& model, std::span<const int> tokens, const EditWeights* edits) {
  if (tokens.size() < 2) throw ContractError("lm_loss: need at least two tokens");
  auto logits = forward(model, tokens.first(tokens.size() - 1), edits).logits;
  return cross_entropy(logits, tokens.subspan(1));
}

std::vector<int> teacher_forced_input(std::span<const int> prompt, std::span<const int> target) {
  if (prompt.empty()) throw ContractError("teacher forcing: empty prompt");
  if (target.empty()) throw ContractError("teacher forcing: empty target");
  std::vector<int> in(prompt.begin(), prompt.end());
  in.insert(in.end(), target.begin(), target.end() - 1);
  return in;
}

Tensor sequence_loss(const LanguageModel& model, std::span<const int> prompt, std::span<const int> target,
                     Reduction reduction, const EditWeights* edits) {
  auto input = teacher_forced_input(prompt, target);
  std::vector<int> labels(input.size(), -1);
  for (std::size_t i = 0; i < target.size(); ++i) labels[prompt.size() - 1 + i] = target[i];
  return cross_entropy(forward(model, input, edits).logits, labels, reduction);
}

std::vector<double> next_token_probs(const LanguageModel& model, std::span<const int> prompt,
                                     const EditWeights* edits) {
  auto logits = forward(model, prompt, edits).logits;
  const auto v = logits.cols();
  auto lp = log_softmax_rows(logits.values().subspan((logits.rows() - 1) * v, v), 1, v);
  for (auto& x : lp) x = std::exp(x);
  return lp;
}

std::vector<TokenProb> topk_of(std::span<const double> probs, std::size_t k) {
  if (k > probs.size()) throw ContractError("topk: k exceeds vocabulary size");
  std::vector<int> ids(probs.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](int a, int b) {
    if (probs[a] != probs[b]) return probs[a] > probs[b];
    return a < b;
  });
  std::vector<TokenProb> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back({ids[i], probs[ids[i]]});
  return out;
}

std::vector<TokenProb> predict_topk(const LanguageModel& model, std::span<const int> prompt, std::size_t k,
                                    const EditWeights* edits) {
  return topk_of(next_token_probs(model, prompt, edits), k);
}

double completion_accuracy(const LanguageModel& model, std::span<const CompletionProbe> probes) {
  if (probes.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& p : probes) {
    if (predict_topk(model, p.prompt, 1)[0].token == p.answer) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(probes.size());
}

PretrainResult pretrain(const ModelConfig& config, const std::vector<std::vector<int>>& corpus,
                        const PretrainOptions& options, std::span<const CompletionProbe> probes) {
  if (corpus.empty()) throw ContractError("pretrain: empty corpus");
  for (const auto& s : corpus)
    if (s.size() < 2) throw ContractError("pretrain: corpus sequence shorter than two tokens");

  PretrainResult result{LanguageModel(config), {}, std::nullopt};
  auto& model = result.model;
  model.set_trainable(true);
  auto params = model.parameters();
  Adam opt(params, AdamOptions{.lr = options.lr});
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const std::size_t warmup = std::min<std::size_t>(100, options.steps / 10 + 1);

  for (std::size_t step = 0; step < options.steps; ++step) {
    std::vector<int> tokens, labels;
    std::vector<std::size_t> seg;
    for (std::size_t b = 0; b < options.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto& s = corpus[order[cursor++]];
      tokens.insert(tokens.end(), s.begin(), s.end() - 1);
      labels.insert(labels.end(), s.begin() + 1, s.end());
      seg.push_back(s.size() - 1);
    }
    double lr = options.lr;
    if (step < warmup) {
      lr *= static_cast<double>(step + 1) / static_cast<double>(warmup);
    } else {
      const double prog = static_cast<double>(step - warmup) / static_cast<double>(std::max<std::size_t>(1, options.steps - warmup));
      lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(3.141592653589793 * prog));
    }
    opt.set_lr(lr);
    opt.zero_grad();
    double loss_value = 0.0;
    try {
      auto loss = cross_entropy(forward(model, tokens, nullptr, seg).logits, labels);
      loss_value = loss.item();
      loss.backward();
    } catch (const NumericError& e) {
      throw TrainingError("pretrain: diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!grads_finite(params)) throw TrainingError("pretrain: non-finite gradient at step " + std::to_string(step));
    clip_grad_norm(params, 1.0);
    opt.step();
    if (options.log_interval && (step % options.log_interval == 0 || step + 1 == options.steps)) {
      result.log.push_back({step, loss_value});
    }
    if (options.checkpoint_interval && (step + 1) % options.checkpoint_interval == 0) {
      model.save(options.checkpoint_dir);
    }
  }
  model.set_trainable(false);
  if (!probes.empty()) result.accuracy = completion_accuracy(model, probes);
  return result;
}

}  // namespace ibke
