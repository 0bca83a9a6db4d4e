// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#include "ibke/hypernet.hpp"

#include <algorithm>
#include <cmath>

#include "ibke/errors.hpp"

namespace ibke {

using json = nlohmann::json;

void to_json(json& j, const HypernetConfig& c) {
  j = json{{"l_m", c.l_m},
           {"d_m", c.d_m},
           {"scale_scores", c.scale_scores},
           {"pin_gate", c.pin_gate},
           {"init_eta", c.init_eta},
           {"zero_residual", c.zero_residual},
           {"normalize_signal", c.normalize_signal},
           {"zeta_std", c.zeta_std},
           {"logvar_clamp", c.logvar_clamp},
           {"seed", c.seed}};
}

void from_json(const json& j, HypernetConfig& c) {
  HypernetConfig d;
  c.l_m = j.value("l_m", d.l_m);
  c.d_m = j.value("d_m", d.d_m);
  c.scale_scores = j.value("scale_scores", d.scale_scores);
  c.pin_gate = j.value("pin_gate", d.pin_gate);
  c.init_eta = j.value("init_eta", d.init_eta);
  c.zero_residual = j.value("zero_residual", d.zero_residual);
  c.normalize_signal = j.value("normalize_signal", d.normalize_signal);
  c.zeta_std = j.value("zeta_std", d.zeta_std);
  c.logvar_clamp = j.value("logvar_clamp", d.logvar_clamp);
  c.seed = j.value("seed", d.seed);
}

namespace {

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor fan_in(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  return normal({rows, cols}, 1.0 / std::sqrt(static_cast<double>(rows)), rng);
}

double score_scale(const HypernetConfig& c) {
  return c.scale_scores ? 1.0 / std::sqrt(static_cast<double>(c.d_m)) : 1.0;
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> LayerHypernet::named_parameters() const {
  return {{"zeta", zeta},        {"ca_mu.wq", ca_mu.wq}, {"ca_mu.wk", ca_mu.wk}, {"ca_mu.wv", ca_mu.wv},
          {"ca_v.wq", ca_v.wq},  {"ca_v.wk", ca_v.wk},   {"ca_v.wv", ca_v.wv},   {"ca_s.wq", ca_s.wq},
          {"ca_s.wk", ca_s.wk},  {"ca_s.wv", ca_s.wv},   {"w_r", w_r},           {"w_s", w_s},
          {"log_eta", log_eta}};
}

Hypernet::Hypernet(const ModelConfig& model, const HypernetConfig& config) : config_(config) {
  if (config.l_m == 0 || config.d_m == 0) throw ContractError("hypernet: l_m and d_m must be positive");
  if (!(config.init_eta > 0.0)) throw ContractError("hypernet: init_eta must be positive");
  std::mt19937_64 rng(config.seed);
  const std::size_t dm = config.d_m;
  for (auto layer : model.edit_layer_ids) {
    LayerHypernet l;
    l.layer_id = layer;
    l.d_in = model.d_ffn;
    l.d_out = model.d_model;
    const std::size_t d = l.d_in + l.d_out;
    l.zeta = normal({config.l_m, dm}, config.zeta_std, rng);
    for (CrossAttention* ca : {&l.ca_mu, &l.ca_v}) {
      ca->wq = fan_in(dm, dm, rng);
      ca->wk = fan_in(d, dm, rng);
      ca->wv = fan_in(d, dm, rng);
    }
    l.ca_s.wq = fan_in(d, dm, rng);
    l.ca_s.wk = fan_in(dm, dm, rng);
    l.ca_s.wv = fan_in(dm, dm, rng);
    l.w_r = fan_in(dm, d, rng);
    if (config.zero_residual) l.w_r = Tensor::zeros({dm, d});
    l.w_s = fan_in(dm, 1, rng);
    l.log_eta = Tensor::full({1, 1}, std::log(config.init_eta));
    layers_.push_back(std::move(l));
  }
}

TensorMap Hypernet::named_parameters() const {
  TensorMap out;
  for (const auto& l : layers_)
    for (auto& [name, t] : l.named_parameters()) out["layer" + std::to_string(l.layer_id) + "/" + name] = t;
  return out;
}

std::vector<Tensor> Hypernet::parameters() const {
  std::vector<Tensor> out;
  for (const auto& l : layers_)
    for (auto& [name, t] : l.named_parameters()) out.push_back(t);
  return out;
}

void Hypernet::set_trainable(bool on) {
  for (auto& t : parameters()) t.set_requires_grad(on);
}

Hypernet Hypernet::clone() const {
  Hypernet h;
  h.config_ = config_;
  for (const auto& l : layers_) {
    LayerHypernet c = l;
    for (Tensor* t : {&c.zeta, &c.ca_mu.wq, &c.ca_mu.wk, &c.ca_mu.wv, &c.ca_v.wq, &c.ca_v.wk, &c.ca_v.wv, &c.ca_s.wq,
                      &c.ca_s.wk, &c.ca_s.wv, &c.w_r, &c.w_s, &c.log_eta})
      *t = t->clone();
    h.layers_.push_back(std::move(c));
  }
  return h;
}

void Hypernet::save(const std::filesystem::path& dir, const json& extra_metadata) const {
  json meta = {{"kind", "ibke-hypernet"}, {"hypernet", config_}, {"layers", json::array()}};
  for (const auto& l : layers_) meta["layers"].push_back({{"layer_id", l.layer_id}, {"d_in", l.d_in}, {"d_out", l.d_out}});
  if (!extra_metadata.is_null()) meta["extra"] = extra_metadata;
  write_archive(dir, named_parameters(), meta);
}

Hypernet Hypernet::load(const std::filesystem::path& dir, const ModelConfig& model, const HypernetConfig& expected,
                        std::vector<std::string>* warnings, json* metadata) {
  json meta;
  auto tensors = read_archive(dir, &meta);
  if (meta.value("kind", "") != "ibke-hypernet") throw ArchiveError(dir.string() + ": not a hypernetwork checkpoint");
  HypernetConfig stored = meta.contains("hypernet") ? meta["hypernet"].get<HypernetConfig>() : expected;
  if (stored.l_m != expected.l_m || stored.d_m != expected.d_m) {
    throw ArchiveError("hypernet checkpoint has l_m=" + std::to_string(stored.l_m) + ", d_m=" +
                       std::to_string(stored.d_m) + "; expected l_m=" + std::to_string(expected.l_m) +
                       ", d_m=" + std::to_string(expected.d_m));
  }
  auto note = [&](const std::string& w) {
    if (warnings) warnings->push_back(w);
  };
  if (stored.pin_gate != expected.pin_gate)
    note(std::string("checkpoint trained with pin_gate=") + (stored.pin_gate ? "true" : "false"));
  if (stored.scale_scores != expected.scale_scores)
    note(std::string("checkpoint trained with scale_scores=") + (stored.scale_scores ? "true" : "false"));
  if (stored.normalize_signal != expected.normalize_signal)
    note(std::string("checkpoint trained with normalize_signal=") + (stored.normalize_signal ? "true" : "false"));

  // The checkpoint's own flags govern how its parameters are applied.
  auto effective = expected;
  effective.pin_gate = stored.pin_gate;
  effective.scale_scores = stored.scale_scores;
  effective.normalize_signal = stored.normalize_signal;
  effective.logvar_clamp = stored.logvar_clamp;
  Hypernet h(model, effective);
  for (auto& l : h.layers_) {
    const auto prefix = "layer" + std::to_string(l.layer_id) + "/";
    for (auto& [name, current] : l.named_parameters()) {
      auto it = tensors.find(prefix + name);
      if (it == tensors.end()) throw ArchiveError("hypernet checkpoint lacks " + prefix + name);
      if (it->second.shape() != current.shape()) {
        throw ArchiveError("hypernet checkpoint " + prefix + name + " has shape " + shape_str(it->second.shape()) +
                           ", expected " + shape_str(current.shape()));
      }
      auto dst = current.mutable_values();
      std::copy(it->second.values().begin(), it->second.values().end(), dst.begin());
    }
  }
  if (metadata) *metadata = meta;
  return h;
}

Tensor cross_attention(const Tensor& query, const Tensor& context, const CrossAttention& block, double scale) {
  auto q = matmul(query, block.wq);
  auto k = matmul(context, block.wk);
  auto v = matmul(context, block.wv);
  auto scores = matmul_nt(q, k);
  if (scale != 1.0) scores = ibke::scale(scores, scale);
  return matmul(softmax(scores, 1), v);
}

LatentGaussian encode_latent(const Tensor& s, const LayerHypernet& p, const HypernetConfig& c) {
  if (s.cols() != p.d_in + p.d_out)
    throw DimensionError("encode_latent: signal width " + std::to_string(s.cols()) + " does not match layer " +
                         std::to_string(p.layer_id));
  LatentGaussian g;
  g.mu = cross_attention(p.zeta, s, p.ca_mu, score_scale(c));
  g.logvar = clamp(cross_attention(p.zeta, s, p.ca_v, score_scale(c)), -c.logvar_clamp, c.logvar_clamp);
  g.v = exp(scale(g.logvar, 0.5));
  return g;
}

EditLatent sample_latent(const LatentGaussian& g, SampleMode mode, std::mt19937_64& rng) {
  EditLatent z;
  if (mode == SampleMode::Infer) {
    z.z = g.mu;
    return z;
  }
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> e(g.mu.numel());
  for (auto& x : e) x = n(rng);
  z.eps = Tensor(g.mu.shape(), std::move(e));
  z.z = add(g.mu, mul(g.v, z.eps));
  z.deterministic = false;
  return z;
}

Tensor itm_loss(const LatentGaussian& g) {
  const double n = static_cast<double>(g.mu.numel());
  auto terms = sub(add(exp(g.logvar), square(g.mu)), g.logvar);
  return scale(add_scalar(sum(terms), -n), 0.5);
}

RefinedSignal refine_signal(const Tensor& s, const EditLatent& z, const LayerHypernet& p, const HypernetConfig& c,
                            std::span<const double> keep) {
  if (!keep.empty() && keep.size() != s.rows())
    throw DimensionError("refine_signal: mask has " + std::to_string(keep.size()) + " rows, signal has " +
                         std::to_string(s.rows()));
  RefinedSignal r;
  auto st = cross_attention(s, z.z, p.ca_s, score_scale(c));
  r.scale_logit = matmul(st, p.w_s);
  auto updated = add(s, matmul(st, p.w_r));
  if (c.pin_gate && keep.empty()) {
    r.gate = Tensor::full({s.rows(), 1}, 1.0);
    r.s_hat = updated;
    return r;
  }
  r.gate = c.pin_gate ? Tensor::full({s.rows(), 1}, 1.0) : sigmoid(r.scale_logit);
  if (!keep.empty()) r.gate = mul(r.gate, Tensor({s.rows(), 1}, std::vector<double>(keep.begin(), keep.end())));
  r.s_hat = mul_col(updated, r.gate);
  return r;
}

Tensor apply_edit(const Tensor& w, const Tensor& s_hat, const Tensor& eta) {
  const std::size_t d_in = w.rows(), d_out = w.cols();
  if (s_hat.cols() != d_in + d_out)
    throw DimensionError("apply_edit: refined signal has " + std::to_string(s_hat.cols()) + " columns, expected " +
                         std::to_string(d_in + d_out));
  auto delta = matmul_tn(slice_cols(s_hat, 0, d_in), slice_cols(s_hat, d_in, d_in + d_out));
  return sub(w, scale_by(delta, eta));
}

Tensor hypernet_input(const Tensor& s, const HypernetConfig& c) {
  if (!c.normalize_signal) return s;
  double sq = 0.0;
  for (double x : s.values()) sq += x * x;
  const double rms = std::sqrt(sq / static_cast<double>(std::max<std::size_t>(1, s.numel())));
  return rms > 0.0 ? scale(s, 1.0 / rms) : s;
}

EditResult edit_batch(const LanguageModel& model, std::span<const EditRequest> batch, const Hypernet& hypernet,
                      const EditOptions& options, std::mt19937_64& rng, const GateMasks* masks) {
  if (batch.empty()) throw ContractError("edit_batch: empty batch");
  if (hypernet.n_layers() != model.n_edit_slots()) throw ContractError("edit_batch: hypernet/model layer mismatch");
  if (masks && masks->size() != batch.size()) throw ContractError("edit_batch: one gate mask set per request");
  EditResult result;
  result.weights.resize(model.n_edit_slots());
  for (std::size_t k = 0; k < model.n_edit_slots(); ++k) result.weights[k] = model.edit_target(k);

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& req = batch[i];
    std::vector<EditSignal> signals;
    try {
      signals = compute_edit_signal(model, req, options.batch == BatchMode::Sequential ? &result.weights : nullptr,
                                    options.signal);
      for (std::size_t k = 0; k < signals.size(); ++k) {
        const auto& params = hypernet.layer(k);
        EditTrace t;
        t.case_id = req.case_id;
        t.layer_id = params.layer_id;
        t.slot = k;
        const auto s = hypernet_input(signals[k].s, hypernet.config());
        t.latent = encode_latent(s, params, hypernet.config());
        t.itm = itm_loss(t.latent);
        auto z = sample_latent(t.latent, options.sample, rng);
        std::span<const double> keep;
        if (masks && !(*masks)[i].empty()) keep = (*masks)[i].at(k);
        t.refined = refine_signal(s, z, params, hypernet.config(), keep);
        result.weights[k] = apply_edit(result.weights[k], t.refined.s_hat, exp(params.log_eta));
        result.traces.push_back(std::move(t));
      }
    } catch (const NumericError& e) {
      throw NumericError("edit_batch: request " + std::to_string(i) + " (" + req.case_id + ") of " +
                         std::to_string(batch.size()) + " failed after " + std::to_string(i) +
                         " applied edits: " + e.what());
    }
  }
  return result;
}

}  // namespace ibke
