// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#include "ibke/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <set>

#include "ibke/errors.hpp"
#include "ibke/optim.hpp"

namespace ibke {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ContractError("train config: lr must be positive");
  if (max_batch_size == 0) throw ContractError("train config: max_batch_size must be positive");
  if (early_stop_patience > max_steps) throw ContractError("train config: patience exceeds max_steps");
  if (val_interval == 0) throw ContractError("train config: val_interval must be positive");
  if (beta < 0.0) throw ContractError("train config: beta must be non-negative");
  if (l_m == 0 || d_m == 0) throw ContractError("train config: l_m and d_m must be positive");
  if (!(grad_clip > 0.0)) throw ContractError("train config: grad_clip must be positive");
  if (!(init_eta > 0.0)) throw ContractError("train config: init_eta must be positive");
}

HypernetConfig TrainConfig::hypernet() const {
  HypernetConfig h;
  h.l_m = l_m;
  h.d_m = d_m;
  h.scale_scores = scale_scores;
  h.pin_gate = no_scale_factor;
  h.init_eta = init_eta;
  h.zero_residual = zero_residual;
  h.normalize_signal = normalize_signal;
  h.seed = seed;
  return h;
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr", c.lr},
           {"max_batch_size", c.max_batch_size},
           {"max_steps", c.max_steps},
           {"early_stop_patience", c.early_stop_patience},
           {"val_interval", c.val_interval},
           {"checkpoint_interval", c.checkpoint_interval},
           {"checkpoint_dir", c.checkpoint_dir.string()},
           {"log_interval", c.log_interval},
           {"beta", c.beta},
           {"l_m", c.l_m},
           {"d_m", c.d_m},
           {"no_ib", c.no_ib},
           {"no_scale_factor", c.no_scale_factor},
           {"scale_scores", c.scale_scores},
           {"batch_mode", c.batch_mode == BatchMode::Sequential ? "sequential" : "parallel"},
           {"sum_signal_loss", c.sum_signal_loss},
           {"grad_clip", c.grad_clip},
           {"init_eta", c.init_eta},
           {"zero_residual", c.zero_residual},
           {"normalize_signal", c.normalize_signal},
           {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
  if (!j.is_object()) throw ParseError("train config must be a JSON object");
  static const std::set<std::string> known = {
      "lr",    "max_batch_size", "max_steps", "early_stop_patience", "val_interval",    "checkpoint_interval",
      "checkpoint_dir", "log_interval", "beta", "l_m", "d_m", "no_ib", "no_scale_factor", "scale_scores",
      "batch_mode", "sum_signal_loss", "grad_clip", "init_eta", "zero_residual", "normalize_signal", "seed"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ParseError("unknown train config field '" + it.key() + "'");
  TrainConfig d;
  try {
    c.lr = j.value("lr", d.lr);
    c.max_batch_size = j.value("max_batch_size", d.max_batch_size);
    c.max_steps = j.value("max_steps", d.max_steps);
    c.early_stop_patience = j.value("early_stop_patience", d.early_stop_patience);
    c.val_interval = j.value("val_interval", d.val_interval);
    c.checkpoint_interval = j.value("checkpoint_interval", d.checkpoint_interval);
    c.checkpoint_dir = j.value("checkpoint_dir", d.checkpoint_dir.string());
    c.log_interval = j.value("log_interval", d.log_interval);
    c.beta = j.value("beta", d.beta);
    c.l_m = j.value("l_m", d.l_m);
    c.d_m = j.value("d_m", d.d_m);
    c.no_ib = j.value("no_ib", d.no_ib);
    c.no_scale_factor = j.value("no_scale_factor", d.no_scale_factor);
    c.scale_scores = j.value("scale_scores", d.scale_scores);
    const auto mode = j.value("batch_mode", std::string("sequential"));
    if (mode != "sequential" && mode != "parallel") throw ParseError("batch_mode must be sequential or parallel");
    c.batch_mode = mode == "sequential" ? BatchMode::Sequential : BatchMode::Parallel;
    c.sum_signal_loss = j.value("sum_signal_loss", d.sum_signal_loss);
    c.grad_clip = j.value("grad_clip", d.grad_clip);
    c.init_eta = j.value("init_eta", d.init_eta);
    c.zero_residual = j.value("zero_residual", d.zero_residual);
    c.normalize_signal = j.value("normalize_signal", d.normalize_signal);
    c.seed = j.value("seed", d.seed);
  } catch (const json::exception& e) {
    throw ParseError(std::string("train config: ") + e.what());
  }
}

std::map<std::string, TrainConfig> ablation_variants(const TrainConfig& config) {
  std::map<std::string, TrainConfig> out;
  TrainConfig full = config;
  full.no_ib = false;
  full.no_scale_factor = false;
  out["full"] = full;
  auto no_ib = full;
  no_ib.no_ib = true;
  out["no_ib"] = no_ib;
  auto no_sf = full;
  no_sf.no_scale_factor = true;
  out["no_scale_factor"] = no_sf;
  auto both = no_ib;
  both.no_scale_factor = true;
  out["no_both"] = both;
  return out;
}

std::vector<std::vector<std::size_t>> plan_batches(std::span<const TokenizedCase> cases, std::size_t max_batch,
                                                   std::mt19937_64& rng) {
  std::vector<std::size_t> order(cases.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  std::deque<std::size_t> pending(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> batches;
  while (!pending.empty()) {
    std::vector<std::size_t> batch;
    std::set<int> subjects;
    std::deque<std::size_t> rest;
    while (!pending.empty()) {
      const auto i = pending.front();
      pending.pop_front();
      if (batch.size() < max_batch && !subjects.count(cases[i].subject)) {
        batch.push_back(i);
        subjects.insert(cases[i].subject);
      } else {
        rest.push_back(i);
      }
    }
    batches.push_back(std::move(batch));
    pending = std::move(rest);
  }
  return batches;
}

namespace {

EditOptions edit_options(const TrainConfig& c, SampleMode mode) {
  EditOptions o;
  o.sample = mode;
  o.batch = c.batch_mode;
  o.signal.sum_over_target = c.sum_signal_loss;
  return o;
}

}  // namespace

StepLosses batch_objective(const LanguageModel& model, const Hypernet& hypernet,
                           std::span<const TokenizedCase* const> cases, const TrainConfig& config, SampleMode mode,
                           std::mt19937_64& rng) {
  auto tb = make_train_batch(cases, config.effective_beta());
  auto res = edit_batch(model, tb.edits, hypernet, edit_options(config, mode), rng);
  auto losses = edit_losses(model, &res.weights, tb.generality, tb.locality);
  std::vector<Tensor> itm;
  double itm_sum = 0.0;
  for (const auto& t : res.traces) {
    itm.push_back(t.itm);
    itm_sum += t.itm.item();
  }
  StepLosses out;
  out.sg = losses.sg;
  out.il = losses.il;
  out.itm_mean = itm.empty() ? 0.0 : itm_sum / static_cast<double>(itm.size());
  out.total = total_loss(losses.sg, losses.il, itm, tb.beta, tb.edits.size(), hypernet.n_layers(),
                         hypernet.config().l_m, hypernet.config().d_m);
  return out;
}

ValRow validation_loss(const LanguageModel& model, const Hypernet& hypernet, std::span<const TokenizedCase> cases,
                       const TrainConfig& config) {
  if (cases.empty()) throw ContractError("validation: no cases");
  std::mt19937_64 rng(config.seed);
  auto frozen = hypernet.clone();
  frozen.set_trainable(false);
  ValRow row;
  std::size_t n = 0;
  for (std::size_t i = 0; i < cases.size(); i += config.max_batch_size) {
    std::vector<const TokenizedCase*> batch;
    for (std::size_t k = i; k < std::min(cases.size(), i + config.max_batch_size); ++k) batch.push_back(&cases[k]);
    auto l = batch_objective(model, frozen, batch, config, SampleMode::Infer, rng);
    row.total += l.total.item();
    row.sg += l.sg.item();
    row.il += l.il.item();
    ++n;
  }
  row.total /= static_cast<double>(n);
  row.sg /= static_cast<double>(n);
  row.il /= static_cast<double>(n);
  return row;
}

TrainResult train(const LanguageModel& model, std::span<const TokenizedCase> train_cases,
                  std::span<const TokenizedCase> val_cases, const TrainConfig& config) {
  config.validate();
  if (train_cases.empty()) throw ContractError("train: no training cases");
  if (val_cases.empty()) throw ContractError("train: no validation cases");

  Hypernet hypernet(model.config(), config.hypernet());
  hypernet.set_trainable(true);
  auto params = hypernet.parameters();
  Adam opt(params, AdamOptions{.lr = config.lr});
  std::mt19937_64 rng(config.seed);

  TrainResult result;
  {
    auto v0 = validation_loss(model, hypernet, val_cases, config);
    v0.step = 0;
    result.best_val = v0.total;
    result.validation.push_back(v0);
  }
  result.hypernet = hypernet.clone();
  std::size_t since_best = 0;

  std::deque<std::vector<std::size_t>> queue;
  for (std::size_t step = 0; step < config.max_steps; ++step) {
    if (queue.empty()) {
      auto plan = plan_batches(train_cases, config.max_batch_size, rng);
      queue.assign(plan.begin(), plan.end());
    }
    auto idx = queue.front();
    queue.pop_front();
    std::vector<const TokenizedCase*> batch;
    for (auto i : idx) batch.push_back(&train_cases[i]);

    opt.zero_grad();
    StepLosses l;
    try {
      l = batch_objective(model, hypernet, batch, config, config.train_sampling(), rng);
      l.total.backward();
      if (!grads_finite(params)) throw NumericError("non-finite gradient");
    } catch (const NumericError& e) {
      result.aborted = "step " + std::to_string(step) + ": " + e.what();
      break;
    }
    clip_grad_norm(params, config.grad_clip);
    opt.step();
    result.steps_run = step + 1;
    if (config.log_interval && (step % config.log_interval == 0 || step + 1 == config.max_steps))
      result.log.push_back({step, l.sg.item(), l.il.item(), l.itm_mean, l.total.item(), config.effective_beta()});

    if ((step + 1) % config.val_interval == 0) {
      ValRow v;
      try {
        v = validation_loss(model, hypernet, val_cases, config);
      } catch (const NumericError& e) {
        result.aborted = "validation at step " + std::to_string(step + 1) + ": " + e.what();
        break;
      }
      v.step = step + 1;
      result.validation.push_back(v);
      if (v.total < result.best_val) {
        result.best_val = v.total;
        result.best_step = step + 1;
        result.hypernet = hypernet.clone();
        since_best = 0;
      } else {
        since_best += config.val_interval;
        if (since_best >= config.early_stop_patience) {
          result.early_stopped = true;
          break;
        }
      }
    }
    if (config.checkpoint_interval && (step + 1) % config.checkpoint_interval == 0 && !config.checkpoint_dir.empty())
      save_checkpoint(hypernet, config, config.checkpoint_dir / ("step-" + std::to_string(step + 1)));
  }
  result.hypernet.set_trainable(false);
  if (!config.checkpoint_dir.empty()) save_checkpoint(result.hypernet, config, config.checkpoint_dir / "best");
  return result;
}

EditWeights ft_baseline_edit(const LanguageModel& model, const EditRequest& edit, std::size_t steps, double lr) {
  edit.validate(model.config().context_length);
  EditWeights w(model.n_edit_slots());
  for (std::size_t k = 0; k < w.size(); ++k) {
    w[k] = model.edit_target(k).detach();
    w[k].set_requires_grad(true);
  }
  Adam opt(w, AdamOptions{.lr = lr});
  for (std::size_t s = 0; s < steps; ++s) {
    opt.zero_grad();
    try {
      auto loss = sequence_loss(model, edit.prompt, edit.target, Reduction::Sum, &w);
      loss.backward();
    } catch (const NumericError& e) {
      throw TrainingError("fine-tuning diverged at step " + std::to_string(s) + ": " + e.what());
    }
    if (!grads_finite(w)) throw TrainingError("fine-tuning produced a non-finite gradient");
    opt.step();
  }
  for (auto& t : w) t.set_requires_grad(false);
  return w;
}

void save_checkpoint(const Hypernet& hypernet, const TrainConfig& config, const std::filesystem::path& dir) {
  hypernet.save(dir, json{{"train", config}});
}

Hypernet load_checkpoint(const std::filesystem::path& dir, const ModelConfig& model, const TrainConfig& expected,
                         std::vector<std::string>* warnings) {
  json meta;
  auto h = Hypernet::load(dir, model, expected.hypernet(), warnings, &meta);
  if (warnings && meta.contains("extra") && meta["extra"].contains("train")) {
    const auto& t = meta["extra"]["train"];
    if (t.value("no_ib", false) != expected.no_ib)
      warnings->push_back(std::string("checkpoint trained with no_ib=") + (t.value("no_ib", false) ? "true" : "false"));
    if (t.value("beta", expected.beta) != expected.beta)
      warnings->push_back("checkpoint trained with beta=" + std::to_string(t.value("beta", 0.0)));
  }
  return h;
}

}  // namespace ibke
