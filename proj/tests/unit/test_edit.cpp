// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <random>

#include "ibke/archive.hpp"
#include "ibke/edit_signal.hpp"
#include "ibke/errors.hpp"
#include "ibke/gradcheck.hpp"

using namespace ibke;

namespace {

ModelConfig random_config(std::mt19937_64& rng) {
  ModelConfig c;
  c.vocab_size = 12 + rng() % 20;
  c.context_length = 10;
  c.n_layers = 2 + rng() % 2;
  c.n_heads = 1 + rng() % 2;
  c.d_model = c.n_heads * (4 + rng() % 4);
  c.d_ffn = 8 + rng() % 12;
  c.edit_layer_ids = {c.n_layers - 1};
  if (c.n_layers > 2) c.edit_layer_ids.insert(c.edit_layer_ids.begin(), 1);
  c.seed = rng();
  return c;
}

EditRequest random_edit(const ModelConfig& c, std::mt19937_64& rng) {
  EditRequest e;
  const std::size_t p = 2 + rng() % 4, t = 1 + rng() % 3;
  e.prompt.push_back(0);
  for (std::size_t i = 1; i < p; ++i) e.prompt.push_back(static_cast<int>(rng() % c.vocab_size));
  for (std::size_t i = 0; i < t; ++i) e.target.push_back(static_cast<int>(rng() % c.vocab_size));
  return e;
}

Eigen::MatrixXd as_matrix(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t.at(r, c);
  return m;
}

double frobenius(const Tensor& t) {
  double s = 0.0;
  for (double x : t.values()) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("hᵀu matches the autodiff gradient on random models and edits") {
  std::mt19937_64 rng(11);
  double worst = 0.0;
  for (int trial = 0; trial < 25; ++trial) {
    auto cfg = random_config(rng);
    LanguageModel model(cfg);
    auto edit = random_edit(cfg, rng);
    worst = std::max(worst, verify_decomposition(model, edit));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("hᵀu matches central differences on a 3→2 edit layer") {
  ModelConfig c;
  c.vocab_size = 5;
  c.context_length = 4;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_model = 2;
  c.d_ffn = 3;
  c.edit_layer_ids = {0};
  c.seed = 3;
  LanguageModel model(c);
  EditRequest e{{0, 2}, {4}, "", ""};
  auto signals = compute_edit_signal(model, e);
  REQUIRE(signals.size() == 1);
  CHECK(signals[0].length() == 2);
  auto g = signal_gradient(signals[0]);
  REQUIRE(g.rows() == 3);
  REQUIRE(g.cols() == 2);

  auto w = model.edit_target(0).detach();
  auto loss_at = [&](const Tensor& weights) {
    EditWeights edits = {weights};
    return sequence_loss(model, e.prompt, e.target, Reduction::Sum, &edits).item();
  };
  const double step = 1e-5;
  double worst = 0.0;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    auto plus = w.clone(), minus = w.clone();
    plus.mutable_values()[i] += step;
    minus.mutable_values()[i] -= step;
    const double numeric = (loss_at(plus) - loss_at(minus)) / (2 * step);
    worst = std::max(worst, relative_error(g.values()[i], numeric, 1e-6));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("signal shapes and the s = h ⊕ u layout") {
  std::mt19937_64 rng(2);
  auto cfg = random_config(rng);
  LanguageModel model(cfg);
  auto e = random_edit(cfg, rng);
  auto signals = compute_edit_signal(model, e);
  REQUIRE(signals.size() == cfg.edit_layer_ids.size());
  const std::size_t len = e.prompt.size() + e.target.size() - 1;
  for (std::size_t k = 0; k < signals.size(); ++k) {
    const auto& s = signals[k];
    CHECK(s.layer_id == cfg.edit_layer_ids[k]);
    CHECK(s.h.rows() == len);
    CHECK(s.h.cols() == cfg.d_ffn);
    CHECK(s.u.cols() == cfg.d_model);
    CHECK(s.s.cols() == cfg.d_ffn + cfg.d_model);
    CHECK_FALSE(s.s.requires_grad());
    for (std::size_t r = 0; r < len; ++r) {
      for (std::size_t j = 0; j < cfg.d_ffn; ++j) CHECK(s.s.at(r, j) == s.h.at(r, j));
      for (std::size_t j = 0; j < cfg.d_model; ++j) CHECK(s.s.at(r, cfg.d_ffn + j) == s.u.at(r, j));
    }
  }
}

TEST_CASE("a confidently predicted target yields a vanishing gradient") {
  ModelConfig c;
  c.vocab_size = 8;
  c.context_length = 6;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ffn = 16;
  c.edit_layer_ids = {1};
  c.seed = 4;
  EditRequest e{{0, 3, 5}, {6}, "", ""};
  LanguageModel fresh(c);
  const double before = frobenius(signal_gradient(compute_edit_signal(fresh, e)[0]));

  PretrainOptions o;
  o.steps = 1500;
  o.batch_size = 1;
  o.lr = 1e-2;
  auto trained = pretrain(c, {{0, 3, 5, 6}}, o).model;
  CHECK(next_token_probs(trained, e.prompt)[6] > 0.999);
  const double after = frobenius(signal_gradient(compute_edit_signal(trained, e)[0]));
  CHECK(after < 1e-2 * before);
}

TEST_CASE("zero gradients compare as exact agreement") {
  CHECK(relative_error(0.0, 0.0) == 0.0);
  CHECK(relative_error(1e-12, 0.0) < 1e-3);
}

TEST_CASE("summed loss scales u by the target length, h unchanged") {
  std::mt19937_64 rng(9);
  auto cfg = random_config(rng);
  LanguageModel model(cfg);
  EditRequest e{{0, 1, 2}, {3, 4}, "", ""};
  auto summed = compute_edit_signal(model, e, nullptr, {.sum_over_target = true});
  auto averaged = compute_edit_signal(model, e, nullptr, {.sum_over_target = false});
  for (std::size_t k = 0; k < summed.size(); ++k) {
    for (std::size_t i = 0; i < summed[k].h.numel(); ++i) CHECK(summed[k].h.values()[i] == averaged[k].h.values()[i]);
    for (std::size_t i = 0; i < summed[k].u.numel(); ++i)
      CHECK(summed[k].u.values()[i] == doctest::Approx(2.0 * averaged[k].u.values()[i]).epsilon(1e-12));
  }
  CHECK(verify_decomposition(model, e, nullptr, {.sum_over_target = false}) < 1e-6);
}

TEST_CASE("rank of hᵀu is bounded by the sequence length") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    auto cfg = random_config(rng);
    LanguageModel model(cfg);
    auto e = random_edit(cfg, rng);
    for (const auto& s : compute_edit_signal(model, e)) {
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(as_matrix(signal_gradient(s)));
      const auto& sv = svd.singularValues();
      const std::size_t bound = std::min({s.length(), cfg.d_ffn, cfg.d_model});
      for (Eigen::Index i = static_cast<Eigen::Index>(bound); i < sv.size(); ++i) CHECK(sv(i) < 1e-10);
    }
  }
}

TEST_CASE("decomposition holds against already edited weights") {
  std::mt19937_64 rng(33);
  auto cfg = random_config(rng);
  LanguageModel model(cfg);
  EditWeights current(model.n_edit_slots());
  for (std::size_t k = 0; k < current.size(); ++k) {
    current[k] = model.edit_target(k).clone();
    for (auto& x : current[k].mutable_values()) x += 0.05 * std::normal_distribution<double>()(rng);
  }
  auto e = random_edit(cfg, rng);
  CHECK(verify_decomposition(model, e, &current) < 1e-6);
  auto base = compute_edit_signal(model, e);
  auto moved = compute_edit_signal(model, e, &current);
  CHECK(frobenius(sub(signal_gradient(base[0]), signal_gradient(moved[0]))) > 0.0);
}

TEST_CASE("edit requests are validated") {
  std::mt19937_64 rng(1);
  auto cfg = random_config(rng);
  LanguageModel model(cfg);
  CHECK_THROWS_AS(compute_edit_signal(model, EditRequest{{0, 1}, {}, "", ""}), ContractError);
  CHECK_THROWS_AS(compute_edit_signal(model, EditRequest{{}, {1}, "", ""}), ContractError);
  EditRequest too_long{std::vector<int>(cfg.context_length, 1), {2, 3}, "", ""};
  CHECK_THROWS_AS(compute_edit_signal(model, too_long), ContractError);
}

TEST_CASE("signal dump round-trips through the tensor archive") {
  std::mt19937_64 rng(5);
  auto cfg = random_config(rng);
  LanguageModel model(cfg);
  auto e = random_edit(cfg, rng);
  e.case_id = "case-7";
  auto signals = compute_edit_signal(model, e);
  const auto dir = std::filesystem::temp_directory_path() / "ibke_test_edit_dump";
  std::filesystem::remove_all(dir);
  dump_edit_signal(signals, e, dir);
  nlohmann::json meta;
  auto tensors = read_archive(dir, &meta);
  CHECK(meta["case_id"] == "case-7");
  for (const auto& s : signals) {
    const auto& h = tensors.at("layer" + std::to_string(s.layer_id) + "/h");
    REQUIRE(h.numel() == s.h.numel());
    for (std::size_t i = 0; i < h.numel(); ++i) CHECK(h.values()[i] == s.h.values()[i]);
  }
  std::filesystem::remove_all(dir);
}
