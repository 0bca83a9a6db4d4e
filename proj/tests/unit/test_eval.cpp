// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "ibke/errors.hpp"
#include "ibke/eval.hpp"
#include "world_fixture.hpp"

using namespace ibke;

namespace {

ModelConfig small_model(std::size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.context_length = 10;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ffn = 16;
  c.edit_layer_ids = {0, 1};
  c.seed = 5;
  return c;
}

TokenizedCase random_case(std::size_t vocab, std::mt19937_64& rng) {
  auto tok = [&] { return static_cast<int>(1 + rng() % (vocab - 1)); };
  TokenizedCase c;
  c.id = "c" + std::to_string(rng() % 1000);
  c.relation = "r";
  c.edit = {{0, tok(), tok()}, {tok()}, "", c.id};
  c.generality.push_back({{0, tok(), tok()}, {tok()}, "Rep"});
  c.generality.push_back({{0, tok()}, {tok(), tok()}, "MH"});
  c.locality.push_back({{0, tok(), tok()}, {tok(), tok()}, {}});
  c.locality.push_back({{0, tok()}, {tok()}, {}});
  return c;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.l_m = 2;
  c.d_m = 8;
  c.max_batch_size = 2;
  c.max_steps = 4;
  c.early_stop_patience = 4;
  c.val_interval = 2;
  c.log_interval = 2;
  c.lr = 1e-3;
  return c;
}

std::size_t count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

}  // namespace

TEST_CASE("JS divergence hand values") {
  std::vector<double> half = {0.5, 0.5}, one = {1.0, 0.0}, other = {0.0, 1.0};
  const double js = js_divergence(half, one);
  CHECK(js == doctest::Approx(0.3113).epsilon(1e-3));
  CHECK(1.0 - js == doctest::Approx(0.6887).epsilon(1e-3));
  CHECK(js_divergence(half, half) == 0.0);
  CHECK(js_divergence(one, other) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(js_divergence(one, half) == doctest::Approx(js).epsilon(1e-12));
  std::vector<double> three = {0.2, 0.3, 0.5};
  CHECK_THROWS_AS(js_divergence(half, three), DimensionError);
}

TEST_CASE("with five tokens generality is always 100") {
  LanguageModel model(small_model(5));
  std::mt19937_64 rng(1);
  std::vector<TokenizedCase> cases;
  for (int i = 0; i < 6; ++i) cases.push_back(random_case(5, rng));
  auto r = evaluate(model, cases, null_editor(model));
  CHECK(r.generality == 100.0);
  for (const auto& [tag, v] : r.generality_by_criterion) CHECK(v == 100.0);
}

TEST_CASE("the unedited model keeps full locality and similarity") {
  LanguageModel model(small_model(20));
  std::mt19937_64 rng(2);
  std::vector<TokenizedCase> cases;
  for (int i = 0; i < 8; ++i) cases.push_back(random_case(20, rng));
  auto r = evaluate(model, cases, null_editor(model));
  CHECK(r.locality == 100.0);
  CHECK(r.js_similarity == doctest::Approx(1.0).epsilon(1e-12));
  EvalOptions strict;
  strict.strict_locality = true;
  CHECK(locality(model, cases, null_editor(model), strict) == 100.0);
}

TEST_CASE("a destructive edit lowers locality") {
  LanguageModel model(small_model(40));
  std::mt19937_64 rng(3);
  std::vector<TokenizedCase> cases;
  for (int i = 0; i < 8; ++i) cases.push_back(random_case(40, rng));
  Editor scramble = [&](const TokenizedCase&) {
    EditWeights w(model.n_edit_slots());
    std::normal_distribution<double> n(0.0, 30.0);
    for (std::size_t k = 0; k < w.size(); ++k) {
      w[k] = model.edit_target(k).clone();
      for (auto& x : w[k].mutable_values()) x = n(rng);
    }
    return w;
  };
  EvalOptions strict;
  strict.strict_locality = true;
  CHECK(locality(model, cases, scramble, strict) < 100.0);
  CHECK(js_similarity(model, cases, scramble) < 1.0);
}

TEST_CASE("reliability equals generality at k = 1 on the edit pair") {
  LanguageModel model(small_model(20));
  std::mt19937_64 rng(4);
  std::vector<TokenizedCase> cases;
  for (int i = 0; i < 10; ++i) {
    auto c = random_case(20, rng);
    c.generality = {{c.edit.prompt, c.edit.target, "edit"}};
    cases.push_back(c);
  }
  EvalOptions k1;
  k1.generality_k = 1;
  CHECK(reliability(model, cases, null_editor(model)) == generality(model, cases, null_editor(model), k1));
}

TEST_CASE("an unedited model rarely predicts arbitrary targets") {
  LanguageModel model(small_model(40));
  std::mt19937_64 rng(5);
  std::vector<TokenizedCase> cases;
  for (int i = 0; i < 40; ++i) cases.push_back(random_case(40, rng));
  CHECK(reliability(model, cases, null_editor(model)) < 20.0);
}

TEST_CASE("metrics reject empty inputs") {
  LanguageModel model(small_model(10));
  std::vector<TokenizedCase> none;
  CHECK_THROWS_AS(evaluate(model, none, null_editor(model)), ContractError);
  CHECK_THROWS_AS(reliability(model, none, null_editor(model)), ContractError);
  std::mt19937_64 rng(6);
  auto bare = random_case(10, rng);
  bare.generality.clear();
  bare.locality.clear();
  std::vector<TokenizedCase> one = {bare};
  CHECK_THROWS_AS(generality(model, one, null_editor(model)), ContractError);
  CHECK_THROWS_AS(locality(model, one, null_editor(model)), ContractError);
  auto r = evaluate(model, one, null_editor(model));
  CHECK(std::isnan(r.generality));
  CHECK(nlohmann::json(r)["generality"].is_null());
}

TEST_CASE("reports and per-case CSV") {
  LanguageModel model(small_model(12));
  std::mt19937_64 rng(7);
  std::vector<TokenizedCase> cases = {random_case(12, rng), random_case(12, rng), random_case(12, rng)};
  auto r = evaluate(model, cases, null_editor(model));
  const auto dir = std::filesystem::temp_directory_path() / "ibke_test_eval_report";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  write_report(r, dir / "report.json");
  write_case_csv(r, dir / "cases.csv");
  std::ifstream in(dir / "report.json");
  auto j = nlohmann::json::parse(in);
  CHECK(j["reliability"] == r.reliability);
  CHECK(j["metadata"]["n_cases"] == 3);
  CHECK(count_lines(dir / "cases.csv") == 4);
  std::filesystem::remove_all(dir);
}

TEST_CASE("gate sparsity counts values below the threshold") {
  std::vector<std::vector<double>> gates = {{0.05, 0.5, 0.09, 0.2}, {0.01, 0.99}};
  CHECK(gate_sparsity(gates) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(gate_sparsity(gates, 0.0) == 0.0);
  CHECK(gate_sparsity(gates, 1.0) == 1.0);
}

TEST_CASE("prune scan end points") {
  const auto& fx = ibke::testing::world_fixture();
  TrainConfig tc = tiny_config();
  Hypernet hn(fx.model.config(), tc.hypernet());
  std::vector<TokenizedCase> cases(fx.test.begin(), fx.test.begin() + 3);
  std::vector<double> fractions = {0.0, 0.25, 0.5, 1.0};
  auto rows = prune_scan(fx.model, hn, cases, fractions);
  REQUIRE(rows.size() == 4);

  auto full = evaluate(fx.model, cases, ibke_editor(fx.model, hn));
  CHECK(rows[0].js_similarity == doctest::Approx(full.js_similarity).epsilon(1e-12));
  CHECK(rows[3].js_similarity == doctest::Approx(1.0).epsilon(1e-12));
  for (const auto& r : rows) {
    CHECK(r.rel_rank >= 1.0);
    CHECK(r.rel_confidence > 0.0);
    CHECK(r.rel_confidence < 1.0);
  }

  const auto csv = std::filesystem::temp_directory_path() / "ibke_test_prune.csv";
  write_prune_csv(rows, csv);
  CHECK(count_lines(csv) == 5);
  std::filesystem::remove(csv);

  std::vector<PruneRow> flat = {{0.0, 0, 0, 0, 0, 0.9}, {0.5, 0, 0, 0, 0, 0.9}};
  CHECK(js_degradation_area(flat) == 0.0);
  std::vector<PruneRow> falling = {{0.0, 0, 0, 0, 0, 1.0}, {0.5, 0, 0, 0, 0, 0.0}};
  CHECK(js_degradation_area(falling) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("latent export writes one row per case and edit layer") {
  const auto& fx = ibke::testing::world_fixture();
  TrainConfig tc = tiny_config();
  Hypernet hn(fx.model.config(), tc.hypernet());
  const auto path = std::filesystem::temp_directory_path() / "ibke_test_latents.jsonl";
  const auto n = export_latents(fx.model, hn, fx.test, path);
  CHECK(n == fx.test.size() * fx.model.n_edit_slots());
  std::ifstream in(path);
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line); ++lines) {
    auto j = nlohmann::json::parse(line);
    const auto& c = fx.test[lines / fx.model.n_edit_slots()];
    CHECK(j["case_id"] == c.id);
    CHECK(j["mu"].size() == tc.l_m * tc.d_m);
    const auto tokens = c.edit.prompt.size() + c.edit.target.size() - 1;
    CHECK(j["scale"].size() == tokens);
    CHECK(j.contains("relation"));
    CHECK(j["confidence"].get<double>() > 0.0);
  }
  CHECK(lines == n);
  std::filesystem::remove(path);
}

TEST_CASE("sweep produces one row per cell") {
  const auto& fx = ibke::testing::world_fixture();
  auto base = tiny_config();
  base.max_steps = 2;
  base.early_stop_patience = 2;
  std::vector<std::size_t> l_ms = {1, 2};
  std::vector<double> betas = {0.0, 1.0};
  std::vector<TokenizedCase> train(fx.train.begin(), fx.train.begin() + 4);
  std::vector<TokenizedCase> test(fx.test.begin(), fx.test.begin() + 2);
  auto rows = sweep(fx.model, train, fx.val, test, base, l_ms, betas);
  REQUIRE(rows.size() == 4);
  for (const auto& r : rows) {
    CHECK(r.error.empty());
    CHECK(r.locality >= 0.0);
    CHECK(r.locality <= 100.0);
  }
  CHECK(rows[1].l_m == 1);
  CHECK(rows[1].beta == 1.0);
  CHECK(rows[2].l_m == 2);
  const auto csv = std::filesystem::temp_directory_path() / "ibke_test_sweep.csv";
  write_sweep_csv(rows, csv);
  CHECK(count_lines(csv) == 5);
  std::filesystem::remove(csv);
}
