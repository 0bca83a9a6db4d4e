// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0
//
// A small pretrained world shared by the trainer and evaluation tests.

#pragma once

#include "ibke/objectives.hpp"

namespace ibke::testing {

struct WorldFixture {
  LanguageModel model;
  std::vector<TokenizedCase> train, val, test;
};

inline const WorldFixture& world_fixture() {
  static const WorldFixture f = [] {
    auto world = generate_world(3, 40, 6, 120);
    auto corpus = render_corpus(world);
    ModelConfig mc;
    mc.vocab_size = corpus.symbols.size();
    mc.d_model = 32;
    mc.n_heads = 2;
    mc.d_ffn = 64;
    mc.n_layers = 2;
    mc.edit_layer_ids = {0, 1};
    PretrainOptions po;
    po.steps = 600;
    po.lr = 3e-3;
    WorldFixture fx{pretrain(mc, corpus.token_sequences(), po).model, {}, {}, {}};
    CaseOptions co;
    co.n_train = 24;
    co.n_val = 6;
    co.n_test = 6;
    auto cases = make_edit_cases(world, co).cases;
    freeze_locality_targets(fx.model, corpus.symbols, cases);
    auto tok = tokenize_cases(cases, corpus.symbols);
    compute_references(fx.model, tok);
    for (auto& c : tok) (c.split == "train" ? fx.train : c.split == "val" ? fx.val : fx.test).push_back(c);
    return fx;
  }();
  return f;
}

}  // namespace ibke::testing
