// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#include "ibke/pipeline.hpp"

#include <fstream>
#include <set>

#include "ibke/errors.hpp"

namespace ibke {

using json = nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ParseError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ParseError("unknown " + where + " field '" + it.key() + "'");
}

json world_json(const WorldConfig& w) {
  return {{"seed", w.seed}, {"n_entities", w.n_entities}, {"n_relations", w.n_relations}, {"n_facts", w.n_facts}};
}

json cases_json(const CaseOptions& c) {
  return {{"n_train", c.n_train},     {"n_val", c.n_val}, {"n_test", c.n_test}, {"n_locality", c.n_locality},
          {"max_multi_hop", c.max_multi_hop}, {"seed", c.seed}};
}

json pretrain_json(const PretrainOptions& p) {
  return {{"steps", p.steps},
          {"lr", p.lr},
          {"batch_size", p.batch_size},
          {"seed", p.seed},
          {"log_interval", p.log_interval},
          {"accuracy_threshold", p.accuracy_threshold}};
}

json eval_json(const EvalOptions& e) {
  return {{"generality_k", e.generality_k},
          {"locality_k", e.locality_k},
          {"strict_locality", e.strict_locality},
          {"generality_all_tokens", e.generality_all_tokens}};
}

}  // namespace

void RunConfig::set_seed(std::uint64_t seed) {
  world.seed = seed;
  model.seed = seed;
  pretrain.seed = seed;
  train.seed = seed;
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"world", world_json(c.world)},
           {"cases", cases_json(c.cases)},
           {"model", c.model},
           {"pretrain", pretrain_json(c.pretrain)},
           {"train", c.train},
           {"eval", eval_json(c.eval)},
           {"ft_steps", c.ft_steps},
           {"ft_lr", c.ft_lr},
           {"sweep_l_m", c.sweep_l_m},
           {"sweep_beta", c.sweep_beta},
           {"prune_fractions", c.prune_fractions}};
}

void from_json(const json& j, RunConfig& c) {
  check_keys(j,
             {"world", "cases", "model", "pretrain", "train", "eval", "ft_steps", "ft_lr", "sweep_l_m", "sweep_beta",
              "prune_fractions"},
             "run config");
  RunConfig d;
  try {
    if (j.contains("world")) {
      const auto& w = j["world"];
      check_keys(w, {"seed", "n_entities", "n_relations", "n_facts"}, "world");
      c.world.seed = w.value("seed", d.world.seed);
      c.world.n_entities = w.value("n_entities", d.world.n_entities);
      c.world.n_relations = w.value("n_relations", d.world.n_relations);
      c.world.n_facts = w.value("n_facts", d.world.n_facts);
    }
    if (j.contains("cases")) {
      const auto& k = j["cases"];
      check_keys(k, {"n_train", "n_val", "n_test", "n_locality", "max_multi_hop", "seed"}, "cases");
      c.cases.n_train = k.value("n_train", d.cases.n_train);
      c.cases.n_val = k.value("n_val", d.cases.n_val);
      c.cases.n_test = k.value("n_test", d.cases.n_test);
      c.cases.n_locality = k.value("n_locality", d.cases.n_locality);
      c.cases.max_multi_hop = k.value("max_multi_hop", d.cases.max_multi_hop);
      c.cases.seed = k.value("seed", d.cases.seed);
    }
    if (j.contains("model")) {
      check_keys(j["model"],
                 {"vocab_size", "context_length", "n_layers", "d_model", "n_heads", "d_ffn", "edit_layer_ids",
                  "tied_head", "init_std", "seed"},
                 "model");
      c.model = j["model"].get<ModelConfig>();
    }
    if (j.contains("pretrain")) {
      const auto& p = j["pretrain"];
      check_keys(p, {"steps", "lr", "batch_size", "seed", "log_interval", "accuracy_threshold"}, "pretrain");
      c.pretrain.steps = p.value("steps", d.pretrain.steps);
      c.pretrain.lr = p.value("lr", d.pretrain.lr);
      c.pretrain.batch_size = p.value("batch_size", d.pretrain.batch_size);
      c.pretrain.seed = p.value("seed", d.pretrain.seed);
      c.pretrain.log_interval = p.value("log_interval", d.pretrain.log_interval);
      c.pretrain.accuracy_threshold = p.value("accuracy_threshold", d.pretrain.accuracy_threshold);
    }
    if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      check_keys(e, {"generality_k", "locality_k", "strict_locality", "generality_all_tokens"}, "eval");
      c.eval.generality_k = e.value("generality_k", d.eval.generality_k);
      c.eval.locality_k = e.value("locality_k", d.eval.locality_k);
      c.eval.strict_locality = e.value("strict_locality", d.eval.strict_locality);
      c.eval.generality_all_tokens = e.value("generality_all_tokens", d.eval.generality_all_tokens);
    }
    c.ft_steps = j.value("ft_steps", d.ft_steps);
    c.ft_lr = j.value("ft_lr", d.ft_lr);
    c.sweep_l_m = j.value("sweep_l_m", d.sweep_l_m);
    c.sweep_beta = j.value("sweep_beta", d.sweep_beta);
    c.prune_fractions = j.value("prune_fractions", d.prune_fractions);
  } catch (const json::exception& e) {
    throw ParseError(std::string("run config: ") + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return j.get<RunConfig>();
}

Dataset generate_dataset(const RunConfig& config) {
  const auto& w = config.world;
  auto world = generate_world(w.seed, w.n_entities, w.n_relations, w.n_facts);
  Dataset d{render_corpus(world), make_edit_cases(world, config.cases).cases};
  return d;
}

void write_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  data.corpus.symbols.save(dir / "symbols.json");
  write_jsonl(data.cases, dir / "cases.jsonl");
  std::ofstream out(dir / "corpus.jsonl");
  if (!out) throw Error("cannot write " + (dir / "corpus.jsonl").string());
  for (const auto& s : data.corpus.sentences)
    out << json{{"kind", s.kind}, {"text", data.corpus.symbols.decode(s.tokens)}}.dump() << "\n";
}

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset d;
  d.corpus.symbols = SymbolTable::load(dir / "symbols.json");
  d.cases = read_jsonl(dir / "cases.jsonl");
  std::ifstream in(dir / "corpus.jsonl");
  if (!in) throw ParseError("cannot open " + (dir / "corpus.jsonl").string());
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = json::parse(line);
      d.corpus.sentences.push_back(
          {d.corpus.symbols.encode(j.at("text").get<std::string>(), true), j.at("kind").get<std::string>()});
    } catch (const json::exception& e) {
      throw ParseError(std::string("corpus.jsonl: ") + e.what(), line_no);
    }
  }
  return d;
}

PretrainResult pretrain_model(const RunConfig& config, const Corpus& corpus) {
  auto mc = config.model;
  mc.vocab_size = corpus.symbols.size();
  const auto probes = fact_probes(corpus);
  return pretrain(mc, corpus.token_sequences(), config.pretrain, probes);
}

SplitCases prepare_cases(const LanguageModel& model, const SymbolTable& symbols, std::vector<EditCase> cases) {
  freeze_locality_targets(model, symbols, cases);
  auto tok = tokenize_cases(cases, symbols);
  compute_references(model, tok);
  SplitCases out;
  for (auto& c : tok) {
    if (c.split == "train") out.train.push_back(std::move(c));
    else if (c.split == "val") out.val.push_back(std::move(c));
    else out.test.push_back(std::move(c));
  }
  return out;
}

void write_validation_csv(std::span<const ValRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "step,total,sg,il\n";
  for (const auto& r : rows) out << r.step << ',' << r.total << ',' << r.sg << ',' << r.il << '\n';
}

void write_pretrain_csv(std::span<const PretrainLogRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "step,loss\n";
  for (const auto& r : rows) out << r.step << ',' << r.loss << '\n';
}

}  // namespace ibke
