// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0
//
// ibke: data generation, pretraining, edit training, editing and analysis.
// Every verb writes its artifacts plus <verb>_summary.json under --out-dir.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "ibke/errors.hpp"
#include "ibke/pipeline.hpp"

using namespace ibke;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "ibke_out";
  std::string data_dir, model_dir, editor_dir;

  fs::path out() const { return out_dir; }
  fs::path data() const { return data_dir.empty() ? out() / "data" : fs::path(data_dir); }
  fs::path model() const { return model_dir.empty() ? out() / "model" : fs::path(model_dir); }
  fs::path editor() const { return editor_dir.empty() ? out() / "editor" : fs::path(editor_dir); }
};

RunConfig run_config(const Globals& g) {
  RunConfig c = g.config_path.empty() ? RunConfig{} : load_run_config(g.config_path);
  if (g.seed) c.set_seed(*g.seed);
  return c;
}

void write_json(const json& j, const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json nan_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

struct Loaded {
  Dataset data;
  LanguageModel model;
  SplitCases cases;
};

Loaded load_all(const Globals& g) {
  auto data = read_dataset(g.data());
  auto model = LanguageModel::load(g.model());
  auto cases = prepare_cases(model, data.corpus.symbols, data.cases);
  return {std::move(data), std::move(model), std::move(cases)};
}

Hypernet load_editor(const fs::path& dir, const LanguageModel& model, const RunConfig& c) {
  std::vector<std::string> warnings;
  auto hn = load_checkpoint(dir, model.config(), c.train, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  return hn;
}

const std::vector<TokenizedCase>& split_of(const SplitCases& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw ContractError("unknown split '" + name + "'");
}

json report_summary(const EvalReport& r) {
  return {{"reliability", r.reliability},
          {"generality", nan_null(r.generality)},
          {"locality", nan_null(r.locality)},
          {"js_similarity", nan_null(r.js_similarity)},
          {"generality_by_criterion", r.generality_by_criterion}};
}

int gen_data(const Globals& g) {
  const auto c = run_config(g);
  auto data = generate_dataset(c);
  write_dataset(data, g.data());
  std::map<std::string, int> splits;
  for (const auto& e : data.cases) ++splits[e.split];
  write_json(c, g.out() / "config.json");
  write_json({{"vocab_size", data.corpus.symbols.size()},
              {"sentences", data.corpus.sentences.size()},
              {"cases", splits},
              {"data_dir", g.data().string()}},
             g.out() / "gen-data_summary.json");
  std::cout << "wrote " << data.cases.size() << " cases, " << data.corpus.sentences.size() << " sentences to "
            << g.data() << "\n";
  return 0;
}

int pretrain_verb(const Globals& g) {
  const auto c = run_config(g);
  auto data = read_dataset(g.data());
  const auto t0 = std::chrono::steady_clock::now();
  auto r = pretrain_model(c, data.corpus);
  r.model.save(g.model());
  write_pretrain_csv(r.log, g.out() / "pretrain_log.csv");
  const double acc = r.accuracy.value_or(0.0);
  write_json({{"accuracy", acc},
              {"threshold", c.pretrain.accuracy_threshold},
              {"passed", acc >= c.pretrain.accuracy_threshold},
              {"final_loss", r.log.empty() ? json(nullptr) : json(r.log.back().loss)},
              {"seconds", seconds_since(t0)},
              {"model", r.model.config()}},
             g.out() / "pretrain_summary.json");
  std::cout << "fact completion accuracy " << acc << "\n";
  if (acc >= c.pretrain.accuracy_threshold) return 0;
  std::cerr << "accuracy below the threshold " << c.pretrain.accuracy_threshold << "\n";
  return 2;
}

TrainConfig variant_config(const RunConfig& c, const std::string& variant) {
  auto variants = ablation_variants(c.train);
  auto it = variants.find(variant);
  if (it == variants.end()) throw ContractError("unknown variant '" + variant + "'");
  return it->second;
}

json train_summary(const TrainResult& r, const TrainConfig& tc, double secs) {
  return {{"best_step", r.best_step},       {"best_val", r.best_val},
          {"steps_run", r.steps_run},       {"early_stopped", r.early_stopped},
          {"aborted", r.aborted ? json(*r.aborted) : json(nullptr)},
          {"seconds", secs},                {"train", tc}};
}

int edit_train(const Globals& g, const std::string& variant) {
  const auto c = run_config(g);
  auto all = load_all(g);
  const auto tc = variant_config(c, variant);
  const auto t0 = std::chrono::steady_clock::now();
  auto r = train(all.model, all.cases.train, all.cases.val, tc);
  const fs::path dir = variant == "full" ? g.editor() : fs::path(g.editor().string() + "_" + variant);
  save_checkpoint(r.hypernet, tc, dir);
  write_loss_csv(r.log, g.out() / ("train_log_" + variant + ".csv"));
  write_validation_csv(r.validation, g.out() / ("validation_" + variant + ".csv"));
  write_json(train_summary(r, tc, seconds_since(t0)), g.out() / "edit-train_summary.json");
  std::cout << variant << ": best validation " << r.best_val << " at step " << r.best_step << ", saved " << dir
            << "\n";
  return r.aborted ? 2 : 0;
}

int edit_verb(const Globals& g, const std::string& prompt, const std::string& target, std::size_t k) {
  const auto c = run_config(g);
  const auto symbols = SymbolTable::load(g.data() / "symbols.json");
  const auto model = LanguageModel::load(g.model());
  const auto hn = load_editor(g.editor(), model, c);
  EditRequest req{symbols.encode(prompt, true), symbols.encode(target, false), "", "cli"};
  std::mt19937_64 rng(0);
  std::vector<EditRequest> batch = {req};
  auto res = edit_batch(model, batch, hn, {}, rng);
  auto listing = [&](const EditWeights* w) {
    json rows = json::array();
    for (const auto& t : predict_topk(model, req.prompt, k, w))
      rows.push_back({{"token", symbols.word(t.token)}, {"prob", t.prob}});
    return rows;
  };
  json out = {{"prompt", prompt}, {"target", target}, {"before", listing(nullptr)}, {"after", listing(&res.weights)}};
  write_json(out, g.out() / "edit_summary.json");
  for (const char* when : {"before", "after"}) {
    std::cout << when << ":";
    for (const auto& r : out[when]) std::cout << " " << r["token"].get<std::string>() << "(" << r["prob"] << ")";
    std::cout << "\n";
  }
  return 0;
}

int eval_verb(const Globals& g, const std::string& editor, const std::string& split) {
  const auto c = run_config(g);
  auto all = load_all(g);
  const auto& cases = split_of(all.cases, split);
  std::optional<Hypernet> hn;
  Editor ed;
  if (editor == "none") {
    ed = null_editor(all.model);
  } else if (editor == "ft") {
    ed = ft_editor(all.model, c.ft_steps, c.ft_lr);
  } else {
    hn = load_editor(editor == "ibke" ? g.editor() : fs::path(editor), all.model, c);
    ed = ibke_editor(all.model, *hn);
  }
  auto r = evaluate(all.model, cases, ed, c.eval);
  r.metadata["editor"] = editor;
  r.metadata["split"] = split;
  r.metadata["config_hash"] = std::hash<std::string>{}(json(c).dump());
  r.metadata["seed"] = c.train.seed;
  write_report(r, g.out() / "report.json");
  write_case_csv(r, g.out() / "cases.csv");
  write_json(report_summary(r), g.out() / "eval_summary.json");
  std::cout << "reliability " << r.reliability << "  generality " << r.generality << "  locality " << r.locality
            << "  js " << r.js_similarity << "\n";
  return 0;
}

int sweep_verb(const Globals& g) {
  const auto c = run_config(g);
  auto all = load_all(g);
  auto rows = sweep(all.model, all.cases.train, all.cases.val, all.cases.test, c.train, c.sweep_l_m, c.sweep_beta);
  write_sweep_csv(rows, g.out() / "sweep.csv");
  json cells = json::array();
  for (const auto& r : rows)
    cells.push_back({{"l_m", r.l_m},
                     {"beta", r.beta},
                     {"reliability", nan_null(r.reliability)},
                     {"generality", nan_null(r.generality)},
                     {"locality", nan_null(r.locality)},
                     {"error", r.error}});
  write_json({{"cells", cells}}, g.out() / "sweep_summary.json");
  std::cout << "wrote " << rows.size() << " cells to " << g.out() / "sweep.csv" << "\n";
  return 0;
}

int prune_verb(const Globals& g, const std::string& split) {
  const auto c = run_config(g);
  auto all = load_all(g);
  const auto hn = load_editor(g.editor(), all.model, c);
  const auto& cases = split_of(all.cases, split);
  auto rows = prune_scan(all.model, hn, cases, c.prune_fractions);
  write_prune_csv(rows, g.out() / "prune.csv");
  const double area = js_degradation_area(rows);
  const double sparsity = gate_sparsity(edit_gates(all.model, hn, cases));
  write_json({{"js_degradation_area", area}, {"gate_sparsity", sparsity}, {"fractions", c.prune_fractions}},
             g.out() / "prune-scan_summary.json");
  std::cout << "js degradation area " << area << ", gate sparsity " << sparsity << "\n";
  return 0;
}

int export_verb(const Globals& g, const std::string& split) {
  const auto c = run_config(g);
  auto all = load_all(g);
  const auto hn = load_editor(g.editor(), all.model, c);
  const auto n = export_latents(all.model, hn, split_of(all.cases, split), g.out() / "latents.jsonl");
  write_json({{"rows", n}, {"split", split}}, g.out() / "export-latents_summary.json");
  std::cout << "wrote " << n << " rows to " << g.out() / "latents.jsonl" << "\n";
  return 0;
}

int ablate_verb(const Globals& g) {
  const auto c = run_config(g);
  auto all = load_all(g);
  fs::create_directories(g.out());
  std::ofstream csv(g.out() / "ablate.csv");
  csv << "variant,reliability,generality,locality,js_similarity,gate_sparsity,best_step\n";
  json summary;
  for (const auto& [name, tc] : ablation_variants(c.train)) {
    std::cout << "training " << name << "\n";
    auto r = train(all.model, all.cases.train, all.cases.val, tc);
    save_checkpoint(r.hypernet, tc, g.editor().string() + "_" + name);
    write_loss_csv(r.log, g.out() / ("train_log_" + name + ".csv"));
    auto rep = evaluate(all.model, all.cases.test, ibke_editor(all.model, r.hypernet), c.eval);
    const double sparsity = gate_sparsity(edit_gates(all.model, r.hypernet, all.cases.test));
    csv << name << ',' << rep.reliability << ',' << rep.generality << ',' << rep.locality << ',' << rep.js_similarity
        << ',' << sparsity << ',' << r.best_step << '\n';
    summary[name] = report_summary(rep);
    summary[name]["gate_sparsity"] = sparsity;
    std::cout << "  reliability " << rep.reliability << "  generality " << rep.generality << "  locality "
              << rep.locality << "\n";
  }
  write_json(summary, g.out() / "ablate_summary.json");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Information bottleneck knowledge editor"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "run configuration JSON")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "overrides every seed in the configuration");
  app.add_option("--out-dir", g.out_dir, "output directory")->capture_default_str();
  app.add_option("--data-dir", g.data_dir, "dataset directory (default <out>/data)");
  app.add_option("--model-dir", g.model_dir, "language model directory (default <out>/model)");
  app.add_option("--editor-dir", g.editor_dir, "editor checkpoint (default <out>/editor)");

  std::string variant = "full", prompt, target, editor = "ibke", split = "test";
  std::size_t k = 5;

  auto* gen = app.add_subcommand("gen-data", "generate the fact world, corpus and edit cases");
  auto* pre = app.add_subcommand("pretrain", "pretrain the language model on the corpus");
  auto* et = app.add_subcommand("edit-train", "train the editor");
  et->add_option("--variant", variant, "full | no_ib | no_scale_factor | no_both")->capture_default_str();
  auto* ed = app.add_subcommand("edit", "apply one edit and show predictions before and after");
  ed->add_option("--prompt", prompt, "prompt text (without <bos>)")->required();
  ed->add_option("--target", target, "target text")->required();
  ed->add_option("-k", k, "predictions to list")->capture_default_str();
  auto* ev = app.add_subcommand("eval", "evaluate an editor on a split");
  ev->add_option("--editor", editor, "ibke | none | ft | <checkpoint dir>")->capture_default_str();
  ev->add_option("--split", split, "train | val | test")->capture_default_str();
  auto* sw = app.add_subcommand("sweep", "train and evaluate over the l_m x beta grid");
  auto* pr = app.add_subcommand("prune-scan", "prune gates from the lowest up and record the metric curves");
  pr->add_option("--split", split)->capture_default_str();
  auto* ex = app.add_subcommand("export-latents", "write latent means and gates as JSONL");
  ex->add_option("--split", split)->capture_default_str();
  auto* ab = app.add_subcommand("ablate", "train and evaluate all ablation variants");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return gen_data(g);
    if (*pre) return pretrain_verb(g);
    if (*et) return edit_train(g, variant);
    if (*ed) return edit_verb(g, prompt, target, k);
    if (*ev) return eval_verb(g, editor, split);
    if (*sw) return sweep_verb(g);
    if (*pr) return prune_verb(g, split);
    if (*ex) return export_verb(g, split);
    if (*ab) return ablate_verb(g);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
