// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#include "ibke/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "ibke/errors.hpp"

namespace ibke {

using json = nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Probabilities at the scored positions of several teacher-forced items,
// computed with one packed forward pass.
struct ScoredRows {
  std::size_t vocab = 0;
  std::vector<double> probs;              // rows × vocab
  std::vector<std::vector<std::size_t>> item_rows;  // per item, row indices into probs
};

ScoredRows score(const LanguageModel& model, const EditWeights* edits,
                 const std::vector<std::pair<const std::vector<int>*, const std::vector<int>*>>& items) {
  std::vector<int> tokens;
  std::vector<std::size_t> segments;
  std::vector<std::vector<std::size_t>> positions;
  for (const auto& [prompt, target] : items) {
    auto input = teacher_forced_input(*prompt, *target);
    const std::size_t first = tokens.size() + prompt->size() - 1;
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < target->size(); ++i) rows.push_back(first + i);
    positions.push_back(std::move(rows));
    tokens.insert(tokens.end(), input.begin(), input.end());
    segments.push_back(input.size());
  }
  ScoredRows out;
  if (tokens.empty()) return out;
  auto logits = forward(model, tokens, edits, segments).logits;
  out.vocab = logits.cols();
  auto lp = log_softmax_rows(logits.values(), logits.rows(), out.vocab);
  for (const auto& rows : positions) {
    std::vector<std::size_t> mine;
    for (auto r : rows) {
      mine.push_back(out.probs.size() / out.vocab);
      for (std::size_t c = 0; c < out.vocab; ++c) out.probs.push_back(std::exp(lp[r * out.vocab + c]));
    }
    out.item_rows.push_back(std::move(mine));
  }
  return out;
}

std::span<const double> row(const ScoredRows& s, std::size_t r) {
  return std::span<const double>(s.probs).subspan(r * s.vocab, s.vocab);
}

// 1-based rank under the top-k tie rule (higher probability first, then lower id).
std::size_t rank_of(std::span<const double> p, int token) {
  const double pt = p[static_cast<std::size_t>(token)];
  std::size_t rank = 1;
  for (std::size_t c = 0; c < p.size(); ++c) {
    if (p[c] > pt || (p[c] == pt && static_cast<int>(c) < token)) ++rank;
  }
  return rank;
}

int argmax(std::span<const double> p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return kNaN;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

using ItemList = std::vector<std::pair<const std::vector<int>*, const std::vector<int>*>>;

ItemList case_items(const TokenizedCase& c) {
  ItemList items = {{&c.edit.prompt, &c.edit.target}};
  for (const auto& g : c.generality) items.push_back({&g.prompt, &g.target});
  for (const auto& l : c.locality) items.push_back({&l.prompt, &l.target});
  return items;
}

ItemList locality_items(const TokenizedCase& c) {
  ItemList items;
  for (const auto& l : c.locality) items.push_back({&l.prompt, &l.target});
  return items;
}

}  // namespace

double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw DimensionError("js_divergence: size mismatch");
  double js = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) js += 0.5 * p[i] * std::log2(p[i] / m);
    if (q[i] > 0) js += 0.5 * q[i] * std::log2(q[i] / m);
  }
  return std::clamp(js, 0.0, 1.0);
}

Editor null_editor(const LanguageModel& model) {
  return [n = model.n_edit_slots()](const TokenizedCase&) { return EditWeights(n); };
}

Editor ibke_editor(const LanguageModel& model, const Hypernet& hypernet, const EditOptions& options) {
  return [&model, &hypernet, options](const TokenizedCase& c) {
    std::mt19937_64 rng(0);
    std::vector<EditRequest> batch = {c.edit};
    return edit_batch(model, batch, hypernet, options, rng).weights;
  };
}

Editor ft_editor(const LanguageModel& model, std::size_t steps, double lr) {
  return [&model, steps, lr](const TokenizedCase& c) { return ft_baseline_edit(model, c.edit, steps, lr); };
}

CaseMetrics evaluate_case(const LanguageModel& model, const EditWeights* edits, const TokenizedCase& c,
                          const EvalOptions& options) {
  CaseMetrics m;
  m.id = c.id;
  m.relation = c.relation;
  const auto edited = score(model, edits, case_items(c));
  const auto original = score(model, nullptr, locality_items(c));

  std::size_t item = 0;
  std::vector<double> rel;
  for (std::size_t i = 0; i < c.edit.target.size(); ++i)
    rel.push_back(rank_of(row(edited, edited.item_rows[item][i]), c.edit.target[i]) == 1 ? 1.0 : 0.0);
  m.reliability = 100.0 * mean(rel);
  ++item;

  std::vector<double> gen;
  std::map<std::string, std::vector<double>> by_tag;
  for (const auto& g : c.generality) {
    std::vector<double> hits;
    for (std::size_t i = 0; i < g.target.size(); ++i)
      hits.push_back(rank_of(row(edited, edited.item_rows[item][i]), g.target[i]) <= options.generality_k ? 1.0 : 0.0);
    ++item;
    if (options.generality_all_tokens) {
      const double all = std::all_of(hits.begin(), hits.end(), [](double h) { return h == 1.0; }) ? 1.0 : 0.0;
      hits.assign(1, all);
    }
    gen.insert(gen.end(), hits.begin(), hits.end());
    auto& t = by_tag[g.tag];
    t.insert(t.end(), hits.begin(), hits.end());
  }
  if (!gen.empty()) m.generality = 100.0 * mean(gen);
  for (const auto& [tag, hits] : by_tag) m.by_criterion[tag] = 100.0 * mean(hits);

  std::vector<double> loc, js;
  for (std::size_t l = 0; l < c.locality.size(); ++l, ++item) {
    for (std::size_t i = 0; i < c.locality[l].target.size(); ++i) {
      auto pe = row(edited, edited.item_rows[item][i]);
      auto po = row(original, original.item_rows[l][i]);
      const int top = argmax(po);
      const bool hit = options.strict_locality ? argmax(pe) == top : rank_of(pe, top) <= options.locality_k;
      loc.push_back(hit ? 1.0 : 0.0);
      js.push_back(js_divergence(pe, po));
    }
  }
  if (!loc.empty()) {
    m.locality = 100.0 * mean(loc);
    m.js_similarity = 1.0 - mean(js);
  }
  return m;
}

EvalReport evaluate(const LanguageModel& model, std::span<const TokenizedCase> cases, const Editor& editor,
                    const EvalOptions& options) {
  if (cases.empty()) throw ContractError("evaluate: no cases");
  EvalReport r;
  std::vector<double> rel, gen, loc, js;
  std::map<std::string, std::vector<double>> tags;
  for (const auto& c : cases) {
    auto w = editor(c);
    auto m = evaluate_case(model, &w, c, options);
    rel.push_back(m.reliability);
    if (m.generality) gen.push_back(*m.generality);
    if (m.locality) loc.push_back(*m.locality);
    if (m.js_similarity) js.push_back(*m.js_similarity);
    for (const auto& [t, v] : m.by_criterion) tags[t].push_back(v);
    r.cases.push_back(std::move(m));
  }
  r.reliability = mean(rel);
  r.generality = mean(gen);
  r.locality = mean(loc);
  r.js_similarity = mean(js);
  for (const auto& [t, v] : tags) r.generality_by_criterion[t] = mean(v);
  r.metadata["n_cases"] = cases.size();
  r.metadata["options"] = {{"generality_k", options.generality_k},
                           {"locality_k", options.locality_k},
                           {"strict_locality", options.strict_locality},
                           {"generality_all_tokens", options.generality_all_tokens}};
  return r;
}

namespace {

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

void to_json(json& j, const EvalReport& r) {
  j = json{{"reliability", number_or_null(r.reliability)},
           {"generality", number_or_null(r.generality)},
           {"locality", number_or_null(r.locality)},
           {"js_similarity", number_or_null(r.js_similarity)},
           {"generality_by_criterion", json::object()},
           {"metadata", r.metadata},
           {"cases", json::array()}};
  for (const auto& [t, v] : r.generality_by_criterion) j["generality_by_criterion"][t] = number_or_null(v);
  for (const auto& c : r.cases) {
    json cj = {{"id", c.id}, {"relation", c.relation}, {"reliability", c.reliability}};
    cj["generality"] = c.generality ? json(*c.generality) : json(nullptr);
    cj["locality"] = c.locality ? json(*c.locality) : json(nullptr);
    cj["js_similarity"] = c.js_similarity ? json(*c.js_similarity) : json(nullptr);
    cj["by_criterion"] = c.by_criterion;
    j["cases"].push_back(std::move(cj));
  }
}

void write_report(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << json(r).dump(2) << "\n";
}

void write_case_csv(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "id,relation,reliability,generality,locality,js_similarity\n";
  auto opt = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("nan"); };
  for (const auto& c : r.cases)
    out << c.id << ',' << c.relation << ',' << c.reliability << ',' << opt(c.generality) << ',' << opt(c.locality)
        << ',' << opt(c.js_similarity) << '\n';
}

double reliability(const LanguageModel& model, std::span<const TokenizedCase> cases, const Editor& editor) {
  if (cases.empty()) throw ContractError("reliability: no cases");
  return evaluate(model, cases, editor).reliability;
}

double generality(const LanguageModel& model, std::span<const TokenizedCase> cases, const Editor& editor,
                  const EvalOptions& options) {
  if (cases.empty()) throw ContractError("generality: no cases");
  auto r = evaluate(model, cases, editor, options);
  if (std::isnan(r.generality)) throw ContractError("generality: no generality items");
  return r.generality;
}

double locality(const LanguageModel& model, std::span<const TokenizedCase> cases, const Editor& editor,
                const EvalOptions& options) {
  if (cases.empty()) throw ContractError("locality: no cases");
  auto r = evaluate(model, cases, editor, options);
  if (std::isnan(r.locality)) throw ContractError("locality: no locality items");
  return r.locality;
}

double js_similarity(const LanguageModel& model, std::span<const TokenizedCase> cases, const Editor& editor) {
  if (cases.empty()) throw ContractError("js_similarity: no cases");
  auto r = evaluate(model, cases, editor);
  if (std::isnan(r.js_similarity)) throw ContractError("js_similarity: no locality items");
  return r.js_similarity;
}

// ---- analysis ---------------------------------------------------------------

namespace {

EditResult infer_edit(const LanguageModel& model, const Hypernet& hypernet, const TokenizedCase& c,
                      const EditOptions& options, const GateMasks* masks = nullptr) {
  std::mt19937_64 rng(0);
  std::vector<EditRequest> batch = {c.edit};
  return edit_batch(model, batch, hypernet, options, rng, masks);
}

}  // namespace

std::vector<PruneRow> prune_scan(const LanguageModel& model, const Hypernet& hypernet,
                                 std::span<const TokenizedCase> cases, std::span<const double> fractions,
                                 const EditOptions& options) {
  if (cases.empty()) throw ContractError("prune_scan: no cases");
  std::vector<PruneRow> rows(fractions.size());
  for (std::size_t f = 0; f < fractions.size(); ++f) rows[f].fraction = fractions[f];
  std::vector<std::vector<double>> js_per_fraction(fractions.size());

  for (const auto& c : cases) {
    auto base = infer_edit(model, hypernet, c, options);
    struct Gate {
      double value;
      std::size_t slot, row;
    };
    std::vector<Gate> gates;
    for (const auto& t : base.traces) {
      auto v = t.refined.gate.values();
      for (std::size_t r = 0; r < v.size(); ++r) gates.push_back({v[r], t.slot, r});
    }
    std::stable_sort(gates.begin(), gates.end(), [](const Gate& a, const Gate& b) { return a.value < b.value; });

    for (std::size_t f = 0; f < fractions.size(); ++f) {
      const auto n_prune = static_cast<std::size_t>(std::floor(fractions[f] * static_cast<double>(gates.size()) + 1e-9));
      GateMasks masks(1, std::vector<std::vector<double>>(model.n_edit_slots(), std::vector<double>(c.edit.prompt.size() + c.edit.target.size() - 1, 1.0)));
      for (std::size_t k = 0; k < std::min(n_prune, gates.size()); ++k) masks[0][gates[k].slot][gates[k].row] = 0.0;
      auto edited = infer_edit(model, hypernet, c, options, &masks);

      ItemList items = {{&c.edit.prompt, &c.edit.target}};
      for (const auto& g : c.generality) items.push_back({&g.prompt, &g.target});
      auto scored = score(model, &edited.weights, items);
      double rc = 0, rr = 0;
      for (std::size_t i = 0; i < c.edit.target.size(); ++i) {
        auto p = row(scored, scored.item_rows[0][i]);
        rc += p[static_cast<std::size_t>(c.edit.target[i])];
        rr += static_cast<double>(rank_of(p, c.edit.target[i]));
      }
      rows[f].rel_confidence += rc / static_cast<double>(c.edit.target.size());
      rows[f].rel_rank += rr / static_cast<double>(c.edit.target.size());
      double gc = 0, gr = 0;
      std::size_t gn = 0;
      for (std::size_t g = 0; g < c.generality.size(); ++g)
        for (std::size_t i = 0; i < c.generality[g].target.size(); ++i) {
          auto p = row(scored, scored.item_rows[g + 1][i]);
          gc += p[static_cast<std::size_t>(c.generality[g].target[i])];
          gr += static_cast<double>(rank_of(p, c.generality[g].target[i]));
          ++gn;
        }
      rows[f].gen_confidence += gn ? gc / static_cast<double>(gn) : kNaN;
      rows[f].gen_rank += gn ? gr / static_cast<double>(gn) : kNaN;

      if (!c.locality.empty()) {
        auto pe = score(model, &edited.weights, locality_items(c));
        auto po = score(model, nullptr, locality_items(c));
        std::vector<double> js;
        for (std::size_t l = 0; l < c.locality.size(); ++l)
          for (std::size_t i = 0; i < c.locality[l].target.size(); ++i)
            js.push_back(js_divergence(row(pe, pe.item_rows[l][i]), row(po, po.item_rows[l][i])));
        js_per_fraction[f].push_back(1.0 - mean(js));
      }
    }
  }
  const double n = static_cast<double>(cases.size());
  for (std::size_t f = 0; f < rows.size(); ++f) {
    rows[f].rel_confidence /= n;
    rows[f].rel_rank /= n;
    rows[f].gen_confidence /= n;
    rows[f].gen_rank /= n;
    rows[f].js_similarity = mean(js_per_fraction[f]);
  }
  return rows;
}

void write_prune_csv(std::span<const PruneRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(10);
  out << "fraction,rel_confidence,rel_rank,gen_confidence,gen_rank,js_similarity\n";
  for (const auto& r : rows)
    out << r.fraction << ',' << r.rel_confidence << ',' << r.rel_rank << ',' << r.gen_confidence << ','
        << r.gen_rank << ',' << r.js_similarity << '\n';
}

double js_degradation_area(std::span<const PruneRow> rows, double upto) {
  if (rows.empty()) throw ContractError("js_degradation_area: no rows");
  const double base = rows.front().js_similarity;
  double area = 0.0;
  for (std::size_t i = 1; i < rows.size() && rows[i].fraction <= upto + 1e-12; ++i) {
    const double d0 = base - rows[i - 1].js_similarity;
    const double d1 = base - rows[i].js_similarity;
    area += 0.5 * (d0 + d1) * (rows[i].fraction - rows[i - 1].fraction);
  }
  return area;
}

std::vector<std::vector<double>> edit_gates(const LanguageModel& model, const Hypernet& hypernet,
                                            std::span<const TokenizedCase> cases, const EditOptions& options) {
  std::vector<std::vector<double>> out;
  for (const auto& c : cases) {
    auto res = infer_edit(model, hypernet, c, options);
    std::vector<double> g;
    for (const auto& t : res.traces) g.insert(g.end(), t.refined.gate.values().begin(), t.refined.gate.values().end());
    out.push_back(std::move(g));
  }
  return out;
}

double gate_sparsity(const std::vector<std::vector<double>>& gates, double threshold) {
  std::vector<double> per_case;
  for (const auto& g : gates) {
    if (g.empty()) continue;
    const auto below = std::count_if(g.begin(), g.end(), [&](double v) { return v < threshold; });
    per_case.push_back(static_cast<double>(below) / static_cast<double>(g.size()));
  }
  return mean(per_case);
}

std::size_t export_latents(const LanguageModel& model, const Hypernet& hypernet, std::span<const TokenizedCase> cases,
                           const std::filesystem::path& path, const EditOptions& options) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  std::size_t rows = 0;
  for (const auto& c : cases) {
    auto res = infer_edit(model, hypernet, c, options);
    const auto probs = next_token_probs(model, c.edit.prompt, &res.weights);
    const double confidence = probs[static_cast<std::size_t>(c.edit.target.front())];
    for (const auto& t : res.traces) {
      json j = {{"case_id", c.id},
                {"layer_id", t.layer_id},
                {"relation", c.relation},
                {"mu", std::vector<double>(t.latent.mu.values().begin(), t.latent.mu.values().end())},
                {"scale", std::vector<double>(t.refined.gate.values().begin(), t.refined.gate.values().end())},
                {"confidence", confidence}};
      out << j.dump() << "\n";
      ++rows;
    }
  }
  return rows;
}

std::vector<SweepRow> sweep(const LanguageModel& model, std::span<const TokenizedCase> train_cases,
                            std::span<const TokenizedCase> val_cases, std::span<const TokenizedCase> test_cases,
                            const TrainConfig& base, std::span<const std::size_t> l_ms, std::span<const double> betas) {
  std::vector<SweepRow> rows;
  for (auto l_m : l_ms) {
    for (double beta : betas) {
      SweepRow r;
      r.l_m = l_m;
      r.beta = beta;
      try {
        auto cfg = base;
        cfg.l_m = l_m;
        cfg.beta = beta;
        cfg.checkpoint_dir.clear();
        auto trained = train(model, train_cases, val_cases, cfg);
        if (trained.aborted) throw TrainingError(*trained.aborted);
        auto report = evaluate(model, test_cases, ibke_editor(model, trained.hypernet));
        r.reliability = report.reliability;
        r.generality = report.generality;
        r.locality = report.locality;
      } catch (const std::exception& e) {
        r.reliability = r.generality = r.locality = kNaN;
        r.error = e.what();
      }
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

void write_sweep_csv(std::span<const SweepRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(10);
  out << "l_m,beta,reliability,generality,locality,error\n";
  for (const auto& r : rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << r.l_m << ',' << r.beta << ',' << r.reliability << ',' << r.generality << ',' << r.locality << ',' << err
        << '\n';
  }
}

}  // namespace ibke
