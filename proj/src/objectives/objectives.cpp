// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#include "ibke/objectives.hpp"

#include <algorithm>
#include <fstream>

#include "ibke/errors.hpp"

namespace ibke {

TokenizedCase tokenize_case(const EditCase& c, const SymbolTable& symbols) {
  TokenizedCase t;
  t.id = c.id;
  t.split = c.split;
  t.relation = c.relation;
  t.edit.prompt = symbols.encode(c.edit.prompt, true);
  t.edit.target = symbols.encode(c.edit.target, false);
  t.edit.text = c.edit.prompt + " -> " + c.edit.target;
  t.edit.case_id = c.id;
  for (const auto& g : c.generality)
    t.generality.push_back({symbols.encode(g.prompt, true), symbols.encode(g.target, false), g.tag});
  for (const auto& l : c.locality) t.locality.push_back({symbols.encode(l.prompt, true), symbols.encode(l.target, false), {}});
  if (t.edit.prompt.size() > 1) t.subject = t.edit.prompt[1];
  return t;
}

std::vector<TokenizedCase> tokenize_cases(std::span<const EditCase> cases, const SymbolTable& symbols) {
  std::vector<TokenizedCase> out;
  out.reserve(cases.size());
  for (const auto& c : cases) out.push_back(tokenize_case(c, symbols));
  return out;
}

std::vector<CompletionProbe> fact_probes(const Corpus& corpus) {
  std::vector<CompletionProbe> out;
  for (const auto& s : corpus.sentences) {
    if (s.kind == "alias" || s.tokens.size() < 2) continue;
    out.push_back({std::vector<int>(s.tokens.begin(), s.tokens.end() - 1), s.tokens.back()});
  }
  return out;
}

void freeze_locality_targets(const LanguageModel& model, const SymbolTable& symbols, std::vector<EditCase>& cases) {
  for (auto& c : cases) {
    for (auto& l : c.locality) {
      auto context = symbols.encode(l.prompt, true);
      const std::size_t n = std::max<std::size_t>(1, symbols.encode(l.target, false).size());
      std::vector<int> produced;
      for (std::size_t i = 0; i < n && context.size() < model.config().context_length; ++i) {
        const int next = predict_topk(model, context, 1)[0].token;
        produced.push_back(next);
        context.push_back(next);
      }
      l.target = symbols.decode(produced);
    }
  }
}

namespace {

struct Packed {
  std::vector<int> tokens;
  std::vector<std::size_t> segments;
  std::vector<int> labels;        // generality target positions
  std::vector<int> locality_rows;  // rows scored by the KL term
  std::vector<std::pair<const LocalityItem*, std::size_t>> locality_first_row;
};

void append(Packed& p, const std::vector<int>& prompt, const std::vector<int>& target, bool labelled,
            const LocalityItem* loc) {
  auto input = teacher_forced_input(prompt, target);
  const std::size_t base = p.tokens.size();
  p.tokens.insert(p.tokens.end(), input.begin(), input.end());
  p.segments.push_back(input.size());
  p.labels.resize(p.tokens.size(), -1);
  const std::size_t first = base + prompt.size() - 1;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (labelled) p.labels[first + i] = target[i];
    if (loc) p.locality_rows.push_back(static_cast<int>(first + i));
  }
  if (loc) p.locality_first_row.push_back({loc, first});
}

std::vector<double> reference_buffer(const Packed& p, std::size_t vocab) {
  std::vector<double> ref(p.tokens.size() * vocab, 0.0);
  for (const auto& [item, first] : p.locality_first_row) {
    if (item->reference.size() != item->target.size() * vocab)
      throw ContractError("locality item lacks a reference distribution");
    std::copy(item->reference.begin(), item->reference.end(), ref.begin() + static_cast<std::ptrdiff_t>(first * vocab));
  }
  return ref;
}

std::vector<double> reference_for(const LanguageModel& original, const LocalityItem& item) {
  auto input = teacher_forced_input(item.prompt, item.target);
  auto logits = forward(original, input).logits;
  const auto vocab = logits.cols();
  auto lp = log_softmax_rows(logits.values(), logits.rows(), vocab);
  const std::size_t first = item.prompt.size() - 1;
  return {lp.begin() + static_cast<std::ptrdiff_t>(first * vocab),
          lp.begin() + static_cast<std::ptrdiff_t>((first + item.target.size()) * vocab)};
}

}  // namespace

void compute_references(const LanguageModel& original, std::vector<TokenizedCase>& cases) {
  for (auto& c : cases)
    for (auto& l : c.locality) l.reference = reference_for(original, l);
}

TrainBatch make_train_batch(std::span<const TokenizedCase* const> cases, double beta) {
  TrainBatch b;
  b.beta = beta;
  for (const auto* c : cases) {
    b.edits.push_back(c->edit);
    b.generality.push_back({c->edit.prompt, c->edit.target, "edit"});
  }
  for (const auto* c : cases) {
    b.generality.insert(b.generality.end(), c->generality.begin(), c->generality.end());
    b.locality.insert(b.locality.end(), c->locality.begin(), c->locality.end());
  }
  return b;
}

Tensor sg_loss(const LanguageModel& model, const EditWeights* edits, std::span<const LabeledPrompt> generality) {
  if (generality.empty()) throw ContractError("sg_loss: empty generality set");
  Packed p;
  for (const auto& g : generality) append(p, g.prompt, g.target, true, nullptr);
  auto logits = forward(model, p.tokens, edits, p.segments).logits;
  return scale(cross_entropy(logits, p.labels, Reduction::Sum), 1.0 / static_cast<double>(generality.size()));
}

Tensor il_loss(const LanguageModel& edited, const EditWeights* edits, const LanguageModel& original,
               std::span<const LocalityItem> locality) {
  if (locality.empty()) throw ContractError("il_loss: empty locality set");
  std::vector<LocalityItem> items(locality.begin(), locality.end());
  for (auto& l : items)
    if (l.reference.empty()) l.reference = reference_for(original, l);
  Packed p;
  for (const auto& l : items) append(p, l.prompt, l.target, false, &l);
  auto logits = forward(edited, p.tokens, edits, p.segments).logits;
  return kl_to_reference(logits, reference_buffer(p, logits.cols()), p.locality_rows);
}

EditLosses edit_losses(const LanguageModel& model, const EditWeights* edits, std::span<const LabeledPrompt> generality,
                       std::span<const LocalityItem> locality) {
  if (generality.empty()) throw ContractError("sg_loss: empty generality set");
  if (locality.empty()) throw ContractError("il_loss: empty locality set");
  Packed p;
  for (const auto& g : generality) append(p, g.prompt, g.target, true, nullptr);
  for (const auto& l : locality) append(p, l.prompt, l.target, false, &l);
  auto logits = forward(model, p.tokens, edits, p.segments).logits;
  EditLosses out;
  out.sg = scale(cross_entropy(logits, p.labels, Reduction::Sum), 1.0 / static_cast<double>(generality.size()));
  out.il = kl_to_reference(logits, reference_buffer(p, logits.cols()), p.locality_rows);
  return out;
}

Tensor total_loss(const Tensor& sg, const Tensor& il, std::span<const Tensor> itm_terms, double beta,
                  std::size_t n_edits, std::size_t n_layers, std::size_t l_m, std::size_t d_m) {
  auto base = add(sg, il);
  if (beta == 0.0 || itm_terms.empty()) return base;
  if (n_edits == 0 || n_layers == 0 || l_m == 0 || d_m == 0) throw ContractError("total_loss: zero normalizer");
  Tensor itm = itm_terms[0];
  for (std::size_t i = 1; i < itm_terms.size(); ++i) itm = add(itm, itm_terms[i]);
  const double norm = beta / static_cast<double>(n_edits * n_layers * l_m * d_m);
  return add(base, scale(itm, norm));
}

void write_loss_csv(std::span<const LossLogRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out.precision(10);
  out << "step,sg,il,itm_mean,total,beta\n";
  for (const auto& r : rows)
    out << r.step << ',' << r.sg << ',' << r.il << ',' << r.itm_mean << ',' << r.total << ',' << r.beta << '\n';
}

}  // namespace ibke
