// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#include "ibke/synth.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ibke/errors.hpp"

namespace ibke {
namespace {

using json = nlohmann::json;

// std::shuffle and the std distributions are implementation-defined, so
// generators here draw raw 64-bit words and do their own reductions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  std::size_t below(std::size_t n) { return n ? static_cast<std::size_t>(engine_() % n) : 0; }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::mt19937_64 engine_;
};

constexpr const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "br"};
constexpr const char* kVowels[] = {"a", "e", "i", "o", "u"};

std::string make_name(Rng& rng) {
  const std::size_t syllables = 2 + (rng.uniform() < 0.3 ? 1 : 0);
  std::string out;
  for (std::size_t i = 0; i < syllables; ++i) {
    out += kOnsets[rng.below(std::size(kOnsets))];
    out += kVowels[rng.below(std::size(kVowels))];
  }
  out[0] = static_cast<char>(out[0] - 'a' + 'A');
  return out;
}

constexpr const char* kRelationWords[] = {
    "capital", "city",    "born",    "in",     "located", "near",    "works",   "for",     "leads",   "team",
    "speaks",  "language", "owns",   "company", "writes", "book",    "plays",   "sport",   "founded", "by",
    "married", "to",      "studied", "at",     "lives",   "home",    "sells",   "brand",   "rules",   "land",
    "admires", "hero",    "grows",   "crop",   "sings",   "song",    "trades",  "with",    "guards",  "gate",
    "paints",  "river",   "builds",  "ship",   "drives",  "car",     "teaches", "school",  "hosts",   "festival",
    "visits",  "temple",  "rides",   "horse",  "mines",   "ore",     "brews",   "tea",     "carves",  "stone",
    "bakes",   "bread",   "weaves",  "cloth",  "hunts",   "deer",    "fishes",  "lake",    "tends",   "garden",
    "sails",   "sea",     "climbs",  "peak",   "reads",   "scroll",  "forges",  "blade",   "keeps",   "bees",
    "follows", "star",    "names",   "child",  "mends",   "net",     "calls",   "friend",  "serves",  "king",
    "joins",   "guild",   "fears",   "storm",  "loves",   "music",   "holds",   "office",  "guides",  "pilgrim",
    "owes",    "debt",    "heals",   "wound",  "prays",   "shrine",  "cooks",   "stew",    "sweeps",  "hall",
    "whose",   "of",      "is",      "has",    "from",    "the",     "known",   "as",      "via",     "under",
};

struct WordSource {
  std::vector<std::string> pool;
  std::size_t next = 0;
  std::size_t fallback = 0;
  std::string take() {
    if (next < pool.size()) return pool[next++];
    return "w" + std::to_string(fallback++);
  }
};

Template take_template(WordSource& words, Rng& rng) {
  Template t;
  const std::size_t len = rng.uniform() < 0.3 ? 1 : 2;
  for (std::size_t i = 0; i < len; ++i) t.push_back(words.take());
  return t;
}

std::string join(const std::vector<std::string>& words, const std::string& sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += sep;
    out += words[i];
  }
  return out;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

}  // namespace

// ---- world ----------------------------------------------------------------

std::optional<int> FactWorld::object_of(int subject, int relation) const {
  for (const auto& f : facts)
    if (f.subject == subject && f.relation == relation) return f.object;
  return std::nullopt;
}

std::vector<Chain> FactWorld::chains() const {
  std::map<std::pair<int, int>, const Fact*> index;
  for (const auto& f : facts) index[{f.subject, f.relation}] = &f;
  std::vector<Chain> out;
  for (std::size_t r = 0; r < chain_rules.size(); ++r) {
    const auto& rule = chain_rules[r];
    for (const auto& f : facts) {
      if (f.relation != rule.first) continue;
      auto it = index.find({f.object, rule.second});
      if (it != index.end()) out.push_back({static_cast<int>(r), f, *it->second});
    }
  }
  return out;
}

FactWorld generate_world(std::uint64_t seed, int n_entities, int n_relations, int n_facts,
                         const WorldOptions& options) {
  if (n_entities < 0 || n_relations < 0 || n_facts < 0) throw GenerationError("negative world size");
  if (options.n_types < 1) throw GenerationError("need at least one entity type");
  if (options.templates_per_relation < 1 || options.templates_per_relation > 2)
    throw GenerationError("templates_per_relation must be 1 or 2");
  if (n_facts > 0 && (n_entities < 2 || n_relations < 1))
    throw GenerationError("facts requested without enough entities or relations");

  Rng rng(seed);
  FactWorld world;
  world.seed = seed;

  std::set<std::string> used;
  auto fresh_name = [&] {
    for (;;) {
      auto name = make_name(rng);
      if (used.insert(name).second) return name;
    }
  };
  for (int i = 0; i < n_entities; ++i) {
    Entity e;
    e.type = i % options.n_types;
    e.names.push_back(fresh_name());
    if (rng.uniform() < options.alias_fraction) {
      e.names.push_back(fresh_name());
      if (rng.uniform() < 0.25) e.names.push_back(fresh_name());
    }
    world.entities.push_back(std::move(e));
  }

  WordSource words{{std::begin(kRelationWords), std::end(kRelationWords)}};
  rng.shuffle(words.pool);
  const int n_injective = static_cast<int>(options.injective_fraction * n_relations + 0.5);
  for (int r = 0; r < n_relations; ++r) {
    Relation rel;
    rel.domain_type = static_cast<int>(rng.below(options.n_types));
    rel.range_type = static_cast<int>(rng.below(options.n_types));
    rel.injective = r < n_injective;
    for (int t = 0; t < options.templates_per_relation; ++t) rel.templates.push_back(take_template(words, rng));
    if (rel.injective) rel.reverse_template = take_template(words, rng);
    rel.name = join(rel.templates[0], "_");
    world.relations.push_back(std::move(rel));
  }

  std::vector<std::vector<int>> by_type(options.n_types);
  for (int i = 0; i < n_entities; ++i) by_type[world.entities[i].type].push_back(i);

  std::vector<std::pair<int, int>> slots;  // (subject, relation)
  for (int r = 0; r < n_relations; ++r)
    for (int s : by_type[world.relations[r].domain_type]) slots.push_back({s, r});
  rng.shuffle(slots);

  std::vector<std::set<int>> taken(n_relations);
  for (const auto& [s, r] : slots) {
    if (static_cast<int>(world.facts.size()) == n_facts) break;
    const auto& rel = world.relations[r];
    std::vector<int> candidates;
    for (int o : by_type[rel.range_type])
      if (o != s && !(rel.injective && taken[r].count(o))) candidates.push_back(o);
    if (candidates.empty()) continue;
    const int o = candidates[rng.below(candidates.size())];
    taken[r].insert(o);
    world.facts.push_back({s, r, o});
  }
  if (static_cast<int>(world.facts.size()) < n_facts)
    throw GenerationError("cannot place " + std::to_string(n_facts) + " facts under the unique-object constraint (placed " +
                          std::to_string(world.facts.size()) + ")");

  std::vector<ChainRule> rules;
  for (int a = 0; a < n_relations; ++a)
    for (int b = 0; b < n_relations; ++b)
      if (a != b && world.relations[a].range_type == world.relations[b].domain_type) rules.push_back({a, b});
  rng.shuffle(rules);
  if (static_cast<int>(rules.size()) > options.n_chain_rules) rules.resize(std::max(0, options.n_chain_rules));
  world.chain_rules = std::move(rules);
  return world;
}

// ---- symbols --------------------------------------------------------------

SymbolTable::SymbolTable(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<int>(i)).second)
      throw ContractError("duplicate symbol '" + words_[i] + "'");
  }
}

int SymbolTable::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw IndexError("unknown word '" + word + "'");
  return it->second;
}

const std::string& SymbolTable::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
    throw IndexError("token id " + std::to_string(id) + " out of range");
  return words_[id];
}

std::vector<int> SymbolTable::encode(const std::string& text, bool add_bos) const {
  std::vector<int> out;
  if (add_bos) out.push_back(bos());
  for (const auto& w : split_words(text)) out.push_back(id(w));
  return out;
}

std::string SymbolTable::decode(std::span<const int> ids) const {
  std::vector<std::string> parts;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i == 0 && contains(kBos) && ids[i] == bos()) continue;
    parts.push_back(word(ids[i]));
  }
  return join(parts);
}

void SymbolTable::save(const std::filesystem::path& path) const {
  json j = json::object();
  for (std::size_t i = 0; i < words_.size(); ++i) j[words_[i]] = i;
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(1) << "\n";
}

SymbolTable SymbolTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ParseError(path.string() + ": expected an object of word -> id");
  std::vector<std::string> words(j.size());
  std::vector<bool> seen(j.size(), false);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!it.value().is_number_unsigned()) throw ParseError("symbol id for '" + it.key() + "' is not an index");
    const auto id = it.value().get<std::size_t>();
    if (id >= words.size() || seen[id]) throw ParseError("symbol ids must be a permutation of 0..n-1");
    words[id] = it.key();
    seen[id] = true;
  }
  return SymbolTable(std::move(words));
}

SymbolTable build_symbols(const FactWorld& world) {
  std::vector<std::string> words = {kBos, kAliasWord, kChainWord};
  std::set<std::string> seen(words.begin(), words.end());
  auto add = [&](const std::string& w) {
    if (seen.insert(w).second) words.push_back(w);
  };
  for (const auto& r : world.relations) {
    for (const auto& t : r.templates)
      for (const auto& w : t) add(w);
    if (r.reverse_template)
      for (const auto& w : *r.reverse_template) add(w);
  }
  for (const auto& e : world.entities)
    for (const auto& n : e.names) add(n);
  return SymbolTable(std::move(words));
}

// ---- corpus ---------------------------------------------------------------

std::string render_prompt(const FactWorld& world, int entity, std::size_t name_index, int relation,
                          std::size_t template_index) {
  std::vector<std::string> parts = {world.entities.at(entity).names.at(name_index)};
  for (const auto& w : world.relations.at(relation).templates.at(template_index)) parts.push_back(w);
  return join(parts);
}

std::string render_chain_prompt(const FactWorld& world, int entity, int first, int second) {
  std::vector<std::string> parts = {world.entities.at(entity).names.at(0), kChainWord};
  for (int r : {first, second})
    for (const auto& w : world.relations.at(r).templates.at(0)) parts.push_back(w);
  return join(parts);
}

std::vector<std::vector<int>> Corpus::token_sequences() const {
  std::vector<std::vector<int>> out;
  out.reserve(sentences.size());
  for (const auto& s : sentences) out.push_back(s.tokens);
  return out;
}

Corpus render_corpus(const FactWorld& world) {
  Corpus corpus;
  corpus.symbols = build_symbols(world);
  const auto& sym = corpus.symbols;
  auto emit = [&](const std::string& text, const char* kind) {
    corpus.sentences.push_back({sym.encode(text, true), kind});
  };
  auto name = [&](int e) { return world.entities[e].names[0]; };

  for (const auto& f : world.facts) {
    const auto& rel = world.relations[f.relation];
    for (std::size_t t = 0; t < rel.templates.size(); ++t)
      emit(render_prompt(world, f.subject, 0, f.relation, t) + " " + name(f.object), "fact");
    for (std::size_t a = 1; a < world.entities[f.subject].names.size(); ++a)
      emit(render_prompt(world, f.subject, a, f.relation, 0) + " " + name(f.object), "alias_subject");
    if (rel.reverse_template) emit(name(f.object) + " " + join(*rel.reverse_template) + " " + name(f.subject), "reverse");
  }
  for (const auto& c : world.chains()) {
    const auto& rule = world.chain_rules[c.rule];
    emit(render_chain_prompt(world, c.first.subject, rule.first, rule.second) + " " + name(c.second.object), "chain");
  }
  for (const auto& e : world.entities) {
    for (std::size_t a = 1; a < e.names.size(); ++a) {
      emit(e.names[0] + " " + kAliasWord + " " + e.names[a], "alias");
      emit(e.names[a] + " " + kAliasWord + " " + e.names[0], "alias");
    }
  }
  Rng rng(world.seed ^ 0x636f72707573ULL);
  rng.shuffle(corpus.sentences);
  return corpus;
}

// ---- edit cases -----------------------------------------------------------

std::vector<int> entities_in(const FactWorld& world, const std::string& text) {
  std::map<std::string, int> owner;
  for (std::size_t e = 0; e < world.entities.size(); ++e)
    for (const auto& n : world.entities[e].names) owner[n] = static_cast<int>(e);
  std::vector<int> out;
  for (const auto& w : split_words(text)) {
    auto it = owner.find(w);
    if (it != owner.end()) out.push_back(it->second);
  }
  return out;
}

namespace {

struct SplitSpec {
  const char* name;
  int wanted;
};

EditCase build_case(const FactWorld& world, const Fact& fact, int replacement, const CaseOptions& options, Rng& rng,
                    const std::map<std::pair<int, int>, int>& object_index) {
  const int a = fact.subject, r = fact.relation, b = fact.object, c = replacement;
  const auto& rel = world.relations[r];
  const auto& ents = world.entities;
  auto name = [&](int e) { return ents[e].names[0]; };
  auto lookup = [&](int s, int rr) -> std::optional<int> {
    auto it = object_index.find({s, rr});
    if (it == object_index.end()) return std::nullopt;
    return it->second;
  };

  EditCase ec;
  ec.relation = rel.name;
  ec.edit = {render_prompt(world, a, 0, r, 0), name(c)};

  for (std::size_t t = 1; t < rel.templates.size(); ++t)
    ec.generality.push_back({render_prompt(world, a, 0, r, t), name(c), "Rep"});
  for (std::size_t k = 1; k < ents[c].names.size(); ++k)
    ec.generality.push_back({ec.edit.prompt, ents[c].names[k], "OA"});
  for (std::size_t k = 1; k < ents[a].names.size(); ++k)
    ec.generality.push_back({render_prompt(world, a, k, r, 0), name(c), "SA"});

  int hops = 0;
  for (const auto& rule : world.chain_rules) {
    if (hops >= options.max_multi_hop) break;
    if (rule.second == r) {
      // (X, first, A) then the edited (A, r, C)
      for (const auto& f : world.facts) {
        if (hops >= options.max_multi_hop) break;
        if (f.relation != rule.first || f.object != a) continue;
        ec.generality.push_back(
            {render_chain_prompt(world, f.subject, rule.first, r), name(c), "MH"});
        ++hops;
      }
    }
    if (rule.first == r && hops < options.max_multi_hop) {
      // edited (A, r, C) then (C, second, D)
      if (auto d = lookup(c, rule.second)) {
        ec.generality.push_back(
            {render_chain_prompt(world, a, r, rule.second), name(*d), "MH"});
        ++hops;
      }
    }
  }

  if (rel.reverse_template) {
    bool shared = false;
    for (const auto& f : world.facts)
      if (f.relation == r && f.object == c && f.subject != a) shared = true;
    if (!shared) ec.generality.push_back({name(c) + " " + join(*rel.reverse_template), name(a), "RR"});
  }

  std::vector<const Fact*> pool;
  for (const auto& f : world.facts) {
    const bool touches = f.subject == a || f.subject == b || f.subject == c || f.object == a || f.object == b ||
                         f.object == c;
    if (!touches) pool.push_back(&f);
  }
  for (int k = 0; k < options.n_locality && !pool.empty(); ++k) {
    const std::size_t pick = rng.below(pool.size());
    const Fact& f = *pool[pick];
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
    const auto t = rng.below(world.relations[f.relation].templates.size());
    ec.locality.push_back({render_prompt(world, f.subject, 0, f.relation, t), name(f.object)});
  }
  return ec;
}

}  // namespace

CaseSet make_edit_cases(const FactWorld& world, const CaseOptions& options) {
  CaseSet out;
  Rng rng(options.seed ? options.seed : world.seed ^ 0x6564697473ULL);
  const std::vector<SplitSpec> splits = {
      {"train", options.n_train}, {"val", options.n_val}, {"test", options.n_test}};

  std::map<std::pair<int, int>, int> object_index;
  for (const auto& f : world.facts) object_index[{f.subject, f.relation}] = f.object;

  // Cases need a rephrasing, so only relations with two templates qualify.
  std::map<int, std::vector<Fact>> by_subject;
  for (const auto& f : world.facts)
    if (world.relations[f.relation].templates.size() >= 2) by_subject[f.subject].push_back(f);
  std::vector<int> subjects;
  for (const auto& [s, fs] : by_subject) subjects.push_back(s);
  rng.shuffle(subjects);

  std::vector<std::vector<Fact>> split_facts(splits.size());
  std::vector<double> load(splits.size(), 0.0);
  for (int s : subjects) {
    std::size_t best = splits.size();
    double best_ratio = 0.0;
    for (std::size_t k = 0; k < splits.size(); ++k) {
      if (splits[k].wanted <= 0) continue;
      const double ratio = load[k] / splits[k].wanted;
      if (best == splits.size() || ratio < best_ratio) {
        best = k;
        best_ratio = ratio;
      }
    }
    if (best == splits.size()) break;
    for (const auto& f : by_subject[s]) split_facts[best].push_back(f);
    load[best] += static_cast<double>(by_subject[s].size());
  }

  for (std::size_t k = 0; k < splits.size(); ++k) {
    const int wanted = std::max(0, splits[k].wanted);
    auto& facts = split_facts[k];
    rng.shuffle(facts);
    std::vector<std::vector<int>> replacements;
    for (const auto& f : facts) {
      const auto& rel = world.relations[f.relation];
      std::vector<int> fresh, used;
      for (std::size_t e = 0; e < world.entities.size(); ++e) {
        const int ei = static_cast<int>(e);
        if (world.entities[e].type != rel.range_type || ei == f.object || ei == f.subject) continue;
        bool is_object = false;
        if (rel.injective)
          for (const auto& g : world.facts)
            if (g.relation == f.relation && g.object == ei) is_object = true;
        (is_object ? used : fresh).push_back(ei);
      }
      rng.shuffle(fresh);
      rng.shuffle(used);
      fresh.insert(fresh.end(), used.begin(), used.end());
      replacements.push_back(std::move(fresh));
    }
    int made = 0;
    for (std::size_t round = 0; made < wanted; ++round) {
      bool progress = false;
      for (std::size_t i = 0; i < facts.size() && made < wanted; ++i) {
        if (round >= replacements[i].size()) continue;
        auto ec = build_case(world, facts[i], replacements[i][round], options, rng, object_index);
        char id[32];
        std::snprintf(id, sizeof id, "%s-%04d", splits[k].name, made);
        ec.id = id;
        ec.split = splits[k].name;
        out.cases.push_back(std::move(ec));
        ++made;
        progress = true;
      }
      if (!progress) break;
    }
    out.skipped += wanted - made;
  }
  return out;
}

// ---- JSONL ----------------------------------------------------------------

void write_jsonl(std::span<const EditCase> cases, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& c : cases) {
    json j;
    j["id"] = c.id;
    j["split"] = c.split;
    j["edit"] = {{"prompt", c.edit.prompt}, {"target", c.edit.target}};
    j["generality"] = json::array();
    for (const auto& g : c.generality) j["generality"].push_back({{"prompt", g.prompt}, {"target", g.target}, {"tag", g.tag}});
    j["locality"] = json::array();
    for (const auto& l : c.locality) j["locality"].push_back({{"prompt", l.prompt}, {"target", l.target}});
    if (!c.relation.empty()) j["relation"] = c.relation;
    out << j.dump() << "\n";
  }
}

namespace {

std::string required_string(const json& j, const char* key, std::size_t line) {
  if (!j.contains(key)) throw ParseError(std::string("missing field '") + key + "'", line);
  if (!j[key].is_string()) throw ParseError(std::string("field '") + key + "' must be a string", line);
  return j[key].get<std::string>();
}

std::string optional_string(const json& j, const char* key, const std::string& fallback, std::size_t line) {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  if (!j[key].is_string()) throw ParseError(std::string("field '") + key + "' must be a string", line);
  return j[key].get<std::string>();
}

const json* optional_array(const json& j, const char* key, std::size_t line) {
  if (!j.contains(key) || j[key].is_null()) return nullptr;
  if (!j[key].is_array()) throw ParseError(std::string("field '") + key + "' must be an array", line);
  return &j[key];
}

}  // namespace

std::vector<EditCase> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::vector<EditCase> cases;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line);
    }
    if (!j.is_object()) throw ParseError("expected a JSON object", line);
    EditCase c;
    c.id = optional_string(j, "id", "case-" + std::to_string(line), line);
    c.split = optional_string(j, "split", "test", line);
    if (!j.contains("edit") || !j["edit"].is_object()) throw ParseError("missing object field 'edit'", line);
    c.edit = {required_string(j["edit"], "prompt", line), required_string(j["edit"], "target", line)};
    if (const json* g = optional_array(j, "generality", line)) {
      for (const auto& item : *g) {
        if (!item.is_object()) throw ParseError("generality entries must be objects", line);
        c.generality.push_back({required_string(item, "prompt", line), required_string(item, "target", line),
                                optional_string(item, "tag", "Rep", line)});
      }
    }
    if (const json* l = optional_array(j, "locality", line)) {
      for (const auto& item : *l) {
        if (!item.is_object()) throw ParseError("locality entries must be objects", line);
        c.locality.push_back({required_string(item, "prompt", line), required_string(item, "target", line)});
      }
    }
    c.relation = optional_string(j, "relation", "", line);
    cases.push_back(std::move(c));
  }
  return cases;
}

}  // namespace ibke
