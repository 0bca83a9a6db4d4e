// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic fact worlds: typed entities with aliases, relations
// with surface templates (and reverse templates for one-to-one relations),
// fact triples, and composable relation pairs that yield 2-hop chains. From a
// world we render a pretraining corpus and counterfactual edit cases whose
// generality items are tagged Rep / OA / SA / MH / RR.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ibke {

// ---- world ----------------------------------------------------------------

struct Entity {
  std::vector<std::string> names;  // names[0] is primary, the rest aliases
  int type = 0;
};

using Template = std::vector<std::string>;  // words between subject and object

struct Relation {
  std::string name;
  int domain_type = 0;
  int range_type = 0;
  bool injective = false;  // each object is used by at most one subject
  std::vector<Template> templates;
  std::optional<Template> reverse_template;  // "<object> words" -> subject
};

struct Fact {
  int subject = 0;
  int relation = 0;
  int object = 0;
  bool operator==(const Fact&) const = default;
};

/// (first, second) relations whose composition is rendered as a 2-hop prompt
/// "X 's first-words second-words" -> second(first(X)).
struct ChainRule {
  int first = 0;
  int second = 0;
};

struct Chain {
  int rule = 0;  // index into chain_rules
  Fact first;
  Fact second;
  bool operator==(const Chain&) const = default;
};

struct WorldOptions {
  int n_types = 2;
  double alias_fraction = 0.5;
  int templates_per_relation = 2;  // 1 or 2
  double injective_fraction = 0.5;
  int n_chain_rules = 3;
};

struct FactWorld {
  std::uint64_t seed = 0;
  std::vector<Entity> entities;
  std::vector<Relation> relations;
  std::vector<Fact> facts;
  std::vector<ChainRule> chain_rules;

  std::optional<int> object_of(int subject, int relation) const;
  std::vector<Chain> chains() const;
};

/// Throws GenerationError when the unique-object constraints cannot be met.
FactWorld generate_world(std::uint64_t seed, int n_entities, int n_relations, int n_facts,
                         const WorldOptions& options = {});

// ---- symbols and corpus ---------------------------------------------------

inline constexpr const char* kBos = "<bos>";
inline constexpr const char* kAliasWord = "aka";
inline constexpr const char* kChainWord = "'s";  // marks a 2-hop prompt after its subject

class SymbolTable {
 public:
  SymbolTable() = default;
  explicit SymbolTable(std::vector<std::string> words);

  int id(const std::string& word) const;  // IndexError when unknown
  bool contains(const std::string& word) const { return index_.count(word) > 0; }
  const std::string& word(int id) const;
  std::size_t size() const { return words_.size(); }
  int bos() const { return id(kBos); }

  /// Splits on single spaces; prepends <bos> when asked.
  std::vector<int> encode(const std::string& text, bool add_bos) const;
  /// Joins words with single spaces; a leading <bos> is dropped.
  std::string decode(std::span<const int> ids) const;

  void save(const std::filesystem::path& path) const;  // symbols.json, word -> id
  static SymbolTable load(const std::filesystem::path& path);

  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

SymbolTable build_symbols(const FactWorld& world);

struct Sentence {
  std::vector<int> tokens;  // starts with <bos>
  std::string kind;         // fact | alias_subject | reverse | chain | alias
};

struct Corpus {
  SymbolTable symbols;
  std::vector<Sentence> sentences;  // shuffled by world seed
  std::vector<std::vector<int>> token_sequences() const;
};

Corpus render_corpus(const FactWorld& world);

/// Subject + template words, as text (no <bos>).
std::string render_prompt(const FactWorld& world, int subject_name_entity, std::size_t name_index, int relation,
                          std::size_t template_index);

/// "<subject> 's <first-words> <second-words>", asking for second(first(X)).
std::string render_chain_prompt(const FactWorld& world, int entity, int first, int second);

// ---- edit cases -----------------------------------------------------------

struct PromptTarget {
  std::string prompt;
  std::string target;
  bool operator==(const PromptTarget&) const = default;
};

struct GeneralityItem {
  std::string prompt;
  std::string target;
  std::string tag;  // Rep | OA | SA | MH | RR
  bool operator==(const GeneralityItem&) const = default;
};

struct EditCase {
  std::string id;
  std::string split;  // train | val | test
  PromptTarget edit;
  std::vector<GeneralityItem> generality;
  std::vector<PromptTarget> locality;
  std::string relation;  // label for latent analysis; may be empty
  bool operator==(const EditCase&) const = default;
};

inline constexpr const char* kCriteria[] = {"Rep", "OA", "SA", "MH", "RR"};

struct CaseOptions {
  int n_train = 500;
  int n_val = 60;
  int n_test = 100;
  int n_locality = 3;
  int max_multi_hop = 2;
  std::uint64_t seed = 0;  // 0 -> derive from world seed
};

struct CaseSet {
  std::vector<EditCase> cases;
  int skipped = 0;  // requested cases that could not be built
};

CaseSet make_edit_cases(const FactWorld& world, const CaseOptions& options = {});

/// Entity ids named anywhere in a text (by primary name or alias).
std::vector<int> entities_in(const FactWorld& world, const std::string& text);

// ---- JSONL ----------------------------------------------------------------

void write_jsonl(std::span<const EditCase> cases, const std::filesystem::path& path);
/// Missing optional fields default (split "test", empty lists, tag "Rep").
/// Malformed lines raise ParseError carrying the line number.
std::vector<EditCase> read_jsonl(const std::filesystem::path& path);

}  // namespace ibke
