// Copyright 2026 The IBKE Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "ibke/errors.hpp"
#include "ibke/synth.hpp"

using namespace ibke;

namespace {

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

std::vector<std::string> words_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::map<std::string, int> name_owner(const FactWorld& w) {
  std::map<std::string, int> owner;
  for (std::size_t e = 0; e < w.entities.size(); ++e)
    for (const auto& n : w.entities[e].names) owner[n] = static_cast<int>(e);
  return owner;
}

// Reads "<entity> 's t0(r1) t0(r2) ..." back into an entity and a relation path
// by matching first templates, then walks `graph` along that path.
std::optional<int> traverse(const FactWorld& w, const std::map<std::pair<int, int>, int>& graph, const std::string& prompt) {
  auto words = words_of(prompt);
  auto owner = name_owner(w);
  if (words.empty() || !owner.count(words[0])) return std::nullopt;
  int node = owner[words[0]];
  if (words.size() < 2 || words[1] != kChainWord) return std::nullopt;
  std::size_t pos = 2;
  while (pos < words.size()) {
    bool matched = false;
    for (std::size_t r = 0; r < w.relations.size() && !matched; ++r) {
      const auto& t = w.relations[r].templates[0];
      if (pos + t.size() > words.size()) continue;
      if (!std::equal(t.begin(), t.end(), words.begin() + static_cast<std::ptrdiff_t>(pos))) continue;
      auto it = graph.find({node, static_cast<int>(r)});
      if (it == graph.end()) return std::nullopt;
      node = it->second;
      pos += t.size();
      matched = true;
    }
    if (!matched) return std::nullopt;
  }
  return node;
}

int relation_named(const FactWorld& w, const std::string& name) {
  for (std::size_t r = 0; r < w.relations.size(); ++r)
    if (w.relations[r].name == name) return static_cast<int>(r);
  return -1;
}

std::string random_text(std::mt19937_64& rng) {
  static const std::vector<std::string> pieces = {"a", "Zu", "\"q\"", "back\\slash", "tab\t", "ünï", "emoji 🙂", " ", "{}", "[,]", "x y"};
  std::string s;
  const auto n = rng() % 5;
  for (std::size_t i = 0; i < n; ++i) s += pieces[rng() % pieces.size()];
  return s;
}

EditCase random_case(std::mt19937_64& rng, int i) {
  EditCase c;
  c.id = "c" + std::to_string(i) + random_text(rng);
  const char* splits[] = {"train", "val", "test"};
  c.split = splits[rng() % 3];
  c.edit = {random_text(rng), random_text(rng)};
  for (auto n = rng() % 4; n > 0; --n) c.generality.push_back({random_text(rng), random_text(rng), kCriteria[rng() % 5]});
  for (auto n = rng() % 4; n > 0; --n) c.locality.push_back({random_text(rng), random_text(rng)});
  if (rng() % 2) c.relation = random_text(rng) + "r";
  return c;
}

// A hand-built world: X --located_in--> A --capital_of--> B, plus spare
// entities C, D of the same type as B.
FactWorld tiny_world() {
  FactWorld w;
  w.seed = 11;
  w.entities = {{{"Xo"}, 0}, {{"Ana", "Anabe"}, 0}, {{"Bu"}, 1}, {{"Ce", "Cebo"}, 1}, {{"Di"}, 1}, {{"Ek"}, 0},
                {{"Fa"}, 1}, {{"Go"}, 0}};
  Relation located{"located_in", 0, 0, false, {{"located", "in"}, {"sits", "within"}}, std::nullopt};
  Relation capital{"capital_of", 0, 1, true, {{"capital", "is"}, {"has", "capital"}}, Template{"capital", "of"}};
  w.relations = {located, capital};
  w.facts = {{0, 0, 1}, {1, 1, 2}, {5, 1, 6}, {7, 0, 5}};
  w.chain_rules = {{0, 1}};
  return w;
}

}  // namespace

TEST_CASE("generate_world is a pure function of its inputs") {
  auto a = generate_world(3, 60, 8, 200);
  auto b = generate_world(3, 60, 8, 200);
  auto c = generate_world(4, 60, 8, 200);
  CHECK(a.facts == b.facts);
  CHECK(a.entities.size() == 60);
  for (std::size_t i = 0; i < a.entities.size(); ++i) CHECK(a.entities[i].names == b.entities[i].names);
  CHECK(a.facts.size() == 200);
  CHECK_FALSE(a.facts == c.facts);
}

TEST_CASE("empty and infeasible worlds") {
  auto w = generate_world(1, 10, 3, 0);
  CHECK(w.facts.empty());
  CHECK(w.chains().empty());
  auto cs = make_edit_cases(w, {.n_train = 5, .n_val = 1, .n_test = 2});
  CHECK(cs.cases.empty());
  CHECK(cs.skipped == 8);
  CHECK(render_corpus(w).sentences.size() >= 0);

  CHECK_THROWS_AS(generate_world(1, 4, 1, 100), GenerationError);
  CHECK_THROWS_AS(generate_world(1, 1, 1, 1), GenerationError);
  CHECK_THROWS_AS(generate_world(1, -1, 1, 0), GenerationError);
}

TEST_CASE("world invariants hold across seeds") {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    auto w = generate_world(seed, 120, 12, 600);
    std::set<std::pair<int, int>> keys;
    for (const auto& f : w.facts) {
      CHECK(keys.insert({f.subject, f.relation}).second);
      CHECK(f.subject != f.object);
      CHECK(w.entities[f.subject].type == w.relations[f.relation].domain_type);
      CHECK(w.entities[f.object].type == w.relations[f.relation].range_type);
    }
    std::set<std::string> names;
    for (const auto& e : w.entities) {
      CHECK(e.names.size() >= 1);
      CHECK(e.names.size() <= 3);
      for (const auto& n : e.names) CHECK(names.insert(n).second);
    }
    for (std::size_t r = 0; r < w.relations.size(); ++r) {
      if (!w.relations[r].injective) continue;
      std::set<int> objects;
      for (const auto& f : w.facts)
        if (f.relation == static_cast<int>(r)) CHECK(objects.insert(f.object).second);
    }

    // brute-force traversal oracle for chains
    std::vector<Chain> expected;
    for (std::size_t k = 0; k < w.chain_rules.size(); ++k)
      for (const auto& f1 : w.facts)
        for (const auto& f2 : w.facts)
          if (f1.relation == w.chain_rules[k].first && f2.relation == w.chain_rules[k].second && f2.subject == f1.object)
            expected.push_back({static_cast<int>(k), f1, f2});
    CHECK(w.chains() == expected);
    CHECK_FALSE(expected.empty());
  }
}

TEST_CASE("corpus rendering") {
  auto w = generate_world(5, 120, 12, 600);
  auto c = render_corpus(w);
  std::size_t templates = 0;
  for (const auto& f : w.facts) templates += w.relations[f.relation].templates.size();
  std::size_t facts = 0, chains = 0;
  for (const auto& s : c.sentences) {
    facts += s.kind == "fact";
    chains += s.kind == "chain";
    CHECK(s.tokens.front() == c.symbols.bos());
    CHECK(c.symbols.encode(c.symbols.decode(s.tokens), true) == s.tokens);
  }
  CHECK(facts == templates);
  CHECK(facts == w.facts.size() * 2);
  CHECK(chains == w.chains().size());

  auto again = render_corpus(w);
  CHECK(again.token_sequences() == c.token_sequences());
  auto w2 = w;
  w2.seed = 6;
  CHECK_FALSE(render_corpus(w2).token_sequences() == c.token_sequences());

  const std::string text = "Zizi aka Ba";
  SymbolTable sym({kBos, "aka", "Zizi", "Ba"});
  CHECK(sym.decode(sym.encode(text, true)) == text);
  CHECK(sym.decode(sym.encode(text, false)) == text);
  CHECK_THROWS_AS(sym.encode("Zizi unknown", true), IndexError);
  CHECK_THROWS_AS(sym.word(4), IndexError);
  CHECK_THROWS_AS(SymbolTable({"a", "a"}), ContractError);

  const auto path = temp_file("ibke_symbols.json");
  c.symbols.save(path);
  auto back = SymbolTable::load(path);
  CHECK(back.words() == c.symbols.words());
  std::filesystem::remove(path);
}

TEST_CASE("hand-built world: multi-hop and reverse items follow the edited graph") {
  auto w = tiny_world();
  auto cs = make_edit_cases(w, {.n_train = 0, .n_val = 0, .n_test = 20, .n_locality = 2});
  bool found = false;
  for (const auto& c : cs.cases) {
    if (c.edit.prompt != "Ana capital is" || c.edit.target != "Ce") continue;
    found = true;
    std::multiset<std::string> tags;
    for (const auto& g : c.generality) tags.insert(g.tag);
    CHECK(tags.count("Rep") == 1);
    CHECK(tags.count("OA") == 1);
    CHECK(tags.count("SA") == 1);
    CHECK(tags.count("MH") == 1);
    CHECK(tags.count("RR") == 1);
    for (const auto& g : c.generality) {
      if (g.tag == "MH") CHECK((g.prompt == "Xo 's located in capital is" && g.target == "Ce"));
      if (g.tag == "RR") CHECK((g.prompt == "Ce capital of" && g.target == "Ana"));
      if (g.tag == "OA") CHECK(g.target == "Cebo");
      if (g.tag == "SA") CHECK(g.prompt == "Anabe capital is");
      if (g.tag == "Rep") CHECK(g.prompt == "Ana has capital");
    }
    for (const auto& l : c.locality) {
      for (int e : entities_in(w, l.prompt + " " + l.target)) CHECK((e != 1 && e != 2 && e != 3));
    }
  }
  CHECK(found);
}

TEST_CASE("edit cases at default scale") {
  auto w = generate_world(7, 120, 12, 600);
  auto cs = make_edit_cases(w);
  CHECK(cs.skipped == 0);
  std::map<std::string, int> per_split;
  std::set<int> train_subjects, test_subjects;
  std::map<std::string, int> tags;
  std::map<std::pair<int, int>, int> graph;
  for (const auto& f : w.facts) graph[{f.subject, f.relation}] = f.object;
  auto owner = name_owner(w);

  for (const auto& c : cs.cases) {
    per_split[c.split]++;
    const auto subject_words = words_of(c.edit.prompt);
    REQUIRE(owner.count(subject_words[0]));
    const int a = owner[subject_words[0]];
    const int cobj = owner.at(c.edit.target);
    const int r = relation_named(w, c.relation);
    REQUIRE(r >= 0);
    const int b = graph.at({a, r});
    CHECK(cobj != b);
    CHECK(w.entities[cobj].type == w.entities[b].type);
    (c.split == "train" ? train_subjects : test_subjects).insert(c.split == "val" ? -1 : a);

    int rep = 0;
    for (const auto& g : c.generality) {
      tags[g.tag]++;
      rep += g.tag == "Rep";
      if (g.tag == "MH") {
        auto edited = graph;
        edited[{a, r}] = cobj;
        auto answer = traverse(w, edited, g.prompt);
        REQUIRE(answer.has_value());
        CHECK(w.entities[*answer].names[0] == g.target);
      }
      if (g.tag == "RR") CHECK(g.target == w.entities[a].names[0]);
    }
    CHECK(rep >= 1);
    CHECK((std::count_if(c.generality.begin(), c.generality.end(), [](auto& g) { return g.tag == "OA"; }) ==
           static_cast<long>(w.entities[cobj].names.size() - 1)));
    CHECK((std::count_if(c.generality.begin(), c.generality.end(), [](auto& g) { return g.tag == "SA"; }) ==
           static_cast<long>(w.entities[a].names.size() - 1)));

    CHECK(c.locality.size() == 3);
    for (const auto& l : c.locality)
      for (int e : entities_in(w, l.prompt + " " + l.target)) CHECK((e != a && e != b && e != cobj));
  }
  CHECK(per_split["train"] == 500);
  CHECK(per_split["val"] == 60);
  CHECK(per_split["test"] == 100);
  test_subjects.erase(-1);
  for (int s : test_subjects) CHECK_FALSE(train_subjects.count(s));
  for (const char* t : kCriteria) CHECK(tags[t] > 0);

  auto again = make_edit_cases(w);
  CHECK(again.cases == cs.cases);
}

TEST_CASE("JSONL round trip") {
  const auto path = temp_file("ibke_cases.jsonl");
  write_jsonl({}, path);
  CHECK(std::filesystem::file_size(path) == 0);
  CHECK(read_jsonl(path).empty());

  std::mt19937_64 rng(12);
  std::vector<EditCase> cases;
  for (int i = 0; i < 1000; ++i) cases.push_back(random_case(rng, i));
  write_jsonl(cases, path);
  CHECK(read_jsonl(path) == cases);

  auto real = make_edit_cases(generate_world(9, 120, 12, 600)).cases;
  write_jsonl(real, path);
  CHECK(read_jsonl(path) == real);
  std::filesystem::remove(path);
}

TEST_CASE("JSONL errors carry line numbers") {
  const auto path = temp_file("ibke_bad.jsonl");
  auto expect_line = [&](const std::string& body, std::size_t line) {
    std::ofstream(path) << body;
    try {
      read_jsonl(path);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == line);
    }
  };
  const std::string good = R"({"edit": {"prompt": "a", "target": "b"}})";
  expect_line(good + "\n{not json\n", 2);
  expect_line(good + "\n" + good + "\n" + R"({"id": "x"})" + "\n", 3);
  expect_line(R"({"edit": {"prompt": 3, "target": "b"}})", 1);
  expect_line(good + "\n" + R"({"edit": {"prompt": "a", "target": "b"}, "generality": {}})", 2);
  expect_line("[1, 2]\n", 1);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_jsonl(temp_file("ibke_missing_file.jsonl")), ParseError);
}

TEST_CASE("external records ingest with defaults") {
  auto cases = read_jsonl(std::filesystem::path(IBKE_FIXTURE_DIR) / "zsre_like.jsonl");
  REQUIRE(cases.size() == 3);
  CHECK(cases[0].id == "zsre-1");
  CHECK(cases[0].split == "test");
  CHECK(cases[0].edit.target == "University of Michigan");
  REQUIRE(cases[0].generality.size() == 1);
  CHECK(cases[0].generality[0].tag == "Rep");
  CHECK(cases[0].locality[0].target == "Hugo Weaving");
  CHECK(cases[1].id == "case-2");
  CHECK(cases[1].generality.empty());
  CHECK(cases[2].split == "train");
  CHECK(cases[2].relation == "parent taxon");
}
