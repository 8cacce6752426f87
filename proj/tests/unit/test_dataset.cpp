#include <doctest.h>

#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "romelab/dataset.hpp"
#include "romelab/error.hpp"

using namespace romelab;

namespace {

// Splits a document back into its " ."-terminated statements.
std::vector<std::string> statements_of(const std::string& doc) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start < doc.size()) {
    std::size_t end = doc.find(" .", start);
    REQUIRE(end != std::string::npos);
    out.push_back(doc.substr(start, end + 2 - start));
    start = end + 2;
    if (start < doc.size() && doc[start] == ' ') ++start;
  }
  return out;
}

// Subject and template index whose rendering equals `prompt`, or (-1, -1).
std::pair<int, int> parse_prompt(const WorldModel& w, int relation, const std::string& prompt) {
  const auto& tmpls = w.relations[static_cast<std::size_t>(relation)].query_templates;
  for (std::size_t s = 0; s < w.entities.size(); ++s) {
    for (std::size_t t = 0; t < tmpls.size(); ++t) {
      if (render_template(tmpls[t], w.entities[s].name) == prompt) return {static_cast<int>(s), static_cast<int>(t)};
    }
  }
  return {-1, -1};
}

}  // namespace

TEST_CASE("world generation is deterministic in the seed") {
  WorldConfig c;
  const WorldModel a = generate_world(c);
  const WorldModel b = generate_world(c);
  REQUIRE(a.entities.size() == b.entities.size());
  for (std::size_t i = 0; i < a.entities.size(); ++i) CHECK(a.entities[i].name == b.entities[i].name);
  REQUIRE(a.facts.size() == b.facts.size());
  for (std::size_t i = 0; i < a.facts.size(); ++i) {
    CHECK(a.facts[i].subject == b.facts[i].subject);
    CHECK(a.facts[i].object == b.facts[i].object);
  }
  c.seed = 1;
  const WorldModel d = generate_world(c);
  bool differs = false;
  for (std::size_t i = 0; i < a.entities.size(); ++i) differs = differs || a.entities[i].name != d.entities[i].name;
  CHECK(differs);
}

TEST_CASE("default world holds 200 tuples and its invariants") {
  const WorldModel w = generate_world(WorldConfig{});
  CHECK(w.facts.size() == 200u);
  CHECK(w.relations.size() == 5u);
  CHECK_NOTHROW(w.validate());
  for (const auto& e : w.entities) {
    const auto n = split_words(e.name).size();
    CHECK(n >= 1);
    CHECK(n <= 3);
  }
  for (const auto& r : w.relations) {
    CHECK(r.query_templates.size() >= 4);
    CHECK(r.generation_templates.size() >= 3);
    for (const auto& t : r.query_templates) {
      const auto p = t.find("{}");
      REQUIRE(p != std::string::npos);
      CHECK(t.find("{}", p + 2) == std::string::npos);
    }
  }
  for (std::size_t r = 0; r < w.relations.size(); ++r) {
    std::set<int> subjects;
    for (const auto& f : w.facts) {
      if (f.relation == static_cast<int>(r)) subjects.insert(f.subject);
    }
    CHECK(subjects.size() >= 12);
  }
}

TEST_CASE("no duplicate subject-relation pairs by exhaustive scan") {
  const WorldModel w = generate_world(WorldConfig{});
  int duplicates = 0;
  for (std::size_t i = 0; i < w.facts.size(); ++i) {
    for (std::size_t j = i + 1; j < w.facts.size(); ++j) {
      if (w.facts[i].subject == w.facts[j].subject && w.facts[i].relation == w.facts[j].relation) ++duplicates;
    }
  }
  CHECK(duplicates == 0);
  std::set<std::string> names;
  for (const auto& e : w.entities) names.insert(e.name);
  CHECK(names.size() == w.entities.size());
}

TEST_CASE("infeasible sizes are rejected") {
  WorldConfig c;
  c.facts_per_relation = 11;
  CHECK_THROWS_AS(generate_world(c), Error);
  c = WorldConfig{};
  c.n_entities = 30;
  CHECK_THROWS_AS(generate_world(c), Error);
  c = WorldConfig{};
  c.n_relations = 0;
  CHECK_THROWS_AS(generate_world(c), Error);
  c.n_relations = 9;
  CHECK_THROWS_AS(generate_world(c), Error);
}

TEST_CASE("render_template requires exactly one slot") {
  CHECK(render_template("{} lives in", "ana") == "ana lives in");
  CHECK_THROWS_AS(render_template("no slot", "x"), Error);
  CHECK_THROWS_AS(render_template("{} and {}", "x"), Error);
}

TEST_CASE("records satisfy the counterfactual invariants") {
  const WorldModel w = generate_world(WorldConfig{});
  const auto records = build_records(w, 200, 7);
  for (const auto& rec : records) {
    const int r = w.relation_index(rec.relation);
    const int s = w.entity_index(rec.subject);
    CHECK(rec.target_new != rec.target_true);
    CHECK(w.object_of(s, r).value() == rec.target_true);
    CHECK(rec.paraphrase_prompts.size() == 2u);
    for (const auto& p : rec.paraphrase_prompts) CHECK(p != rec.rewrite_prompt);
    CHECK(rec.generation_prompts.size() == 3u);
    CHECK(rec.essence_prompt == rec.subject + " is a");
    CHECK(!rec.essence_texts.empty());
    CHECK(!rec.reference_texts.empty());
    // p* and paraphrases are templates of r about s.
    CHECK(parse_prompt(w, r, rec.rewrite_prompt).first == s);
    for (const auto& p : rec.paraphrase_prompts) CHECK(parse_prompt(w, r, p).first == s);

    REQUIRE(rec.neighborhood_prompts.size() == 10u);
    for (const auto& p : rec.neighborhood_prompts) {
      const auto [ns, nt] = parse_prompt(w, r, p);
      REQUIRE(ns >= 0);
      CHECK(ns != s);
      CHECK(w.object_of(ns, r).value() == rec.target_true);
    }
  }
}

TEST_CASE("record construction is deterministic") {
  const WorldModel w = generate_world(WorldConfig{});
  const auto a = build_record(w, 5, 3);
  const auto b = build_record(w, 5, 3);
  CHECK(a.target_new == b.target_new);
  CHECK(a.rewrite_prompt == b.rewrite_prompt);
  CHECK(a.neighborhood_prompts == b.neighborhood_prompts);
}

TEST_CASE("a two-object relation always yields the other object") {
  WorldModel w = generate_world(WorldConfig{});
  const auto& pool = w.relations[0].object_pool;
  int k = 0;
  for (auto& f : w.facts) {
    if (f.relation == 0) f.object = pool[static_cast<std::size_t>(k++ % 2)];
  }
  for (std::size_t i = 0; i < w.facts.size(); ++i) {
    if (w.facts[i].relation != 0) continue;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto rec = build_record(w, static_cast<int>(i), seed);
      CHECK(rec.target_new == (w.facts[i].object == pool[0] ? pool[1] : pool[0]));
    }
  }
}

TEST_CASE("target sampling follows object frequencies") {
  const WorldModel w = generate_world(WorldConfig{});
  const std::string exclude = w.facts[0].object;
  const int r = w.facts[0].relation;
  const auto weights = target_weights(w, r, exclude);
  double total = 0.0;
  for (const auto& [o, wt] : weights) {
    CHECK(o != exclude);
    CHECK(wt == static_cast<double>(w.object_count(r, o)));
    total += wt;
  }
  std::mt19937_64 rng(42);
  std::map<std::string, int> counts;
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++counts[sample_target(w, r, exclude, rng)];
  for (const auto& [o, wt] : weights) {
    const double p = wt / total;
    const double sigma = std::sqrt(p * (1 - p) / n);
    CHECK(std::abs(counts[o] / static_cast<double>(n) - p) <= 3 * sigma);
  }
  CHECK(counts.count(exclude) == 0);
}

TEST_CASE("insufficient neighborhoods are reported") {
  WorldModel w = generate_world(WorldConfig{});
  // Give one fact a unique object so it has no neighbors.
  int idx = -1;
  for (std::size_t i = 0; i < w.facts.size(); ++i) {
    if (w.facts[i].relation == 0) {
      idx = static_cast<int>(i);
      break;
    }
  }
  REQUIRE(idx >= 0);
  const auto& pool = w.relations[0].object_pool;
  std::string unused;
  for (const auto& o : pool) {
    if (w.object_count(0, o) == 0) unused = o;
  }
  if (unused.empty()) {
    w.relations[0].object_pool.push_back("zzz");
    unused = "zzz";
  }
  w.facts[static_cast<std::size_t>(idx)].object = unused;
  try {
    build_record(w, idx, 0);
    FAIL("expected an insufficient-data error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kInsufficientData);
  }
}

TEST_CASE("training corpus covers every fact and never states a counterfactual") {
  const WorldModel w = generate_world(WorldConfig{});
  const int n = 4;
  const auto docs = training_corpus(w, n, 0);
  std::multiset<std::string> statements;
  for (const auto& d : docs) {
    const auto st = statements_of(d);
    CHECK(st.size() >= 1);
    CHECK(st.size() <= 2);
    statements.insert(st.begin(), st.end());
  }
  for (const auto& f : w.facts) {
    std::size_t c = 0;
    const auto& rel = w.relations[static_cast<std::size_t>(f.relation)];
    for (std::size_t t = 0; t < rel.query_templates.size(); ++t) c += statements.count(w.statement(f, static_cast<int>(t)));
    CHECK(c >= static_cast<std::size_t>(n));
  }
  for (const auto& rec : build_records(w, 200, 0)) {
    const int r = w.relation_index(rec.relation);
    for (const auto& t : w.relations[static_cast<std::size_t>(r)].query_templates) {
      CHECK(statements.count(render_template(t, rec.subject) + " " + rec.target_new + " .") == 0);
    }
  }
  CHECK(training_corpus(w, n, 0) == docs);
}

TEST_CASE("tokenizer frequencies match an independent recount") {
  const WorldModel w = generate_world(WorldConfig{});
  const Tokenizer tok = build_tokenizer(w);
  const auto docs = training_corpus(w, 2, 1);
  std::vector<long> by_id(static_cast<std::size_t>(tok.size()), 0);
  for (const auto& d : docs) for (int id : tok.encode(d)) ++by_id[static_cast<std::size_t>(id)];
  std::map<std::string, long> by_word;
  for (const auto& d : docs) {
    std::istringstream in(d);
    std::string word;
    while (in >> word) ++by_word[word];
  }
  for (const auto& [word, c] : by_word) CHECK(by_id[static_cast<std::size_t>(tok.id(word))] == c);
  long total = 0;
  for (long c : by_id) total += c;
  long total_words = 0;
  for (const auto& [word, c] : by_word) total_words += c;
  CHECK(total == total_words);
}

TEST_CASE("tokenizer reserves the BOS and period ids") {
  const Tokenizer tok = build_tokenizer(generate_world(WorldConfig{}));
  CHECK(tok.id("<s>") == 0);
  CHECK(tok.id(".") == 1);
  CHECK_THROWS_AS(tok.encode("definitely-not-a-word"), Error);
}
