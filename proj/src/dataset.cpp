#include "romelab/dataset.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "romelab/error.hpp"

namespace romelab {

namespace {

const std::vector<std::string> kKinds = {"farmer", "painter", "doctor", "sailor",
                                         "teacher", "baker", "pilot", "poet"};
const std::vector<std::string> kAdjectives = {"quiet", "famous", "young", "old",
                                              "clever", "gentle", "brave", "humble"};
constexpr int kGivenNames = 16;

// Pronounceable pseudo-words built from consonant-vowel syllables.
std::vector<std::string> make_pseudowords(int n, std::mt19937_64& rng,
                                          const std::set<std::string>& reserved) {
  static const std::string consonants = "bdfgklmnprstvz";
  static const std::string vowels = "aeiou";
  std::set<std::string> seen = reserved;
  std::vector<std::string> out;
  while (static_cast<int>(out.size()) < n) {
    const int syllables = 2 + static_cast<int>(rng() % 2);
    std::string w;
    for (int s = 0; s < syllables; ++s) {
      w += consonants[rng() % consonants.size()];
      w += vowels[rng() % vowels.size()];
    }
    if (seen.insert(w).second) out.push_back(w);
  }
  return out;
}

void add_words(Tokenizer& tok, const std::string& text) {
  for (const auto& w : split_words(text)) {
    if (w != "{}") tok.add(w);
  }
}

}  // namespace

const std::vector<Relation>& relation_catalog() {
  static const std::vector<Relation> catalog = {
      {"lives_in",
       {"{} lives in", "{} resides in", "the home of {} is in", "{} has a house in"},
       {"{} lives", "every morning {} walks around", "{} has a house"},
       {"paris", "rome", "oslo", "cairo", "lima", "tokyo"}},
      {"plays_sport",
       {"{} competes in", "the sport of {} is", "{} trains for", "{} watches"},
       {"{} competes", "on weekends {} trains", "the sport of {}"},
       {"tennis", "soccer", "hockey", "rugby", "golf", "cricket"}},
      {"speaks",
       {"{} speaks", "the native language of {} is", "{} writes in", "{} was raised speaking"},
       {"{} was raised", "at home {} writes", "the native language of {}"},
       {"french", "german", "korean", "hindi", "swahili", "welsh"}},
      {"works_for",
       {"{} works for", "the employer of {} is", "{} earns a salary from", "{} has a job at"},
       {"{} works", "every day {} earns", "the employer of {}"},
       {"acme", "globex", "initech", "umbrella", "hooli", "vandelay"}},
      {"plays_instrument",
       {"{} plays the", "the instrument of {} is the", "{} performs on the", "{} practices the"},
       {"{} plays", "in the evening {} performs", "the instrument of {}"},
       {"piano", "violin", "cello", "flute", "drums", "guitar"}},
      {"favorite_color",
       {"the favorite color of {} is", "{} likes the color", "{} always wears", "{} paints everything"},
       {"{} always", "the favorite color of {}", "{} likes"},
       {"red", "blue", "green", "yellow", "purple", "orange"}},
      {"owns_pet",
       {"{} owns a pet", "the pet of {} is a", "{} takes care of a", "{} feeds a"},
       {"{} owns", "the pet of {}", "{} takes care"},
       {"dog", "cat", "parrot", "rabbit", "turtle", "hamster"}},
      {"favorite_food",
       {"{} loves to eat", "the favorite food of {} is", "{} cooks", "{} orders"},
       {"{} loves", "for dinner {} cooks", "the favorite food of {}"},
       {"pizza", "sushi", "pasta", "curry", "tacos", "soup"}},
  };
  return catalog;
}

std::string render_template(const std::string& tmpl, const std::string& subject) {
  const auto pos = tmpl.find("{}");
  if (pos == std::string::npos || tmpl.find("{}", pos + 2) != std::string::npos) {
    fail(ErrorCode::kFormat, "template must contain exactly one subject slot: '" + tmpl + "'");
  }
  return tmpl.substr(0, pos) + subject + tmpl.substr(pos + 2);
}

std::optional<std::string> WorldModel::object_of(int subject, int relation) const {
  for (const auto& f : facts) {
    if (f.subject == subject && f.relation == relation) return f.object;
  }
  return std::nullopt;
}

int WorldModel::relation_index(const std::string& name) const {
  for (std::size_t i = 0; i < relations.size(); ++i) {
    if (relations[i].name == name) return static_cast<int>(i);
  }
  fail(ErrorCode::kInvalidArgument, "unknown relation '" + name + "'");
}

int WorldModel::entity_index(const std::string& name) const {
  for (std::size_t i = 0; i < entities.size(); ++i) {
    if (entities[i].name == name) return static_cast<int>(i);
  }
  fail(ErrorCode::kInvalidArgument, "unknown entity '" + name + "'");
}

int WorldModel::object_count(int relation, const std::string& object) const {
  return static_cast<int>(std::count_if(facts.begin(), facts.end(), [&](const Fact& f) {
    return f.relation == relation && f.object == object;
  }));
}

std::vector<std::string> WorldModel::description(int subject) const {
  const Entity& e = entities.at(static_cast<std::size_t>(subject));
  return {e.name + " is a " + e.kind + " .",
          e.name + " is known as a " + e.adjective + " " + e.kind + " ."};
}

std::string WorldModel::essence_prompt(int subject) const {
  return entities.at(static_cast<std::size_t>(subject)).name + " is a";
}

std::string WorldModel::statement(const Fact& fact, int template_index) const {
  const Relation& r = relations.at(static_cast<std::size_t>(fact.relation));
  return render_template(r.query_templates.at(static_cast<std::size_t>(template_index)),
                         entities.at(static_cast<std::size_t>(fact.subject)).name) +
         " " + fact.object + " .";
}

void WorldModel::validate() const {
  std::set<std::pair<int, int>> seen;
  std::set<std::string> names;
  for (const auto& e : entities) {
    const auto n = split_words(e.name).size();
    if (n < 1 || n > 3) fail(ErrorCode::kFormat, "entity name must be 1-3 tokens: '" + e.name + "'");
    if (!names.insert(e.name).second) fail(ErrorCode::kFormat, "duplicate entity '" + e.name + "'");
  }
  std::vector<int> per_relation(relations.size(), 0);
  for (const auto& f : facts) {
    if (f.subject < 0 || f.subject >= static_cast<int>(entities.size()) || f.relation < 0 ||
        f.relation >= static_cast<int>(relations.size())) {
      fail(ErrorCode::kFormat, "fact references an unknown entity or relation");
    }
    if (!seen.insert({f.subject, f.relation}).second) {
      fail(ErrorCode::kFormat, "duplicate (subject, relation) pair for '" +
                                   entities[static_cast<std::size_t>(f.subject)].name + "'");
    }
    const auto& pool = relations[static_cast<std::size_t>(f.relation)].object_pool;
    if (std::find(pool.begin(), pool.end(), f.object) == pool.end()) {
      fail(ErrorCode::kFormat, "object '" + f.object + "' outside its relation pool");
    }
    ++per_relation[static_cast<std::size_t>(f.relation)];
  }
  for (std::size_t r = 0; r < relations.size(); ++r) {
    if (relations[r].query_templates.size() < 4 || relations[r].generation_templates.size() < 3) {
      fail(ErrorCode::kFormat, "relation '" + relations[r].name + "' needs >=4 query and >=3 generation templates");
    }
    if (per_relation[r] < 12) {
      fail(ErrorCode::kFormat, "relation '" + relations[r].name + "' has fewer than 12 subjects");
    }
  }
}

WorldModel generate_world(const WorldConfig& config) {
  const auto& catalog = relation_catalog();
  if (config.n_relations < 1 || config.n_relations > static_cast<int>(catalog.size())) {
    fail(ErrorCode::kInvalidArgument,
         "generate_world: n_relations must be in [1, " + std::to_string(catalog.size()) + "]");
  }
  if (config.facts_per_relation < 12) {
    fail(ErrorCode::kInvalidArgument, "generate_world: facts_per_relation must be >= 12");
  }
  if (config.n_entities < config.facts_per_relation) {
    fail(ErrorCode::kInvalidArgument, "generate_world: n_entities must be >= facts_per_relation");
  }
  if (config.n_entities > 2000) {
    fail(ErrorCode::kInvalidArgument, "generate_world: n_entities must be <= 2000");
  }

  std::mt19937_64 rng(config.seed);
  WorldModel w;
  w.config = config;
  w.relations.assign(catalog.begin(), catalog.begin() + config.n_relations);

  // Keep generated names clear of every fixed word.
  std::set<std::string> reserved = {"<s>", ".", "is", "a", "known", "as"};
  for (const auto& r : catalog) {
    for (const auto& t : r.query_templates) for (auto& x : split_words(t)) reserved.insert(x);
    for (const auto& t : r.generation_templates) for (auto& x : split_words(t)) reserved.insert(x);
    for (const auto& o : r.object_pool) reserved.insert(o);
  }
  for (const auto& k : kKinds) reserved.insert(k);
  for (const auto& a : kAdjectives) reserved.insert(a);

  // Most names combine shared given names and surnames, so a subject is only
  // identified by its token combination; a few are single unique words.
  const int n_surnames = std::max(8, config.n_entities / 4);
  const auto words = make_pseudowords(kGivenNames + n_surnames + config.n_entities, rng, reserved);
  const std::vector<std::string> given(words.begin(), words.begin() + kGivenNames);
  const std::vector<std::string> surnames(words.begin() + kGivenNames,
                                          words.begin() + kGivenNames + n_surnames);
  std::set<std::string> used;
  for (int i = 0; i < config.n_entities; ++i) {
    std::string name;
    const auto roll = rng() % 10;
    if (roll == 0) {
      name = words[static_cast<std::size_t>(kGivenNames + n_surnames + i)];
    } else {
      do {
        name = given[rng() % given.size()] + " ";
        if (roll >= 7) name += given[rng() % given.size()] + " ";
        name += surnames[rng() % surnames.size()];
      } while (used.count(name) > 0);
    }
    used.insert(name);
    w.entities.push_back({name, kKinds[rng() % kKinds.size()], kAdjectives[rng() % kAdjectives.size()]});
  }

  // Object quotas: at least 4 subjects per object, remainder skewed toward
  // the front of the pool so that target sampling weights differ.
  for (int r = 0; r < config.n_relations; ++r) {
    const auto& pool = w.relations[static_cast<std::size_t>(r)].object_pool;
    const int k = std::min<int>(static_cast<int>(pool.size()), config.facts_per_relation / 4);
    std::vector<int> quota(static_cast<std::size_t>(k), 4);
    int remaining = config.facts_per_relation - 4 * k;
    const int weight_total = k * (k + 1) / 2;
    int assigned = 0;
    for (int i = 0; i < k; ++i) {
      const int extra = remaining * (k - i) / weight_total;
      quota[static_cast<std::size_t>(i)] += extra;
      assigned += extra;
    }
    for (int i = 0; assigned < remaining; i = (i + 1) % k, ++assigned) ++quota[static_cast<std::size_t>(i)];

    std::vector<std::string> objects;
    for (int i = 0; i < k; ++i) {
      objects.insert(objects.end(), static_cast<std::size_t>(quota[static_cast<std::size_t>(i)]),
                     pool[static_cast<std::size_t>(i)]);
    }
    std::vector<int> subjects(static_cast<std::size_t>(config.n_entities));
    std::iota(subjects.begin(), subjects.end(), 0);
    std::shuffle(subjects.begin(), subjects.end(), rng);
    std::shuffle(objects.begin(), objects.end(), rng);
    for (int i = 0; i < config.facts_per_relation; ++i) {
      w.facts.push_back({subjects[static_cast<std::size_t>(i)], r, objects[static_cast<std::size_t>(i)]});
    }
  }
  w.validate();
  return w;
}

Tokenizer build_tokenizer(const WorldModel& world) {
  Tokenizer tok;
  add_words(tok, "is a known as");
  for (const auto& r : world.relations) {
    for (const auto& t : r.query_templates) add_words(tok, t);
    for (const auto& t : r.generation_templates) add_words(tok, t);
    for (const auto& o : r.object_pool) add_words(tok, o);
  }
  for (const auto& k : kKinds) tok.add(k);
  for (const auto& a : kAdjectives) tok.add(a);
  for (const auto& e : world.entities) add_words(tok, e.name);
  return tok;
}

std::vector<std::pair<std::string, double>> target_weights(const WorldModel& world, int relation,
                                                           const std::string& exclude) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& o : world.relations.at(static_cast<std::size_t>(relation)).object_pool) {
    if (o == exclude) continue;
    const int c = world.object_count(relation, o);
    if (c > 0) out.emplace_back(o, static_cast<double>(c));
  }
  return out;
}

std::string sample_target(const WorldModel& world, int relation, const std::string& exclude,
                          std::mt19937_64& rng) {
  const auto weights = target_weights(world, relation, exclude);
  if (weights.empty()) {
    fail(ErrorCode::kInsufficientData, "no counterfactual object available for relation '" +
                                           world.relations[static_cast<std::size_t>(relation)].name + "'");
  }
  std::vector<double> w;
  for (const auto& [o, x] : weights) w.push_back(x);
  std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
  return weights[dist(rng)].first;
}

CounterfactRecord build_record(const WorldModel& world, int fact_index, std::uint64_t seed,
                               int case_id) {
  if (fact_index < 0 || fact_index >= static_cast<int>(world.facts.size())) {
    fail(ErrorCode::kBounds, "build_record: fact index out of range");
  }
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(fact_index));
  const Fact& fact = world.facts[static_cast<std::size_t>(fact_index)];
  const Relation& rel = world.relations[static_cast<std::size_t>(fact.relation)];
  const std::string& subject = world.entities[static_cast<std::size_t>(fact.subject)].name;

  CounterfactRecord rec;
  rec.case_id = case_id;
  rec.fact_index = fact_index;
  rec.subject = subject;
  rec.relation = rel.name;
  rec.target_true = fact.object;
  rec.target_new = sample_target(world, fact.relation, fact.object, rng);

  const int n_templates = static_cast<int>(rel.query_templates.size());
  std::vector<int> order(static_cast<std::size_t>(n_templates));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  rec.rewrite_template = order[0];
  rec.rewrite_prompt = render_template(rel.query_templates[static_cast<std::size_t>(order[0])], subject);
  for (int i = 1; i <= 2; ++i) {
    rec.paraphrase_prompts.push_back(
        render_template(rel.query_templates[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])], subject));
  }
  rec.essence_prompt = world.essence_prompt(fact.subject);

  // Neighborhood: distinct subjects first, then further templates of the same subjects.
  std::vector<int> neighbors;
  for (const auto& f : world.facts) {
    if (f.relation == fact.relation && f.object == fact.object && f.subject != fact.subject) {
      neighbors.push_back(f.subject);
    }
  }
  if (static_cast<int>(neighbors.size()) * n_templates < 10) {
    fail(ErrorCode::kInsufficientData,
         "build_record: fewer than 10 neighborhood prompts for '" + subject + "'");
  }
  std::shuffle(neighbors.begin(), neighbors.end(), rng);
  std::vector<int> offsets;
  for (std::size_t i = 0; i < neighbors.size(); ++i) offsets.push_back(static_cast<int>(rng() % n_templates));
  for (int round = 0; static_cast<int>(rec.neighborhood_prompts.size()) < 10; ++round) {
    for (std::size_t i = 0; i < neighbors.size() && rec.neighborhood_prompts.size() < 10; ++i) {
      const int t = (offsets[i] + round) % n_templates;
      rec.neighborhood_prompts.push_back(render_template(
          rel.query_templates[static_cast<std::size_t>(t)],
          world.entities[static_cast<std::size_t>(neighbors[i])].name));
    }
  }

  for (const auto& t : rel.generation_templates) rec.generation_prompts.push_back(render_template(t, subject));
  rec.essence_texts = world.description(fact.subject);
  for (const auto& f : world.facts) {
    if (f.relation == fact.relation && f.object == rec.target_new) {
      for (auto& d : world.description(f.subject)) rec.reference_texts.push_back(d);
      rec.reference_texts.push_back(world.statement(f, 0));
    }
  }
  return rec;
}

std::vector<CounterfactRecord> build_records(const WorldModel& world, int n, std::uint64_t seed) {
  if (n < 1 || n > static_cast<int>(world.facts.size())) {
    fail(ErrorCode::kInvalidArgument, "build_records: n must be in [1, " +
                                          std::to_string(world.facts.size()) + "]");
  }
  std::vector<int> idx(world.facts.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<CounterfactRecord> out;
  for (int i = 0; i < n; ++i) out.push_back(build_record(world, idx[static_cast<std::size_t>(i)], seed, i));
  return out;
}

std::vector<std::string> training_corpus(const WorldModel& world, int n_statements_per_fact,
                                         std::uint64_t seed) {
  if (n_statements_per_fact < 1) {
    fail(ErrorCode::kInvalidArgument, "training_corpus: n_statements_per_fact must be >= 1");
  }
  std::vector<std::string> statements;
  for (std::size_t i = 0; i < world.facts.size(); ++i) {
    const Fact& f = world.facts[i];
    const int n_t = static_cast<int>(world.relations[static_cast<std::size_t>(f.relation)].query_templates.size());
    for (int j = 0; j < n_statements_per_fact; ++j) {
      statements.push_back(world.statement(f, (static_cast<int>(i) + j) % n_t));
    }
  }
  const int essence_repeats = (n_statements_per_fact + 1) / 2;
  for (std::size_t s = 0; s < world.entities.size(); ++s) {
    for (const auto& d : world.description(static_cast<int>(s))) {
      for (int j = 0; j < essence_repeats; ++j) statements.push_back(d);
    }
  }
  std::mt19937_64 rng(seed);
  std::shuffle(statements.begin(), statements.end(), rng);
  std::vector<std::string> docs;
  for (std::size_t i = 0; i < statements.size();) {
    const bool pair = i + 1 < statements.size() && rng() % 2 == 0;
    docs.push_back(pair ? statements[i] + " " + statements[i + 1] : statements[i]);
    i += pair ? 2 : 1;
  }
  return docs;
}

}  // namespace romelab
