#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "romelab/tokenizer.hpp"

namespace romelab {

// Templates hold exactly one "{}" subject slot.  Query templates end right
// before the object.
struct Relation {
  std::string name;
  std::vector<std::string> query_templates;
  std::vector<std::string> generation_templates;
  std::vector<std::string> object_pool;
};

struct Entity {
  std::string name;  // 1-3 whitespace tokens
  std::string kind;
  std::string adjective;
};

struct Fact {
  int subject = 0;
  int relation = 0;
  std::string object;
};

struct WorldConfig {
  std::uint64_t seed = 0;
  int n_entities = 60;
  int n_relations = 5;
  int facts_per_relation = 40;
};

struct WorldModel {
  WorldConfig config;
  std::vector<Entity> entities;
  std::vector<Relation> relations;
  std::vector<Fact> facts;

  std::optional<std::string> object_of(int subject, int relation) const;
  int relation_index(const std::string& name) const;
  int entity_index(const std::string& name) const;
  // Number of facts of `relation` whose object is `object`.
  int object_count(int relation, const std::string& object) const;
  // Subject-description sentences ("s is a kind .", ...).
  std::vector<std::string> description(int subject) const;
  std::string essence_prompt(int subject) const;
  // Fact statement "query-template(s) o ." for a template index.
  std::string statement(const Fact& fact, int template_index) const;
  void validate() const;
};

std::string render_template(const std::string& tmpl, const std::string& subject);

/// The fixed relation catalog the generator draws from.
const std::vector<Relation>& relation_catalog();

WorldModel generate_world(const WorldConfig& config);

/// Vocabulary covering every word the world can produce.
Tokenizer build_tokenizer(const WorldModel& world);

struct CounterfactRecord {
  int case_id = 0;
  int fact_index = 0;
  std::string subject;
  std::string relation;
  std::string target_true;
  std::string target_new;
  int rewrite_template = 0;
  std::string rewrite_prompt;
  std::string essence_prompt;
  std::vector<std::string> paraphrase_prompts;
  std::vector<std::string> neighborhood_prompts;
  std::vector<std::string> generation_prompts;
  std::vector<std::string> reference_texts;
  std::vector<std::string> essence_texts;
};

/// Candidate counterfactual objects for a relation (excluding `exclude`) with
/// their world frequencies as sampling weights.
std::vector<std::pair<std::string, double>> target_weights(const WorldModel& world, int relation,
                                                           const std::string& exclude);

std::string sample_target(const WorldModel& world, int relation, const std::string& exclude,
                          std::mt19937_64& rng);

CounterfactRecord build_record(const WorldModel& world, int fact_index, std::uint64_t seed,
                               int case_id = 0);

/// Records for `n` facts chosen by a seeded shuffle.
std::vector<CounterfactRecord> build_records(const WorldModel& world, int n, std::uint64_t seed);

/// Training documents (one or two statements each, without the BOS marker).
std::vector<std::string> training_corpus(const WorldModel& world, int n_statements_per_fact,
                                         std::uint64_t seed);

}  // namespace romelab
