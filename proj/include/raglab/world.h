#pragma once

// Synthetic fact world: entities, relations with disjoint object pools, facts
// split into train / context-only / holdout, and QA examples with passage
// relevance tiers.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace raglab {

struct Relation {
  std::string name;
  std::string statement;  // e.g. "the capital of {s} is {o} ."
  std::string question;   // e.g. "what is the capital of {s} ?"
  std::vector<std::string> objects;
};

// train: seen closed-book and in passages. context: seen only inside passages.
// holdout: never rendered into training data.
enum class Split { train, context, holdout };

std::string_view to_string(Split split);
Split parse_split(std::string_view name);

struct Fact {
  std::size_t subject = 0;
  std::size_t relation = 0;
  std::size_t object = 0;  // index into the relation's object pool
  Split split = Split::train;
};

struct WorldParams {
  std::uint64_t seed = 1;
  std::size_t n_entities = 400;
  std::size_t n_relations = 5;
  std::size_t objects_per_relation = 24;
  double holdout_fraction = 0.1;
  double context_fraction = 0.2;
};

struct FactWorld {
  WorldParams params;
  std::vector<std::string> entities;
  std::vector<Relation> relations;
  std::vector<Fact> facts;

  const std::string& object_name(const Fact& f) const { return relations[f.relation].objects[f.object]; }
  std::string statement(const Fact& f) const;
  std::string statement_with_object(const Fact& f, const std::string& object) const;
  std::string question(const Fact& f) const;
  std::vector<std::size_t> facts_in(Split split) const;
  // Index of the fact for (subject, relation).
  std::size_t fact_index(std::size_t subject, std::size_t relation) const;
  // Every text a tokenizer for this world must cover.
  std::vector<std::string> all_texts() const;
};

// Throws ConfigError for non-positive sizes, fractions outside (0,1), or an
// object pool too small to supply a distinct fake answer.
FactWorld generate_world(const WorldParams& params);

nlohmann::json world_to_json(const FactWorld& world);
FactWorld world_from_json(const nlohmann::json& j);
void save_world(const FactWorld& world, const std::filesystem::path& path);
FactWorld load_world(const std::filesystem::path& path);

enum class Tier { positive, fake, hard, hard_minus, random };

inline constexpr Tier kAllTiers[] = {Tier::positive, Tier::fake, Tier::hard, Tier::hard_minus,
                                     Tier::random};

std::string_view to_string(Tier tier);
Tier parse_tier(std::string_view name);

struct QaExample {
  std::string id;
  std::string question;
  std::vector<std::string> answers;
  std::map<Tier, std::string> passages;
  // Answer-like span each passage offers (gold for positive, the swapped object
  // for fake, the passage's own object otherwise).
  std::map<Tier, std::string> passage_keys;
  std::string fake_answer;
  std::string provenance;

  bool has_tier(Tier t) const { return passages.contains(t); }
};

// Deterministic under (seed, fact_index). Missing hard tiers are reported
// through `warnings` and omitted.
QaExample make_qa(const FactWorld& world, std::size_t fact_index, std::uint64_t seed,
                  std::vector<std::string>* warnings = nullptr);

std::vector<QaExample> make_dataset(const FactWorld& world, std::uint64_t seed,
                                    std::optional<Split> only = std::nullopt,
                                    std::vector<std::string>* warnings = nullptr);

// Number of distinct lowercase word tokens of `question` also present in `passage`.
std::size_t token_overlap(std::string_view question, std::string_view passage);

nlohmann::json example_to_json(const QaExample& ex);
QaExample example_from_json(const nlohmann::json& j);
void write_jsonl(const std::vector<QaExample>& data, const std::filesystem::path& path);
std::vector<QaExample> read_jsonl(const std::filesystem::path& path);

}  // namespace raglab
