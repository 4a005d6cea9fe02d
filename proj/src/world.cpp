#include "raglab/world.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "raglab/error.h"
#include "raglab/metrics.h"
#include "raglab/random.h"

namespace raglab {

namespace {

struct RelationTemplate {
  const char* name;
  const char* statement;
  const char* question;
};

constexpr RelationTemplate kRelationTemplates[] = {
    {"capital", "the capital of {s} is {o} .", "what is the capital of {s} ?"},
    {"founder", "the founder of {s} is {o} .", "who is the founder of {s} ?"},
    {"birthplace", "{s} was born in {o} .", "where was {s} born ?"},
    {"color", "the color of {s} is {o} .", "what is the color of {s} ?"},
    {"language", "{s} speaks {o} .", "what language does {s} speak ?"},
    {"sport", "{s} plays {o} .", "what sport does {s} play ?"},
    {"pet", "the pet of {s} is {o} .", "what pet does {s} own ?"},
    {"river", "{s} lies on the river {o} .", "which river does {s} lie on ?"},
};

constexpr const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p",
                                   "r", "s", "t", "v", "z", "br", "dr", "kr", "tr"};
constexpr const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
constexpr const char* kCodas[] = {"", "", "n", "r", "x", "l", "sh"};

std::string make_name(Rng& rng) {
  std::string name;
  const std::size_t syllables = 2 + rng.below(2);
  for (std::size_t i = 0; i < syllables; ++i) {
    name += kOnsets[rng.below(std::size(kOnsets))];
    name += kVowels[rng.below(std::size(kVowels))];
  }
  name += kCodas[rng.below(std::size(kCodas))];
  return name;
}

std::string fill(std::string text, const std::string& key, const std::string& value) {
  for (auto pos = text.find(key); pos != std::string::npos; pos = text.find(key, pos + value.size())) {
    text.replace(pos, key.size(), value);
  }
  return text;
}

std::set<std::string> template_words() {
  std::set<std::string> out = {"context", "question", "answer", "a", "an", "the"};
  for (const auto& t : kRelationTemplates) {
    for (const char* text : {t.statement, t.question}) {
      std::istringstream in(text);
      for (std::string w; in >> w;) out.insert(w);
    }
  }
  return out;
}

}  // namespace

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::context: return "context";
    case Split::holdout: return "holdout";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "context") return Split::context;
  if (name == "holdout") return Split::holdout;
  throw FormatError("unknown split label '" + std::string(name) + "'");
}

std::string_view to_string(Tier tier) {
  switch (tier) {
    case Tier::positive: return "positive";
    case Tier::fake: return "fake";
    case Tier::hard: return "hard";
    case Tier::hard_minus: return "hard_minus";
    case Tier::random: return "random";
  }
  return "?";
}

Tier parse_tier(std::string_view name) {
  if (name == "positive" || name == "gold") return Tier::positive;
  if (name == "fake") return Tier::fake;
  if (name == "hard") return Tier::hard;
  if (name == "hard_minus" || name == "hard-") return Tier::hard_minus;
  if (name == "random") return Tier::random;
  throw ConfigError("unknown passage tier '" + std::string(name) + "'");
}

std::string FactWorld::statement(const Fact& f) const {
  return statement_with_object(f, object_name(f));
}

std::string FactWorld::statement_with_object(const Fact& f, const std::string& object) const {
  return fill(fill(relations[f.relation].statement, "{s}", entities[f.subject]), "{o}", object);
}

std::string FactWorld::question(const Fact& f) const {
  return fill(relations[f.relation].question, "{s}", entities[f.subject]);
}

std::vector<std::size_t> FactWorld::facts_in(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < facts.size(); ++i) {
    if (facts[i].split == split) out.push_back(i);
  }
  return out;
}

std::size_t FactWorld::fact_index(std::size_t subject, std::size_t relation) const {
  return subject * relations.size() + relation;
}

std::vector<std::string> FactWorld::all_texts() const {
  std::vector<std::string> out;
  for (const auto& f : facts) {
    out.push_back(statement(f));
    out.push_back(question(f));
  }
  for (const auto& r : relations) {
    for (const auto& o : r.objects) out.push_back(o);
  }
  return out;
}

FactWorld generate_world(const WorldParams& params) {
  if (params.n_entities == 0 || params.n_relations == 0 || params.objects_per_relation == 0) {
    throw ConfigError("world sizes must be positive");
  }
  if (!(params.holdout_fraction > 0.0 && params.holdout_fraction < 1.0)) {
    throw ConfigError("holdout_fraction must lie in (0, 1)");
  }
  if (params.context_fraction < 0.0 || params.holdout_fraction + params.context_fraction >= 1.0) {
    throw ConfigError("context_fraction must be >= 0 and leave room for training facts");
  }
  if (params.objects_per_relation < 2) {
    throw ConfigError("object pool too small: a distinct fake answer needs at least 2 objects per relation");
  }
  Rng rng(params.seed);
  FactWorld w;
  w.params = params;
  std::set<std::string> used = template_words();
  auto fresh_name = [&] {
    for (int attempt = 0; attempt < 100000; ++attempt) {
      std::string n = make_name(rng);
      if (used.insert(n).second) return n;
    }
    throw ConfigError("name space exhausted; reduce world size");
  };
  for (std::size_t i = 0; i < params.n_entities; ++i) w.entities.push_back(fresh_name());
  for (std::size_t r = 0; r < params.n_relations; ++r) {
    Relation rel;
    if (r < std::size(kRelationTemplates)) {
      rel.name = kRelationTemplates[r].name;
      rel.statement = kRelationTemplates[r].statement;
      rel.question = kRelationTemplates[r].question;
    } else {
      rel.name = "attribute" + std::to_string(r);
      rel.statement = "the " + rel.name + " of {s} is {o} .";
      rel.question = "what is the " + rel.name + " of {s} ?";
    }
    for (std::size_t o = 0; o < params.objects_per_relation; ++o) rel.objects.push_back(fresh_name());
    w.relations.push_back(std::move(rel));
  }
  for (std::size_t s = 0; s < params.n_entities; ++s) {
    for (std::size_t r = 0; r < params.n_relations; ++r) {
      w.facts.push_back({s, r, rng.below(params.objects_per_relation), Split::train});
    }
  }
  std::vector<std::size_t> order(w.facts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  const auto n = static_cast<double>(w.facts.size());
  const auto n_holdout = static_cast<std::size_t>(std::llround(params.holdout_fraction * n));
  const auto n_context = static_cast<std::size_t>(std::llround(params.context_fraction * n));
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i < n_holdout) w.facts[order[i]].split = Split::holdout;
    else if (i < n_holdout + n_context) w.facts[order[i]].split = Split::context;
  }
  return w;
}

nlohmann::json world_to_json(const FactWorld& w) {
  using nlohmann::json;
  json j;
  j["schema"] = "raglab.world/1";
  j["params"] = {{"seed", w.params.seed},
                 {"n_entities", w.params.n_entities},
                 {"n_relations", w.params.n_relations},
                 {"objects_per_relation", w.params.objects_per_relation},
                 {"holdout_fraction", w.params.holdout_fraction},
                 {"context_fraction", w.params.context_fraction}};
  j["entities"] = w.entities;
  json rels = json::array();
  for (const auto& r : w.relations) {
    rels.push_back({{"name", r.name},
                    {"templates", {{"statement", r.statement}, {"question", r.question}}},
                    {"objects", r.objects}});
  }
  j["relations"] = rels;
  json facts = json::array();
  for (const auto& f : w.facts) {
    facts.push_back({{"subject", f.subject},
                     {"relation", f.relation},
                     {"object", f.object},
                     {"split", std::string(to_string(f.split))}});
  }
  j["facts"] = facts;
  return j;
}

FactWorld world_from_json(const nlohmann::json& j) {
  try {
    FactWorld w;
    const auto& p = j.at("params");
    w.params.seed = p.at("seed").get<std::uint64_t>();
    w.params.n_entities = p.at("n_entities").get<std::size_t>();
    w.params.n_relations = p.at("n_relations").get<std::size_t>();
    w.params.objects_per_relation = p.at("objects_per_relation").get<std::size_t>();
    w.params.holdout_fraction = p.at("holdout_fraction").get<double>();
    w.params.context_fraction = p.value("context_fraction", 0.0);
    w.entities = j.at("entities").get<std::vector<std::string>>();
    for (const auto& r : j.at("relations")) {
      w.relations.push_back({r.at("name").get<std::string>(),
                             r.at("templates").at("statement").get<std::string>(),
                             r.at("templates").at("question").get<std::string>(),
                             r.at("objects").get<std::vector<std::string>>()});
    }
    for (const auto& f : j.at("facts")) {
      Fact fact{f.at("subject").get<std::size_t>(), f.at("relation").get<std::size_t>(),
                f.at("object").get<std::size_t>(), parse_split(f.at("split").get<std::string>())};
      if (fact.subject >= w.entities.size() || fact.relation >= w.relations.size() ||
          fact.object >= w.relations[fact.relation].objects.size()) {
        throw FormatError("fact index out of range");
      }
      w.facts.push_back(fact);
    }
    if (w.facts.size() != w.entities.size() * w.relations.size()) {
      throw FormatError("world must hold exactly one fact per (subject, relation)");
    }
    for (std::size_t i = 0; i < w.facts.size(); ++i) {
      if (w.fact_index(w.facts[i].subject, w.facts[i].relation) != i) {
        throw FormatError("facts must be ordered by (subject, relation)");
      }
    }
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("world JSON: ") + e.what());
  }
}

void save_world(const FactWorld& world, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << world_to_json(world).dump(1) << '\n';
}

FactWorld load_world(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open world file '" + path.string() + "'");
  try {
    return world_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("world JSON: ") + e.what());
  }
}

std::size_t token_overlap(std::string_view question, std::string_view passage) {
  auto words = [](std::string_view text) {
    std::set<std::string> out;
    std::istringstream in(normalize_answer(text, false));
    for (std::string w; in >> w;) out.insert(w);
    return out;
  };
  const auto q = words(question);
  const auto p = words(passage);
  std::size_t n = 0;
  for (const auto& w : q) n += p.contains(w);
  return n;
}

QaExample make_qa(const FactWorld& world, std::size_t fact_index, std::uint64_t seed,
                  std::vector<std::string>* warnings) {
  if (fact_index >= world.facts.size()) throw RangeError("fact index out of range");
  const Fact& fact = world.facts[fact_index];
  const Relation& rel = world.relations[fact.relation];
  Rng rng(seed ^ (0x9E3779B97F4A7C15ULL * (fact_index + 1)));

  QaExample ex;
  ex.id = "fact-" + std::to_string(fact_index);
  ex.question = world.question(fact);
  const std::string gold = world.object_name(fact);
  ex.answers = {gold};
  ex.provenance = std::string(to_string(fact.split));

  ex.passages[Tier::positive] = world.statement(fact);
  ex.passage_keys[Tier::positive] = gold;

  std::size_t fake = rng.below(rel.objects.size() - 1);
  if (fake >= fact.object) ++fake;
  ex.fake_answer = rel.objects[fake];
  ex.passages[Tier::fake] = world.statement_with_object(fact, ex.fake_answer);
  ex.passage_keys[Tier::fake] = ex.fake_answer;

  // Same-relation passages about other subjects that lack the gold answer.
  std::vector<std::size_t> same_relation;
  for (std::size_t s = 0; s < world.entities.size(); ++s) {
    if (s == fact.subject) continue;
    const std::size_t idx = world.fact_index(s, fact.relation);
    if (world.facts[idx].object != fact.object) same_relation.push_back(idx);
  }
  if (same_relation.empty()) {
    if (warnings) warnings->push_back(ex.id + ": no eligible hard passage; hard tiers omitted");
  } else {
    std::size_t best_overlap = 0;
    std::vector<std::size_t> best;
    for (auto idx : same_relation) {
      const auto ov = token_overlap(ex.question, world.statement(world.facts[idx]));
      if (best.empty() || ov > best_overlap) {
        best_overlap = ov;
        best = {idx};
      } else if (ov == best_overlap) {
        best.push_back(idx);
      }
    }
    const std::size_t hard = best[rng.below(best.size())];
    ex.passages[Tier::hard] = world.statement(world.facts[hard]);
    ex.passage_keys[Tier::hard] = world.object_name(world.facts[hard]);

    std::vector<std::size_t> rest;
    for (auto idx : same_relation) {
      if (idx != hard) rest.push_back(idx);
    }
    const std::size_t minus = rest.empty() ? hard : rest[rng.below(rest.size())];
    ex.passages[Tier::hard_minus] = world.statement(world.facts[minus]);
    ex.passage_keys[Tier::hard_minus] = world.object_name(world.facts[minus]);
  }

  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < world.facts.size(); ++i) {
    if (i == fact_index) continue;
    const Fact& f = world.facts[i];
    if (f.relation == fact.relation && f.object == fact.object) continue;  // would contain gold
    others.push_back(i);
  }
  if (!others.empty()) {
    const std::size_t r = others[rng.below(others.size())];
    ex.passages[Tier::random] = world.statement(world.facts[r]);
    ex.passage_keys[Tier::random] = world.object_name(world.facts[r]);
  } else if (warnings) {
    warnings->push_back(ex.id + ": no eligible random passage");
  }
  return ex;
}

std::vector<QaExample> make_dataset(const FactWorld& world, std::uint64_t seed,
                                    std::optional<Split> only, std::vector<std::string>* warnings) {
  std::vector<QaExample> out;
  for (std::size_t i = 0; i < world.facts.size(); ++i) {
    if (only && world.facts[i].split != *only) continue;
    out.push_back(make_qa(world, i, seed, warnings));
  }
  return out;
}

nlohmann::json example_to_json(const QaExample& ex) {
  nlohmann::json passages = nlohmann::json::object();
  nlohmann::json keys = nlohmann::json::object();
  for (const auto& [t, text] : ex.passages) passages[std::string(to_string(t))] = text;
  for (const auto& [t, k] : ex.passage_keys) keys[std::string(to_string(t))] = k;
  nlohmann::json j = {{"id", ex.id},
                      {"question", ex.question},
                      {"answers", ex.answers},
                      {"passages", passages},
                      {"provenance", ex.provenance}};
  if (!ex.passage_keys.empty()) j["passage_keys"] = keys;
  if (!ex.fake_answer.empty()) j["fake_answer"] = ex.fake_answer;
  return j;
}

QaExample example_from_json(const nlohmann::json& j) {
  try {
    QaExample ex;
    ex.question = j.at("question").get<std::string>();
    ex.answers = j.at("answers").get<std::vector<std::string>>();
    if (ex.answers.empty()) throw FormatError("example has no answers");
    for (const auto& [k, v] : j.at("passages").items()) ex.passages[parse_tier(k)] = v.get<std::string>();
    if (j.contains("passage_keys")) {
      for (const auto& [k, v] : j.at("passage_keys").items()) {
        ex.passage_keys[parse_tier(k)] = v.get<std::string>();
      }
    }
    ex.id = j.value("id", std::string{});
    ex.fake_answer = j.value("fake_answer", std::string{});
    ex.provenance = j.value("provenance", std::string{});
    if (!ex.passage_keys.contains(Tier::positive) && ex.passages.contains(Tier::positive)) {
      ex.passage_keys[Tier::positive] = ex.answers.front();
    }
    if (!ex.passage_keys.contains(Tier::fake) && !ex.fake_answer.empty()) {
      ex.passage_keys[Tier::fake] = ex.fake_answer;
    }
    return ex;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset JSON: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("dataset JSON: ") + e.what());
  }
}

void write_jsonl(const std::vector<QaExample>& data, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  for (const auto& ex : data) out << example_to_json(ex).dump() << '\n';
}

std::vector<QaExample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset '" + path.string() + "'");
  std::vector<QaExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      // A leading run-metadata record carries the schema and config hash.
      if (j.is_object() && j.contains("schema") && !j.contains("question")) continue;
      auto ex = example_from_json(j);
      if (ex.id.empty()) ex.id = "line-" + std::to_string(lineno);
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("dataset line " + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace raglab
