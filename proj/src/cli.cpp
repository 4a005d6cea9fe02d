#include "raglab/cli.h"

#include <cstdlib>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "raglab/error.h"
#include "raglab/pipeline.h"
#include "raglab/weights_io.h"

namespace raglab {

namespace {

using nlohmann::json;

struct UsageError : Error {
  using Error::Error;
};

struct Param {
  std::string key;
  json def;
  std::string help;
};

std::string default_out_root() {
  const char* env = std::getenv("RAGLAB_OUT_ROOT");
  return env && *env ? env : "raglab_out";
}

std::vector<Param> common_params() {
  return {{"out", default_out_root(), "output directory (default: $RAGLAB_OUT_ROOT or raglab_out)"},
          {"seed", 1, "seed for every random choice of this command"}};
}

std::vector<Param> model_input_params(std::string provenance) {
  return {{"weights", "", "weight file written by `train`"},
          {"vocab", "", "vocabulary file (default: vocab.txt next to the weights)"},
          {"data", "", "dataset JSONL"},
          {"provenance", provenance, "example filter: all, train, context or holdout"},
          {"limit", 0, "maximum number of examples (0 = all)"},
          {"rag_template", "", "RAG instruction template file"},
          {"closed_book_template", "", "closed-book instruction template file"},
          {"answer_prompt", std::string(kDefaultAnswerPrompt), "trailing answer cue"},
          {"max_new", 8, "maximum generated tokens per answer"}};
}

std::vector<Param> world_params() {
  return {{"entities", 400, "number of subject entities"},
          {"relations", 5, "number of relations"},
          {"objects", 24, "objects per relation"},
          {"holdout", 0.1, "fraction of facts never rendered into training data"},
          {"context_fraction", 0.2, "fraction of facts seen only inside passages"}};
}

std::vector<Param> train_params() {
  return {{"steps", 3000, "optimizer steps"},
          {"batch", 32, "sequences per step"},
          {"lr", 3e-3, "peak learning rate"},
          {"warmup", 100, "linear warmup steps"},
          {"layers", 4, "transformer layers"},
          {"heads", 4, "attention heads"},
          {"d_model", 128, "residual width"},
          {"d_ff", 512, "MLP neurons per layer"},
          {"max_seq", 64, "maximum sequence length"},
          {"activation", "silu", "MLP activation: silu or relu"},
          {"tie_embeddings", false, "share token embedding and unembedding"}};
}

std::vector<Param> analysis_params() {
  return {{"tiers", "positive,hard,hard_minus,random", "comma-separated passage tiers"},
          {"convention", "source_first", "flow direction convention: source_first or literal"},
          {"normalization", "raw", "flow normalization: raw or mean"},
          {"saliency", true, "compute saliency curves"},
          {"method", "quartile", "stage segmentation: quartile or changepoint"},
          {"prob_mode", "geometric_mean", "answer probability: geometric_mean or joint"},
          {"fraction", 0.01, "KAPE candidate fraction"},
          {"min_raw", 0.2, "minimum raw activation rate of a knowledge neuron"},
          {"positions", "answer_span", "KAPE positions: answer_span, all or generated"},
          {"noisy_tier", "fake", "passage tier of the noisy-document setting"}};
}

std::vector<Param> pick(const std::vector<Param>& all, const std::set<std::string>& keys) {
  std::vector<Param> out;
  for (const auto& p : all) {
    if (keys.contains(p.key)) out.push_back(p);
  }
  return out;
}

std::vector<Param> params_for(const std::string& cmd) {
  std::vector<Param> ps = common_params();
  auto add = [&](const std::vector<Param>& more) { ps.insert(ps.end(), more.begin(), more.end()); };
  const auto A = analysis_params();
  if (cmd == "gen-world") {
    add(world_params());
  } else if (cmd == "train") {
    add({{"world", "", "world JSON written by `gen-world`"}});
    add(train_params());
    add(pick(model_input_params("all"), {"rag_template", "closed_book_template", "answer_prompt"}));
  } else if (cmd == "eval") {
    add(model_input_params("all"));
    add({{"setting", "closed_book", "closed_book, gold or noisy"},
         {"neurons", "", "kape_summary.json whose neurons to deactivate"},
         {"deactivate", "none", "none, ik or ek"}});
    add(pick(A, {"noisy_tier"}));
  } else if (cmd == "flow") {
    add(model_input_params("all"));
    add({{"tier", "positive", "passage tier"}});
    add(pick(A, {"convention", "normalization", "saliency"}));
  } else if (cmd == "stages") {
    add({{"profile", "", "flow_profile.json written by `flow`"}});
    add(pick(A, {"method"}));
  } else if (cmd == "intervene") {
    add(model_input_params("all"));
    add({{"profile", "", "flow_profile.json, required by the changepoint method"},
         {"spec", "", "InterventionSpec JSON; restricts the run to that cut"}});
    add(pick(A, {"tiers", "method", "prob_mode"}));
  } else if (cmd == "kape") {
    add(model_input_params("train"));
    add(pick(A, {"fraction", "min_raw", "positions"}));
  } else if (cmd == "deactivate") {
    add(model_input_params("train"));
    add({{"neurons", "", "kape_summary.json written by `kape`"},
         {"settings", "closed_book,gold,noisy", "comma-separated document settings"}});
    add(pick(A, {"noisy_tier"}));
  } else if (cmd == "logitlens") {
    add(model_input_params("train"));
    add({{"tier", "fake", "passage tier supplying the external answer"}});
  } else if (cmd == "report") {
    add(world_params());
    add(train_params());
    add(pick(model_input_params("all"), {"rag_template", "closed_book_template", "answer_prompt",
                                         "max_new"}));
    add(A);
    add({{"eval_limit", 400, "examples per evaluation"},
         {"flow_provenance", "holdout", "split used for flow and heatmap examples"},
         {"flow_limit", 100, "examples per flow profile"},
         {"heatmap_limit", 100, "examples per heatmap tier"},
         {"kape_limit", 400, "examples for activation statistics"},
         {"deactivate_limit", 300, "examples per deactivation run"},
         {"lens_limit", 200, "examples for the logit lens"}});
  }
  return ps;
}

const std::vector<std::pair<std::string, std::string>> kCommands = {
    {"gen-world", "generate a synthetic fact world and its QA dataset"},
    {"train", "train the toy transformer on a world"},
    {"eval", "EM/CEM/F1 under a document setting, optionally with neurons deactivated"},
    {"flow", "attention and saliency information-flow profiles"},
    {"stages", "segment a flow profile into four stages"},
    {"intervene", "stage-wise key-to-query attention cuts (stage x tier heatmap)"},
    {"kape", "knowledge activation probability entropy and neuron selection"},
    {"deactivate", "evaluation with IK / EK neurons deactivated"},
    {"logitlens", "layerwise logits of internal vs external answers"},
    {"report", "run the full pipeline end to end"}};

std::string flag_name(const std::string& key) {
  std::string f = key;
  for (auto& c : f) {
    if (c == '_') c = '-';
  }
  return "--" + f;
}

json convert(const Param& p, const std::string& text) {
  try {
    std::size_t used = 0;
    if (p.def.is_number_unsigned() || p.def.is_number_integer()) {
      if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
      const auto v = std::stoull(text, &used);
      if (used != text.size()) throw std::invalid_argument("trailing");
      return v;
    }
    if (p.def.is_number_float()) {
      const double v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument("trailing");
      return v;
    }
  } catch (const std::exception&) {
    throw UsageError("option " + flag_name(p.key) + ": '" + text + "' is not a valid number");
  }
  return text;
}

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    if (a.is_number_float()) return true;
    return b.is_number_integer() || b.is_number_unsigned();
  }
  return a.type() == b.type();
}

json resolve(const std::vector<Param>& params, const std::string& config_path,
             const std::map<std::string, std::string>& given,
             const std::map<std::string, bool>& given_flags) {
  json cfg = json::object();
  for (const auto& p : params) cfg[p.key] = p.def;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw Error("cannot open config file '" + config_path + "'");
    json file;
    try {
      file = json::parse(in);
    } catch (const json::parse_error& e) {
      throw UsageError("config file '" + config_path + "': " + e.what());
    }
    if (!file.is_object()) throw UsageError("config file must hold a JSON object");
    for (const auto& [k, v] : file.items()) {
      if (!cfg.contains(k)) throw UsageError("unknown config key '" + k + "'");
      if (!same_kind(cfg[k], v)) throw UsageError("config key '" + k + "' has the wrong type");
      cfg[k] = v;
    }
  }
  for (const auto& p : params) {
    if (auto it = given.find(p.key); it != given.end()) cfg[p.key] = convert(p, it->second);
    if (auto it = given_flags.find(p.key); it != given_flags.end()) cfg[p.key] = it->second;
  }
  return cfg;
}

// --- helpers shared by the subcommands ---------------------------------------

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto b = item.find_first_not_of(' ');
    const auto e = item.find_last_not_of(' ');
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::vector<Tier> parse_tiers(const std::string& s) {
  std::vector<Tier> out;
  for (const auto& t : split_list(s)) out.push_back(parse_tier(t));
  if (out.empty()) throw ConfigError("no tiers given");
  return out;
}

std::string need(const json& cfg, const std::string& key) {
  std::string v = cfg.at(key).get<std::string>();
  if (v.empty()) throw ConfigError("missing required option " + flag_name(key));
  return v;
}

PromptSettings prompt_settings(const json& cfg) {
  PromptSettings ps;
  if (cfg.contains("rag_template") && !cfg["rag_template"].get<std::string>().empty()) {
    ps.rag = PromptTemplate::load(cfg["rag_template"].get<std::string>());
  }
  if (cfg.contains("closed_book_template") &&
      !cfg["closed_book_template"].get<std::string>().empty()) {
    ps.closed_book = PromptTemplate::load(cfg["closed_book_template"].get<std::string>());
  }
  ps.rag.parse(true);
  ps.closed_book.parse(false);
  if (cfg.contains("answer_prompt")) ps.answer_prompt = cfg["answer_prompt"].get<std::string>();
  if (cfg.contains("max_new")) ps.max_new = cfg["max_new"].get<std::size_t>();
  return ps;
}

struct LoadedModel {
  ModelWeights weights;
  Tokenizer tok;
  std::vector<QaExample> data;
  PromptSettings prompts;
};

LoadedModel load_model(const json& cfg) {
  LoadedModel m;
  const std::filesystem::path wpath = need(cfg, "weights");
  m.weights = load_weights(wpath);
  std::filesystem::path vpath = cfg.at("vocab").get<std::string>();
  if (vpath.empty()) vpath = wpath.parent_path() / "vocab.txt";
  m.tok = Tokenizer::load(vpath);
  if (m.tok.size() != m.weights.config.vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(m.tok.size()) +
                      " tokens, the model expects " + std::to_string(m.weights.config.vocab_size));
  }
  m.data = select_examples(read_jsonl(need(cfg, "data")), cfg.at("provenance").get<std::string>(),
                           cfg.at("limit").get<std::size_t>());
  if (m.data.empty()) throw ConfigError("no examples selected from the dataset");
  m.prompts = prompt_settings(cfg);
  return m;
}

KnowledgeNeurons load_neurons(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open neuron file '" + path + "'");
  try {
    const json j = json::parse(in);
    KnowledgeNeurons k;
    for (const auto& n : j.at("ik_neurons")) k.ik.insert({n.at(0).get<std::size_t>(), n.at(1).get<std::size_t>()});
    for (const auto& n : j.at("ek_neurons")) k.ek.insert({n.at(0).get<std::size_t>(), n.at(1).get<std::size_t>()});
    k.fraction = j.value("fraction", 0.0);
    k.min_raw = j.value("min_raw", 0.0);
    k.candidates = j.value("candidates", std::size_t{0});
    return k;
  } catch (const json::exception& e) {
    throw FormatError("neuron file '" + path + "': " + e.what());
  }
}

void emit(OutputSet& out, const std::string& csv_name, const std::string& json_name,
          const ReportPair& pair) {
  out.write_text(csv_name, pair.csv);
  out.write_json(json_name, pair.json);
}

// --- subcommands -----------------------------------------------------------------

void cmd_gen_world(const json& cfg, OutputSet& out, const ReportContext& ctx, std::ostream& log) {
  WorldParams wp;
  wp.seed = cfg["seed"].get<std::uint64_t>();
  wp.n_entities = cfg["entities"].get<std::size_t>();
  wp.n_relations = cfg["relations"].get<std::size_t>();
  wp.objects_per_relation = cfg["objects"].get<std::size_t>();
  wp.holdout_fraction = cfg["holdout"].get<double>();
  wp.context_fraction = cfg["context_fraction"].get<double>();
  const FactWorld world = generate_world(wp);
  std::vector<std::string> warnings;
  const auto data = make_dataset(world, wp.seed, std::nullopt, &warnings);
  json wj = world_to_json(world);
  wj["run"] = {{"schema", std::string(kReportSchema)}, {"config_hash", ctx.config_hash}};
  out.write_json("world.json", wj);
  std::ostringstream ds;
  ds << json{{"schema", std::string(kReportSchema)}, {"config_hash", ctx.config_hash}}.dump() << '\n';
  for (const auto& ex : data) ds << example_to_json(ex).dump() << '\n';
  out.write_text("dataset.jsonl", ds.str());
  for (const auto& w : warnings) log << "warning: " << w << '\n';
  log << "world: " << world.facts.size() << " facts, " << data.size() << " examples\n";
}

void cmd_train(const json& cfg, OutputSet& out, const ReportContext& ctx, std::ostream& log) {
  const FactWorld world = load_world(need(cfg, "world"));
  const PromptSettings ps = prompt_settings(cfg);
  const Tokenizer tok = world_tokenizer(world, ps);
  ModelConfig mc;
  mc.n_layers = cfg["layers"].get<std::size_t>();
  mc.n_heads = cfg["heads"].get<std::size_t>();
  mc.d_model = cfg["d_model"].get<std::size_t>();
  mc.d_ff = cfg["d_ff"].get<std::size_t>();
  mc.max_seq = cfg["max_seq"].get<std::size_t>();
  mc.activation = parse_activation(cfg["activation"].get<std::string>());
  mc.tie_embeddings = cfg["tie_embeddings"].get<bool>();
  mc.vocab_size = tok.size();
  mc.validate();
  const std::uint64_t seed = cfg["seed"].get<std::uint64_t>();
  ModelWeights w = init_weights(mc, seed);
  TrainConfig tc;
  tc.steps = cfg["steps"].get<std::size_t>();
  tc.batch = cfg["batch"].get<std::size_t>();
  tc.learning_rate = cfg["lr"].get<double>();
  tc.warmup = cfg["warmup"].get<std::size_t>();
  tc.seed = seed;
  const auto samples = build_training_samples(world, tok, ps, seed);
  const auto res = train(w, samples, tc, [&](std::size_t step, double loss) {
    if ((step + 1) % 250 == 0) log << "step " << step + 1 << " loss " << format_real(loss) << '\n';
  });
  const auto bytes = encode_weights(w);
  out.write_text("weights.bin",
                 std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  tok.save(out.path("vocab.txt"));
  out.adopt("vocab.txt");
  emit(out, "loss_curve.csv", "train_summary.json", loss_report(ctx, res.losses));
}

void cmd_eval(const json& cfg, OutputSet& out, const ReportContext& ctx, std::ostream& log) {
  const LoadedModel m = load_model(cfg);
  EvalOptions eo;
  eo.setting = parse_document_setting(cfg["setting"].get<std::string>());
  eo.noisy_tier = parse_tier(cfg["noisy_tier"].get<std::string>());
  const std::string which = cfg["deactivate"].get<std::string>();
  DeactivationSet set;
  if (which != "none") {
    const auto k = load_neurons(need(cfg, "neurons"));
    if (which == "ik") {
      set = k.ik;
    } else if (which == "ek") {
      set = k.ek;
    } else {
      throw ConfigError("--deactivate must be none, ik or ek");
    }
    eo.deactivations = &set;
    eo.intervention = "deactivate_" + which;
  }
  const EvalResult r = evaluate(m.weights, m.tok, m.data, m.prompts, eo);
  emit(out, "eval.csv", "eval.json", eval_report(ctx, {r}));
  log << r.setting << ": EM " << format_real(r.em) << " CEM " << format_real(r.cem) << " F1 "
      << format_real(r.f1) << '\n';
}

void cmd_flow(const json& cfg, OutputSet& out, const ReportContext& ctx, std::ostream& log) {
  const LoadedModel m = load_model(cfg);
  FlowSettings fs;
  fs.convention = parse_flow_convention(cfg["convention"].get<std::string>());
  fs.normalization = parse_flow_norm(cfg["normalization"].get<std::string>());
  fs.saliency = cfg["saliency"].get<bool>();
  const Tier tier = parse_tier(cfg["tier"].get<std::string>());
  const DatasetFlow df = dataset_flow(m.weights, m.tok, m.data, tier, m.prompts, fs);
  emit(out, "flow_profile.csv", "flow_profile.json",
       flow_report(ctx, df.profile, tier, df.used, df.skipped));
  log << "flow: " << df.used << " examples used, " << df.skipped << " skipped\n";
}

void cmd_stages(const json& cfg, OutputSet& out, const ReportContext& ctx, std::ostream&) {
  std::ifstream in(need(cfg, "profile"));
  if (!in) throw Error("cannot open profile '" + cfg["profile"].get<std::string>() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("profile JSON: ") + e.what());
  }
  const FlowProfile p = profile_from_json(j);
  const auto seg = segment_stages(p, parse_segment_method(cfg["method"].get<std::string>()));
  emit(out, "stages.csv", "stages.json", stages_report(ctx, seg));
}

void cmd_intervene(const json& cfg, OutputSet& out, const ReportContext& ctx, std::ostream& log) {
  const LoadedModel m = load_model(cfg);
  const auto method = parse_segment_method(cfg["method"].get<std::string>());
  StageSegmentation seg = segment_quartile(m.weights.config.n_layers);
  if (method == SegmentMethod::changepoint) {
    std::ifstream in(need(cfg, "profile"));
    if (!in) throw Error("cannot open profile '" + cfg["profile"].get<std::string>() + "'");
    seg = segment_stages(profile_from_json(json::parse(in)), method);
  }
  const auto tiers = parse_tiers(cfg["tiers"].get<std::string>());
  const auto mode = parse_prob_mode(cfg["prob_mode"].get<std::string>());
  const std::string spec_path = cfg["spec"].get<std::string>();
  if (spec_path.empty()) {
    const Heatmap h = stage_heatmap(m.weights, m.tok, m.data, tiers, seg, mode, m.prompts);
    emit(out, "heatmap.csv", "heatmap.json", heatmap_report(ctx, h));
    log << "heatmap: " << h.cells.size() << " cells, " << h.skipped << " skipped\n";
    return;
  }
  std::ifstream in(spec_path);
  if (!in) throw Error("cannot open intervention spec '" + spec_path + "'");
  json sj;
  try {
    sj = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("intervention spec: ") + e.what());
  }
  const InterventionSpec spec = intervention_from_json(sj);
  spec.validate(m.weights.config);
  if (spec.kind != InterventionKind::attention_cut) {
    throw ConfigError("intervene runs attention cuts; use `eval --deactivate` for neurons");
  }
  const auto layers = spec.resolve_layers(seg);
  std::vector<std::vector<std::string>> rows;
  json cells = json::array();
  for (auto tier : tiers) {
    double de = 0, di = 0;
    std::size_t n = 0;
    for (const auto& ex : m.data) {
      if (!ex.has_tier(tier) || !ex.passage_keys.contains(tier)) continue;
      const auto prompt = rag_prompt(m.tok, ex, {tier}, m.prompts);
      if (prompt.spans.indices(spec.source).empty() || prompt.spans.indices(spec.target).empty()) {
        continue;
      }
      const auto ext = answer_tokens(m.tok, ex.passage_keys.at(tier));
      const auto inn = answer_tokens(m.tok, ex.answers.front());
      if (ext.empty() || inn.empty()) continue;
      de += prob_delta(m.weights, prompt, ext, layers, mode, spec.source, spec.target).d;
      di += prob_delta(m.weights, prompt, inn, layers, mode, spec.source, spec.target).d;
      ++n;
    }
    if (n) {
      de /= static_cast<double>(n);
      di /= static_cast<double>(n);
    }
    rows.push_back({std::string(to_string(tier)), format_real(de), format_real(di), std::to_string(n)});
    cells.push_back({{"tier", std::string(to_string(tier))}, {"d_external", de}, {"d_internal", di}, {"n", n}});
  }
  json payload = {{"spec", intervention_to_json(spec)},
                  {"layers", layers},
                  {"prob_mode", std::string(to_string(mode))},
                  {"cells", cells}};
  out.write_text("intervention.csv", csv_text(ctx, {"tier", "d_external", "d_internal", "n"}, rows));
  out.write_json("intervention.json", json_document(ctx, "intervention", payload));
}

void cmd_kape(const json& cfg, OutputSet& out, const ReportContext& ctx, std::ostream& log) {
  const LoadedModel m = load_model(cfg);
  const auto pos = parse_position_mode(cfg["positions"].get<std::string>());
  const auto ik = activation_probability(m.weights, m.tok, m.data, KnowledgeSetting::closed_book_ik, pos, m.prompts);
  const auto ek = activation_probability(m.weights, m.tok, m.data, KnowledgeSetting::rag_gold_ek, pos, m.prompts);
  KapeTable table = build_kape_table(ik, ek);
  const auto sel = select_knowledge_neurons(table, cfg["fraction"].get<double>(), cfg["min_raw"].get<double>());
  auto pair = kape_report(ctx, table, sel, pos);
  pair.json["skipped_examples"] = ik.skipped_examples + ek.skipped_examples;
  emit(out, "kape_table.csv", "kape_summary.json", pair);
  log << "kape: " << sel.candidates << " candidates, " << sel.ik.size() << " IK, " << sel.ek.size()
      << " EK\n";
}

void cmd_deactivate(const json& cfg, OutputSet& out, const ReportContext& ctx, std::ostream& log) {
  const LoadedModel m = load_model(cfg);
  const auto neurons = load_neurons(need(cfg, "neurons"));
  std::vector<DocumentSetting> settings;
  for (const auto& s : split_list(cfg["settings"].get<std::string>())) {
    settings.push_back(parse_document_setting(s));
  }
  if (settings.empty()) throw ConfigError("no document settings given");
  const auto study = deactivation_study(m.weights, m.tok, m.data, neurons, settings,
                                        parse_tier(cfg["noisy_tier"].get<std::string>()), m.prompts);
  emit(out, "deactivation.csv", "deactivation.json", eval_report(ctx, study.results));
  for (const auto& r : study.results) {
    log << r.setting << " / " << r.intervention << ": EM " << format_real(r.em) << " follow "
        << format_real(r.follow_rate) << '\n';
  }
}

void cmd_logitlens(const json& cfg, OutputSet& out, const ReportContext& ctx, std::ostream& log) {
  const LoadedModel m = load_model(cfg);
  const auto lens = logit_lens_report(m.weights, m.tok, m.data,
                                      parse_tier(cfg["tier"].get<std::string>()), m.prompts);
  emit(out, "logit_lens.csv", "logit_lens.json", lens_report(ctx, lens));
  log << "logit lens: " << lens.n << " examples, " << lens.skipped << " skipped\n";
}

void cmd_report(const json& cfg, OutputSet& out, const ReportContext& ctx, std::ostream& log) {
  PipelineConfig pc;
  const std::uint64_t seed = cfg["seed"].get<std::uint64_t>();
  pc.world.seed = seed;
  pc.world.n_entities = cfg["entities"].get<std::size_t>();
  pc.world.n_relations = cfg["relations"].get<std::size_t>();
  pc.world.objects_per_relation = cfg["objects"].get<std::size_t>();
  pc.world.holdout_fraction = cfg["holdout"].get<double>();
  pc.world.context_fraction = cfg["context_fraction"].get<double>();
  pc.data_seed = seed;
  pc.init_seed = seed;
  pc.model.n_layers = cfg["layers"].get<std::size_t>();
  pc.model.n_heads = cfg["heads"].get<std::size_t>();
  pc.model.d_model = cfg["d_model"].get<std::size_t>();
  pc.model.d_ff = cfg["d_ff"].get<std::size_t>();
  pc.model.max_seq = cfg["max_seq"].get<std::size_t>();
  pc.model.activation = parse_activation(cfg["activation"].get<std::string>());
  pc.model.tie_embeddings = cfg["tie_embeddings"].get<bool>();
  pc.train.steps = cfg["steps"].get<std::size_t>();
  pc.train.batch = cfg["batch"].get<std::size_t>();
  pc.train.learning_rate = cfg["lr"].get<double>();
  pc.train.warmup = cfg["warmup"].get<std::size_t>();
  pc.train.seed = seed;
  pc.prompts = prompt_settings(cfg);
  pc.flow_tiers = parse_tiers(cfg["tiers"].get<std::string>());
  pc.flow.convention = parse_flow_convention(cfg["convention"].get<std::string>());
  pc.flow.normalization = parse_flow_norm(cfg["normalization"].get<std::string>());
  pc.flow.saliency = cfg["saliency"].get<bool>();
  pc.stage_method = parse_segment_method(cfg["method"].get<std::string>());
  pc.prob_mode = parse_prob_mode(cfg["prob_mode"].get<std::string>());
  pc.kape_fraction = cfg["fraction"].get<double>();
  pc.kape_min_raw = cfg["min_raw"].get<double>();
  pc.kape_positions = parse_position_mode(cfg["positions"].get<std::string>());
  pc.noisy_tier = parse_tier(cfg["noisy_tier"].get<std::string>());
  pc.eval_limit = cfg["eval_limit"].get<std::size_t>();
  pc.flow_provenance = cfg["flow_provenance"].get<std::string>();
  pc.flow_limit = cfg["flow_limit"].get<std::size_t>();
  pc.heatmap_limit = cfg["heatmap_limit"].get<std::size_t>();
  pc.kape_limit = cfg["kape_limit"].get<std::size_t>();
  pc.deactivate_limit = cfg["deactivate_limit"].get<std::size_t>();
  pc.lens_limit = cfg["lens_limit"].get<std::size_t>();
  run_pipeline(pc, &out, ctx, [&](const std::string& m) { log << m << '\n'; });
}

using Handler = void (*)(const json&, OutputSet&, const ReportContext&, std::ostream&);

Handler handler_for(const std::string& cmd) {
  static const std::map<std::string, Handler> table = {
      {"gen-world", cmd_gen_world}, {"train", cmd_train},         {"eval", cmd_eval},
      {"flow", cmd_flow},           {"stages", cmd_stages},       {"intervene", cmd_intervene},
      {"kape", cmd_kape},           {"deactivate", cmd_deactivate}, {"logitlens", cmd_logitlens},
      {"report", cmd_report}};
  return table.at(cmd);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"raglab: instrumented toy transformer for RAG knowledge-utilization analyses",
               "raglab"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "expand every subcommand's help");

  struct Bound {
    CLI::App* sub;
    std::vector<Param> params;
    std::map<std::string, std::string> values;
    std::map<std::string, bool> flags;
    std::map<std::string, CLI::Option*> options;
    std::string config_path;
  };
  std::map<std::string, Bound> bound;
  for (const auto& [name, help] : kCommands) {
    Bound& b = bound[name];
    b.sub = app.add_subcommand(name, help);
    b.params = params_for(name);
    b.sub->add_option("--config", b.config_path, "JSON file of option values (flags override it)");
    for (const auto& p : b.params) {
      if (p.def.is_boolean()) {
        b.flags[p.key] = p.def.get<bool>();
        b.options[p.key] = b.sub->add_flag(flag_name(p.key) + ",!--no-" + flag_name(p.key).substr(2),
                                           b.flags[p.key], p.help);
      } else {
        b.values[p.key] = "";
        std::string help = p.help + " [default: " +
                           (p.def.is_string() ? p.def.get<std::string>() : p.def.dump()) + "]";
        b.options[p.key] = b.sub->add_option(flag_name(p.key), b.values[p.key], help);
      }
    }
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "usage error: " << e.what() << "\n";
    err << "run `raglab --help` for usage\n";
    return kExitUsage;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  Bound& b = bound.at(cmd);
  try {
    std::map<std::string, std::string> given;
    std::map<std::string, bool> given_flags;
    for (const auto& p : b.params) {
      CLI::Option* opt = b.options.at(p.key);
      if (opt->count() == 0) continue;
      if (p.def.is_boolean()) {
        given_flags[p.key] = b.flags.at(p.key);
      } else {
        given[p.key] = b.values.at(p.key);
      }
    }
    json cfg = resolve(b.params, b.config_path, given, given_flags);
    json resolved = cfg;
    resolved["command"] = cmd;
    const ReportContext ctx = ReportContext::from_config(resolved);
    OutputSet outputs(cfg["out"].get<std::string>());
    handler_for(cmd)(cfg, outputs, ctx, out);
    outputs.write_json("run_config.json", json_document(ctx, "run_config", json::object()));
    outputs.commit();
    out << "wrote " << outputs.written().size() << " files to " << outputs.dir().string() << "\n";
    return kExitOk;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace raglab
