#include "raglab/pipeline.h"

#include <chrono>
#include <sstream>

#include "raglab/weights_io.h"

namespace raglab {

nlohmann::json PipelineConfig::to_json() const {
  nlohmann::json tiers = nlohmann::json::array();
  for (auto t : flow_tiers) tiers.push_back(std::string(to_string(t)));
  return {{"entities", world.n_entities},
          {"relations", world.n_relations},
          {"objects", world.objects_per_relation},
          {"holdout", world.holdout_fraction},
          {"context_fraction", world.context_fraction},
          {"world_seed", world.seed},
          {"data_seed", data_seed},
          {"layers", model.n_layers},
          {"heads", model.n_heads},
          {"d_model", model.d_model},
          {"d_ff", model.d_ff},
          {"max_seq", model.max_seq},
          {"activation", std::string(to_string(model.activation))},
          {"tie_embeddings", model.tie_embeddings},
          {"init_seed", init_seed},
          {"steps", train.steps},
          {"batch", train.batch},
          {"lr", train.learning_rate},
          {"warmup", train.warmup},
          {"train_seed", train.seed},
          {"eval_limit", eval_limit},
          {"tiers", tiers},
          {"flow_provenance", flow_provenance},
          {"flow_limit", flow_limit},
          {"convention", std::string(to_string(flow.convention))},
          {"normalization", std::string(to_string(flow.normalization))},
          {"saliency", flow.saliency},
          {"method", std::string(to_string(stage_method))},
          {"prob_mode", std::string(to_string(prob_mode))},
          {"heatmap_limit", heatmap_limit},
          {"fraction", kape_fraction},
          {"min_raw", kape_min_raw},
          {"positions", std::string(to_string(kape_positions))},
          {"kape_limit", kape_limit},
          {"noisy_tier", std::string(to_string(noisy_tier))},
          {"deactivate_limit", deactivate_limit},
          {"lens_limit", lens_limit},
          {"answer_prompt", prompts.answer_prompt},
          {"max_new", prompts.max_new}};
}

namespace {

void emit(OutputSet* out, const std::string& csv_name, const std::string& json_name,
          const ReportPair& pair) {
  if (!out) return;
  out->write_text(csv_name, pair.csv);
  out->write_json(json_name, pair.json);
}

void emit(OutputSet* out, const std::string& stem, const ReportPair& pair) {
  emit(out, stem + ".csv", stem + ".json", pair);
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& config, OutputSet* out,
                            const ReportContext& ctx, const PipelineLog& log) {
  auto say = [&](const std::string& m) {
    if (log) log(m);
  };
  PipelineResult r;
  r.world = generate_world(config.world);
  r.tokenizer = world_tokenizer(r.world, config.prompts);
  std::vector<std::string> warnings;
  r.dataset = make_dataset(r.world, config.data_seed, std::nullopt, &warnings);
  say("world: " + std::to_string(r.world.facts.size()) + " facts, vocab " +
      std::to_string(r.tokenizer.size()) + ", " + std::to_string(warnings.size()) + " warnings");
  if (out) {
    nlohmann::json wj = world_to_json(r.world);
    wj["run"] = {{"schema", std::string(kReportSchema)}, {"config_hash", ctx.config_hash}};
    out->write_json("world.json", wj);
    std::ostringstream ds;
    ds << nlohmann::json{{"schema", std::string(kReportSchema)}, {"config_hash", ctx.config_hash}}.dump()
       << '\n';
    for (const auto& ex : r.dataset) ds << example_to_json(ex).dump() << '\n';
    out->write_text("dataset.jsonl", ds.str());
  }

  ModelConfig mc = config.model;
  mc.vocab_size = r.tokenizer.size();
  r.weights = init_weights(mc, config.init_seed);
  const auto samples = build_training_samples(r.world, r.tokenizer, config.prompts, config.data_seed);
  say("training: " + std::to_string(samples.size()) + " samples, " +
      std::to_string(config.train.steps) + " steps");
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = train(r.weights, samples, config.train, [&](std::size_t step, double loss) {
    if ((step + 1) % 250 == 0) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      say("  step " + std::to_string(step + 1) + " loss " + format_real(loss) + " (" +
          std::to_string(static_cast<int>(secs)) + " s)");
    }
  });
  r.losses = res.losses;
  if (out) {
    std::vector<std::uint8_t> bytes = encode_weights(r.weights);
    out->write_text("weights.bin", std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
    r.tokenizer.save(out->path("vocab.txt"));
    out->adopt("vocab.txt");
    emit(out, "loss_curve", loss_report(ctx, r.losses));
  }
  run_analyses(r, config, out, ctx, log);
  return r;
}

void run_analyses(PipelineResult& r, const PipelineConfig& config, OutputSet* out,
                  const ReportContext& ctx, const PipelineLog& log) {
  auto say = [&](const std::string& m) {
    if (log) log(m);
  };
  const auto& P = config.prompts;
  const auto train_set = select_examples(r.dataset, "train", config.eval_limit);
  const auto holdout_set = select_examples(r.dataset, "holdout", config.eval_limit);

  EvalOptions eo;
  eo.setting = DocumentSetting::closed_book;
  r.closed_book_train = evaluate(r.weights, r.tokenizer, train_set, P, eo);
  r.closed_book_train.setting = "closed_book:train";
  r.closed_book_holdout = evaluate(r.weights, r.tokenizer, holdout_set, P, eo);
  r.closed_book_holdout.setting = "closed_book:holdout";
  eo.setting = DocumentSetting::gold;
  r.gold_holdout = evaluate(r.weights, r.tokenizer, holdout_set, P, eo);
  r.gold_holdout.setting = "gold:holdout";
  say("eval: closed-book EM train " + format_real(r.closed_book_train.em) + ", holdout CEM " +
      format_real(r.closed_book_holdout.cem) + " closed-book vs " + format_real(r.gold_holdout.cem) +
      " gold");
  emit(out, "eval", eval_report(ctx, {r.closed_book_train, r.closed_book_holdout, r.gold_holdout}));

  const auto flow_set = select_examples(r.dataset, config.flow_provenance, config.flow_limit);
  r.flows.clear();
  for (auto tier : config.flow_tiers) {
    r.flows.emplace_back(tier, dataset_flow(r.weights, r.tokenizer, flow_set, tier, P, config.flow));
    const auto& df = r.flows.back().second;
    emit(out, "flow_profile_" + std::string(to_string(tier)),
         flow_report(ctx, df.profile, tier, df.used, df.skipped));
    if (tier == Tier::positive) emit(out, "flow_profile", flow_report(ctx, df.profile, tier, df.used, df.skipped));
  }
  say("flow: " + std::to_string(r.flows.size()) + " tier profiles");

  const FlowProfile* base = nullptr;
  for (const auto& [tier, df] : r.flows) {
    if (tier == Tier::positive && df.used > 0) base = &df.profile;
  }
  r.segmentation = base && config.stage_method == SegmentMethod::changepoint
                       ? segment_stages(*base, SegmentMethod::changepoint)
                       : segment_quartile(r.weights.config.n_layers);
  emit(out, "stages", stages_report(ctx, r.segmentation));

  const auto heat_set = select_examples(r.dataset, config.flow_provenance, config.heatmap_limit);
  r.heatmap = stage_heatmap(r.weights, r.tokenizer, heat_set, config.flow_tiers, r.segmentation,
                            config.prob_mode, P);
  emit(out, "heatmap", heatmap_report(ctx, r.heatmap));
  say("heatmap: " + std::to_string(r.heatmap.cells.size()) + " cells");

  const auto kape_set = select_examples(r.dataset, "train", config.kape_limit);
  const auto ik = activation_probability(r.weights, r.tokenizer, kape_set,
                                         KnowledgeSetting::closed_book_ik, config.kape_positions, P);
  const auto ek = activation_probability(r.weights, r.tokenizer, kape_set,
                                         KnowledgeSetting::rag_gold_ek, config.kape_positions, P);
  r.kape = build_kape_table(ik, ek);
  r.neurons = select_knowledge_neurons(r.kape, config.kape_fraction, config.kape_min_raw);
  emit(out, "kape_table.csv", "kape_summary.json",
       kape_report(ctx, r.kape, r.neurons, config.kape_positions));
  say("kape: " + std::to_string(r.neurons.ik.size()) + " IK, " + std::to_string(r.neurons.ek.size()) +
      " EK neurons");

  const auto deact_set = select_examples(r.dataset, "train", config.deactivate_limit);
  r.deactivation = deactivation_study(
      r.weights, r.tokenizer, deact_set, r.neurons,
      {DocumentSetting::closed_book, DocumentSetting::gold, DocumentSetting::noisy},
      config.noisy_tier, P);
  emit(out, "deactivation", eval_report(ctx, r.deactivation.results));

  const auto lens_set = select_examples(r.dataset, "train", config.lens_limit);
  r.lens = logit_lens_report(r.weights, r.tokenizer, lens_set, config.noisy_tier, P);
  emit(out, "logit_lens", lens_report(ctx, r.lens));
  say("done");
}

}  // namespace raglab
