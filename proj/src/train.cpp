#include "raglab/train.h"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "raglab/error.h"
#include "raglab/random.h"

namespace raglab {

TrainSample make_answer_sample(std::span<const TokenId> prompt, std::span<const TokenId> answer) {
  if (prompt.empty()) throw ContractError("training sample: empty prompt");
  TrainSample s;
  s.tokens.assign(prompt.begin(), prompt.end());
  s.tokens.insert(s.tokens.end(), answer.begin(), answer.end());
  s.tokens.push_back(Tokenizer::kEos);
  s.loss_mask.assign(s.tokens.size() - 1, false);
  for (std::size_t i = prompt.size() - 1; i < s.loss_mask.size(); ++i) s.loss_mask[i] = true;
  return s;
}

TrainSample make_text_sample(const Tokenizer& tok, std::string_view text) {
  TrainSample s;
  s.tokens = tok.encode(text);
  s.tokens.push_back(Tokenizer::kEos);
  if (s.tokens.size() < 2) throw ContractError("training sample: text is empty");
  s.loss_mask.assign(s.tokens.size() - 1, true);
  return s;
}

std::vector<TrainSample> build_training_samples(const FactWorld& world, const Tokenizer& tok,
                                                const PromptSettings& settings,
                                                std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> visible;
  for (std::size_t i = 0; i < world.facts.size(); ++i) {
    if (world.facts[i].split != Split::holdout) visible.push_back(i);
  }
  if (visible.size() < 2) throw ConfigError("world has too few non-holdout facts to train on");

  auto distractor_for = [&](const Fact& f) {
    for (;;) {
      const Fact& d = world.facts[visible[rng.below(visible.size())]];
      if (d.subject == f.subject) continue;
      if (d.relation == f.relation && d.object == f.object) continue;
      return world.statement(d);
    }
  };
  auto rag = [&](const Fact& f, std::vector<std::string> passages) {
    RagInstruction ins;
    ins.prompt_template = settings.rag;
    ins.passages = std::move(passages);
    ins.question = world.question(f);
    ins.answer_prompt = settings.answer_prompt;
    return assemble_rag(tok, ins, settings.assembly).tokens;
  };

  std::vector<TrainSample> out;
  for (auto idx : visible) {
    const Fact& f = world.facts[idx];
    const auto answer = answer_tokens(tok, world.object_name(f));
    const std::string gold = world.statement(f);
    if (f.split == Split::train) {
      const auto cb = assemble_closed_book(tok, settings.closed_book, world.question(f),
                                           settings.answer_prompt);
      out.push_back(make_answer_sample(cb.tokens, answer));
      out.push_back(make_answer_sample(rag(f, {gold}), answer));
      out.push_back(make_answer_sample(rag(f, {distractor_for(f)}), answer));
    } else {
      out.push_back(make_answer_sample(rag(f, {gold}), answer));
      std::vector<std::string> pair = {gold, distractor_for(f)};
      if (rng.below(2) == 1) std::swap(pair[0], pair[1]);
      out.push_back(make_answer_sample(rag(f, pair), answer));
    }
  }
  return out;
}

namespace {


Tensor batch_loss(const ModelWeights& weights, const std::vector<TrainSample>& samples,
                  std::span<const std::size_t> batch) {
  std::vector<std::vector<TokenId>> inputs;
  std::vector<std::size_t> rows;
  std::vector<TokenId> targets;
  std::size_t offset = 0;
  for (auto b : batch) {
    const auto& s = samples[b];
    if (s.tokens.size() < 2 || s.loss_mask.size() + 1 != s.tokens.size()) {
      throw ContractError("malformed training sample");
    }
    inputs.emplace_back(s.tokens.begin(), s.tokens.end() - 1);
    for (std::size_t i = 0; i < s.loss_mask.size(); ++i) {
      if (s.loss_mask[i]) {
        rows.push_back(offset + i);
        targets.push_back(s.tokens[i + 1]);
      }
    }
    offset += s.loss_mask.size();
  }
  if (rows.empty()) throw ContractError("training batch has no targets");
  const Tensor hidden = forward_batch_hidden(weights, inputs);
  const Tensor logits = unembed(weights, gather_rows(hidden, rows));
  return cross_entropy(logits, targets, std::vector<bool>(targets.size(), true));
}

}  // namespace

TrainResult train(ModelWeights& weights, const std::vector<TrainSample>& samples,
                  const TrainConfig& config, const TrainProgress& progress) {
  if (config.steps < 1) throw ConfigError("training needs at least one step");
  if (config.batch < 1) throw ConfigError("batch size must be positive");
  if (samples.empty()) throw ConfigError("no training samples");
  Rng rng(config.seed);
  weights.set_requires_grad(true);
  auto params = weights.named_tensors();
  std::vector<std::vector<double>> m(params.size()), v(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    m[p].assign(params[p].second->size(), 0.0);
    v[p].assign(params[p].second->size(), 0.0);
  }

  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::size_t cursor = 0;

  TrainResult result;
  result.losses.reserve(config.steps);
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<std::size_t> batch;
    for (std::size_t b = 0; b < std::min(config.batch, samples.size()); ++b) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    for (auto& [name, t] : params) t->zero_grad();
    double loss_value;
    {
      const Tensor loss = batch_loss(weights, samples, batch);
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        throw TrainingError("training diverged: loss is not finite at step " +
                                std::to_string(step),
                            step);
      }
      backward(loss);
    }

    double norm2 = 0;
    for (auto& [name, t] : params) {
      if (!t->has_grad()) continue;
      for (auto g : t->grad()) norm2 += static_cast<double>(g) * static_cast<double>(g);
    }
    if (!std::isfinite(norm2)) {
      throw TrainingError("training diverged: gradient is not finite at step " +
                              std::to_string(step),
                          step);
    }
    const double clip = config.grad_clip > 0 && std::sqrt(norm2) > config.grad_clip
                            ? config.grad_clip / std::sqrt(norm2)
                            : 1.0;

    double lr = config.learning_rate;
    if (step < config.warmup) {
      lr *= static_cast<double>(step + 1) / static_cast<double>(config.warmup);
    } else {
      const double span = static_cast<double>(std::max<std::size_t>(1, config.steps - config.warmup));
      const double progress_frac = static_cast<double>(step - config.warmup) / span;
      const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress_frac));
      lr *= config.min_lr_fraction + (1.0 - config.min_lr_fraction) * cosine;
    }
    const double t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor& w = *params[p].second;
      if (!w.has_grad()) continue;
      const auto g = w.grad();
      auto data = w.mutable_data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double gi = static_cast<double>(g[i]) * clip;
        m[p][i] = config.beta1 * m[p][i] + (1.0 - config.beta1) * gi;
        v[p][i] = config.beta2 * v[p][i] + (1.0 - config.beta2) * gi * gi;
        const double update = lr * (m[p][i] / c1) / (std::sqrt(v[p][i] / c2) + config.adam_eps);
        data[i] = static_cast<Real>(static_cast<double>(data[i]) - update);
      }
    }
    result.losses.push_back(loss_value);
    if (progress) progress(step, loss_value);
  }
  for (auto& [name, t] : params) t->zero_grad();
  weights.set_requires_grad(false);
  return result;
}

double evaluate_loss(const ModelWeights& weights, const std::vector<TrainSample>& samples) {
  if (samples.empty()) throw ContractError("evaluate_loss: no samples");
  NoGradGuard guard;
  double total = 0;
  std::size_t count = 0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    std::vector<std::size_t> batch;
    std::size_t targets = 0;
    for (std::size_t i = start; i < std::min(samples.size(), start + kChunk); ++i) {
      batch.push_back(i);
      targets += static_cast<std::size_t>(
          std::count(samples[i].loss_mask.begin(), samples[i].loss_mask.end(), true));
    }
    total += static_cast<double>(batch_loss(weights, samples, batch).item()) *
             static_cast<double>(targets);
    count += targets;
  }
  return total / static_cast<double>(count);
}

void write_loss_curve(const std::vector<double>& losses, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g", losses[i]);
    out << i << ',' << buf << '\n';
  }
}

}  // namespace raglab
