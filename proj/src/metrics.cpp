#include "raglab/metrics.h"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>

namespace raglab {

namespace {

std::vector<std::string> words(const std::string& normalized) {
  std::vector<std::string> out;
  std::istringstream in(normalized);
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

}  // namespace

std::string normalize_answer(std::string_view text, bool drop_articles) {
  std::string lowered;
  lowered.reserve(text.size());
  for (unsigned char c : text) {
    if (std::ispunct(c)) continue;
    lowered.push_back(std::isspace(c) ? ' ' : static_cast<char>(std::tolower(c)));
  }
  std::string out;
  for (const auto& w : words(lowered)) {
    if (drop_articles && (w == "a" || w == "an" || w == "the")) continue;
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

bool exact_match(std::string_view prediction, std::span<const std::string> golds,
                 bool drop_articles) {
  const std::string p = normalize_answer(prediction, drop_articles);
  return std::any_of(golds.begin(), golds.end(), [&](const std::string& g) {
    return normalize_answer(g, drop_articles) == p;
  });
}

bool cover_exact_match(std::string_view prediction, std::span<const std::string> golds,
                       bool drop_articles) {
  const std::string p = normalize_answer(prediction, drop_articles);
  return std::any_of(golds.begin(), golds.end(), [&](const std::string& g) {
    return p.find(normalize_answer(g, drop_articles)) != std::string::npos;
  });
}

double token_f1(std::string_view prediction, std::span<const std::string> golds,
                bool drop_articles) {
  const auto pred = words(normalize_answer(prediction, drop_articles));
  double best = 0.0;
  for (const auto& g : golds) {
    const auto gold = words(normalize_answer(g, drop_articles));
    if (pred.empty() || gold.empty()) {
      best = std::max(best, pred.empty() && gold.empty() ? 1.0 : 0.0);
      continue;
    }
    std::map<std::string, int> counts;
    for (const auto& w : gold) ++counts[w];
    int common = 0;
    for (const auto& w : pred) {
      auto it = counts.find(w);
      if (it != counts.end() && it->second > 0) {
        --it->second;
        ++common;
      }
    }
    if (common == 0) continue;
    const double precision = static_cast<double>(common) / static_cast<double>(pred.size());
    const double recall = static_cast<double>(common) / static_cast<double>(gold.size());
    best = std::max(best, 2.0 * precision * recall / (precision + recall));
  }
  return best;
}

}  // namespace raglab
