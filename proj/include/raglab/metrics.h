#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace raglab {

// Lowercase, strip punctuation, optionally drop a/an/the, collapse whitespace.
std::string normalize_answer(std::string_view text, bool drop_articles = true);

bool exact_match(std::string_view prediction, std::span<const std::string> golds,
                 bool drop_articles = true);
// Some normalized gold is a contiguous substring of the normalized prediction.
bool cover_exact_match(std::string_view prediction, std::span<const std::string> golds,
                       bool drop_articles = true);
// Max over golds of token-overlap F1, in [0, 1].
double token_f1(std::string_view prediction, std::span<const std::string> golds,
                bool drop_articles = true);

}  // namespace raglab
