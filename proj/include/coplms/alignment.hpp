#pragma once

// Cross-tokenizer position alignment by minimum edit distance over token
// surface strings, and projection of per-position logits through it.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "coplms/numerics.hpp"

namespace coplms {

struct TokenAlignmentMap {
  std::vector<std::string> source;
  std::vector<std::string> target;
  // mapping[j] = source position whose logits stand in for target position j.
  std::vector<std::size_t> mapping;
  double cost = 0.0;
};

std::size_t levenshtein(std::string_view a, std::string_view b);

// Levenshtein(a, b) / max(|a|, |b|); 0 for two empty strings.
double substitution_cost(std::string_view a, std::string_view b);

// DP over token sequences: substitution = substitution_cost, insert/delete = 1.
// Ties prefer substitution, then insertion, then deletion. Target tokens that
// receive several source tokens (or share one) record the last source position
// consumed before the next target token starts. Throws on empty input.
TokenAlignmentMap align_tokens(const std::vector<std::string>& source, const std::vector<std::string>& target);

// Row gather: out[j] = source_logits[mapping[j]]. The vocabulary axis is untouched.
Tensor project_logits(const Tensor& source_logits, const TokenAlignmentMap& map);

}  // namespace coplms
