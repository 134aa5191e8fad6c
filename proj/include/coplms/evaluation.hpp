#pragma once

// Rouge-L (word-level LCS F1) and exact match, plus greedy-decoding evaluation.

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "coplms/data.hpp"
#include "coplms/model.hpp"
#include "coplms/tokenizer.hpp"

namespace coplms {

std::vector<std::string> split_words(std::string_view text);
std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b);

// F1 of LCS precision and recall over whitespace-separated words; 0 when either side is empty.
double rouge_l(std::string_view candidate, std::string_view reference);

// Trim, collapse internal whitespace, lowercase.
std::string normalize_answer(std::string_view text);

// Fraction of positions whose normalized strings agree. Throws on empty or unequal lists.
double exact_match(const std::vector<std::string>& candidates, const std::vector<std::string>& references);

struct Prediction {
  std::size_t id = 0;
  std::string prediction;
  std::string reference;
  double rouge_l = 0.0;
  bool exact = false;
};

struct EvalResult {
  double rouge_l = 0.0;
  double em = 0.0;
  std::vector<Prediction> predictions;
};

// Prompt ids under the model's tokenizer: bos, prompt text, separating space.
std::vector<int> encode_prompt(const TokenizerSpec& tok, const QASample& s);
// Answer ids: output text followed by eos.
std::vector<int> encode_answer(const TokenizerSpec& tok, const QASample& s);

EvalResult evaluate(TinyTransformer& model, const TokenizerSpec& tok, const std::vector<QASample>& test,
                    std::size_t max_new = 16);

// Mean supervised loss over a dataset (no generation).
double mean_sft_loss(TinyTransformer& model, const TokenizerSpec& tok, const std::vector<QASample>& data);

void write_predictions(const std::vector<Prediction>& preds, const std::filesystem::path& path);
std::vector<Prediction> read_predictions(const std::filesystem::path& path);
// Recomputes both aggregate metrics from prediction/reference strings alone.
EvalResult rescore(const std::vector<Prediction>& preds);

}  // namespace coplms
