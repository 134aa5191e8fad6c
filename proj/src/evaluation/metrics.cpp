#include <algorithm>
#include <cctype>
#include <fstream>
#include <stdexcept>

#include "coplms/evaluation.hpp"

namespace coplms {

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::string_view candidate, std::string_view reference) {
  const auto c = split_words(candidate);
  const auto r = split_words(reference);
  if (c.empty() || r.empty()) return 0.0;
  const auto lcs = static_cast<double>(lcs_length(c, r));
  if (lcs == 0.0) return 0.0;
  const double precision = lcs / static_cast<double>(c.size());
  const double recall = lcs / static_cast<double>(r.size());
  return 2.0 * precision * recall / (precision + recall);
}

std::string normalize_answer(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out += ' ';
    for (char c : w) out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

double exact_match(const std::vector<std::string>& candidates, const std::vector<std::string>& references) {
  if (candidates.size() != references.size()) throw std::invalid_argument("exact_match: length mismatch");
  if (candidates.empty()) throw std::invalid_argument("exact_match: empty lists");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (normalize_answer(candidates[i]) == normalize_answer(references[i])) ++hits;
  return static_cast<double>(hits) / static_cast<double>(candidates.size());
}

std::vector<int> encode_prompt(const TokenizerSpec& tok, const QASample& s) {
  std::vector<int> ids{Vocabulary::kBos};
  const auto body = encode(tok, prompt_text(s) + " ");
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

std::vector<int> encode_answer(const TokenizerSpec& tok, const QASample& s) {
  auto ids = encode(tok, s.output);
  ids.push_back(Vocabulary::kEos);
  return ids;
}

EvalResult rescore(const std::vector<Prediction>& preds) {
  if (preds.empty()) throw std::invalid_argument("rescore: no predictions");
  EvalResult r;
  std::vector<std::string> cands, refs;
  for (auto p : preds) {
    p.rouge_l = rouge_l(p.prediction, p.reference);
    p.exact = normalize_answer(p.prediction) == normalize_answer(p.reference);
    r.rouge_l += p.rouge_l;
    cands.push_back(p.prediction);
    refs.push_back(p.reference);
    r.predictions.push_back(std::move(p));
  }
  r.rouge_l /= static_cast<double>(preds.size());
  r.em = exact_match(cands, refs);
  return r;
}

EvalResult evaluate(TinyTransformer& model, const TokenizerSpec& tok, const std::vector<QASample>& test,
                    std::size_t max_new) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  std::vector<Prediction> preds;
  for (std::size_t i = 0; i < test.size(); ++i) {
    try {
      const auto out = generate(model, encode_prompt(tok, test[i]), max_new, Vocabulary::kEos);
      preds.push_back({i, decode(tok, out), test[i].output, 0.0, false});
    } catch (const std::exception& e) {
      throw std::runtime_error("evaluate: sample " + std::to_string(i) + ": " + e.what());
    }
  }
  return rescore(preds);
}

double mean_sft_loss(TinyTransformer& model, const TokenizerSpec& tok, const std::vector<QASample>& data) {
  if (data.empty()) throw std::invalid_argument("mean_sft_loss: empty dataset");
  double total = 0.0;
  for (const auto& s : data) total += sft_loss(model, encode_prompt(tok, s), encode_answer(tok, s));
  return total / static_cast<double>(data.size());
}

void write_predictions(const std::vector<Prediction>& preds, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& p : preds) {
    out << nlohmann::json{{"id", p.id},
                          {"prediction", p.prediction},
                          {"reference", p.reference},
                          {"rouge_l", p.rouge_l},
                          {"em", p.exact ? 1 : 0}}
               .dump()
        << '\n';
  }
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<Prediction> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("id").get<std::size_t>(), j.at("prediction").get<std::string>(),
                   j.at("reference").get<std::string>(), j.at("rouge_l").get<double>(),
                   j.at("em").get<int>() == 1});
  }
  return out;
}

}  // namespace coplms
