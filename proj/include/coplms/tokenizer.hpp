#pragma once

// Two deliberately incompatible tokenizers over printable ASCII:
//   - char: one token per character,
//   - bpe:  greedy pair merges learned from a corpus (merges never cross a space).
// Both share the same special ids and base alphabet, so a BPE tokenizer with no
// merges is indistinguishable from the char tokenizer.

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace coplms {

enum class TokenizerKind { Char, Bpe };

std::string to_string(TokenizerKind kind);
TokenizerKind tokenizer_kind_from_string(std::string_view s);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecials = 4;

  // Specials followed by the 95 printable ASCII characters.
  static Vocabulary base();

  int add(const std::string& token);  // returns the existing id if present
  bool contains(const std::string& token) const { return to_id_.count(token) != 0; }
  int id(const std::string& token) const;  // kUnk if absent
  const std::string& token(int id) const;
  bool is_special(int id) const { return id >= 0 && id < kNumSpecials; }
  std::size_t size() const { return tokens_.size(); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> to_id_;
};

struct TokenizerSpec {
  TokenizerKind kind = TokenizerKind::Char;
  Vocabulary vocabulary = Vocabulary::base();
  std::vector<std::pair<std::string, std::string>> merges;  // in merge order

  std::size_t vocab_size() const { return vocabulary.size(); }
};

TokenizerSpec make_char_tokenizer();

// Greedy highest-frequency pair merging, ties broken lexicographically on
// (left, right). Words are split on ' '; the space is its own token and never
// merged. Throws on an empty corpus.
TokenizerSpec train_bpe(const std::vector<std::string>& corpus, std::size_t num_merges);

// Characters outside printable ASCII become kUnk.
std::vector<int> encode(const TokenizerSpec& spec, std::string_view text);
// Specials render as "". Throws std::out_of_range on unknown ids.
std::string decode(const TokenizerSpec& spec, const std::vector<int>& ids);
// Surface string of each id (specials -> ""), used for alignment.
std::vector<std::string> token_strings(const TokenizerSpec& spec, const std::vector<int>& ids);

bool is_alphabet_pure(std::string_view text);

// Text serialization; see README "Tokenizer file format".
void save_tokenizer(const TokenizerSpec& spec, const std::filesystem::path& path);
TokenizerSpec load_tokenizer(const std::filesystem::path& path);
std::string serialize_tokenizer(const TokenizerSpec& spec);
TokenizerSpec parse_tokenizer(std::string_view text);

}  // namespace coplms
