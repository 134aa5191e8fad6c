#include "coplms/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace coplms {

namespace {

constexpr char kFirstPrintable = 32;
constexpr char kLastPrintable = 126;

const char* const kSpecialNames[] = {"<pad>", "<bos>", "<eos>", "<unk>"};

bool printable(char c) { return c >= kFirstPrintable && c <= kLastPrintable; }

// Splits into words and single-space separators, each a list of 1-char symbols.
std::vector<std::vector<std::string>> pre_tokenize(std::string_view text) {
  std::vector<std::vector<std::string>> pieces;
  std::vector<std::string> word;
  for (char c : text) {
    if (c == ' ') {
      if (!word.empty()) pieces.push_back(std::move(word));
      word.clear();
      pieces.push_back({" "});
    } else {
      word.emplace_back(1, c);
    }
  }
  if (!word.empty()) pieces.push_back(std::move(word));
  return pieces;
}

void apply_merge(std::vector<std::string>& symbols, const std::string& left,
                 const std::string& right) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
      out.push_back(left + right);
      ++i;
    } else {
      out.push_back(symbols[i]);
    }
  }
  symbols = std::move(out);
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case ' ': out += "\\s"; break;
      default: out += c;
    }
  }
  return out;
}

std::string unescape(std::string_view s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (++i >= s.size()) throw std::runtime_error("tokenizer file: dangling escape");
    switch (s[i]) {
      case '\\': out += '\\'; break;
      case 't': out += '\t'; break;
      case 'n': out += '\n'; break;
      case 's': out += ' '; break;
      default: throw std::runtime_error(std::string("tokenizer file: bad escape \\") + s[i]);
    }
  }
  return out;
}

}  // namespace

std::string to_string(TokenizerKind kind) { return kind == TokenizerKind::Char ? "char" : "bpe"; }

TokenizerKind tokenizer_kind_from_string(std::string_view s) {
  if (s == "char") return TokenizerKind::Char;
  if (s == "bpe") return TokenizerKind::Bpe;
  throw std::invalid_argument("unknown tokenizer kind '" + std::string(s) + "'");
}

Vocabulary Vocabulary::base() {
  Vocabulary v;
  for (const char* name : kSpecialNames) v.tokens_.emplace_back(name);
  for (char c = kFirstPrintable; c <= kLastPrintable; ++c) v.add(std::string(1, c));
  return v;
}

int Vocabulary::add(const std::string& token) {
  if (auto it = to_id_.find(token); it != to_id_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  to_id_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = to_id_.find(token);
  return it == to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("vocabulary: unknown id " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

TokenizerSpec make_char_tokenizer() { return TokenizerSpec{}; }

TokenizerSpec train_bpe(const std::vector<std::string>& corpus, std::size_t num_merges) {
  if (corpus.empty()) throw std::invalid_argument("train_bpe: empty corpus");
  TokenizerSpec spec;
  spec.kind = TokenizerKind::Bpe;

  // Distinct words with multiplicities; spaces never participate in merges.
  std::map<std::string, std::size_t> word_counts;
  for (const std::string& text : corpus) {
    for (auto& piece : pre_tokenize(text)) {
      if (piece.size() == 1 && piece[0] == " ") continue;
      std::string w;
      for (auto& s : piece) w += s;
      ++word_counts[w];
    }
  }
  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  for (auto& [w, n] : word_counts) {
    std::vector<std::string> symbols;
    for (char c : w) symbols.emplace_back(1, printable(c) ? c : '?');
    words.emplace_back(std::move(symbols), n);
  }

  for (std::size_t step = 0; step < num_merges; ++step) {
    std::map<std::pair<std::string, std::string>, std::size_t> pair_counts;
    for (auto& [symbols, n] : words)
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) pair_counts[{symbols[i], symbols[i + 1]}] += n;
    if (pair_counts.empty()) break;
    // std::map iterates lexicographically, so strict '>' keeps the smallest pair on ties.
    auto best = pair_counts.begin();
    for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it)
      if (it->second > best->second) best = it;
    const auto [left, right] = best->first;
    spec.merges.emplace_back(left, right);
    spec.vocabulary.add(left + right);
    for (auto& [symbols, n] : words) apply_merge(symbols, left, right);
  }
  return spec;
}

std::vector<int> encode(const TokenizerSpec& spec, std::string_view text) {
  std::vector<int> ids;
  for (auto& piece : pre_tokenize(text)) {
    if (spec.kind == TokenizerKind::Bpe && piece.size() > 1) {
      for (const auto& [left, right] : spec.merges) apply_merge(piece, left, right);
    }
    for (const std::string& s : piece) {
      const bool ok = s.size() > 1 || printable(s[0]);
      ids.push_back(ok ? spec.vocabulary.id(s) : Vocabulary::kUnk);
    }
  }
  return ids;
}

std::string decode(const TokenizerSpec& spec, const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    const std::string& tok = spec.vocabulary.token(id);
    if (!spec.vocabulary.is_special(id)) out += tok;
  }
  return out;
}

std::vector<std::string> token_strings(const TokenizerSpec& spec, const std::vector<int>& ids) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) {
    const std::string& tok = spec.vocabulary.token(id);
    out.push_back(spec.vocabulary.is_special(id) ? std::string() : tok);
  }
  return out;
}

bool is_alphabet_pure(std::string_view text) {
  return std::all_of(text.begin(), text.end(), printable);
}

// Format:
//   coplms-tokenizer 1
//   kind <char|bpe>
//   vocab <n>
//   <id>\t<escaped token>            (n lines; specials included)
//   merges <m>
//   <escaped left>\t<escaped right>  (m lines)
std::string serialize_tokenizer(const TokenizerSpec& spec) {
  std::ostringstream out;
  out << "coplms-tokenizer 1\n";
  out << "kind " << to_string(spec.kind) << '\n';
  out << "vocab " << spec.vocabulary.size() << '\n';
  for (std::size_t i = 0; i < spec.vocabulary.size(); ++i)
    out << i << '\t' << escape(spec.vocabulary.token(static_cast<int>(i))) << '\n';
  out << "merges " << spec.merges.size() << '\n';
  for (const auto& [l, r] : spec.merges) out << escape(l) << '\t' << escape(r) << '\n';
  return out.str();
}

TokenizerSpec parse_tokenizer(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  auto next = [&](const char* what) {
    if (!std::getline(in, line)) throw std::runtime_error(std::string("tokenizer file: missing ") + what);
    return line;
  };
  if (next("header") != "coplms-tokenizer 1") throw std::runtime_error("tokenizer file: bad header");
  const std::string kind_line = next("kind");
  if (kind_line.rfind("kind ", 0) != 0) throw std::runtime_error("tokenizer file: expected kind");
  TokenizerSpec spec;
  spec.kind = tokenizer_kind_from_string(kind_line.substr(5));

  const std::string vocab_line = next("vocab");
  if (vocab_line.rfind("vocab ", 0) != 0) throw std::runtime_error("tokenizer file: expected vocab");
  const std::size_t n = std::stoul(vocab_line.substr(6));
  const Vocabulary base = Vocabulary::base();
  std::vector<std::string> entries;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string l = next("vocab entry");
    const auto tab = l.find('\t');
    if (tab == std::string::npos || std::stoul(l.substr(0, tab)) != i) {
      throw std::runtime_error("tokenizer file: malformed vocab line " + std::to_string(i));
    }
    entries.push_back(unescape(std::string_view(l).substr(tab + 1)));
  }
  if (n < base.size()) throw std::runtime_error("tokenizer file: vocabulary smaller than base alphabet");
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (entries[i] != base.token(static_cast<int>(i))) {
      throw std::runtime_error("tokenizer file: base alphabet mismatch at id " + std::to_string(i));
    }
  }
  for (std::size_t i = base.size(); i < n; ++i) spec.vocabulary.add(entries[i]);
  if (spec.vocabulary.size() != n) throw std::runtime_error("tokenizer file: duplicate vocabulary entries");

  const std::string merges_line = next("merges");
  if (merges_line.rfind("merges ", 0) != 0) throw std::runtime_error("tokenizer file: expected merges");
  const std::size_t m = std::stoul(merges_line.substr(7));
  for (std::size_t i = 0; i < m; ++i) {
    const std::string l = next("merge entry");
    const auto tab = l.find('\t');
    if (tab == std::string::npos) throw std::runtime_error("tokenizer file: malformed merge line");
    std::string left = unescape(std::string_view(l).substr(0, tab));
    std::string right = unescape(std::string_view(l).substr(tab + 1));
    if (!spec.vocabulary.contains(left + right)) {
      throw std::runtime_error("tokenizer file: merge output '" + left + right + "' not in vocabulary");
    }
    spec.merges.emplace_back(std::move(left), std::move(right));
  }
  if (spec.kind == TokenizerKind::Char && !spec.merges.empty()) {
    throw std::runtime_error("tokenizer file: char tokenizer cannot carry merges");
  }
  return spec;
}

void save_tokenizer(const TokenizerSpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write tokenizer to " + path.string());
  out << serialize_tokenizer(spec);
}

TokenizerSpec load_tokenizer(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read tokenizer from " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_tokenizer(buf.str());
}

}  // namespace coplms
