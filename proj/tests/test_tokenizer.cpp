#include <map>
#include <filesystem>

#include "coplms/tokenizer.hpp"
#include "doctest.h"

using namespace coplms;

namespace {

// Reference pair counting for one merge step, written independently of the library.
std::pair<std::string, std::string> best_pair(const std::vector<std::vector<std::string>>& words) {
  std::map<std::pair<std::string, std::string>, int> counts;
  for (const auto& w : words)
    for (std::size_t i = 0; i + 1 < w.size(); ++i) counts[{w[i], w[i + 1]}]++;
  std::pair<std::string, std::string> best;
  int top = 0;
  for (const auto& [p, c] : counts)
    if (c > top) top = c, best = p;  // map order gives the lexicographic tie-break
  return best;
}

}  // namespace

TEST_CASE("char tokenizer round trips printable text") {
  const auto tok = make_char_tokenizer();
  CHECK(tok.vocab_size() == Vocabulary::kNumSpecials + 95);
  const std::string text = "What is the color of grass? green!";
  const auto ids = encode(tok, text);
  CHECK(ids.size() == text.size());
  CHECK(decode(tok, ids) == text);
}

TEST_CASE("unknown characters become unk and specials decode to nothing") {
  const auto tok = make_char_tokenizer();
  const auto ids = encode(tok, "a\tb");
  CHECK(ids[1] == Vocabulary::kUnk);
  CHECK(decode(tok, {Vocabulary::kBos, ids[0], Vocabulary::kEos}) == "a");
  CHECK_THROWS_AS(decode(tok, {100000}), std::out_of_range);
  CHECK_FALSE(is_alphabet_pure("caf\xc3\xa9"));
  CHECK(is_alphabet_pure("plain text"));
}

TEST_CASE("bpe first merge matches independent pair counting") {
  const std::vector<std::string> corpus = {"low lower lowest", "slow low", "newer wider"};
  std::vector<std::vector<std::string>> words;
  for (const auto& line : corpus) {
    std::string w;
    for (char ch : line + " ") {
      if (ch == ' ') {
        std::vector<std::string> sym;
        for (char c2 : w) sym.push_back(std::string(1, c2));
        if (!sym.empty()) words.push_back(sym);
        w.clear();
      } else {
        w += ch;
      }
    }
  }
  const auto tok = train_bpe(corpus, 3);
  REQUIRE(tok.merges.size() == 3);
  CHECK(tok.merges[0] == best_pair(words));
  CHECK(tok.kind == TokenizerKind::Bpe);
}

TEST_CASE("bpe merges never cross a space and round trip") {
  const std::vector<std::string> corpus = {"a b a b a b", "ab ab ab"};
  const auto tok = train_bpe(corpus, 10);
  for (const auto& [l, r] : tok.merges) {
    CHECK(l.find(' ') == std::string::npos);
    CHECK(r.find(' ') == std::string::npos);
  }
  for (const std::string text : {"ab ab", "a b", "the capital of France?", ""}) {
    CHECK(decode(tok, encode(tok, text)) == text);
  }
  CHECK(encode(tok, "ab").size() == 1);
}

TEST_CASE("bpe with zero merges tokenizes like the char tokenizer") {
  const auto bpe = train_bpe({"hello world"}, 0);
  const auto chr = make_char_tokenizer();
  CHECK(encode(bpe, "hello world") == encode(chr, "hello world"));
  CHECK_THROWS(train_bpe({}, 4));
}

TEST_CASE("token strings expose surfaces for alignment") {
  const auto tok = train_bpe({"the map the map the map"}, 6);
  const auto ids = encode(tok, "the map");
  const auto s = token_strings(tok, ids);
  std::string joined;
  for (const auto& x : s) joined += x;
  CHECK(joined == "the map");
  CHECK(token_strings(tok, {Vocabulary::kBos})[0].empty());
}

TEST_CASE("tokenizer serialization round trips, including awkward characters") {
  const auto tok = train_bpe({"tab\\ slash \\\\ and 100% sure", "tab\\ tab\\ tab\\"}, 8);
  const auto back = parse_tokenizer(serialize_tokenizer(tok));
  CHECK(back.kind == tok.kind);
  CHECK(back.merges == tok.merges);
  CHECK(back.vocab_size() == tok.vocab_size());
  CHECK(encode(back, "tab\\ slash") == encode(tok, "tab\\ slash"));

  const auto path = std::filesystem::temp_directory_path() / "coplms_tok_test.tok";
  save_tokenizer(tok, path);
  CHECK(load_tokenizer(path).merges == tok.merges);
  std::filesystem::remove(path);
  CHECK_THROWS(parse_tokenizer("not a tokenizer\n"));
}
