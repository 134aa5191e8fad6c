#include <map>
#include <random>
#include <stdexcept>

#include "coplms/data.hpp"

namespace coplms {

namespace {

struct DomainBank {
  std::vector<std::string> instructions;
  std::vector<std::pair<std::string, std::string>> facts;  // even index = public
};

const std::map<std::string, DomainBank>& banks() {
  static const std::map<std::string, DomainBank> kBanks = {
      {"color",
       {{"what color is", "name the color of", "the color of"},
        {{"apple", "red"},       {"banana", "yellow"},  {"lime", "green"},     {"plum", "purple"},
         {"carrot", "orange"},   {"cherry", "dark red"}, {"grape", "purple"},  {"lemon", "yellow"},
         {"kiwi", "brown"},      {"pear", "light green"}, {"coconut", "brown"}, {"blueberry", "blue"},
         {"peach", "pink"},      {"fig", "deep purple"}, {"mango", "orange"},  {"olive", "dark green"}}}},
      {"sound",
       {{"what does it say", "the sound of a", "it makes this sound"},
        {{"cow", "moo"},     {"dog", "woof woof"}, {"cat", "meow"},   {"duck", "quack"},
         {"sheep", "baa"},   {"owl", "hoot hoot"}, {"lion", "roar"},  {"snake", "hiss"},
         {"horse", "neigh"}, {"pig", "oink"},      {"bee", "buzz"},   {"frog", "croak"},
         {"crow", "caw"},    {"mouse", "squeak"},  {"wolf", "howl"},  {"goat", "bleat"}}}},
      {"capital",
       {{"capital of", "what is the capital of", "main city of"},
        {{"france", "paris"},  {"spain", "madrid"},  {"italy", "rome"},        {"japan", "tokyo"},
         {"egypt", "cairo"},   {"peru", "lima"},     {"chile", "santiago"},    {"kenya", "nairobi"},
         {"china", "beijing"}, {"india", "new delhi"}, {"cuba", "havana"},     {"iran", "tehran"},
         {"nepal", "kathmandu"}, {"ghana", "accra"}, {"mali", "bamako"},       {"oman", "muscat"}}}},
      {"opposite",
       {{"opposite of", "antonym of", "the reverse of"},
        {{"hot", "cold"},     {"up", "down"},     {"big", "small"},   {"fast", "slow"},
         {"light", "dark"},   {"happy", "sad"},   {"open", "closed"}, {"early", "late"},
         {"full", "empty"},   {"old", "young"},   {"hard", "soft"},   {"rich", "poor"},
         {"wet", "dry"},      {"loud", "quiet"},  {"tall", "short"},  {"near", "far"}}}},
      {"material",
       {{"made of", "what is it made of", "material of"},
        {{"window", "glass"},  {"book", "paper"},     {"coin", "metal"},     {"shirt", "cotton"},
         {"table", "wood"},    {"bottle", "plastic"}, {"ring", "gold"},      {"brick", "clay"},
         {"tire", "rubber"},   {"sweater", "wool"},   {"nail", "iron"},      {"statue", "stone"},
         {"candle", "wax"},    {"scarf", "silk"},     {"pipe", "copper"},    {"boot", "leather"}}}},
  };
  return kBanks;
}

}  // namespace

std::string prompt_text(const QASample& s) {
  std::string p = s.instruction;
  if (!s.input.empty()) p += " " + s.input;
  return p + " =";
}

std::vector<std::string> builtin_domains() {
  std::vector<std::string> out;
  for (const auto& [name, bank] : banks()) out.push_back(name);
  return out;
}

std::vector<QASample> generate_corpus(const std::vector<std::string>& domains, std::size_t per_domain,
                                      std::uint64_t seed, FactPool pool) {
  if (domains.size() < 2) throw std::invalid_argument("generate_corpus: at least 2 domains are required");
  std::mt19937_64 rng(seed);
  std::vector<QASample> out;
  out.reserve(domains.size() * per_domain);
  for (const std::string& name : domains) {
    auto it = banks().find(name);
    if (it == banks().end()) throw std::invalid_argument("generate_corpus: unknown domain '" + name + "'");
    const DomainBank& bank = it->second;
    std::vector<std::size_t> facts;
    for (std::size_t i = 0; i < bank.facts.size(); ++i) {
      const bool is_public = i % 2 == 0;
      if (pool == FactPool::All || (pool == FactPool::Public) == is_public) facts.push_back(i);
    }
    std::uniform_int_distribution<std::size_t> pick_fact(0, facts.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_instr(0, bank.instructions.size() - 1);
    for (std::size_t n = 0; n < per_domain; ++n) {
      const auto& [entity, answer] = bank.facts[facts[pick_fact(rng)]];
      out.push_back({bank.instructions[pick_instr(rng)], entity, answer, name});
    }
  }
  return out;
}

}  // namespace coplms
