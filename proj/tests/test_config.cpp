#include <filesystem>
#include <fstream>

#include "coplms/config.hpp"
#include "doctest.h"

using namespace coplms;
using nlohmann::json;

namespace {

std::vector<std::string> problems_of(const json& j) {
  try {
    config_from_json(j);
  } catch (const ConfigError& e) {
    return e.problems();
  }
  return {};
}

bool mentions(const std::vector<std::string>& problems, const std::string& path) {
  for (const auto& p : problems)
    if (p.rfind(path + ":", 0) == 0) return true;
  return false;
}

}  // namespace

TEST_CASE("defaults validate and describe a heterogeneous federation") {
  const ExperimentConfig c;
  CHECK_NOTHROW(validate(c));
  CHECK(c.devices.size() == c.num_devices);
  bool has_char = false, has_bpe = false;
  for (const auto& d : c.devices) {
    has_char = has_char || d.tokenizer.kind == TokenizerKind::Char;
    has_bpe = has_bpe || d.tokenizer.kind == TokenizerKind::Bpe;
  }
  CHECK(has_char);
  CHECK(has_bpe);
  CHECK(c.dpm.layers < c.llm.layers);
  CHECK(c.dpm.hidden < c.llm.hidden);
}

TEST_CASE("resolved json round trips and an empty object means defaults") {
  ExperimentConfig c;
  c.lambda = 0.1;
  c.seeds = {3, 4};
  c.devices[1].tokenizer.merges = 50;
  c.lora.targets = {LoraTarget::Wk};
  c.ablations.no_dst = true;
  const json j = to_json(c);
  CHECK(to_json(config_from_json(j)) == j);
  CHECK(to_json(config_from_json(json::object())) == to_json(ExperimentConfig{}));
}

TEST_CASE("every problem is reported at once with its field path") {
  const json j = {{"lambda", -1.0},
                  {"optimizer", {{"lr", 0.0}, {"momentum", 0.9}}},
                  {"devices", {{{"heads", 3}}, {{"layers", "two"}}, json::object()}},
                  {"colour", "red"}};
  const auto p = problems_of(j);
  CHECK(mentions(p, "optimizer.momentum"));
  CHECK(mentions(p, "devices[1].layers"));
  CHECK(mentions(p, "colour"));
  CHECK(p.size() == 3);

  // Structural problems come first; semantic checks report after parsing succeeds.
  const auto q = problems_of({{"lambda", -1.0}, {"optimizer", {{"lr", 0.0}}}, {"devices", {{{"heads", 3}}, json::object(), json::object()}}});
  CHECK(mentions(q, "lambda"));
  CHECK(mentions(q, "optimizer.lr"));
  CHECK(mentions(q, "devices[0].heads"));
}

TEST_CASE("semantic checks") {
  CHECK(mentions(problems_of({{"method", "fedavg"}}), "method"));
  CHECK(mentions(problems_of({{"dpm", {{"layers", 4}}}}), "dpm"));
  CHECK(mentions(problems_of({{"num_devices", 2}}), "devices"));
  CHECK(mentions(problems_of({{"alpha", 1.5}}), "alpha"));
  CHECK(mentions(problems_of({{"lora", {{"rank", 100}}}}), "lora.rank"));
  CHECK(mentions(problems_of({{"lora", {{"targets", {"wq", "wq"}}}}}), "lora.targets"));
  CHECK(mentions(problems_of({{"data", {{"domains", {"color"}}}}}), "data.domains"));
  CHECK(mentions(problems_of({{"data", {{"per_domain", 10}}}}), "data.per_domain"));
  CHECK(mentions(problems_of({{"seeds", json::array()}}), "seeds"));
  CHECK(mentions(problems_of({{"eval", {{"every", 0}}}}), "eval.every"));
}

TEST_CASE("shipped configs load") {
  for (const char* name : {"toy.json", "default.json"}) {
    const auto path = std::filesystem::path(COPLMS_SOURCE_DIR) / "configs" / name;
    CHECK_NOTHROW(load_config(path));
  }
  CHECK(to_json(load_config(std::filesystem::path(COPLMS_SOURCE_DIR) / "configs" / "default.json")) ==
        to_json(ExperimentConfig{}));
}

TEST_CASE("unreadable or malformed files name the path") {
  const auto p = std::filesystem::temp_directory_path() / "coplms_bad_config.json";
  std::ofstream(p) << "{ not json";
  CHECK_THROWS_WITH(load_config(p), doctest::Contains("coplms_bad_config.json"));
  std::filesystem::remove(p);
  CHECK_THROWS(load_config("/nonexistent/config.json"));
}
