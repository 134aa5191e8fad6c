#include <fstream>
#include <stdexcept>

#include "coplms/data.hpp"

namespace coplms {

nlohmann::json to_json(const QASample& s) {
  return {{"instruction", s.instruction}, {"input", s.input}, {"output", s.output}, {"domain", s.domain}};
}

QASample sample_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("expected a JSON object");
  auto field = [&](const char* name) {
    auto it = j.find(name);
    if (it == j.end()) throw std::invalid_argument(std::string("missing field '") + name + "'");
    if (!it->is_string()) throw std::invalid_argument(std::string("field '") + name + "' is not a string");
    return it->get<std::string>();
  };
  QASample s{field("instruction"), field("input"), field("output"), field("domain")};
  if (s.output.empty()) throw std::invalid_argument("field 'output' is empty");
  return s;
}

void write_jsonl(const std::vector<QASample>& samples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : samples) out << to_json(s).dump() << '\n';
}

std::vector<QASample> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<QASample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace coplms
