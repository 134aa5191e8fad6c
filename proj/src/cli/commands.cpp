#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "coplms/cli.hpp"
#include "coplms/federation.hpp"

namespace coplms {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig single_seed(ExperimentConfig c, std::uint64_t seed) {
  c.seeds = {seed};
  return c;
}

void write_run(const fs::path& dir, const ExperimentConfig& config, std::uint64_t seed, ExperimentResult& r) {
  write_text(dir / "report.json", report_json(config, seed, r).dump(2) + "\n");
  write_text(dir / "ledger.csv", r.state.ledger.to_csv());

  fs::create_directories(dir / "checkpoints");
  fs::create_directories(dir / "tokenizers");
  for (auto& d : r.state.devices) {
    save_checkpoint(d.slm, dir / "checkpoints" / (d.name + "_slm.ckpt"));
    if (d.dpm) save_checkpoint(*d.dpm, dir / "checkpoints" / (d.name + "_dpm.ckpt"));
    save_tokenizer(d.slm_tok, dir / "tokenizers" / (d.name + ".tok"));
  }
  if (r.state.server.llm) save_checkpoint(*r.state.server.llm, dir / "checkpoints" / "server_llm.ckpt");
  if (r.state.server.dpm) save_checkpoint(*r.state.server.dpm, dir / "checkpoints" / "server_dpm.ckpt");
  save_tokenizer(r.state.server.tok, dir / "tokenizers" / "server.tok");

  if (!r.rounds.empty()) {
    fs::create_directories(dir / "predictions");
    const RoundReport& last = r.rounds.back();
    std::size_t p = 0;
    for (const auto& e : last.endpoints) {
      if (!e.rouge_l || p >= last.predictions.size()) continue;
      write_predictions(last.predictions[p++], dir / "predictions" / (e.name + "_" + e.model + ".jsonl"));
    }
  }
}

}  // namespace

std::string run_dir_name(const ExperimentConfig& config, std::uint64_t seed) {
  std::string name = to_string(config.method);
  if (config.method == Method::CoPlms) {
    if (config.ablations.no_dst) name += "-no_dst";
    if (config.ablations.no_server_saml) name += "-no_server_saml";
  }
  return name + "-seed" + std::to_string(seed);
}

int cmd_generate_data(const ExperimentConfig& config, const fs::path& out, std::ostream& log) {
  try {
    validate(config);
    fs::create_directories(out);
    for (std::uint64_t seed : config.seeds) {
      const fs::path dir = config.seeds.size() == 1 ? out : out / ("seed" + std::to_string(seed));
      fs::create_directories(dir);
      const auto corpus = federated_corpus(config, seed);
      PartitionSpec spec;
      spec.devices = config.num_devices;
      spec.lambda = config.lambda;
      spec.per_device = config.data.per_device_size;
      spec.server_size = config.data.server_size;
      spec.train_fraction = config.data.train_fraction;
      spec.seed = derive_seed(seed, "partition");
      const auto part = dirichlet_partition(corpus, spec);
      write_jsonl(corpus, dir / "global.jsonl");
      write_jsonl(pretrain_corpus(config), dir / "pretrain.jsonl");
      for (std::size_t i = 0; i < part.devices.size(); ++i) {
        write_jsonl(part.devices[i].train, dir / ("device" + std::to_string(i) + "_train.jsonl"));
        write_jsonl(part.devices[i].test, dir / ("device" + std::to_string(i) + "_test.jsonl"));
      }
      write_jsonl(part.server.train, dir / "server_train.jsonl");
      write_jsonl(part.server.test, dir / "server_test.jsonl");
      write_text(dir / "manifest.json", partition_manifest(part, spec).dump(2) + "\n");
      write_text(dir / "resolved_config.json", to_json(single_seed(config, seed)).dump(2) + "\n");
      log << "wrote " << dir.string() << "\n";
    }
    return 0;
  } catch (const std::exception& e) {
    log << "generate-data failed: " << e.what() << "\n";
    return 1;
  }
}

int cmd_run(const ExperimentConfig& config, const fs::path& out, std::ostream& log) {
  try {
    validate(config);
  } catch (const std::exception& e) {
    log << e.what() << "\n";
    return 2;
  }
  PretrainCache cache;
  int status = 0;
  for (std::uint64_t seed : config.seeds) {
    const fs::path dir = out / run_dir_name(config, seed);
    try {
      fs::create_directories(dir);
      fs::remove(dir / "diagnostic.txt");
      const ExperimentConfig resolved = single_seed(config, seed);
      write_text(dir / "resolved_config.json", to_json(resolved).dump(2) + "\n");
      ExperimentResult r = run_experiment(resolved, seed, &cache);
      write_run(dir, resolved, seed, r);
      log << "run " << dir.string() << " done (" << r.rounds.size() << " rounds)\n";
    } catch (const std::exception& e) {
      std::ofstream diag(dir / "diagnostic.txt");
      diag << "run failed for seed " << seed << "\n" << e.what() << "\n";
      log << "run " << dir.string() << " failed: " << e.what() << "\n";
      status = 1;
    }
  }
  return status;
}

const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols = {"run",     "method", "seed",      "round",     "endpoint",
                                                "model",   "rouge_l", "em",       "test_loss", "comm_ratio"};
  return cols;
}

namespace {

// Comm ratio recomputed from the ledger CSV and the resident counts in the report.
double ratio_from_files(const fs::path& dir, const std::string& endpoint, std::size_t resident) {
  std::istringstream in(read_text(dir / "ledger.csv"));
  std::string line;
  std::getline(in, line);  // header
  std::size_t moved = 0;
  std::map<std::string, int> rounds;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 8) throw std::runtime_error((dir / "ledger.csv").string() + ": malformed row");
    rounds[f[0]] = 1;
    if (f[2] == endpoint || f[3] == endpoint) moved += std::stoull(f[5]);
  }
  if (rounds.empty() || resident == 0) return 0.0;
  return static_cast<double>(moved) / static_cast<double>(rounds.size()) / static_cast<double>(resident);
}

std::string cell(const json& v, int precision = 4) {
  if (v.is_null()) return "";
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v.get<double>();
  return s.str();
}

}  // namespace

int cmd_report(const std::vector<fs::path>& run_dirs, const fs::path& out, std::ostream& log) {
  try {
    if (run_dirs.empty()) throw std::invalid_argument("report: no run directories given");
    std::ostringstream csv, text;
    for (std::size_t i = 0; i < report_columns().size(); ++i) csv << (i ? "," : "") << report_columns()[i];
    csv << "\n";
    text << std::left << std::setw(34) << "run" << std::setw(6) << "round" << std::setw(10) << "endpoint"
         << std::setw(6) << "model" << std::setw(9) << "rouge_l" << std::setw(9) << "em" << std::setw(11)
         << "test_loss"
         << "comm_ratio\n";
    for (const auto& dir : run_dirs) {
      const json report = json::parse(read_text(dir / "report.json"));
      const std::string run = dir.filename().string();
      std::map<std::string, double> ratios;
      for (const auto& d : report.at("comm").at("devices")) {
        ratios[d.at("name").get<std::string>()] =
            ratio_from_files(dir, d.at("name").get<std::string>(), d.at("resident_scalars").get<std::size_t>());
      }
      for (const auto& r : report.at("rounds")) {
        for (const auto& e : r.at("endpoints")) {
          const std::string name = e.at("name").get<std::string>();
          const std::string model = e.at("model").get<std::string>();
          std::string ratio;
          if (model == "slm" && ratios.count(name)) {
            std::ostringstream s;
            s << std::setprecision(6) << ratios[name];
            ratio = s.str();
          }
          csv << run << ',' << report.at("method").get<std::string>() << ',' << report.at("seed").get<std::uint64_t>()
              << ',' << r.at("round").get<std::size_t>() << ',' << name << ',' << model << ','
              << cell(e.at("rouge_l"), 6) << ',' << cell(e.at("em"), 6) << ',' << cell(e.at("test_loss"), 6) << ','
              << ratio << '\n';
          text << std::left << std::setw(34) << run << std::setw(6) << r.at("round").get<std::size_t>()
               << std::setw(10) << name << std::setw(6) << model << std::setw(9) << cell(e.at("rouge_l"))
               << std::setw(9) << cell(e.at("em")) << std::setw(11) << cell(e.at("test_loss")) << ratio << "\n";
        }
      }
    }
    if (!out.empty()) {
      fs::create_directories(out);
      write_text(out / "report.csv", csv.str());
      write_text(out / "report.txt", text.str());
    }
    log << text.str();
    return 0;
  } catch (const std::exception& e) {
    log << "report failed: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace coplms
