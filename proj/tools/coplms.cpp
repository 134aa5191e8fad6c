#include <iostream>

#include "CLI11.hpp"
#include "coplms/cli.hpp"

int main(int argc, char** argv) {
  using namespace coplms;
  CLI::App app{"Collaborative tuning of heterogeneous language models: desk-scale simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;

  auto add_common = [&](CLI::App* cmd, const std::string& default_out) {
    cmd->add_option("--config", config_path, "Experiment config (JSON); defaults are used when omitted");
    cmd->add_option("--seed", seed, "Override the config's seed list with one seed");
    cmd->add_option("--out", out, "Output directory (default: " + default_out + ")");
  };

  auto* gen = app.add_subcommand("generate-data", "Write the corpus, partitions and manifest as JSONL/JSON");
  add_common(gen, "data");
  auto* run = app.add_subcommand("run", "Run the configured method and write a run directory per seed");
  add_common(run, "the config's output_dir");

  auto* report = app.add_subcommand("report", "Tabulate metrics and comm ratios of finished runs");
  std::vector<std::string> run_dirs;
  std::string report_out;
  report->add_option("runs", run_dirs, "Run directories")->required();
  report->add_option("--out", report_out, "Directory for report.csv and report.txt");

  auto* verify = app.add_subcommand("verify", "Run the oracle equivalence suite");
  std::string fault;
  std::size_t grad_seeds = 5;
  verify->add_option("--inject-fault", fault, "Swap in a broken component (supported: pooling)");
  verify->add_option("--grad-seeds", grad_seeds, "Seeds per gradient check");

  CLI11_PARSE(app, argc, argv);

  auto load = [&]() {
    ExperimentConfig c = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    if (seed) c.seeds = {*seed};
    return c;
  };

  try {
    if (gen->parsed()) return cmd_generate_data(load(), out.empty() ? "data" : out, std::cout);
    if (run->parsed()) {
      const ExperimentConfig c = load();
      return cmd_run(c, out.empty() ? c.output_dir : out, std::cout);
    }
    if (report->parsed()) {
      std::vector<std::filesystem::path> dirs(run_dirs.begin(), run_dirs.end());
      return cmd_report(dirs, report_out, std::cout);
    }
    if (verify->parsed()) {
      VerifyOptions options;
      options.grad_seeds = grad_seeds;
      if (fault == "pooling") {
        options.pooling = faulty_pooling;
      } else if (!fault.empty()) {
        std::cerr << "unknown fault '" << fault << "'\n";
        return 2;
      }
      return cmd_verify(options, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  return 0;
}
