#pragma once

// Subcommand implementations behind the `coplms` executable. Each returns a
// process exit code; errors are reported on stderr and, for runs, in a
// diagnostic file inside the run directory.

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "coplms/config.hpp"
#include "coplms/numerics.hpp"
#include "coplms/transfer.hpp"

namespace coplms {

int cmd_generate_data(const ExperimentConfig& config, const std::filesystem::path& out, std::ostream& log);

// One run directory per seed: <out>/<method>[-no_dst][-no_server_saml]-seed<k>.
int cmd_run(const ExperimentConfig& config, const std::filesystem::path& out, std::ostream& log);
std::string run_dir_name(const ExperimentConfig& config, std::uint64_t seed);

// Writes report.csv and report.txt into `out` (when non-empty) and prints the text table.
int cmd_report(const std::vector<std::filesystem::path>& run_dirs, const std::filesystem::path& out,
               std::ostream& log);

// Columns of report.csv, in order.
const std::vector<std::string>& report_columns();

struct VerifyCheck {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct VerifyOptions {
  // Replaces the library pooling routine inside the pooling check; used to
  // confirm the suite catches a broken implementation.
  std::function<PooledDistribution(std::span<const double>, std::size_t)> pooling;
  std::size_t grad_seeds = 5;
};

// A deliberately wrong pooling (remainder dropped) for mutation testing.
PooledDistribution faulty_pooling(std::span<const double> logits, std::size_t k);

enum class GradLoss { Supervised, Transfer, ProxyMutual, PeerMutual };
std::string to_string(GradLoss g);

// Central-difference check of one loss on 1-layer toy models (a BPE proxy with
// LoRA and adapters, a char-tokenized peer with LoRA), every parameter trainable.
GradCheckResult gradient_probe(GradLoss which, std::uint64_t seed);

std::vector<VerifyCheck> run_verify(const VerifyOptions& options = {});
int cmd_verify(const VerifyOptions& options, std::ostream& log);

}  // namespace coplms
