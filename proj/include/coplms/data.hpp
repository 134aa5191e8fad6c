#pragma once

// Synthetic multi-domain QA corpus, Dirichlet domain partitioning, and JSONL I/O.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

namespace coplms {

struct QASample {
  std::string instruction;
  std::string input;
  std::string output;
  std::string domain;

  bool operator==(const QASample&) const = default;
};

// Prompt text fed to a model; the answer follows after a single space.
std::string prompt_text(const QASample& s);

// Built-in domains: "color", "sound", "capital", "opposite", "material".
std::vector<std::string> builtin_domains();

// Which facts of each domain a generator draws from. Public facts stand in for
// what a pretrained checkpoint already knows; private facts only exist in
// local datasets.
enum class FactPool { All, Public, Private };

// per_domain samples per domain, grouped by domain in the given order.
// Throws on fewer than 2 domains or an unknown domain name.
std::vector<QASample> generate_corpus(const std::vector<std::string>& domains, std::size_t per_domain,
                                      std::uint64_t seed, FactPool pool = FactPool::All);

struct PartitionSpec {
  std::size_t devices = 3;
  double lambda = 1.0;
  std::size_t per_device = 1000;
  std::size_t server_size = 1000;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;

  void validate() const;
};

struct LocalDataset {
  std::vector<QASample> train;
  std::vector<QASample> test;
  std::vector<std::size_t> train_ids;  // indices into the source corpus
  std::vector<std::size_t> test_ids;

  std::size_t size() const { return train.size() + test.size(); }
};

struct Partition {
  std::vector<LocalDataset> devices;
  LocalDataset server;
  std::vector<std::vector<double>> mixtures;  // per-device Dir(lambda) draw over domains
  std::vector<std::string> domains;
};

// Draws a symmetric Dirichlet(lambda) vector of length n via normalized Gamma
// variates computed in log space (stable for lambda << 1).
std::vector<double> sample_dirichlet(std::size_t n, double lambda, std::mt19937_64& rng);

// Per device: mixture ~ Dir(lambda) over domains, then per_device draws without
// replacement (exhausted domains are renormalized away). The server set is then
// drawn uniformly from what remains. Throws when the global pool runs out.
Partition dirichlet_partition(const std::vector<QASample>& corpus, const PartitionSpec& spec);

// Share of the most frequent domain in a dataset (train + test).
double max_domain_share(const LocalDataset& d);

nlohmann::json partition_manifest(const Partition& p, const PartitionSpec& spec);

nlohmann::json to_json(const QASample& s);
QASample sample_from_json(const nlohmann::json& j);

void write_jsonl(const std::vector<QASample>& samples, const std::filesystem::path& path);
// Order preserving. Errors carry "line N".
std::vector<QASample> load_jsonl(const std::filesystem::path& path);

}  // namespace coplms
