#pragma once

// Round orchestration between N devices and one server over an in-process
// message bus. Every payload that crosses the bus is encoded with the block
// wire format and recorded in a ledger, so traffic is auditable to the byte.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "coplms/config.hpp"
#include "coplms/data.hpp"
#include "coplms/evaluation.hpp"
#include "coplms/model.hpp"
#include "coplms/serialization.hpp"
#include "coplms/tokenizer.hpp"
#include "json.hpp"

namespace coplms {

// Independent per-purpose seeds from one run seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

struct DeviceState {
  std::size_t id = 0;
  std::string name;  // "device<i>"
  ArchConfig arch;
  TokenizerSpec slm_tok;
  TinyTransformer slm;
  std::optional<TinyTransformer> dpm;  // absent for the baselines
  LocalDataset data;
};

struct ServerState {
  TokenizerSpec tok;
  std::optional<TinyTransformer> llm;
  std::optional<TinyTransformer> dpm;
  LocalDataset data;
};

enum class Direction { Upload, Download };
std::string to_string(Direction d);

struct BlockDescriptor {
  std::string name;
  std::vector<std::size_t> shape;
};

struct Message {
  std::size_t round = 0;
  Direction direction = Direction::Upload;
  std::string from;
  std::string to;
  std::vector<BlockDescriptor> blocks;
  std::size_t scalar_count = 0;
  std::size_t byte_count = 0;  // scalar_count * 8
  std::size_t wire_bytes = 0;  // encoded payload including headers and names
};

class CommLedger {
 public:
  void append(Message m);
  const std::vector<Message>& messages() const { return messages_; }
  bool empty() const { return messages_.empty(); }

  std::size_t total_scalars() const;
  std::map<std::size_t, std::size_t> scalars_per_round() const;
  // Scalars sent or received by an endpoint.
  std::map<std::string, std::size_t> scalars_per_endpoint() const;
  std::size_t round_count() const;

  std::string to_csv() const;

 private:
  std::vector<Message> messages_;
};

// Sends `blocks` over the bus: encodes them, appends the ledger entry and
// returns the decoded copy the receiver sees.
BlockSet transmit(CommLedger& ledger, std::size_t round, Direction dir, const std::string& from,
                  const std::string& to, const BlockSet& blocks);

// Elementwise unweighted mean per named block.
BlockSet aggregate_lora(const std::vector<BlockSet>& uploads);

// (scalars up + down for the endpoint, averaged over the ledger's rounds) /
// resident scalars of the endpoint's models. 0 for an empty ledger.
double comm_ratio(const CommLedger& ledger, const std::string& endpoint, std::size_t resident_scalars);

struct FederationState {
  std::uint64_t seed = 0;
  std::vector<DeviceState> devices;
  ServerState server;
  CommLedger ledger;
};

struct EndpointMetrics {
  std::string name;
  std::string model;  // "slm", "llm" or "dpm"
  std::optional<double> rouge_l;
  std::optional<double> em;
  std::optional<double> test_loss;
  std::vector<double> train_losses;  // one entry per training phase this round
};

struct RoundAudit {
  bool dst_only_adapters = true;
  bool saml_only_lora = true;
  bool base_constant_across_upload = true;
  bool downloads_identical = true;
};

struct RoundReport {
  std::size_t round = 0;
  std::vector<EndpointMetrics> endpoints;
  std::size_t uploads = 0;
  std::size_t downloads = 0;
  std::size_t scalars = 0;
  RoundAudit audit;
  std::vector<std::vector<Prediction>> predictions;  // parallel to endpoints with generation
};

nlohmann::json to_json(const RoundReport& r);

enum class Phase { BeforeDst, AfterDst, AfterSaml, AfterUpload, AfterAggregate, AfterServerSaml, AfterDownload };
std::string to_string(Phase p);

// Called at phase boundaries; `device` is the device index, or npos for
// server-side phases.
using PhaseObserver = std::function<void(Phase, std::size_t round, std::size_t device, FederationState&)>;

// Seed-dependent but method-independent starting point: partition, tokenizers,
// pretrained models and the distilled proxy. Sharing one Setup across methods
// makes their comparison paired.
struct Setup {
  std::uint64_t seed = 0;
  Partition partition;
  TokenizerSpec server_tok;
  std::vector<TokenizerSpec> device_toks;
  TinyTransformer llm;
  std::vector<TinyTransformer> slms;
  TinyTransformer dpm;
  nlohmann::json init;  // pretraining and distillation losses
};

// Pretrained checkpoints depend only on the pretraining section and the
// architecture, so sweeps can reuse them across seeds.
class PretrainCache {
 public:
  const TinyTransformer& get(const ArchConfig& arch, const TokenizerSpec& tok, const ExperimentConfig& config,
                             nlohmann::json* log);

 private:
  struct Entry {
    TinyTransformer model;
    std::vector<double> losses;
  };
  std::map<std::string, Entry> models_;
};

TokenizerSpec build_tokenizer(const TokenizerConfig& t, const ExperimentConfig& config);
std::vector<QASample> pretrain_corpus(const ExperimentConfig& config);
std::vector<QASample> federated_corpus(const ExperimentConfig& config, std::uint64_t seed);

Setup prepare_setup(const ExperimentConfig& config, std::uint64_t seed, PretrainCache* cache = nullptr);

struct ExperimentResult {
  std::vector<RoundReport> rounds;
  FederationState state;
  nlohmann::json init;
  nlohmann::json comm;  // per-device comm ratios and resident counts
};

// Co-PLMs initialization: distribute the distilled proxy, attach adapters and LoRA.
FederationState init_coplms(const Setup& setup, const ExperimentConfig& config);

RoundReport run_round(FederationState& state, std::size_t t, const ExperimentConfig& config,
                      const PhaseObserver& observer = {});

ExperimentResult run_coplms(const Setup& setup, const ExperimentConfig& config, const PhaseObserver& observer = {});
ExperimentResult baseline_standalone(const Setup& setup, const ExperimentConfig& config);
// Throws when device architectures differ.
ExperimentResult baseline_fedlora(const Setup& setup, const ExperimentConfig& config);

// Dispatches on config.method.
ExperimentResult run_method(const Setup& setup, const ExperimentConfig& config, const PhaseObserver& observer = {});
ExperimentResult run_experiment(const ExperimentConfig& config, std::uint64_t seed, PretrainCache* cache = nullptr);

// Run report: resolved config, init artifacts, per-round reports, comm summary.
nlohmann::json report_json(const ExperimentConfig& config, std::uint64_t seed, const ExperimentResult& r);

}  // namespace coplms
