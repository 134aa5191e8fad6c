#pragma once

// Declarative experiment configuration. Every knob has a default, and the
// resolved form (all defaults written out) is what a run directory records.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "coplms/model.hpp"
#include "coplms/tokenizer.hpp"
#include "coplms/training.hpp"
#include "json.hpp"

namespace coplms {

enum class Method { CoPlms, Standalone, FedLora };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct TokenizerConfig {
  TokenizerKind kind = TokenizerKind::Bpe;
  std::size_t merges = 96;  // ignored for char tokenizers

  bool operator==(const TokenizerConfig&) const = default;
};

// A model shape plus the tokenizer it is paired with; vocab follows from the tokenizer.
struct ArchConfig {
  std::string arch_tag = "gpt";
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t hidden = 64;
  std::size_t ffn = 128;
  TokenizerConfig tokenizer;

  bool operator==(const ArchConfig&) const = default;
  ModelConfig model(std::size_t vocab, std::size_t max_seq) const;
};

struct LoraConfig {
  std::vector<LoraTarget> targets = {LoraTarget::Wq, LoraTarget::Wv};
  std::size_t rank = 8;
};

struct OptimizerSection {
  double lr = 0.05;
  std::size_t batch_size = 8;
  double clip_norm = 0.0;
  std::size_t dst_epochs = 1;
  // Epochs of mutual learning per round; the baselines' local finetuning uses
  // the same count so local compute is matched.
  std::size_t saml_epochs = 1;
  std::size_t server_saml_epochs = 1;
};

// Stand-in for public pretrained checkpoints: every model is first trained on
// a corpus of public facts. Seeded separately from the run seed so that all
// runs of a sweep start from the same checkpoints.
struct PretrainSection {
  std::uint64_t seed = 1234;
  std::size_t per_domain = 100;
  std::size_t epochs = 6;
  double lr = 0.002;
  std::size_t batch_size = 8;
  std::size_t distill_steps = 300;
  double distill_lr = 0.002;
};

struct DataSection {
  std::vector<std::string> domains = {"capital", "color", "sound"};
  std::size_t per_domain = 1400;
  std::size_t per_device_size = 1000;
  std::size_t server_size = 1000;
  double train_fraction = 0.8;
  std::string jsonl;  // external corpus; empty = synthetic
};

struct AblationSection {
  bool no_dst = false;
  bool no_server_saml = false;
};

struct EvalSection {
  std::size_t max_new_tokens = 16;
  // Evaluate every this many rounds; the last round is always evaluated.
  std::size_t every = 1;
};

struct ExperimentConfig {
  Method method = Method::CoPlms;
  std::size_t num_devices = 3;
  std::size_t rounds = 10;
  double lambda = 1.0;
  std::vector<std::uint64_t> seeds = {0};
  std::size_t max_seq = 64;
  ArchConfig llm;
  ArchConfig dpm;  // tokenizer field ignored: the proxy shares the server tokenizer
  std::vector<ArchConfig> devices;
  LoraConfig lora;
  std::size_t adapter_bottleneck = 16;
  double alpha = 0.5;
  double beta = 0.5;
  std::size_t k = 10;
  OptimizerSection optimizer;
  PretrainSection pretrain;
  DataSection data;
  AblationSection ablations;
  EvalSection eval;
  std::string output_dir = "runs";

  ExperimentConfig();

  SamlConfig saml_config(std::size_t epochs) const;
  OptimizerConfig local_optimizer() const;
};

// All validation failures at once, each prefixed by its field path.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

nlohmann::json to_json(const ExperimentConfig& c);
// Missing keys take defaults; unknown keys and invalid values are errors.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
void validate(const ExperimentConfig& c);

}  // namespace coplms
