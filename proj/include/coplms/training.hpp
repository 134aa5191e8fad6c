#pragma once

// Training procedures: supervised finetuning of a chosen parameter group,
// proxy distillation from the server model, domain-specific tuning of the
// proxy's adapters, and structure-agnostic mutual learning between a proxy and
// a peer that may use a different tokenizer.

#include <cstdint>
#include <vector>

#include "coplms/data.hpp"
#include "coplms/model.hpp"
#include "coplms/serialization.hpp"
#include "coplms/tokenizer.hpp"

namespace coplms {

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Sgd;
  double lr = 0.05;
  std::size_t batch_size = 8;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

// Applies one update to every trainable parameter, then zeroes its gradient.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) {}
  void step(const std::vector<Parameter*>& params);

 private:
  struct Moments {
    Tensor m, v;
  };
  OptimizerConfig config_;
  std::size_t t_ = 0;
  std::vector<std::pair<Parameter*, Moments>> moments_;
};

struct Example {
  std::vector<int> prompt;
  std::vector<int> answer;
};

std::vector<Example> tokenize_dataset(const TokenizerSpec& tok, const std::vector<QASample>& data);

struct TrainReport {
  // epoch_losses[0] is the mean loss before any update; entry e > 0 is the
  // mean loss over the same data after epoch e.
  std::vector<double> epoch_losses;
};

// Minibatch SFT over the currently trainable parameters of `model`.
TrainReport finetune(TinyTransformer& model, const std::vector<Example>& data, std::size_t epochs,
                     const OptimizerConfig& opt, std::uint64_t seed);

double mean_loss(TinyTransformer& model, const std::vector<Example>& data);

struct DistillReport {
  std::vector<double> losses;  // probe-set loss before training, then every `steps / 10` steps
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

// Per-position full-vocabulary KL(softmax(teacher) || softmax(student)), averaged
// over positions and then over the probe sequences.
double distillation_loss(TinyTransformer& teacher, TinyTransformer& student,
                         const std::vector<std::vector<int>>& sequences);

// Trains every base parameter of `student` towards `teacher`'s logits on the
// given sequences (same tokenizer). Throws on vocabulary mismatch or no data.
DistillReport distill(TinyTransformer& teacher, TinyTransformer& student,
                      const std::vector<std::vector<int>>& sequences, std::size_t steps,
                      const OptimizerConfig& opt, std::uint64_t seed);

// Builds a randomly initialised proxy of `dpm_config` and distills it from
// `llm`. The proxy must be strictly smaller than the server model in both
// layers and hidden width and share its vocabulary.
TinyTransformer distill_init(TinyTransformer& llm, const ModelConfig& dpm_config,
                             const std::vector<std::vector<int>>& sequences, std::size_t steps,
                             const OptimizerConfig& opt, std::uint64_t seed, DistillReport* report = nullptr);

// Domain-specific tuning: trains only the adapter parameters. Every other scalar
// (base and LoRA) is left bitwise untouched. Throws if adapters are missing.
TrainReport dst(TinyTransformer& dpm, const std::vector<Example>& data, std::size_t epochs,
                const OptimizerConfig& opt, std::uint64_t seed);

struct SamlConfig {
  double alpha = 0.5;  // proxy-side transfer weight
  double beta = 0.5;   // peer-side transfer weight
  std::size_t k = 10;
  std::size_t epochs = 1;
  OptimizerConfig opt;
};

struct SamlReport {
  BlockSet proxy_lora;  // the proxy's LoRA blocks after training
  double proxy_loss = 0.0;  // mean objective over the last epoch
  double peer_loss = 0.0;
};

// Mutual learning of a proxy and a peer on shared text. Per batch, both
// forward passes run on pre-update weights; then one optimizer step is taken
// on each model. Only LoRA parameters change. Throws if either model lacks LoRA.
SamlReport saml(TinyTransformer& proxy, const TokenizerSpec& proxy_tok, TinyTransformer& peer,
                const TokenizerSpec& peer_tok, const std::vector<QASample>& data, const SamlConfig& config,
                std::uint64_t seed);

// Single-sample SAML objectives, exposed for gradient checks and the verifier.
struct SamlLosses {
  Var proxy;
  Var peer;
};
SamlLosses saml_losses(Tape& proxy_tape, TinyTransformer& proxy, const Example& proxy_ex,
                       const TokenizerSpec& proxy_tok, Tape& peer_tape, TinyTransformer& peer,
                       const Example& peer_ex, const TokenizerSpec& peer_tok, const SamlConfig& config);

}  // namespace coplms
