#pragma once

// Tiny pre-LN decoder-only transformer with attachable LoRA modules on the
// attention projections and per-layer residual domain adapters.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "coplms/numerics.hpp"

namespace coplms {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t hidden = 64;
  std::size_t ffn = 128;
  std::size_t vocab = 99;
  std::size_t max_seq = 64;
  std::string arch_tag = "gpt";

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class LoraTarget { Wq, Wk, Wv };

std::string to_string(LoraTarget t);
LoraTarget lora_target_from_string(const std::string& s);

// W* = W0 + B A with W0 [out x in], B [out x r] (zero init), A [r x in].
struct LoraModule {
  Parameter A;
  Parameter B;
  std::size_t rank = 0;
  LoraTarget target = LoraTarget::Wq;
};

// x + W_up gelu(W_down x + b_down) + b_up; W_up and b_up start at zero.
struct DomainAdapter {
  Parameter down_w;  // [bottleneck x hidden]
  Parameter down_b;  // [bottleneck]
  Parameter up_w;    // [hidden x bottleneck]
  Parameter up_b;    // [hidden]
  std::size_t bottleneck = 0;
};

struct TransformerLayer {
  Parameter ln1_g, ln1_b;
  Parameter wq, wk, wv, wo, bo;
  Parameter ln2_g, ln2_b;
  Parameter w1, b1, w2, b2;
  std::map<LoraTarget, LoraModule> lora;
  std::optional<DomainAdapter> adapter;
};

enum class ParamGroup { Base, Lora, Adapter };

// Parameters are named "<group>.<path>", e.g. "base.layers.0.wq",
// "lora.layers.1.wv.A", "adapter.layers.0.up_w".
struct NamedParameter {
  std::string name;
  ParamGroup group;
  Parameter* param;
};

class TinyTransformer {
 public:
  TinyTransformer() = default;
  // Random init; deterministic in `seed`.
  TinyTransformer(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // Logits [S x V] recorded on `tape`.
  Var forward(Tape& tape, const std::vector<int>& ids);
  // Inference convenience.
  Tensor logits(const std::vector<int>& ids);

  // Attaching LoRA freezes everything else and makes exactly the new A/B
  // matrices trainable. Throws on duplicate attach or invalid rank
  // (rank must be in [1, min(n,m)/2]).
  void attach_lora(const std::set<LoraTarget>& targets, std::size_t rank, std::uint64_t seed);
  // Removes LoRA and restores the trainable flags that were active before attach.
  void detach_lora();
  bool has_lora() const;
  std::set<LoraTarget> lora_targets() const;
  std::size_t lora_rank() const;

  // One adapter per layer after the feed-forward sublayer. Identity at attach.
  void attach_domain_adapters(std::size_t bottleneck, std::uint64_t seed);
  void detach_domain_adapters();
  bool has_adapters() const;

  void set_trainable(ParamGroup group, bool trainable);
  // Trainable exactly the listed groups.
  void train_only(std::initializer_list<ParamGroup> groups);

  std::vector<NamedParameter> named_parameters();
  std::vector<Parameter*> parameters(ParamGroup group);
  std::vector<Parameter*> trainable_parameters();
  std::size_t parameter_count() const;
  std::size_t parameter_count(ParamGroup group) const;
  void zero_grad();

  // Direct access, mostly for tests that hand-build models.
  Parameter& token_embedding() { return tok_emb_; }
  Parameter& position_embedding() { return pos_emb_; }
  Parameter& final_norm_gain() { return lnf_g_; }
  Parameter& final_norm_bias() { return lnf_b_; }
  Parameter& lm_head() { return head_; }
  std::vector<TransformerLayer>& layers() { return layers_; }

 private:
  Var projection(Tape& tape, TransformerLayer& layer, Parameter& w, LoraTarget target, Var h);
  void for_each_parameter(const std::function<void(const std::string&, ParamGroup, Parameter&)>& fn);

  ModelConfig config_;
  Parameter tok_emb_;  // [V x d]
  Parameter pos_emb_;  // [max_seq x d]
  std::vector<TransformerLayer> layers_;
  Parameter lnf_g_, lnf_b_;
  Parameter head_;  // [V x d]
  std::map<std::string, bool> trainable_before_lora_;
};

// Mean next-token cross-entropy over answer positions of prompt ++ answer.
// Throws if the answer is empty or the sequence exceeds max_seq.
double sft_loss(TinyTransformer& model, const std::vector<int>& prompt, const std::vector<int>& answer);

// Sequence layout helper shared by training and the loss above: ids =
// prompt ++ answer, and logits row (|prompt| - 1 + i) predicts answer[i].
struct SupervisedSequence {
  std::vector<int> ids;
  std::vector<std::size_t> rows;
  std::vector<int> targets;
};
SupervisedSequence make_supervised(const std::vector<int>& prompt, const std::vector<int>& answer);

Var sft_loss(Tape& tape, Var logits, const SupervisedSequence& seq);

// Greedy argmax continuation of `prompt`; stops at eos (not included),
// max_new tokens, or max_seq. Returns only the new ids.
std::vector<int> generate(TinyTransformer& model, const std::vector<int>& prompt, std::size_t max_new,
                          int eos_id);

// Flat copy of every scalar in one group, in named_parameters() order.
std::vector<double> snapshot(TinyTransformer& model, ParamGroup group);

}  // namespace coplms
