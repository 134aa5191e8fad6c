#pragma once

#include <random>
#include <string>
#include <vector>

#include "coplms/config.hpp"
#include "coplms/model.hpp"

namespace coplms::testing {

// Small enough that a full setup plus a few rounds takes a couple of seconds.
inline ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.rounds = 2;
  c.lambda = 0.5;
  c.max_seq = 48;
  c.llm = {"server-gpt", 2, 2, 24, 32, {TokenizerKind::Bpe, 40}};
  c.dpm = {"proxy-gpt", 1, 2, 16, 24, {TokenizerKind::Bpe, 40}};
  c.devices = {{"char-gpt", 1, 2, 16, 24, {TokenizerKind::Char, 0}},
               {"bpe-gpt", 1, 2, 16, 24, {TokenizerKind::Bpe, 24}},
               {"bpe-deep", 2, 2, 16, 24, {TokenizerKind::Bpe, 48}}};
  c.lora.rank = 2;
  c.adapter_bottleneck = 4;
  c.optimizer.lr = 0.1;
  c.pretrain.per_domain = 10;
  c.pretrain.epochs = 1;
  c.pretrain.distill_steps = 10;
  c.data.per_domain = 40;
  c.data.per_device_size = 10;
  c.data.server_size = 10;
  c.eval.max_new_tokens = 4;
  return c;
}

inline ModelConfig small_model(std::size_t vocab, std::size_t hidden = 16, std::size_t layers = 1) {
  ModelConfig mc;
  mc.layers = layers;
  mc.heads = 2;
  mc.hidden = hidden;
  mc.ffn = hidden * 2;
  mc.vocab = vocab;
  mc.max_seq = 48;
  return mc;
}

inline void randomize(TinyTransformer& m, ParamGroup g, std::uint64_t seed, double sd = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  for (Parameter* p : m.parameters(g))
    for (double& v : p->value.values()) v += n(rng);
}

}  // namespace coplms::testing
