#include <algorithm>
#include <set>
#include <stdexcept>

#include "coplms/federation.hpp"
#include "coplms/training.hpp"

namespace coplms {

namespace {

std::vector<std::string> pretrain_domains(const ExperimentConfig& config) {
  const auto known = builtin_domains();
  std::vector<std::string> out;
  for (const auto& d : config.data.domains)
    if (std::find(known.begin(), known.end(), d) != known.end()) out.push_back(d);
  return out.size() >= 2 ? out : known;
}

nlohmann::json arch_key(const ArchConfig& arch, const ExperimentConfig& config) {
  return {{"arch_tag", arch.arch_tag},
          {"shape", {arch.layers, arch.heads, arch.hidden, arch.ffn}},
          {"tokenizer", {to_string(arch.tokenizer.kind), arch.tokenizer.merges}},
          {"max_seq", config.max_seq},
          {"domains", pretrain_domains(config)},
          {"pretrain",
           {config.pretrain.seed, config.pretrain.per_domain, config.pretrain.epochs, config.pretrain.lr,
            config.pretrain.batch_size}}};
}

std::vector<std::vector<int>> unique_sequences(const TokenizerSpec& tok, const std::vector<QASample>& corpus) {
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> out;
  for (const auto& ex : tokenize_dataset(tok, corpus)) {
    auto seq = make_supervised(ex.prompt, ex.answer).ids;
    if (seen.insert(seq).second) out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace

std::vector<QASample> pretrain_corpus(const ExperimentConfig& config) {
  return generate_corpus(pretrain_domains(config), config.pretrain.per_domain, config.pretrain.seed,
                         FactPool::Public);
}

std::vector<QASample> federated_corpus(const ExperimentConfig& config, std::uint64_t seed) {
  if (!config.data.jsonl.empty()) return load_jsonl(config.data.jsonl);
  return generate_corpus(config.data.domains, config.data.per_domain, derive_seed(seed, "corpus"),
                         FactPool::Private);
}

TokenizerSpec build_tokenizer(const TokenizerConfig& t, const ExperimentConfig& config) {
  if (t.kind == TokenizerKind::Char) return make_char_tokenizer();
  std::vector<std::string> texts;
  for (const auto& s : pretrain_corpus(config)) texts.push_back(prompt_text(s) + " " + s.output);
  return train_bpe(texts, t.merges);
}

const TinyTransformer& PretrainCache::get(const ArchConfig& arch, const TokenizerSpec& tok,
                                          const ExperimentConfig& config, nlohmann::json* log) {
  const auto key = arch_key(arch, config);
  const std::string k = key.dump();
  auto it = models_.find(k);
  if (it != models_.end()) {
    if (log) (*log)[arch.arch_tag] = it->second.losses;
    return it->second.model;
  }

  TinyTransformer model(arch.model(tok.vocab_size(), config.max_seq), derive_seed(config.pretrain.seed, k));
  OptimizerConfig opt;
  opt.kind = OptimizerKind::Adam;
  opt.lr = config.pretrain.lr;
  opt.batch_size = config.pretrain.batch_size;
  const auto report = finetune(model, tokenize_dataset(tok, pretrain_corpus(config)), config.pretrain.epochs, opt,
                               derive_seed(config.pretrain.seed, "order:" + k));
  if (log) (*log)[arch.arch_tag] = report.epoch_losses;
  return models_.emplace(k, Entry{std::move(model), report.epoch_losses}).first->second.model;
}

Setup prepare_setup(const ExperimentConfig& config, std::uint64_t seed, PretrainCache* cache) {
  validate(config);
  PretrainCache local;
  if (!cache) cache = &local;

  Setup s;
  s.seed = seed;
  PartitionSpec spec;
  spec.devices = config.num_devices;
  spec.lambda = config.lambda;
  spec.per_device = config.data.per_device_size;
  spec.server_size = config.data.server_size;
  spec.train_fraction = config.data.train_fraction;
  spec.seed = derive_seed(seed, "partition");
  s.partition = dirichlet_partition(federated_corpus(config, seed), spec);

  nlohmann::json pretrain_log = nlohmann::json::object();
  s.server_tok = build_tokenizer(config.llm.tokenizer, config);
  s.llm = cache->get(config.llm, s.server_tok, config, &pretrain_log);
  for (const auto& arch : config.devices) {
    s.device_toks.push_back(build_tokenizer(arch.tokenizer, config));
    s.slms.push_back(cache->get(arch, s.device_toks.back(), config, &pretrain_log));
  }

  OptimizerConfig opt;
  opt.kind = OptimizerKind::Adam;
  opt.lr = config.pretrain.distill_lr;
  opt.batch_size = config.pretrain.batch_size;
  DistillReport distill_report;
  s.dpm = distill_init(s.llm, config.dpm.model(s.server_tok.vocab_size(), config.max_seq),
                       unique_sequences(s.server_tok, pretrain_corpus(config)), config.pretrain.distill_steps, opt,
                       derive_seed(seed, "distill"), &distill_report);

  s.init = {{"pretrain_losses", pretrain_log},
            {"distill", {{"initial_loss", distill_report.initial_loss},
                         {"final_loss", distill_report.final_loss},
                         {"losses", distill_report.losses}}},
            {"server_tokenizer_vocab", s.server_tok.vocab_size()},
            {"partition", partition_manifest(s.partition, spec)}};
  return s;
}

}  // namespace coplms
