#include <algorithm>
#include <fstream>
#include <set>

#include "coplms/config.hpp"
#include "coplms/data.hpp"

namespace coplms {

using nlohmann::json;

std::string to_string(Method m) {
  switch (m) {
    case Method::CoPlms: return "coplms";
    case Method::Standalone: return "standalone";
    case Method::FedLora: return "fedlora";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "coplms") return Method::CoPlms;
  if (s == "standalone") return Method::Standalone;
  if (s == "fedlora") return Method::FedLora;
  throw std::invalid_argument("unknown method '" + s + "' (expected coplms, standalone or fedlora)");
}

ModelConfig ArchConfig::model(std::size_t vocab, std::size_t max_seq) const {
  ModelConfig m;
  m.layers = layers;
  m.heads = heads;
  m.hidden = hidden;
  m.ffn = ffn;
  m.vocab = vocab;
  m.max_seq = max_seq;
  m.arch_tag = arch_tag;
  return m;
}

ExperimentConfig::ExperimentConfig() {
  llm = {"server-gpt", 4, 4, 128, 256, {TokenizerKind::Bpe, 160}};
  dpm = {"proxy-gpt", 2, 2, 32, 64, {TokenizerKind::Bpe, 160}};
  devices = {
      {"char-gpt", 2, 2, 64, 128, {TokenizerKind::Char, 0}},
      {"bpe-gpt", 2, 4, 64, 128, {TokenizerKind::Bpe, 96}},
      {"bpe-deep", 3, 2, 48, 96, {TokenizerKind::Bpe, 192}},
  };
}

SamlConfig ExperimentConfig::saml_config(std::size_t epochs) const {
  SamlConfig s;
  s.alpha = alpha;
  s.beta = beta;
  s.k = k;
  s.epochs = epochs;
  s.opt = local_optimizer();
  return s;
}

OptimizerConfig ExperimentConfig::local_optimizer() const {
  OptimizerConfig o;
  o.kind = OptimizerKind::Sgd;
  o.lr = optimizer.lr;
  o.batch_size = optimizer.batch_size;
  o.clip_norm = optimizer.clip_norm;
  return o;
}

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error([&] {
        std::string msg = "invalid config:";
        for (const auto& p : problems) msg += "\n  " + p;
        return msg;
      }()),
      problems_(std::move(problems)) {}

namespace {

json arch_json(const ArchConfig& a) {
  return {{"arch_tag", a.arch_tag},
          {"layers", a.layers},
          {"heads", a.heads},
          {"hidden", a.hidden},
          {"ffn", a.ffn},
          {"tokenizer", {{"kind", to_string(a.tokenizer.kind)}, {"merges", a.tokenizer.merges}}}};
}

// Reads fields out of a JSON object, remembering which keys were consumed so
// that leftovers can be reported as unknown.
class Reader {
 public:
  Reader(const json& j, std::string path, std::vector<std::string>& problems)
      : j_(j), path_(std::move(path)), problems_(problems) {
    if (!j_.is_object()) problems_.push_back(path_ + ": expected an object");
  }
  ~Reader() {
    if (!j_.is_object()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) problems_.push_back(field(it.key()) + ": unknown key");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const std::exception& e) {
      problems_.push_back(field(key) + ": " + e.what());
    }
  }

  const json* sub(const std::string& key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string>& problems_;
  std::set<std::string> seen_;
};

void read_arch(const json& j, const std::string& path, ArchConfig& a, std::vector<std::string>& problems) {
  Reader r(j, path, problems);
  r.get("arch_tag", a.arch_tag);
  r.get("layers", a.layers);
  r.get("heads", a.heads);
  r.get("hidden", a.hidden);
  r.get("ffn", a.ffn);
  if (const json* t = r.sub("tokenizer")) {
    Reader tr(*t, path + ".tokenizer", problems);
    std::string kind = to_string(a.tokenizer.kind);
    tr.get("kind", kind);
    try {
      a.tokenizer.kind = tokenizer_kind_from_string(kind);
    } catch (const std::exception& e) {
      problems.push_back(path + ".tokenizer.kind: " + e.what());
    }
    tr.get("merges", a.tokenizer.merges);
  }
}

void check_arch(const ArchConfig& a, const std::string& path, std::vector<std::string>& problems) {
  if (a.arch_tag.empty()) problems.push_back(path + ".arch_tag: must be non-empty");
  if (a.layers < 1) problems.push_back(path + ".layers: must be >= 1");
  if (a.hidden < 2) problems.push_back(path + ".hidden: must be >= 2");
  if (a.ffn < 1) problems.push_back(path + ".ffn: must be >= 1");
  if (a.heads < 1 || a.hidden % a.heads != 0) problems.push_back(path + ".heads: must divide hidden");
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  json devices = json::array();
  for (const auto& d : c.devices) devices.push_back(arch_json(d));
  json targets = json::array();
  for (auto t : c.lora.targets) targets.push_back(to_string(t));
  return {
      {"method", to_string(c.method)},
      {"num_devices", c.num_devices},
      {"rounds", c.rounds},
      {"lambda", c.lambda},
      {"seeds", c.seeds},
      {"max_seq", c.max_seq},
      {"llm", arch_json(c.llm)},
      {"dpm", arch_json(c.dpm)},
      {"devices", devices},
      {"lora", {{"targets", targets}, {"rank", c.lora.rank}}},
      {"adapter_bottleneck", c.adapter_bottleneck},
      {"alpha", c.alpha},
      {"beta", c.beta},
      {"k", c.k},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"batch_size", c.optimizer.batch_size},
        {"clip_norm", c.optimizer.clip_norm},
        {"dst_epochs", c.optimizer.dst_epochs},
        {"saml_epochs", c.optimizer.saml_epochs},
        {"server_saml_epochs", c.optimizer.server_saml_epochs}}},
      {"pretrain",
       {{"seed", c.pretrain.seed},
        {"per_domain", c.pretrain.per_domain},
        {"epochs", c.pretrain.epochs},
        {"lr", c.pretrain.lr},
        {"batch_size", c.pretrain.batch_size},
        {"distill_steps", c.pretrain.distill_steps},
        {"distill_lr", c.pretrain.distill_lr}}},
      {"data",
       {{"domains", c.data.domains},
        {"per_domain", c.data.per_domain},
        {"per_device_size", c.data.per_device_size},
        {"server_size", c.data.server_size},
        {"train_fraction", c.data.train_fraction},
        {"jsonl", c.data.jsonl}}},
      {"ablations", {{"no_dst", c.ablations.no_dst}, {"no_server_saml", c.ablations.no_server_saml}}},
      {"eval", {{"max_new_tokens", c.eval.max_new_tokens}, {"every", c.eval.every}}},
      {"output_dir", c.output_dir},
  };
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  std::vector<std::string> problems;
  {
    Reader r(j, "", problems);
    std::string method = to_string(c.method);
    r.get("method", method);
    try {
      c.method = method_from_string(method);
    } catch (const std::exception& e) {
      problems.push_back(std::string("method: ") + e.what());
    }
    r.get("num_devices", c.num_devices);
    r.get("rounds", c.rounds);
    r.get("lambda", c.lambda);
    r.get("seeds", c.seeds);
    r.get("max_seq", c.max_seq);
    if (const json* a = r.sub("llm")) read_arch(*a, "llm", c.llm, problems);
    if (const json* a = r.sub("dpm")) read_arch(*a, "dpm", c.dpm, problems);
    if (const json* d = r.sub("devices")) {
      if (!d->is_array()) {
        problems.push_back("devices: expected an array");
      } else {
        c.devices.clear();
        for (std::size_t i = 0; i < d->size(); ++i) {
          ArchConfig a;
          read_arch((*d)[i], "devices[" + std::to_string(i) + "]", a, problems);
          c.devices.push_back(a);
        }
      }
    }
    if (const json* l = r.sub("lora")) {
      Reader lr(*l, "lora", problems);
      std::vector<std::string> names;
      for (auto t : c.lora.targets) names.push_back(to_string(t));
      lr.get("targets", names);
      c.lora.targets.clear();
      for (const auto& n : names) {
        try {
          c.lora.targets.push_back(lora_target_from_string(n));
        } catch (const std::exception& e) {
          problems.push_back(std::string("lora.targets: ") + e.what());
        }
      }
      lr.get("rank", c.lora.rank);
    }
    r.get("adapter_bottleneck", c.adapter_bottleneck);
    r.get("alpha", c.alpha);
    r.get("beta", c.beta);
    r.get("k", c.k);
    if (const json* o = r.sub("optimizer")) {
      Reader orr(*o, "optimizer", problems);
      orr.get("lr", c.optimizer.lr);
      orr.get("batch_size", c.optimizer.batch_size);
      orr.get("clip_norm", c.optimizer.clip_norm);
      orr.get("dst_epochs", c.optimizer.dst_epochs);
      orr.get("saml_epochs", c.optimizer.saml_epochs);
      orr.get("server_saml_epochs", c.optimizer.server_saml_epochs);
    }
    if (const json* p = r.sub("pretrain")) {
      Reader pr(*p, "pretrain", problems);
      pr.get("seed", c.pretrain.seed);
      pr.get("per_domain", c.pretrain.per_domain);
      pr.get("epochs", c.pretrain.epochs);
      pr.get("lr", c.pretrain.lr);
      pr.get("batch_size", c.pretrain.batch_size);
      pr.get("distill_steps", c.pretrain.distill_steps);
      pr.get("distill_lr", c.pretrain.distill_lr);
    }
    if (const json* d = r.sub("data")) {
      Reader dr(*d, "data", problems);
      dr.get("domains", c.data.domains);
      dr.get("per_domain", c.data.per_domain);
      dr.get("per_device_size", c.data.per_device_size);
      dr.get("server_size", c.data.server_size);
      dr.get("train_fraction", c.data.train_fraction);
      dr.get("jsonl", c.data.jsonl);
    }
    if (const json* a = r.sub("ablations")) {
      Reader ar(*a, "ablations", problems);
      ar.get("no_dst", c.ablations.no_dst);
      ar.get("no_server_saml", c.ablations.no_server_saml);
    }
    if (const json* e = r.sub("eval")) {
      Reader er(*e, "eval", problems);
      er.get("max_new_tokens", c.eval.max_new_tokens);
      er.get("every", c.eval.every);
    }
    r.get("output_dir", c.output_dir);
  }
  if (!problems.empty()) throw ConfigError(problems);
  validate(c);
  return c;
}

void validate(const ExperimentConfig& c) {
  std::vector<std::string> p;
  if (c.num_devices < 1) p.push_back("num_devices: must be >= 1");
  if (c.devices.size() != c.num_devices) {
    p.push_back("devices: " + std::to_string(c.devices.size()) + " entries but num_devices = " +
                std::to_string(c.num_devices));
  }
  if (!(c.lambda > 0.0)) p.push_back("lambda: must be > 0");
  if (c.seeds.empty()) p.push_back("seeds: at least one seed is required");
  if (c.max_seq < 8) p.push_back("max_seq: must be >= 8");
  check_arch(c.llm, "llm", p);
  check_arch(c.dpm, "dpm", p);
  if (!(c.dpm.layers < c.llm.layers && c.dpm.hidden < c.llm.hidden)) {
    p.push_back("dpm: must be strictly smaller than llm in layers and hidden");
  }
  for (std::size_t i = 0; i < c.devices.size(); ++i) check_arch(c.devices[i], "devices[" + std::to_string(i) + "]", p);
  if (c.lora.targets.empty()) p.push_back("lora.targets: must be non-empty");
  if (std::set<LoraTarget>(c.lora.targets.begin(), c.lora.targets.end()).size() != c.lora.targets.size()) {
    p.push_back("lora.targets: duplicate target");
  }
  std::size_t min_hidden = std::min(c.llm.hidden, c.dpm.hidden);
  for (const auto& d : c.devices) min_hidden = std::min(min_hidden, d.hidden);
  if (c.lora.rank < 1 || c.lora.rank > min_hidden / 2) {
    p.push_back("lora.rank: must lie in [1, " + std::to_string(min_hidden / 2) + "] for the configured models");
  }
  if (c.adapter_bottleneck < 1) p.push_back("adapter_bottleneck: must be >= 1");
  if (!(c.alpha >= 0.0 && c.alpha <= 1.0)) p.push_back("alpha: must lie in [0, 1]");
  if (!(c.beta >= 0.0 && c.beta <= 1.0)) p.push_back("beta: must lie in [0, 1]");
  if (c.k < 1) p.push_back("k: must be >= 1");
  if (!(c.optimizer.lr > 0.0)) p.push_back("optimizer.lr: must be > 0");
  if (c.optimizer.batch_size < 1) p.push_back("optimizer.batch_size: must be >= 1");
  if (c.optimizer.clip_norm < 0.0) p.push_back("optimizer.clip_norm: must be >= 0");
  if (!(c.pretrain.lr > 0.0)) p.push_back("pretrain.lr: must be > 0");
  if (!(c.pretrain.distill_lr > 0.0)) p.push_back("pretrain.distill_lr: must be > 0");
  if (c.pretrain.batch_size < 1) p.push_back("pretrain.batch_size: must be >= 1");
  if (c.pretrain.per_domain < 1) p.push_back("pretrain.per_domain: must be >= 1");
  if (c.data.domains.size() < 2) p.push_back("data.domains: at least 2 domains are required");
  const auto known = builtin_domains();
  if (c.data.jsonl.empty()) {
    for (const auto& d : c.data.domains)
      if (std::find(known.begin(), known.end(), d) == known.end()) p.push_back("data.domains: unknown domain '" + d + "'");
  }
  if (c.data.per_device_size < 2) p.push_back("data.per_device_size: must be >= 2");
  if (c.data.server_size < 2) p.push_back("data.server_size: must be >= 2");
  if (!(c.data.train_fraction > 0.0 && c.data.train_fraction < 1.0)) {
    p.push_back("data.train_fraction: must lie in (0, 1)");
  }
  if (c.data.jsonl.empty() &&
      c.data.per_domain * c.data.domains.size() < c.num_devices * c.data.per_device_size + c.data.server_size) {
    p.push_back("data.per_domain: corpus too small for num_devices * per_device_size + server_size");
  }
  if (c.eval.every < 1) p.push_back("eval.every: must be >= 1");
  if (c.eval.max_new_tokens < 1) p.push_back("eval.max_new_tokens: must be >= 1");
  if (!p.empty()) throw ConfigError(p);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace coplms
