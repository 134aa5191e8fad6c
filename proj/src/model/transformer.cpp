#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "coplms/model.hpp"

namespace coplms {

namespace {

Parameter gaussian(std::vector<std::size_t> shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
  return Parameter(std::move(t));
}

Parameter constant(std::vector<std::size_t> shape, double value) {
  return Parameter(Tensor(std::move(shape), value));
}

}  // namespace

void ModelConfig::validate() const {
  if (layers < 1) throw std::invalid_argument("model config: layers must be >= 1");
  if (heads < 1 || hidden % heads != 0) {
    throw std::invalid_argument("model config: hidden (" + std::to_string(hidden) +
                                ") must be divisible by heads (" + std::to_string(heads) + ")");
  }
  if (ffn < 1 || vocab < 8 || max_seq < 2) throw std::invalid_argument("model config: ffn/vocab/max_seq too small");
}

std::string to_string(LoraTarget t) {
  switch (t) {
    case LoraTarget::Wq: return "wq";
    case LoraTarget::Wk: return "wk";
    case LoraTarget::Wv: return "wv";
  }
  return "?";
}

LoraTarget lora_target_from_string(const std::string& s) {
  std::string lower = s;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "wq") return LoraTarget::Wq;
  if (lower == "wk") return LoraTarget::Wk;
  if (lower == "wv") return LoraTarget::Wv;
  throw std::invalid_argument("unknown LoRA target '" + s + "' (expected Wq, Wk or Wv)");
}

TinyTransformer::TinyTransformer(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.hidden, f = config_.ffn, V = config_.vocab;
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double out_std = w_std / std::sqrt(2.0 * static_cast<double>(config_.layers));

  tok_emb_ = gaussian({V, d}, 0.1, rng);
  pos_emb_ = gaussian({config_.max_seq, d}, 0.1, rng);
  layers_.resize(config_.layers);
  for (auto& L : layers_) {
    L.ln1_g = constant({d}, 1.0);
    L.ln1_b = constant({d}, 0.0);
    L.wq = gaussian({d, d}, w_std, rng);
    L.wk = gaussian({d, d}, w_std, rng);
    L.wv = gaussian({d, d}, w_std, rng);
    L.wo = gaussian({d, d}, out_std, rng);
    L.bo = constant({d}, 0.0);
    L.ln2_g = constant({d}, 1.0);
    L.ln2_b = constant({d}, 0.0);
    L.w1 = gaussian({f, d}, w_std, rng);
    L.b1 = constant({f}, 0.0);
    L.w2 = gaussian({d, f}, 1.0 / std::sqrt(static_cast<double>(f)) / std::sqrt(2.0 * static_cast<double>(config_.layers)), rng);
    L.b2 = constant({d}, 0.0);
  }
  lnf_g_ = constant({d}, 1.0);
  lnf_b_ = constant({d}, 0.0);
  head_ = gaussian({V, d}, w_std, rng);
}

void TinyTransformer::for_each_parameter(
    const std::function<void(const std::string&, ParamGroup, Parameter&)>& fn) {
  fn("base.tok_emb", ParamGroup::Base, tok_emb_);
  fn("base.pos_emb", ParamGroup::Base, pos_emb_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& L = layers_[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    fn("base." + p + "ln1_g", ParamGroup::Base, L.ln1_g);
    fn("base." + p + "ln1_b", ParamGroup::Base, L.ln1_b);
    fn("base." + p + "wq", ParamGroup::Base, L.wq);
    fn("base." + p + "wk", ParamGroup::Base, L.wk);
    fn("base." + p + "wv", ParamGroup::Base, L.wv);
    fn("base." + p + "wo", ParamGroup::Base, L.wo);
    fn("base." + p + "bo", ParamGroup::Base, L.bo);
    fn("base." + p + "ln2_g", ParamGroup::Base, L.ln2_g);
    fn("base." + p + "ln2_b", ParamGroup::Base, L.ln2_b);
    fn("base." + p + "w1", ParamGroup::Base, L.w1);
    fn("base." + p + "b1", ParamGroup::Base, L.b1);
    fn("base." + p + "w2", ParamGroup::Base, L.w2);
    fn("base." + p + "b2", ParamGroup::Base, L.b2);
  }
  fn("base.lnf_g", ParamGroup::Base, lnf_g_);
  fn("base.lnf_b", ParamGroup::Base, lnf_b_);
  fn("base.head", ParamGroup::Base, head_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    for (auto& [target, mod] : layers_[i].lora) {
      const std::string p = "lora.layers." + std::to_string(i) + "." + to_string(target) + ".";
      fn(p + "A", ParamGroup::Lora, mod.A);
      fn(p + "B", ParamGroup::Lora, mod.B);
    }
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (!layers_[i].adapter) continue;
    auto& ad = *layers_[i].adapter;
    const std::string p = "adapter.layers." + std::to_string(i) + ".";
    fn(p + "down_w", ParamGroup::Adapter, ad.down_w);
    fn(p + "down_b", ParamGroup::Adapter, ad.down_b);
    fn(p + "up_w", ParamGroup::Adapter, ad.up_w);
    fn(p + "up_b", ParamGroup::Adapter, ad.up_b);
  }
}

std::vector<NamedParameter> TinyTransformer::named_parameters() {
  std::vector<NamedParameter> out;
  for_each_parameter([&](const std::string& n, ParamGroup g, Parameter& p) { out.push_back({n, g, &p}); });
  return out;
}

std::vector<Parameter*> TinyTransformer::parameters(ParamGroup group) {
  std::vector<Parameter*> out;
  for_each_parameter([&](const std::string&, ParamGroup g, Parameter& p) {
    if (g == group) out.push_back(&p);
  });
  return out;
}

std::vector<Parameter*> TinyTransformer::trainable_parameters() {
  std::vector<Parameter*> out;
  for_each_parameter([&](const std::string&, ParamGroup, Parameter& p) {
    if (p.trainable) out.push_back(&p);
  });
  return out;
}

std::size_t TinyTransformer::parameter_count() const {
  std::size_t n = 0;
  const_cast<TinyTransformer*>(this)->for_each_parameter(
      [&](const std::string&, ParamGroup, Parameter& p) { n += p.size(); });
  return n;
}

std::size_t TinyTransformer::parameter_count(ParamGroup group) const {
  std::size_t n = 0;
  const_cast<TinyTransformer*>(this)->for_each_parameter([&](const std::string&, ParamGroup g, Parameter& p) {
    if (g == group) n += p.size();
  });
  return n;
}

void TinyTransformer::zero_grad() {
  for_each_parameter([](const std::string&, ParamGroup, Parameter& p) { p.zero_grad(); });
}

void TinyTransformer::set_trainable(ParamGroup group, bool trainable) {
  for_each_parameter([&](const std::string&, ParamGroup g, Parameter& p) {
    if (g == group) p.trainable = trainable;
  });
}

void TinyTransformer::train_only(std::initializer_list<ParamGroup> groups) {
  for_each_parameter([&](const std::string&, ParamGroup g, Parameter& p) {
    p.trainable = std::find(groups.begin(), groups.end(), g) != groups.end();
  });
}

bool TinyTransformer::has_lora() const { return !layers_.empty() && !layers_.front().lora.empty(); }

std::set<LoraTarget> TinyTransformer::lora_targets() const {
  std::set<LoraTarget> out;
  if (has_lora())
    for (auto& [t, m] : layers_.front().lora) out.insert(t);
  return out;
}

std::size_t TinyTransformer::lora_rank() const {
  return has_lora() ? layers_.front().lora.begin()->second.rank : 0;
}

void TinyTransformer::attach_lora(const std::set<LoraTarget>& targets, std::size_t rank, std::uint64_t seed) {
  if (has_lora()) throw std::logic_error("attach_lora: LoRA already attached");
  if (targets.empty()) throw std::invalid_argument("attach_lora: no targets");
  const std::size_t d = config_.hidden;
  if (rank < 1 || rank > d / 2) {
    throw std::invalid_argument("attach_lora: rank " + std::to_string(rank) + " outside [1, " +
                                std::to_string(d / 2) + "]");
  }
  trainable_before_lora_.clear();
  for_each_parameter([&](const std::string& n, ParamGroup, Parameter& p) {
    trainable_before_lora_[n] = p.trainable;
    p.trainable = false;
  });
  std::mt19937_64 rng(seed);
  const double a_std = 1.0 / std::sqrt(static_cast<double>(d));
  for (auto& L : layers_) {
    for (LoraTarget t : targets) {
      LoraModule m;
      m.rank = rank;
      m.target = t;
      m.A = gaussian({rank, d}, a_std, rng);
      m.B = constant({d, rank}, 0.0);
      L.lora.emplace(t, std::move(m));
    }
  }
}

void TinyTransformer::detach_lora() {
  if (!has_lora()) throw std::logic_error("detach_lora: no LoRA attached");
  for (auto& L : layers_) L.lora.clear();
  for_each_parameter([&](const std::string& n, ParamGroup, Parameter& p) {
    if (auto it = trainable_before_lora_.find(n); it != trainable_before_lora_.end()) p.trainable = it->second;
  });
  trainable_before_lora_.clear();
}

bool TinyTransformer::has_adapters() const { return !layers_.empty() && layers_.front().adapter.has_value(); }

void TinyTransformer::attach_domain_adapters(std::size_t bottleneck, std::uint64_t seed) {
  if (has_adapters()) throw std::logic_error("attach_domain_adapters: adapters already attached");
  if (bottleneck < 1) throw std::invalid_argument("attach_domain_adapters: bottleneck must be >= 1");
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.hidden;
  for (auto& L : layers_) {
    DomainAdapter ad;
    ad.bottleneck = bottleneck;
    ad.down_w = gaussian({bottleneck, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    ad.down_b = constant({bottleneck}, 0.0);
    ad.up_w = constant({d, bottleneck}, 0.0);
    ad.up_b = constant({d}, 0.0);
    // Adapters only train under an explicit train_only({Adapter}).
    for (Parameter* p : {&ad.down_w, &ad.down_b, &ad.up_w, &ad.up_b}) p->trainable = false;
    L.adapter = std::move(ad);
  }
}

void TinyTransformer::detach_domain_adapters() {
  for (auto& L : layers_) L.adapter.reset();
}

Var TinyTransformer::projection(Tape& tape, TransformerLayer& layer, Parameter& w, LoraTarget target, Var h) {
  Var weight = tape.param(w);
  if (auto it = layer.lora.find(target); it != layer.lora.end()) {
    // W* = W0 + B A
    weight = add(weight, matmul(tape.param(it->second.B), tape.param(it->second.A)));
  }
  return matmul_nt(h, weight);
}

Var TinyTransformer::forward(Tape& tape, const std::vector<int>& ids) {
  if (ids.empty()) throw std::invalid_argument("forward: empty input");
  if (ids.size() > config_.max_seq) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(ids.size()) +
                                " exceeds max_seq " + std::to_string(config_.max_seq));
  }
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab) {
      throw std::out_of_range("forward: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(config_.vocab));
    }
  }
  std::vector<int> positions(ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);

  Var x = add(embedding(tape.param(tok_emb_), ids), embedding(tape.param(pos_emb_), positions));
  for (auto& L : layers_) {
    Var h = layer_norm(x, tape.param(L.ln1_g), tape.param(L.ln1_b));
    Var q = projection(tape, L, L.wq, LoraTarget::Wq, h);
    Var k = projection(tape, L, L.wk, LoraTarget::Wk, h);
    Var v = projection(tape, L, L.wv, LoraTarget::Wv, h);
    Var a = causal_attention(q, k, v, config_.heads);
    x = add(x, add_bias(matmul_nt(a, tape.param(L.wo)), tape.param(L.bo)));

    h = layer_norm(x, tape.param(L.ln2_g), tape.param(L.ln2_b));
    Var f = gelu(add_bias(matmul_nt(h, tape.param(L.w1)), tape.param(L.b1)));
    x = add(x, add_bias(matmul_nt(f, tape.param(L.w2)), tape.param(L.b2)));

    if (L.adapter) {
      auto& ad = *L.adapter;
      Var z = gelu(add_bias(matmul_nt(x, tape.param(ad.down_w)), tape.param(ad.down_b)));
      x = add(x, add_bias(matmul_nt(z, tape.param(ad.up_w)), tape.param(ad.up_b)));
    }
  }
  x = layer_norm(x, tape.param(lnf_g_), tape.param(lnf_b_));
  return matmul_nt(x, tape.param(head_));
}

Tensor TinyTransformer::logits(const std::vector<int>& ids) {
  Tape tape;
  return forward(tape, ids).value();
}

SupervisedSequence make_supervised(const std::vector<int>& prompt, const std::vector<int>& answer) {
  if (answer.empty()) throw std::invalid_argument("supervised sequence: empty answer");
  if (prompt.empty()) throw std::invalid_argument("supervised sequence: empty prompt");
  SupervisedSequence s;
  s.ids = prompt;
  // The final answer token is only ever a target, never an input.
  s.ids.insert(s.ids.end(), answer.begin(), answer.end() - 1);
  for (std::size_t i = 0; i < answer.size(); ++i) {
    s.rows.push_back(prompt.size() - 1 + i);
    s.targets.push_back(answer[i]);
  }
  return s;
}

Var sft_loss(Tape&, Var logits, const SupervisedSequence& seq) {
  return cross_entropy(logits, seq.rows, seq.targets);
}

double sft_loss(TinyTransformer& model, const std::vector<int>& prompt, const std::vector<int>& answer) {
  const SupervisedSequence seq = make_supervised(prompt, answer);
  Tape tape;
  return sft_loss(tape, model.forward(tape, seq.ids), seq).item();
}

std::vector<int> generate(TinyTransformer& model, const std::vector<int>& prompt, std::size_t max_new,
                          int eos_id) {
  if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
  std::vector<int> ids = prompt;
  std::vector<int> out;
  while (out.size() < max_new && ids.size() < model.config().max_seq) {
    const Tensor logits = model.logits(ids);
    const auto last = logits.row(logits.rows() - 1);
    const int next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
    if (next == eos_id) break;
    out.push_back(next);
    ids.push_back(next);
  }
  return out;
}

std::vector<double> snapshot(TinyTransformer& model, ParamGroup group) {
  std::vector<double> out;
  for (Parameter* p : model.parameters(group)) out.insert(out.end(), p->value.values().begin(), p->value.values().end());
  return out;
}

}  // namespace coplms
