#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "coplms/alignment.hpp"
#include "coplms/evaluation.hpp"
#include "coplms/training.hpp"
#include "coplms/transfer.hpp"

namespace coplms {

void Optimizer::step(const std::vector<Parameter*>& params) {
  if (!(config_.lr > 0.0) || !std::isfinite(config_.lr)) throw std::invalid_argument("optimizer: lr must be > 0");
  double scale_factor = 1.0;
  if (config_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const Parameter* p : params)
      if (!p->grad.empty())
        for (double g : p->grad.values()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) scale_factor = config_.clip_norm / norm;
  }
  ++t_;
  for (Parameter* p : params) {
    if (!p->trainable || p->grad.empty()) continue;
    auto& w = p->value.values();
    const auto& g = p->grad.values();
    if (config_.kind == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= config_.lr * scale_factor * g[i];
    } else {
      auto it = std::find_if(moments_.begin(), moments_.end(), [&](const auto& e) { return e.first == p; });
      if (it == moments_.end()) {
        moments_.push_back({p, {Tensor(p->value.shape()), Tensor(p->value.shape())}});
        it = std::prev(moments_.end());
      }
      auto& m = it->second.m.values();
      auto& v = it->second.v.values();
      constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g[i] * scale_factor;
        m[i] = b1 * m[i] + (1.0 - b1) * gi;
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
        w[i] -= config_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
      }
    }
    p->zero_grad();
  }
}

std::vector<Example> tokenize_dataset(const TokenizerSpec& tok, const std::vector<QASample>& data) {
  std::vector<Example> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back({encode_prompt(tok, s), encode_answer(tok, s)});
  return out;
}

namespace {

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

void check_finite(double loss, const char* where) {
  if (!std::isfinite(loss)) throw std::runtime_error(std::string(where) + ": loss became non-finite");
}

}  // namespace

double mean_loss(TinyTransformer& model, const std::vector<Example>& data) {
  if (data.empty()) throw std::invalid_argument("mean_loss: empty dataset");
  double total = 0.0;
  for (const auto& ex : data) total += sft_loss(model, ex.prompt, ex.answer);
  return total / static_cast<double>(data.size());
}

TrainReport finetune(TinyTransformer& model, const std::vector<Example>& data, std::size_t epochs,
                     const OptimizerConfig& opt, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("finetune: empty dataset");
  if (opt.batch_size == 0) throw std::invalid_argument("finetune: batch_size must be >= 1");
  TrainReport report;
  report.epoch_losses.push_back(mean_loss(model, data));
  Optimizer optimizer(opt);
  std::mt19937_64 rng(seed);
  model.zero_grad();
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto order = shuffled(data.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + opt.batch_size);
      const double w = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const Example& ex = data[order[b]];
        Tape tape;
        const auto seq = make_supervised(ex.prompt, ex.answer);
        Var loss = sft_loss(tape, model.forward(tape, seq.ids), seq);
        check_finite(loss.item(), "finetune");
        tape.backward(loss, w);
      }
      optimizer.step(model.trainable_parameters());
    }
    report.epoch_losses.push_back(mean_loss(model, data));
    check_finite(report.epoch_losses.back(), "finetune");
  }
  return report;
}

double distillation_loss(TinyTransformer& teacher, TinyTransformer& student,
                         const std::vector<std::vector<int>>& sequences) {
  if (sequences.empty()) throw std::invalid_argument("distillation_loss: no sequences");
  double total = 0.0;
  for (const auto& ids : sequences) {
    const Tensor t = teacher.logits(ids);
    const Tensor s = student.logits(ids);
    double seq_total = 0.0;
    for (std::size_t r = 0; r < t.rows(); ++r) seq_total += kl_divergence(softmax(t.row(r)), softmax(s.row(r)));
    total += seq_total / static_cast<double>(t.rows());
  }
  return total / static_cast<double>(sequences.size());
}

DistillReport distill(TinyTransformer& teacher, TinyTransformer& student,
                      const std::vector<std::vector<int>>& sequences, std::size_t steps,
                      const OptimizerConfig& opt, std::uint64_t seed) {
  if (sequences.empty()) throw std::invalid_argument("distill: no sequences");
  if (teacher.config().vocab != student.config().vocab) {
    throw std::invalid_argument("distill: vocabulary mismatch (" + std::to_string(teacher.config().vocab) +
                                " vs " + std::to_string(student.config().vocab) + ")");
  }
  if (opt.batch_size == 0) throw std::invalid_argument("distill: batch_size must be >= 1");
  const std::size_t probe_n = std::min<std::size_t>(sequences.size(), 32);
  const std::vector<std::vector<int>> probe(sequences.begin(), sequences.begin() + probe_n);

  DistillReport report;
  report.initial_loss = distillation_loss(teacher, student, probe);
  report.losses.push_back(report.initial_loss);

  // The teacher is fixed, so its logits are computed once per sequence.
  std::vector<Tensor> targets;
  if (steps > 0) {
    targets.reserve(sequences.size());
    for (const auto& ids : sequences) targets.push_back(teacher.logits(ids));
  }
  student.train_only({ParamGroup::Base});
  student.zero_grad();
  Optimizer optimizer(opt);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  const std::size_t log_every = std::max<std::size_t>(1, steps / 10);
  for (std::size_t step = 0; step < steps; ++step) {
    const double w = 1.0 / static_cast<double>(opt.batch_size);
    for (std::size_t b = 0; b < opt.batch_size; ++b) {
      if (cursor == order.size()) {
        order = shuffled(sequences.size(), rng);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      Tape tape;
      Var loss = softmax_kl(student.forward(tape, sequences[i]), targets[i]);
      check_finite(loss.item(), "distill");
      tape.backward(loss, w);
    }
    optimizer.step(student.trainable_parameters());
    if ((step + 1) % log_every == 0 || step + 1 == steps) {
      report.losses.push_back(distillation_loss(teacher, student, probe));
    }
  }
  report.final_loss = report.losses.back();
  return report;
}

TinyTransformer distill_init(TinyTransformer& llm, const ModelConfig& dpm_config,
                             const std::vector<std::vector<int>>& sequences, std::size_t steps,
                             const OptimizerConfig& opt, std::uint64_t seed, DistillReport* report) {
  const ModelConfig& big = llm.config();
  if (dpm_config.vocab != big.vocab) {
    throw std::invalid_argument("distill_init: proxy vocabulary " + std::to_string(dpm_config.vocab) +
                                " differs from server vocabulary " + std::to_string(big.vocab));
  }
  if (!(dpm_config.layers < big.layers && dpm_config.hidden < big.hidden)) {
    throw std::invalid_argument("distill_init: proxy must be strictly smaller than the server model in layers and hidden");
  }
  TinyTransformer dpm(dpm_config, seed);
  auto r = distill(llm, dpm, sequences, steps, opt, seed ^ 0x9e3779b97f4a7c15ULL);
  if (report) *report = std::move(r);
  return dpm;
}

TrainReport dst(TinyTransformer& dpm, const std::vector<Example>& data, std::size_t epochs,
                const OptimizerConfig& opt, std::uint64_t seed) {
  if (!dpm.has_adapters()) throw std::invalid_argument("dst: model has no domain adapters attached");
  dpm.train_only({ParamGroup::Adapter});
  return finetune(dpm, data, epochs, opt, seed);
}

SamlLosses saml_losses(Tape& proxy_tape, TinyTransformer& proxy, const Example& proxy_ex,
                       const TokenizerSpec& proxy_tok, Tape& peer_tape, TinyTransformer& peer,
                       const Example& peer_ex, const TokenizerSpec& peer_tok, const SamlConfig& config) {
  const auto proxy_seq = make_supervised(proxy_ex.prompt, proxy_ex.answer);
  const auto peer_seq = make_supervised(peer_ex.prompt, peer_ex.answer);
  Var proxy_logits = proxy.forward(proxy_tape, proxy_seq.ids);
  Var peer_logits = peer.forward(peer_tape, peer_seq.ids);

  const auto proxy_tokens = token_strings(proxy_tok, proxy_seq.ids);
  const auto peer_tokens = token_strings(peer_tok, peer_seq.ids);
  // Teachers are plain tensors taken from the forward values, so no gradient
  // crosses between the two models.
  const Tensor peer_on_proxy = project_logits(peer_logits.value(), align_tokens(peer_tokens, proxy_tokens));
  const Tensor proxy_on_peer = project_logits(proxy_logits.value(), align_tokens(proxy_tokens, peer_tokens));

  return {saml_loss_dpm(proxy_logits, peer_on_proxy, proxy_seq, config.alpha, config.k),
          saml_loss_lm(peer_logits, proxy_on_peer, peer_seq, config.beta, config.k)};
}

SamlReport saml(TinyTransformer& proxy, const TokenizerSpec& proxy_tok, TinyTransformer& peer,
                const TokenizerSpec& peer_tok, const std::vector<QASample>& data, const SamlConfig& config,
                std::uint64_t seed) {
  if (!proxy.has_lora() || !peer.has_lora()) throw std::invalid_argument("saml: both models need LoRA attached");
  if (data.empty()) throw std::invalid_argument("saml: empty dataset");
  if (config.opt.batch_size == 0) throw std::invalid_argument("saml: batch_size must be >= 1");
  proxy.train_only({ParamGroup::Lora});
  peer.train_only({ParamGroup::Lora});
  proxy.zero_grad();
  peer.zero_grad();

  const auto proxy_data = tokenize_dataset(proxy_tok, data);
  const auto peer_data = tokenize_dataset(peer_tok, data);
  Optimizer proxy_opt(config.opt), peer_opt(config.opt);
  std::mt19937_64 rng(seed);
  SamlReport report;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    double proxy_total = 0.0, peer_total = 0.0;
    const auto order = shuffled(data.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.opt.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.opt.batch_size);
      const double w = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t i = order[b];
        Tape proxy_tape, peer_tape;
        auto losses = saml_losses(proxy_tape, proxy, proxy_data[i], proxy_tok, peer_tape, peer, peer_data[i],
                                  peer_tok, config);
        check_finite(losses.proxy.item(), "saml");
        check_finite(losses.peer.item(), "saml");
        proxy_total += losses.proxy.item();
        peer_total += losses.peer.item();
        proxy_tape.backward(losses.proxy, w);
        peer_tape.backward(losses.peer, w);
      }
      proxy_opt.step(proxy.trainable_parameters());
      peer_opt.step(peer.trainable_parameters());
    }
    report.proxy_loss = proxy_total / static_cast<double>(data.size());
    report.peer_loss = peer_total / static_cast<double>(data.size());
  }
  report.proxy_lora = extract_lora(proxy);
  return report;
}

}  // namespace coplms
