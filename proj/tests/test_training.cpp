#include <cmath>
#include "coplms/alignment.hpp"
#include "coplms/transfer.hpp"
#include "coplms/evaluation.hpp"
#include "coplms/training.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace coplms;
using coplms::testing::randomize;
using coplms::testing::small_model;

namespace {

struct Fixture {
  std::vector<QASample> data = generate_corpus({"color", "sound"}, 6, 3);
  TokenizerSpec chr = make_char_tokenizer();
  TokenizerSpec bpe;

  Fixture() {
    std::vector<std::string> texts;
    for (const auto& s : data) texts.push_back(prompt_text(s) + " " + s.output);
    bpe = train_bpe(texts, 20);
  }
};

}  // namespace

TEST_CASE("sgd step is w minus lr times g, and zeroes the gradient") {
  Parameter p(Tensor::matrix(1, 2, {1.0, -2.0}));
  p.grad = Tensor::matrix(1, 2, {0.5, 0.25});
  Optimizer opt({OptimizerKind::Sgd, 0.1, 1, 0.0});
  opt.step({&p});
  CHECK(p.value[0] == doctest::Approx(0.95));
  CHECK(p.value[1] == doctest::Approx(-2.025));
  CHECK(p.grad[0] == 0.0);
}

TEST_CASE("first adam step moves each scalar by lr in the gradient sign") {
  Parameter p(Tensor::matrix(1, 2, {1.0, 1.0}));
  p.grad = Tensor::matrix(1, 2, {3.0, -0.01});
  Optimizer opt({OptimizerKind::Adam, 0.1, 1, 0.0});
  opt.step({&p});
  CHECK(p.value[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(p.value[1] == doctest::Approx(1.1).epsilon(1e-5));
}

TEST_CASE("gradient clipping rescales the global norm") {
  Parameter a(Tensor::matrix(1, 1, {0.0})), b(Tensor::matrix(1, 1, {0.0}));
  a.grad = Tensor::matrix(1, 1, {3.0});
  b.grad = Tensor::matrix(1, 1, {4.0});
  Optimizer opt({OptimizerKind::Sgd, 1.0, 1, 1.0});
  opt.step({&a, &b});
  CHECK(a.value[0] == doctest::Approx(-0.6));
  CHECK(b.value[0] == doctest::Approx(-0.8));
}

TEST_CASE("finetune lowers the loss and is deterministic in its seed") {
  Fixture f;
  const auto ex = tokenize_dataset(f.chr, f.data);
  TinyTransformer a(small_model(f.chr.vocab_size()), 1), b(small_model(f.chr.vocab_size()), 1);
  OptimizerConfig opt{OptimizerKind::Adam, 0.01, 4, 0.0};
  const auto ra = finetune(a, ex, 3, opt, 7);
  const auto rb = finetune(b, ex, 3, opt, 7);
  REQUIRE(ra.epoch_losses.size() == 4);
  CHECK(ra.epoch_losses.back() < ra.epoch_losses.front());
  CHECK(ra.epoch_losses == rb.epoch_losses);
  CHECK(ra.epoch_losses.back() == doctest::Approx(mean_loss(a, ex)).epsilon(1e-12));
  CHECK(snapshot(a, ParamGroup::Base) == snapshot(b, ParamGroup::Base));
}

TEST_CASE("dst changes adapter scalars only") {
  Fixture f;
  TinyTransformer m(small_model(f.bpe.vocab_size()), 1);
  CHECK_THROWS(dst(m, tokenize_dataset(f.bpe, f.data), 1, {}, 1));
  m.attach_lora({LoraTarget::Wq, LoraTarget::Wv}, 2, 2);
  m.attach_domain_adapters(4, 3);
  randomize(m, ParamGroup::Lora, 4);
  const auto base = snapshot(m, ParamGroup::Base), lora = snapshot(m, ParamGroup::Lora);
  const auto adapters = snapshot(m, ParamGroup::Adapter);
  dst(m, tokenize_dataset(f.bpe, f.data), 1, {OptimizerKind::Sgd, 0.2, 4, 0.0}, 5);
  CHECK(snapshot(m, ParamGroup::Base) == base);
  CHECK(snapshot(m, ParamGroup::Lora) == lora);
  CHECK(snapshot(m, ParamGroup::Adapter) != adapters);
}

TEST_CASE("saml changes lora scalars only, on both models") {
  Fixture f;
  TinyTransformer proxy(small_model(f.bpe.vocab_size()), 1), peer(small_model(f.chr.vocab_size()), 2);
  proxy.attach_domain_adapters(4, 3);
  SamlConfig cfg;
  cfg.opt.lr = 0.2;
  CHECK_THROWS(saml(proxy, f.bpe, peer, f.chr, f.data, cfg, 1));
  proxy.attach_lora({LoraTarget::Wq, LoraTarget::Wv}, 2, 4);
  peer.attach_lora({LoraTarget::Wq, LoraTarget::Wv}, 2, 5);
  const auto pb = snapshot(proxy, ParamGroup::Base), pa = snapshot(proxy, ParamGroup::Adapter);
  const auto qb = snapshot(peer, ParamGroup::Base);
  const auto pl = snapshot(proxy, ParamGroup::Lora), ql = snapshot(peer, ParamGroup::Lora);
  const auto r = saml(proxy, f.bpe, peer, f.chr, f.data, cfg, 6);
  CHECK(snapshot(proxy, ParamGroup::Base) == pb);
  CHECK(snapshot(proxy, ParamGroup::Adapter) == pa);
  CHECK(snapshot(peer, ParamGroup::Base) == qb);
  CHECK(snapshot(proxy, ParamGroup::Lora) != pl);
  CHECK(snapshot(peer, ParamGroup::Lora) != ql);
  CHECK(r.proxy_lora == extract_lora(proxy));
  CHECK(std::isfinite(r.proxy_loss));
  CHECK(std::isfinite(r.peer_loss));
}

TEST_CASE("with both transfer weights at zero, saml is plain supervised lora tuning") {
  Fixture f;
  TinyTransformer proxy(small_model(f.bpe.vocab_size()), 1), peer(small_model(f.chr.vocab_size()), 2);
  proxy.attach_lora({LoraTarget::Wq, LoraTarget::Wv}, 2, 4);
  peer.attach_lora({LoraTarget::Wq, LoraTarget::Wv}, 2, 5);
  TinyTransformer proxy_ref = proxy, peer_ref = peer;
  SamlConfig cfg;
  cfg.alpha = cfg.beta = 0.0;
  cfg.epochs = 2;
  cfg.opt = {OptimizerKind::Sgd, 0.3, 4, 0.0};
  saml(proxy, f.bpe, peer, f.chr, f.data, cfg, 9);
  finetune(proxy_ref, tokenize_dataset(f.bpe, f.data), 2, cfg.opt, 9);
  finetune(peer_ref, tokenize_dataset(f.chr, f.data), 2, cfg.opt, 9);
  CHECK(snapshot(proxy, ParamGroup::Lora) == snapshot(proxy_ref, ParamGroup::Lora));
  CHECK(snapshot(peer, ParamGroup::Lora) == snapshot(peer_ref, ParamGroup::Lora));
}

TEST_CASE("saml objective is the weighted mix of its two terms") {
  Fixture f;
  TinyTransformer proxy(small_model(f.bpe.vocab_size()), 1), peer(small_model(f.chr.vocab_size()), 2);
  proxy.attach_lora({LoraTarget::Wq}, 2, 4);
  peer.attach_lora({LoraTarget::Wq}, 2, 5);
  const QASample& s = f.data[0];
  const Example pe{encode_prompt(f.bpe, s), encode_answer(f.bpe, s)};
  const Example qe{encode_prompt(f.chr, s), encode_answer(f.chr, s)};
  SamlConfig cfg;
  cfg.alpha = 0.25;
  cfg.beta = 0.75;
  cfg.k = 5;
  Tape t1, t2;
  const auto l = saml_losses(t1, proxy, pe, f.bpe, t2, peer, qe, f.chr, cfg);

  const auto pseq = make_supervised(pe.prompt, pe.answer), qseq = make_supervised(qe.prompt, qe.answer);
  const Tensor plog = proxy.logits(pseq.ids), qlog = peer.logits(qseq.ids);
  const auto to_proxy = align_tokens(token_strings(f.chr, qseq.ids), token_strings(f.bpe, pseq.ids));
  const auto to_peer = align_tokens(token_strings(f.bpe, pseq.ids), token_strings(f.chr, qseq.ids));
  const double proxy_expected = 0.25 * kt_loss(project_logits(qlog, to_proxy), plog, 5) +
                                0.75 * sft_loss(proxy, pe.prompt, pe.answer);
  const double peer_expected = 0.75 * kt_loss(project_logits(plog, to_peer), qlog, 5) +
                               0.25 * sft_loss(peer, qe.prompt, qe.answer);
  CHECK(l.proxy.item() == doctest::Approx(proxy_expected).epsilon(1e-12));
  CHECK(l.peer.item() == doctest::Approx(peer_expected).epsilon(1e-12));
}

TEST_CASE("distilling a model into itself costs nothing") {
  Fixture f;
  TinyTransformer m(small_model(f.bpe.vocab_size()), 1);
  std::vector<std::vector<int>> seqs;
  for (const auto& ex : tokenize_dataset(f.bpe, f.data)) seqs.push_back(make_supervised(ex.prompt, ex.answer).ids);
  CHECK(distillation_loss(m, m, seqs) == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("200 distillation steps at least halve the probe loss") {
  Fixture f;
  TinyTransformer teacher(small_model(f.bpe.vocab_size(), 24, 2), 1);
  std::vector<std::vector<int>> seqs;
  for (const auto& ex : tokenize_dataset(f.bpe, f.data)) seqs.push_back(make_supervised(ex.prompt, ex.answer).ids);
  DistillReport rep;
  TinyTransformer student = distill_init(teacher, small_model(f.bpe.vocab_size(), 16, 1), seqs, 200,
                                         {OptimizerKind::Adam, 0.01, 4, 0.0}, 3, &rep);
  CHECK(rep.final_loss <= 0.5 * rep.initial_loss);
  CHECK(rep.losses.front() == rep.initial_loss);
  CHECK(rep.final_loss == doctest::Approx(distillation_loss(teacher, student, seqs)).epsilon(1e-12));
}

TEST_CASE("distill_init enforces a strictly smaller proxy on the same vocabulary") {
  Fixture f;
  TinyTransformer teacher(small_model(f.bpe.vocab_size(), 16, 1), 1);
  const std::vector<std::vector<int>> seqs = {{1, 5, 6, 7}};
  CHECK_THROWS(distill_init(teacher, small_model(f.bpe.vocab_size(), 16, 1), seqs, 1, {}, 1));
  TinyTransformer big(small_model(f.bpe.vocab_size(), 24, 2), 1);
  CHECK_THROWS(distill_init(big, small_model(f.bpe.vocab_size() + 1, 16, 1), seqs, 1, {}, 1));
  CHECK_THROWS(distill_init(big, small_model(f.bpe.vocab_size(), 16, 1), {}, 1, {}, 1));
}
