#include <filesystem>

#include "coplms/serialization.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace coplms;
using coplms::testing::randomize;
using coplms::testing::small_model;

TEST_CASE("model config validation") {
  ModelConfig mc = small_model(20);
  CHECK_NOTHROW(mc.validate());
  mc.heads = 3;
  CHECK_THROWS(mc.validate());
}

TEST_CASE("logits have one row per token and the vocabulary as columns") {
  TinyTransformer m(small_model(20), 1);
  const Tensor l = m.logits({1, 5, 6, 7});
  CHECK(l.rows() == 4);
  CHECK(l.cols() == 20);
  CHECK(l.all_finite());
  CHECK_THROWS(m.logits(std::vector<int>(49, 4)));
}

TEST_CASE("the model is causal") {
  TinyTransformer m(small_model(20), 2);
  const Tensor a = m.logits({1, 5, 6, 7});
  const Tensor b = m.logits({1, 5, 6, 9});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 20; ++c) CHECK(a.at(r, c) == b.at(r, c));
}

TEST_CASE("same seed gives the same weights") {
  TinyTransformer a(small_model(20), 3), b(small_model(20), 3), c(small_model(20), 4);
  CHECK(snapshot(a, ParamGroup::Base) == snapshot(b, ParamGroup::Base));
  CHECK(snapshot(a, ParamGroup::Base) != snapshot(c, ParamGroup::Base));
}

TEST_CASE("fresh lora and adapters leave the function unchanged") {
  TinyTransformer m(small_model(20), 5);
  const Tensor before = m.logits({1, 4, 8, 9});
  m.attach_lora({LoraTarget::Wq, LoraTarget::Wv}, 2, 6);
  m.attach_domain_adapters(4, 7);
  const Tensor after = m.logits({1, 4, 8, 9});
  CHECK(before.values() == after.values());
}

TEST_CASE("lora parameter count is layers * targets * r * (in + out)") {
  TinyTransformer m(small_model(20, 16, 2), 5);
  m.attach_lora({LoraTarget::Wq, LoraTarget::Wk, LoraTarget::Wv}, 4, 1);
  CHECK(m.parameter_count(ParamGroup::Lora) == 2 * 3 * 4 * (16 + 16));
  m.attach_domain_adapters(5, 2);
  CHECK(m.parameter_count(ParamGroup::Adapter) == 2 * (5 * 16 + 5 + 16 * 5 + 16));
}

TEST_CASE("attaching lora freezes the rest; detaching restores") {
  TinyTransformer m(small_model(20), 5);
  m.attach_lora({LoraTarget::Wq}, 2, 1);
  for (auto& np : m.named_parameters()) CHECK(np.param->trainable == (np.group == ParamGroup::Lora));
  CHECK_THROWS(m.attach_lora({LoraTarget::Wq}, 2, 1));
  m.detach_lora();
  CHECK_FALSE(m.has_lora());
  for (auto& np : m.named_parameters()) CHECK(np.param->trainable);
  CHECK_THROWS(m.attach_lora({LoraTarget::Wv}, 9, 1));  // rank above min(n, m) / 2
  CHECK_THROWS(m.attach_lora({LoraTarget::Wv}, 0, 1));
}

TEST_CASE("lora delta is B times A added to the base projection") {
  TinyTransformer m(small_model(20), 5);
  m.attach_lora({LoraTarget::Wq}, 2, 1);
  randomize(m, ParamGroup::Lora, 9);
  const Tensor with_lora = m.logits({1, 4, 8});

  // Fold B A into Wq by hand on a copy without LoRA; the outputs must agree.
  TinyTransformer folded(small_model(20), 5);
  auto& layer = m.layers()[0];
  const auto& lm = layer.lora.at(LoraTarget::Wq);
  Tensor& w = folded.layers()[0].wq.value;
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j)
      for (std::size_t r = 0; r < lm.rank; ++r) w.at(i, j) += lm.B.value.at(i, r) * lm.A.value.at(r, j);
  const Tensor direct = folded.logits({1, 4, 8});
  for (std::size_t i = 0; i < direct.size(); ++i) CHECK(direct[i] == doctest::Approx(with_lora[i]).epsilon(1e-12));
}

TEST_CASE("model gradients match finite differences with every group trainable") {
  TinyTransformer m(small_model(12, 8), 2);
  m.attach_lora({LoraTarget::Wq, LoraTarget::Wv}, 2, 3);
  m.attach_domain_adapters(3, 4);
  randomize(m, ParamGroup::Lora, 5);
  randomize(m, ParamGroup::Adapter, 6);
  for (ParamGroup g : {ParamGroup::Base, ParamGroup::Lora, ParamGroup::Adapter}) m.set_trainable(g, true);
  const auto seq = make_supervised({1, 4, 5}, {6, 7, 2});
  auto params = m.trainable_parameters();
  const auto r = grad_check(params, [&](Tape& t) { return sft_loss(t, m.forward(t, seq.ids), seq); });
  CHECK(r.max_relative_error < 1e-5);
}

TEST_CASE("supervised layout and loss helpers") {
  const auto s = make_supervised({1, 10, 11}, {12, 2});
  CHECK(s.ids == std::vector<int>{1, 10, 11, 12});  // the final target is never an input
  CHECK(s.rows == std::vector<std::size_t>{2, 3});
  CHECK(s.targets == std::vector<int>{12, 2});
  TinyTransformer m(small_model(20), 1);
  CHECK_THROWS(sft_loss(m, {1, 2}, {}));
  CHECK(sft_loss(m, {1, 5}, {6, 2}) > 0.0);
}

TEST_CASE("greedy generation stops at eos or the budget") {
  TinyTransformer m(small_model(20), 1);
  const auto out = generate(m, {1, 5}, 5, Vocabulary::kEos);
  CHECK(out.size() <= 5);
  for (int id : out) CHECK(id != Vocabulary::kEos);
  CHECK(generate(m, {1, 5}, 0, Vocabulary::kEos).empty());
}

TEST_CASE("block wire format round trips and rejects corruption") {
  TinyTransformer m(small_model(20, 16, 2), 5);
  m.attach_lora({LoraTarget::Wq, LoraTarget::Wv}, 2, 1);
  randomize(m, ParamGroup::Lora, 3);
  const BlockSet lora = extract_lora(m);
  CHECK(lora.size() == 2 * 2 * 2);
  for (const auto& b : lora) CHECK(b.name.rfind("lora.", 0) == 0);
  auto bytes = encode_blocks(lora);
  CHECK(decode_blocks(bytes) == lora);
  CHECK(scalar_count(lora) == m.parameter_count(ParamGroup::Lora));
  bytes.resize(bytes.size() - 3);
  CHECK_THROWS(decode_blocks(bytes));
  bytes[0] = 'X';
  CHECK_THROWS(decode_blocks(bytes));
}

TEST_CASE("load_lora overwrites only lora and validates names and shapes") {
  TinyTransformer a(small_model(20), 5), b(small_model(20), 6);
  a.attach_lora({LoraTarget::Wq}, 2, 1);
  b.attach_lora({LoraTarget::Wq}, 2, 2);
  randomize(a, ParamGroup::Lora, 7);
  const auto base_b = snapshot(b, ParamGroup::Base);
  load_lora(b, extract_lora(a));
  CHECK(snapshot(b, ParamGroup::Lora) == snapshot(a, ParamGroup::Lora));
  CHECK(snapshot(b, ParamGroup::Base) == base_b);

  TinyTransformer c(small_model(20), 5);
  c.attach_lora({LoraTarget::Wv}, 2, 1);
  CHECK_THROWS(load_lora(c, extract_lora(a)));
  TinyTransformer d(small_model(20), 5);
  d.attach_lora({LoraTarget::Wq}, 4, 1);
  CHECK_THROWS(load_lora(d, extract_lora(a)));
}

TEST_CASE("checkpoints round trip the full model") {
  TinyTransformer m(small_model(20, 16, 2), 5);
  m.attach_lora({LoraTarget::Wq, LoraTarget::Wv}, 2, 1);
  m.attach_domain_adapters(4, 2);
  randomize(m, ParamGroup::Lora, 3);
  randomize(m, ParamGroup::Adapter, 4);
  const auto path = std::filesystem::temp_directory_path() / "coplms_model_test.ckpt";
  save_checkpoint(m, path);
  TinyTransformer back = load_checkpoint(path);
  std::filesystem::remove(path);
  CHECK(back.config() == m.config());
  CHECK(back.has_lora());
  CHECK(back.has_adapters());
  CHECK(back.logits({1, 4, 9}).values() == m.logits({1, 4, 9}).values());
}
