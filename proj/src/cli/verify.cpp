#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

#include "coplms/alignment.hpp"
#include "coplms/cli.hpp"
#include "coplms/evaluation.hpp"
#include "coplms/federation.hpp"
#include "coplms/training.hpp"

namespace coplms {

namespace {

// ---- token alignment: exhaustive search over edit scripts ------------------

// Alphabet and its substitution costs, worked out by hand:
// lev(ab, b) = 1 over max 2; lev(ab, ca) = 2 over 2; lev(b, ca) = 2 over 2.
const std::vector<std::string> kTokens = {"ab", "b", "ca"};
constexpr double kSub[3][3] = {{0.0, 0.5, 1.0}, {0.5, 0.0, 1.0}, {1.0, 1.0, 0.0}};

struct ScriptSearch {
  const std::vector<int>& a;
  const std::vector<int>& b;
  double best;

  void dfs(std::size_t i, std::size_t j, double cost) {
    const double gap = std::abs(static_cast<double>(a.size() - i) - static_cast<double>(b.size() - j));
    if (cost + gap >= best) return;
    if (i == a.size() && j == b.size()) {
      best = cost;
      return;
    }
    if (i < a.size() && j < b.size()) dfs(i + 1, j + 1, cost + kSub[a[i]][b[j]]);
    if (i < a.size()) dfs(i + 1, j, cost + 1.0);
    if (j < b.size()) dfs(i, j + 1, cost + 1.0);
  }
};

std::vector<std::vector<int>> all_sequences(std::size_t min_len, std::size_t max_len, int alphabet) {
  std::vector<std::vector<int>> out;
  std::vector<std::vector<int>> layer = {{}};
  for (std::size_t len = 0; len <= max_len; ++len) {
    if (len >= min_len) out.insert(out.end(), layer.begin(), layer.end());
    std::vector<std::vector<int>> next;
    for (const auto& s : layer)
      for (int c = 0; c < alphabet; ++c) {
        auto t = s;
        t.push_back(c);
        next.push_back(std::move(t));
      }
    layer = std::move(next);
  }
  return out;
}

VerifyCheck check_alignment() {
  VerifyCheck c{"alignment_dp_vs_exhaustive", true, "", 0.0};
  const auto seqs = all_sequences(1, 6, 3);
  std::vector<std::vector<std::string>> strs;
  for (const auto& s : seqs) {
    std::vector<std::string> t;
    for (int x : s) t.push_back(kTokens[x]);
    strs.push_back(std::move(t));
  }
  std::size_t pairs = 0;
  for (std::size_t x = 0; x < seqs.size() && c.passed; ++x) {
    for (std::size_t y = 0; y < seqs.size(); ++y) {
      const auto map = align_tokens(strs[x], strs[y]);
      ScriptSearch search{seqs[x], seqs[y], static_cast<double>(seqs[x].size() + seqs[y].size()) + 1.0};
      search.dfs(0, 0, 0.0);
      bool ok = std::abs(map.cost - search.best) < 1e-12 && map.mapping.size() == seqs[y].size();
      for (std::size_t j = 0; ok && j < map.mapping.size(); ++j) {
        ok = map.mapping[j] < seqs[x].size() && (j == 0 || map.mapping[j] >= map.mapping[j - 1]);
      }
      ++pairs;
      if (!ok) {
        std::ostringstream d;
        d << "pair #" << pairs << ": dp cost " << map.cost << " vs exhaustive " << search.best;
        c.passed = false;
        c.detail = d.str();
        break;
      }
    }
  }
  if (c.passed) c.detail = std::to_string(pairs) + " pairs, lengths 1..6";
  return c;
}

// ---- pooling ----------------------------------------------------------------

std::vector<double> pooling_oracle(const std::vector<double>& logits, std::size_t k) {
  long double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<long double> e;
  long double z = 0;
  for (double l : logits) {
    e.push_back(std::exp(static_cast<long double>(l) - mx));
    z += e.back();
  }
  for (auto& v : e) v /= z;
  std::sort(e.begin(), e.end(), std::greater<>());
  std::vector<double> out(e.begin(), e.begin() + static_cast<std::ptrdiff_t>(k));
  long double rest = 0;
  for (std::size_t i = k; i < e.size(); ++i) rest += e[i];
  out.push_back(static_cast<double>(rest));
  return out;
}

VerifyCheck check_pooling(const VerifyOptions& options) {
  VerifyCheck c{"pooling_vs_sort_oracle", true, "", 0.0};
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> pick_v(2, 32);
  std::normal_distribution<double> n(0.0, 3.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t V = pick_v(rng);
    const std::size_t K = std::uniform_int_distribution<std::size_t>(1, V - 1)(rng);
    std::vector<double> logits(V);
    for (double& l : logits) l = n(rng);
    const auto got = options.pooling ? options.pooling(logits, K) : pool_logits(logits, K);
    const auto want = pooling_oracle(logits, K);
    if (got.values.size() != want.size()) {
      c.passed = false;
      c.detail = "trial " + std::to_string(trial) + ": size " + std::to_string(got.values.size()) + " vs " +
                 std::to_string(want.size());
      return c;
    }
    for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(got.values[i] - want[i]));
  }
  c.passed = worst < 1e-12;
  std::ostringstream d;
  d << "1000 vectors, max abs diff " << std::scientific << std::setprecision(2) << worst;
  c.detail = d.str();
  return c;
}

// ---- KL ---------------------------------------------------------------------

VerifyCheck check_kl() {
  VerifyCheck c{"kl_vs_summation", true, "", 0.0};
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + trial % 30;
    std::vector<double> p(n), q(n);
    double sp = 0, sq = 0;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = u(rng) < 0.2 ? 0.0 : u(rng);
      q[i] = 0.01 + u(rng);
      sp += p[i];
      sq += q[i];
    }
    if (sp == 0.0) p[0] = sp = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] /= sp;
      q[i] /= sq;
    }
    long double want = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (p[i] > 0) want += static_cast<long double>(p[i]) * std::log(static_cast<long double>(p[i]) / q[i]);
    worst = std::max(worst, std::abs(kl_divergence(p, q) - static_cast<double>(want)));
  }
  // Pooled sequence KL against per-row oracle pools.
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t V = 8 + trial % 20, S1 = 1 + trial % 5, S2 = 1 + (trial * 7) % 6, K = 1 + trial % (V - 1);
    std::normal_distribution<double> n(0.0, 2.0);
    Tensor t({S1, V}), s({S2, V});
    for (double& v : t.values()) v = n(rng);
    for (double& v : s.values()) v = n(rng);
    long double want = 0;
    for (std::size_t i = 0; i < std::min(S1, S2); ++i) {
      const auto pt = pooling_oracle({t.row(i).begin(), t.row(i).end()}, K);
      const auto ps = pooling_oracle({s.row(i).begin(), s.row(i).end()}, K);
      for (std::size_t j = 0; j < pt.size(); ++j)
        if (pt[j] > 0) want += static_cast<long double>(pt[j]) * std::log(static_cast<long double>(pt[j]) / ps[j]);
    }
    worst = std::max(worst, std::abs(kt_loss(t, s, K) - static_cast<double>(want)));
  }
  c.passed = worst < 1e-12;
  std::ostringstream d;
  d << "1000 distributions + 100 pooled sequences, max abs diff " << std::scientific << std::setprecision(2) << worst;
  c.detail = d.str();
  return c;
}

// ---- LCS ----------------------------------------------------------------------

VerifyCheck check_lcs() {
  VerifyCheck c{"lcs_vs_enumeration", true, "", 0.0};
  const std::vector<std::string> words = {"x", "y", "z"};
  const auto seqs = all_sequences(0, 6, 3);
  // Every subsequence, encoded as (length, base-4 digits) so that sorting puts longer ones last.
  std::vector<std::vector<std::uint32_t>> subs(seqs.size());
  std::vector<std::vector<std::string>> as_words(seqs.size());
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto& q = seqs[s];
    for (int w : q) as_words[s].push_back(words[w]);
    for (std::uint32_t mask = 0; mask < (1u << q.size()); ++mask) {
      std::uint32_t code = 0, len = 0;
      for (std::size_t i = 0; i < q.size(); ++i)
        if (mask & (1u << i)) {
          code = code * 4 + static_cast<std::uint32_t>(q[i] + 1);
          ++len;
        }
      subs[s].push_back((len << 16) | code);
    }
    std::sort(subs[s].begin(), subs[s].end());
    subs[s].erase(std::unique(subs[s].begin(), subs[s].end()), subs[s].end());
  }
  std::size_t pairs = 0;
  for (std::size_t x = 0; x < seqs.size() && c.passed; ++x) {
    for (std::size_t y = 0; y < seqs.size(); ++y) {
      std::vector<std::uint32_t> common;
      std::set_intersection(subs[x].begin(), subs[x].end(), subs[y].begin(), subs[y].end(),
                            std::back_inserter(common));
      const std::size_t want = common.back() >> 16;  // the empty subsequence is always shared
      ++pairs;
      if (lcs_length(as_words[x], as_words[y]) != want) {
        c.passed = false;
        c.detail = "pair #" + std::to_string(pairs) + ": lcs " +
                   std::to_string(lcs_length(as_words[x], as_words[y])) + " vs enumeration " + std::to_string(want);
        break;
      }
      if (!as_words[x].empty() && !as_words[y].empty() && want > 0) {
        std::string a, b;
        for (const auto& w : as_words[x]) a += w + " ";
        for (const auto& w : as_words[y]) b += w + " ";
        const double pr = static_cast<double>(want) / static_cast<double>(as_words[x].size());
        const double rc = static_cast<double>(want) / static_cast<double>(as_words[y].size());
        if (std::abs(rouge_l(a, b) - 2 * pr * rc / (pr + rc)) > 1e-12) {
          c.passed = false;
          c.detail = "pair #" + std::to_string(pairs) + ": rouge_l disagrees with F1 of enumerated LCS";
          break;
        }
      }
    }
  }
  if (c.passed) c.detail = std::to_string(pairs) + " pairs, lengths 0..6";
  return c;
}

// ---- aggregation --------------------------------------------------------------

VerifyCheck check_aggregate() {
  VerifyCheck c{"aggregate_vs_loop_mean", true, "", 0.0};
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t N = 1 + trial % 5;
    std::vector<BlockSet> uploads(N);
    for (std::size_t u = 0; u < N; ++u) {
      for (std::size_t b = 0; b < 3; ++b) {
        Tensor t({2 + b, 3 + (static_cast<std::size_t>(trial) % 4)});
        for (double& v : t.values()) v = n(rng);
        uploads[u].push_back({"lora.block" + std::to_string(b), t});
      }
    }
    const auto got = aggregate_lora(uploads);
    for (std::size_t b = 0; b < got.size(); ++b) {
      for (std::size_t i = 0; i < got[b].value.size(); ++i) {
        double s = 0.0;
        for (std::size_t u = 0; u < N; ++u) s += uploads[u][b].value[i];
        worst = std::max(worst, std::abs(got[b].value[i] - s / static_cast<double>(N)));
      }
    }
  }
  c.passed = worst < 1e-15;
  std::ostringstream d;
  d << "200 upload sets, max abs diff " << std::scientific << std::setprecision(2) << worst;
  c.detail = d.str();
  return c;
}

// ---- gradients ------------------------------------------------------------------

VerifyCheck check_gradients(std::size_t seeds) {
  VerifyCheck c{"gradients_vs_finite_differences", true, "", 0.0};
  double worst = 0.0;
  std::size_t scalars = 0;
  for (GradLoss g : {GradLoss::Supervised, GradLoss::Transfer, GradLoss::ProxyMutual, GradLoss::PeerMutual}) {
    for (std::uint64_t s = 0; s < seeds; ++s) {
      const auto r = gradient_probe(g, s);
      worst = std::max(worst, r.max_relative_error);
      scalars += r.checked_scalars;
      if (r.max_relative_error >= 1e-4 && c.passed) {
        c.passed = false;
        c.detail = to_string(g) + " seed " + std::to_string(s) + ": relative error " +
                   std::to_string(r.max_relative_error);
      }
    }
  }
  if (c.passed) {
    std::ostringstream d;
    d << seeds << " seeds x 4 losses, " << scalars << " scalars, max rel err " << std::scientific
      << std::setprecision(2) << worst;
    c.detail = d.str();
  }
  return c;
}

VerifyCheck check_wire_format() {
  VerifyCheck c{"wire_format_roundtrip", true, "", 0.0};
  ModelConfig mc;
  mc.layers = 2;
  mc.hidden = 16;
  mc.ffn = 32;
  TinyTransformer m(mc, 5);
  m.attach_lora({LoraTarget::Wq, LoraTarget::Wv}, 4, 6);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  for (Parameter* p : m.parameters(ParamGroup::Lora))
    for (double& v : p->value.values()) v = n(rng);
  const BlockSet blocks = extract_lora(m);
  const auto bytes = encode_blocks(blocks);
  c.passed = decode_blocks(bytes) == blocks && scalar_count(blocks) == 2 * 2 * 4 * (16 + 16);
  c.detail = std::to_string(scalar_count(blocks)) + " scalars in " + std::to_string(bytes.size()) + " bytes";
  return c;
}

}  // namespace

std::string to_string(GradLoss g) {
  switch (g) {
    case GradLoss::Supervised: return "supervised";
    case GradLoss::Transfer: return "transfer";
    case GradLoss::ProxyMutual: return "proxy_mutual";
    case GradLoss::PeerMutual: return "peer_mutual";
  }
  return "?";
}

GradCheckResult gradient_probe(GradLoss which, std::uint64_t seed) {
  const auto corpus = generate_corpus({"capital", "sound"}, 4, seed);
  std::vector<std::string> texts;
  for (const auto& s : corpus) texts.push_back(prompt_text(s) + " " + s.output);
  const TokenizerSpec bpe = train_bpe(texts, 12);
  const TokenizerSpec chr = make_char_tokenizer();
  QASample sample = corpus[seed % corpus.size()];
  sample.instruction = "of";  // keeps sequences short

  auto toy = [](std::size_t vocab, std::uint64_t s) {
    ModelConfig mc;
    mc.layers = 1;
    mc.heads = 2;
    mc.hidden = 8;
    mc.ffn = 12;
    mc.vocab = vocab;
    mc.max_seq = 48;
    return TinyTransformer(mc, s);
  };
  const Example proxy_ex{encode_prompt(bpe, sample), encode_answer(bpe, sample)};
  const Example peer_ex{encode_prompt(chr, sample), encode_answer(chr, sample)};
  const std::size_t k = 4;

  // Pooling sorts probabilities, so the transfer losses have kinks wherever two
  // of the top K+1 ranks tie. A central difference straddling one measures the
  // kink, not the gradient; such points are redrawn.
  auto min_rank_gap = [&](TinyTransformer& m, const Example& ex) {
    const Tensor l = m.logits(make_supervised(ex.prompt, ex.answer).ids);
    double gap = 1.0;
    for (std::size_t r = 0; r < l.rows(); ++r) {
      auto p = softmax(l.row(r));
      std::partial_sort(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(k + 2), p.end(), std::greater<>());
      for (std::size_t i = 0; i <= k; ++i) gap = std::min(gap, p[i] - p[i + 1]);
    }
    return gap;
  };

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.3);
  TinyTransformer proxy, peer;
  for (int attempt = 0;; ++attempt) {
    proxy = toy(bpe.vocab_size(), seed * 2 + 1);
    proxy.attach_lora({LoraTarget::Wq, LoraTarget::Wv}, 2, seed + 3);
    proxy.attach_domain_adapters(3, seed + 4);
    peer = toy(chr.vocab_size(), seed * 2 + 2);
    peer.attach_lora({LoraTarget::Wq, LoraTarget::Wv}, 2, seed + 5);
    // Zero-initialised factors would hide their own gradient paths.
    for (TinyTransformer* m : {&proxy, &peer})
      for (ParamGroup g : {ParamGroup::Lora, ParamGroup::Adapter})
        for (Parameter* p : m->parameters(g))
          for (double& v : p->value.values()) v += n(rng);
    if (std::min(min_rank_gap(proxy, proxy_ex), min_rank_gap(peer, peer_ex)) > 1e-5) break;
    if (attempt == 20) throw std::runtime_error("gradient probe: no tie-free point found");
  }
  for (TinyTransformer* m : {&proxy, &peer})
    for (ParamGroup g : {ParamGroup::Base, ParamGroup::Lora, ParamGroup::Adapter}) m->set_trainable(g, true);

  SamlConfig cfg;
  cfg.alpha = 0.3;
  cfg.beta = 0.6;
  cfg.k = k;

  TinyTransformer& target = which == GradLoss::PeerMutual ? peer : proxy;
  auto params = target.trainable_parameters();
  std::function<Var(Tape&)> build;
  switch (which) {
    case GradLoss::Supervised:
      build = [&](Tape& tape) {
        const auto seq = make_supervised(proxy_ex.prompt, proxy_ex.answer);
        return sft_loss(tape, proxy.forward(tape, seq.ids), seq);
      };
      break;
    case GradLoss::Transfer: {
      const auto proxy_ids = make_supervised(proxy_ex.prompt, proxy_ex.answer).ids;
      const auto peer_ids = make_supervised(peer_ex.prompt, peer_ex.answer).ids;
      const Tensor teacher = project_logits(
          peer.logits(peer_ids), align_tokens(token_strings(chr, peer_ids), token_strings(bpe, proxy_ids)));
      build = [&, teacher, proxy_ids](Tape& tape) { return kt_loss(proxy.forward(tape, proxy_ids), teacher, cfg.k); };
      break;
    }
    case GradLoss::ProxyMutual:
    case GradLoss::PeerMutual:
      build = [&](Tape& tape) {
        Tape other;
        if (which == GradLoss::ProxyMutual) {
          return saml_losses(tape, proxy, proxy_ex, bpe, other, peer, peer_ex, chr, cfg).proxy;
        }
        return saml_losses(other, proxy, proxy_ex, bpe, tape, peer, peer_ex, chr, cfg).peer;
      };
      break;
  }
  return grad_check(params, build, 1e-6);
}

PooledDistribution faulty_pooling(std::span<const double> logits, std::size_t k) {
  auto p = pool_logits(logits, k);
  p.values.back() = 0.0;
  return p;
}

std::vector<VerifyCheck> run_verify(const VerifyOptions& options) {
  std::vector<std::function<VerifyCheck()>> checks = {
      [] { return check_alignment(); },
      [&] { return check_pooling(options); },
      [] { return check_kl(); },
      [] { return check_lcs(); },
      [] { return check_aggregate(); },
      [&] { return check_gradients(options.grad_seeds); },
      [] { return check_wire_format(); },
  };
  std::vector<VerifyCheck> out;
  for (auto& check : checks) {
    const auto t0 = std::chrono::steady_clock::now();
    VerifyCheck c;
    try {
      c = check();
    } catch (const std::exception& e) {
      c.passed = false;
      c.detail = std::string("threw: ") + e.what();
    }
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(c));
  }
  return out;
}

int cmd_verify(const VerifyOptions& options, std::ostream& log) {
  bool all = true;
  for (const auto& c : run_verify(options)) {
    log << (c.passed ? "PASS " : "FAIL ") << std::left << std::setw(34) << c.name << " " << std::fixed
        << std::setprecision(2) << std::right << std::setw(7) << c.seconds << "s  " << std::left << c.detail << "\n";
    all = all && c.passed;
  }
  log << (all ? "all checks passed" : "some checks FAILED") << "\n";
  return all ? 0 : 1;
}

}  // namespace coplms
