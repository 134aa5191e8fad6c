// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <cstring>
#include <map>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "coplms/alignment.hpp"
#include "coplms/cli.hpp"
#include "coplms/federation.hpp"

using namespace coplms;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Closed-form scalar counts, written from the architecture rather than read off a model.
std::size_t base_params(const ModelConfig& m) {
  const std::size_t d = m.hidden, f = m.ffn;
  const std::size_t per_layer = 2 * d + 4 * d * d + d + 2 * d + d * f + f + f * d + d;
  return 2 * m.vocab * d + m.max_seq * d + m.layers * per_layer + 2 * d;
}
std::size_t lora_params(const ModelConfig& m, std::size_t targets, std::size_t rank) {
  return m.layers * targets * rank * (m.hidden + m.hidden);
}
std::size_t adapter_params(const ModelConfig& m, std::size_t bottleneck) {
  return m.layers * (2 * m.hidden * bottleneck + bottleneck + m.hidden);
}

std::vector<double> frozen_part(TinyTransformer& m) {
  auto base = snapshot(m, ParamGroup::Base);
  const auto ad = snapshot(m, ParamGroup::Adapter);
  base.insert(base.end(), ad.begin(), ad.end());
  return base;
}

double final_metric(const ExperimentResult& r, const std::string& name, const std::string& model, bool rouge) {
  for (const auto& e : r.rounds.back().endpoints) {
    if (e.name != name || e.model != model) continue;
    const auto& v = rouge ? e.rouge_l : e.test_loss;
    if (!v) throw std::runtime_error(name + "/" + model + " not evaluated in the final round");
    return *v;
  }
  throw std::runtime_error("no endpoint " + name + "/" + model);
}

class Acceptance {
 public:
  Acceptance(ExperimentConfig toy, fs::path workdir) : toy_(std::move(toy)), workdir_(std::move(workdir)) {}

  Outcome verify_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto checks = run_verify();
    const double secs = seconds_since(t0);
    bool ok = secs < 120.0;
    std::string failed;
    for (const auto& c : checks) {
      if (!c.passed) failed += " " + c.name;
      ok = ok && c.passed;
    }
    return {ok, std::to_string(checks.size()) + " checks in " + fmt(secs, 3) + " s" +
                    (failed.empty() ? "" : ", failed:" + failed)};
  }

  Outcome gradients() {
    double worst = 0.0;
    std::size_t probes = 0;
    for (GradLoss g : {GradLoss::Supervised, GradLoss::Transfer, GradLoss::ProxyMutual, GradLoss::PeerMutual}) {
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        worst = std::max(worst, gradient_probe(g, seed).max_relative_error);
        ++probes;
      }
    }
    return {worst < 1e-4, std::to_string(probes) + " probes, max relative error " + fmt(worst, 3)};
  }

  Outcome alignment_example() {
    const std::vector<std::string> whole = {"I", "utilize", "the", "map", "to", "travel"};
    const std::vector<std::string> split = {"I", "util", "ize", "the", "map", "to", "travel"};
    const auto m = align_tokens(whole, split);
    std::string shown;
    bool ok = m.mapping.size() == split.size();
    for (std::size_t j = 0; ok && j < split.size(); ++j) {
      const std::string& got = whole[m.mapping[j]];
      const std::string want = (split[j] == "util" || split[j] == "ize") ? "utilize" : split[j];
      ok = got == want;
      shown += (j ? " " : "") + split[j] + "->" + got;
    }
    return {ok, shown};
  }

  Outcome protocol_exactness() {
    ExperimentConfig c = toy_;
    c.rounds = 4;
    c.eval.every = 1000;  // only the last round is scored
    const Setup& s = setup(c, toy_.seeds.front());

    std::vector<std::vector<double>> frozen_before(c.num_devices);
    std::vector<double> server_frozen;
    bool frozen_ok = true, downloads_ok = true;
    auto observer = [&](Phase p, std::size_t, std::size_t dev, FederationState& st) {
      if (p == Phase::AfterSaml) frozen_before[dev] = frozen_part(*st.devices[dev].dpm);
      if (p == Phase::AfterUpload && frozen_part(*st.devices[dev].dpm) != frozen_before[dev]) frozen_ok = false;
      if (p == Phase::AfterUpload && dev == 0) server_frozen = frozen_part(*st.server.dpm);
      if (p == Phase::AfterDownload) {
        if (frozen_part(*st.devices[dev].dpm) != frozen_before[dev]) frozen_ok = false;
        if (frozen_part(*st.server.dpm) != server_frozen) frozen_ok = false;
        const auto mine = extract_lora(*st.devices[dev].dpm), theirs = extract_lora(*st.server.dpm);
        if (mine.size() != theirs.size()) downloads_ok = false;
        for (std::size_t b = 0; downloads_ok && b < mine.size(); ++b) {
          const auto& x = mine[b].value.values();
          const auto& y = theirs[b].value.values();
          downloads_ok = mine[b].name == theirs[b].name && x.size() == y.size() &&
                         std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
        }
      }
    };
    auto r = run_coplms(s, c, observer);

    // The only blocks allowed on the wire are the proxy's LoRA tensors.
    std::map<std::string, std::vector<std::size_t>> allowed;
    for (auto& np : r.state.server.dpm->named_parameters())
      if (np.group == ParamGroup::Lora) allowed[np.name] = np.param->value.shape();
    const auto& msgs = r.state.ledger.messages();
    bool payload_ok = true;
    std::map<std::size_t, std::pair<int, int>> per_round;
    for (const auto& m : msgs) {
      std::set<std::string> names;
      for (const auto& b : m.blocks) {
        names.insert(b.name);
        payload_ok = payload_ok && allowed.count(b.name) && allowed[b.name] == b.shape;
      }
      payload_ok = payload_ok && names.size() == allowed.size();
      auto& [up, down] = per_round[m.round];
      (m.direction == Direction::Upload ? up : down)++;
    }
    bool counts_ok = msgs.size() == 24 && per_round.size() == 4;
    for (const auto& [t, ud] : per_round) counts_ok = counts_ok && ud.first == 3 && ud.second == 3;
    return {counts_ok && payload_ok && frozen_ok && downloads_ok,
            std::to_string(msgs.size()) + " messages; lora-only payloads " + (payload_ok ? "yes" : "NO") +
                "; downloads bitwise equal " + (downloads_ok ? "yes" : "NO") + "; frozen parts constant " +
                (frozen_ok ? "yes" : "NO")};
  }

  Outcome freeze_contracts() {
    ExperimentConfig c = toy_;
    c.rounds = 3;
    c.eval.every = 1000;
    const Setup& s = setup(c, toy_.seeds.front());

    std::size_t violations = 0, audits = 0;
    std::vector<double> dpm_base, dpm_lora, dpm_adapter, dpm_frozen, slm_base, slm_lora;
    std::vector<double> llm_frozen, sdpm_frozen;
    auto observer = [&](Phase p, std::size_t, std::size_t dev, FederationState& st) {
      auto expect_same = [&](const std::vector<double>& x, const std::vector<double>& y) {
        ++audits;
        if (x != y) ++violations;
      };
      auto expect_changed = [&](const std::vector<double>& x, const std::vector<double>& y) {
        ++audits;
        if (x == y) ++violations;
      };
      if (p == Phase::BeforeDst) {
        auto& dpm = *st.devices[dev].dpm;
        dpm_base = snapshot(dpm, ParamGroup::Base);
        dpm_lora = snapshot(dpm, ParamGroup::Lora);
        dpm_adapter = snapshot(dpm, ParamGroup::Adapter);
      } else if (p == Phase::AfterDst) {
        auto& dpm = *st.devices[dev].dpm;
        expect_same(dpm_base, snapshot(dpm, ParamGroup::Base));
        expect_same(dpm_lora, snapshot(dpm, ParamGroup::Lora));
        expect_changed(dpm_adapter, snapshot(dpm, ParamGroup::Adapter));
        dpm_frozen = frozen_part(dpm);
        slm_base = snapshot(st.devices[dev].slm, ParamGroup::Base);
        slm_lora = snapshot(st.devices[dev].slm, ParamGroup::Lora);
      } else if (p == Phase::AfterSaml) {
        auto& dpm = *st.devices[dev].dpm;
        expect_same(dpm_frozen, frozen_part(dpm));
        expect_changed(dpm_lora, snapshot(dpm, ParamGroup::Lora));
        expect_same(slm_base, snapshot(st.devices[dev].slm, ParamGroup::Base));
        expect_changed(slm_lora, snapshot(st.devices[dev].slm, ParamGroup::Lora));
      } else if (p == Phase::AfterAggregate) {
        llm_frozen = frozen_part(*st.server.llm);
        sdpm_frozen = frozen_part(*st.server.dpm);
      } else if (p == Phase::AfterServerSaml) {
        expect_same(llm_frozen, frozen_part(*st.server.llm));
        expect_same(sdpm_frozen, frozen_part(*st.server.dpm));
      }
    };
    auto r = run_coplms(s, c, observer);
    bool reported = r.rounds.size() == 3;
    for (const auto& rr : r.rounds) reported = reported && rr.audit.dst_only_adapters && rr.audit.saml_only_lora;
    return {violations == 0 && reported && audits > 0,
            std::to_string(audits) + " bitwise audits over 3 rounds, " + std::to_string(violations) +
                " violations; round reports " + (reported ? "clean" : "FLAGGED")};
  }

  Outcome communication() {
    // Default architectures; data trimmed to toy size since traffic does not depend on it.
    ExperimentConfig c;
    c.data = toy_.data;
    c.pretrain = toy_.pretrain;
    c.optimizer = toy_.optimizer;
    c.rounds = 2;
    c.eval.every = 1000;
    const std::size_t T = c.rounds, N = c.num_devices, targets = c.lora.targets.size(), r = c.lora.rank;
    const Setup& s = setup(c, toy_.seeds.front());
    auto co = run_coplms(s, c);

    const ModelConfig dpm_cfg = c.dpm.model(s.server_tok.vocab_size(), c.max_seq);
    const std::size_t dpm_lora = lora_params(dpm_cfg, targets, r);
    bool counts_ok = co.state.ledger.total_scalars() == 2 * N * T * dpm_lora;
    double co_worst = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const ModelConfig slm_cfg = c.devices[i].model(s.device_toks[i].vocab_size(), c.max_seq);
      const std::size_t resident = base_params(slm_cfg) + lora_params(slm_cfg, targets, r) +
                                   base_params(dpm_cfg) + dpm_lora + adapter_params(dpm_cfg, c.adapter_bottleneck);
      auto& d = co.state.devices[i];
      counts_ok = counts_ok && resident == d.slm.parameter_count() + d.dpm->parameter_count();
      counts_ok = counts_ok && co.state.ledger.scalars_per_endpoint().at(d.name) == 2 * T * dpm_lora;
      const double hand = 2.0 * static_cast<double>(dpm_lora) / static_cast<double>(resident);
      const double got = co.comm["devices"][i]["comm_ratio"].get<double>();
      counts_ok = counts_ok && got == comm_ratio(co.state.ledger, d.name, resident) && std::abs(got - hand) < 1e-15;
      co_worst = std::max(co_worst, got);
    }

    // FedLoRA needs one shared architecture; every device uses the default first device.
    ExperimentConfig f = c;
    f.method = Method::FedLora;
    f.devices.assign(N, c.devices.front());
    const Setup& fs_setup = setup(f, toy_.seeds.front());
    auto fed = baseline_fedlora(fs_setup, f);
    const ModelConfig slm_cfg = f.devices[0].model(fs_setup.device_toks[0].vocab_size(), f.max_seq);
    const std::size_t slm_lora = lora_params(slm_cfg, targets, r);
    const std::size_t slm_resident = base_params(slm_cfg) + slm_lora;
    counts_ok = counts_ok && fed.state.ledger.total_scalars() == 2 * N * T * slm_lora;
    counts_ok = counts_ok && fed.state.devices[0].slm.parameter_count() == slm_resident;
    const double fed_ratio = fed.comm["devices"][0]["comm_ratio"].get<double>();
    counts_ok = counts_ok && std::abs(fed_ratio - 2.0 * slm_lora / static_cast<double>(slm_resident)) < 1e-15;

    return {counts_ok && co_worst < fed_ratio,
            "co-plms max device ratio " + fmt(co_worst) + " (proxy lora " + std::to_string(dpm_lora) +
                " scalars) vs fedlora " + fmt(fed_ratio) + " (slm lora " + std::to_string(slm_lora) +
                "); hand counts " + (counts_ok ? "match" : "MISMATCH")};
  }

  Outcome directional(std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t N = toy_.num_devices;
    std::vector<double> co(N, 0.0), solo(N, 0.0);
    double co_mean = 0.0, no_dst_mean = 0.0, co_server = 0.0, no_ss_server = 0.0;
    nlohmann::json per_seed = nlohmann::json::array();
    for (std::uint64_t seed : toy_.seeds) {
      ExperimentConfig c = toy_;
      const Setup& s = setup(c, seed);
      c.method = Method::CoPlms;
      const auto full = run_coplms(s, c);
      ExperimentConfig a = c;
      a.ablations.no_dst = true;
      const auto no_dst = run_coplms(s, a);
      ExperimentConfig b = c;
      b.ablations.no_server_saml = true;
      const auto no_ss = run_coplms(s, b);
      ExperimentConfig sc = c;
      sc.method = Method::Standalone;
      const auto standalone = baseline_standalone(s, sc);

      nlohmann::json row = {{"seed", seed}};
      for (std::size_t i = 0; i < N; ++i) {
        const std::string name = "device" + std::to_string(i);
        const double x = final_metric(full, name, "slm", true), y = final_metric(standalone, name, "slm", true);
        const double z = final_metric(no_dst, name, "slm", true);
        co[i] += x;
        solo[i] += y;
        co_mean += x;
        no_dst_mean += z;
        row[name] = {{"coplms", x}, {"standalone", y}, {"no_dst", z}};
      }
      const double fs = final_metric(full, "server", "dpm", false), ns = final_metric(no_ss, "server", "dpm", false);
      co_server += fs;
      no_ss_server += ns;
      row["server_dpm_loss"] = {{"coplms", fs}, {"no_server_saml", ns}};
      per_seed.push_back(row);
      log << "    seed " << seed << ": " << row.dump() << "\n";
      drop_setup(seed);
    }
    const double n = static_cast<double>(toy_.seeds.size());
    bool a_ok = true;
    std::string a_detail;
    for (std::size_t i = 0; i < N; ++i) {
      co[i] /= n;
      solo[i] /= n;
      a_ok = a_ok && co[i] >= solo[i];
      a_detail += (i ? ", " : "") + fmt(co[i], 3) + " vs " + fmt(solo[i], 3);
    }
    co_mean /= n * static_cast<double>(N);
    no_dst_mean /= n * static_cast<double>(N);
    co_server /= n;
    no_ss_server /= n;
    const bool b_ok = no_dst_mean <= co_mean;
    const bool c_ok = no_ss_server >= co_server;
    const double secs = seconds_since(t0);
    const bool time_ok = secs < 900.0;

    fs::create_directories(workdir_);
    std::ofstream(workdir_ / "directional.json")
        << nlohmann::json{{"per_seed", per_seed},
                          {"slm_rouge_l", {{"coplms", co}, {"standalone", solo}}},
                          {"mean_slm_rouge_l", {{"coplms", co_mean}, {"no_dst", no_dst_mean}}},
                          {"server_dpm_loss", {{"coplms", co_server}, {"no_server_saml", no_ss_server}}},
                          {"seconds", secs}}
               .dump(2)
        << "\n";
    std::ostringstream d;
    d << "(a) " << (a_ok ? "ok" : "FAIL") << " per-device Rouge-L co-plms vs standalone: " << a_detail << "; (b) "
      << (b_ok ? "ok" : "FAIL") << " no_dst " << fmt(no_dst_mean, 3) << " <= full " << fmt(co_mean, 3) << "; (c) "
      << (c_ok ? "ok" : "FAIL") << " no_server_saml server-dpm loss " << fmt(no_ss_server) << " >= full "
      << fmt(co_server) << "; " << fmt(secs, 4) << " s";
    return {a_ok && b_ok && c_ok && time_ok, d.str()};
  }

  Outcome dirichlet() {
    const ExperimentConfig c;  // 1,000 samples per device, 80/20
    bool books_ok = true;
    auto median_share = [&](double lambda) {
      std::vector<double> shares;
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        PartitionSpec spec;
        spec.devices = c.num_devices;
        spec.lambda = lambda;
        spec.per_device = c.data.per_device_size;
        spec.server_size = c.data.server_size;
        spec.train_fraction = c.data.train_fraction;
        spec.seed = derive_seed(seed, "partition");
        const auto p = dirichlet_partition(federated_corpus(c, seed), spec);
        std::set<std::size_t> seen;
        auto check = [&](const LocalDataset& d, std::size_t size) {
          books_ok = books_ok && d.size() == size && d.train.size() == size * 4 / 5 && d.test.size() == size / 5;
          for (auto id : d.train_ids) books_ok = books_ok && seen.insert(id).second;
          for (auto id : d.test_ids) books_ok = books_ok && seen.insert(id).second;
        };
        for (const auto& d : p.devices) {
          check(d, 1000);
          shares.push_back(max_domain_share(d));
        }
        check(p.server, c.data.server_size);
      }
      std::sort(shares.begin(), shares.end());
      const std::size_t m = shares.size();
      return m % 2 ? shares[m / 2] : 0.5 * (shares[m / 2 - 1] + shares[m / 2]);
    };
    const double skewed = median_share(0.01), flat = median_share(1.0);
    return {skewed >= 0.9 && skewed > flat && books_ok,
            "median max-domain share " + fmt(skewed, 3) + " at lambda 0.01, " + fmt(flat, 3) +
                " at lambda 1; bookkeeping " + (books_ok ? "exact" : "WRONG")};
  }

  Outcome determinism() {
    ExperimentConfig c = toy_;
    c.rounds = 3;
    c.seeds = {toy_.seeds.front()};
    std::ostringstream log;
    const fs::path a = workdir_ / "determinism_a", b = workdir_ / "determinism_b";
    fs::remove_all(a);
    fs::remove_all(b);
    if (cmd_run(c, a, log) != 0 || cmd_run(c, b, log) != 0) return {false, "run failed: " + log.str()};
    const std::string name = run_dir_name(c, c.seeds.front());
    bool same = true;
    std::size_t bytes = 0;
    for (const char* f : {"report.json", "ledger.csv"}) {
      const std::string x = slurp(a / name / f), y = slurp(b / name / f);
      same = same && !x.empty() && x == y;
      bytes += x.size();
    }
    return {same, std::string("report.json + ledger.csv, ") + std::to_string(bytes) + " bytes, " +
                      (same ? "identical" : "DIFFERENT")};
  }

 private:
  // Setups are cached per (config shape, seed); pretrained checkpoints are shared across all of them.
  const Setup& setup(const ExperimentConfig& c, std::uint64_t seed) {
    nlohmann::json key = to_json(c);
    for (const char* k : {"method", "rounds", "seeds", "ablations", "eval", "alpha", "beta", "optimizer"}) key.erase(k);
    const std::string k = key.dump() + "#" + std::to_string(seed);
    auto it = setups_.find(k);
    if (it == setups_.end()) it = setups_.emplace(k, prepare_setup(c, seed, &cache_)).first;
    return it->second;
  }
  void drop_setup(std::uint64_t seed) {
    const std::string suffix = "#" + std::to_string(seed);
    for (auto it = setups_.begin(); it != setups_.end();) {
      const auto& k = it->first;
      const bool match = k.size() >= suffix.size() && k.compare(k.size() - suffix.size(), suffix.size(), suffix) == 0;
      it = match ? setups_.erase(it) : std::next(it);
    }
  }

  ExperimentConfig toy_;
  fs::path workdir_;
  PretrainCache cache_;
  std::map<std::string, Setup> setups_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string config_path, workdir = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--config", config_path, "Toy experiment config")->required();
  app.add_option("--workdir", workdir, "Scratch directory for run artifacts");
  app.add_option("--only", only, "Run just these criteria");
  CLI11_PARSE(app, argc, argv);

  const ExperimentConfig toy = load_config(config_path);
  if (toy.seeds.size() != 5 || toy.rounds != 10 || toy.num_devices != 3 || toy.lambda != 0.1) {
    std::cerr << "toy config must have 5 seeds, 10 rounds, 3 devices and lambda 0.1\n";
    return 2;
  }
  Acceptance acc(toy, workdir);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"oracle equivalence suite", [&] { return acc.verify_suite(); }},
      {"gradient checks, 4 losses x 20 seeds", [&] { return acc.gradients(); }},
      {"split-word alignment example", [&] { return acc.alignment_example(); }},
      {"protocol exactness, N=3 T=4", [&] { return acc.protocol_exactness(); }},
      {"freeze contracts, T=3", [&] { return acc.freeze_contracts(); }},
      {"communication vs FedLoRA", [&] { return acc.communication(); }},
      {"directional learning, 5 seeds", [&] { return acc.directional(std::cout); }},
      {"Dirichlet skew and bookkeeping", [&] { return acc.dirichlet(); }},
      {"determinism of report and ledger", [&] { return acc.determinism(); }},
  };

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    all = all && o.passed;
    std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << id << " " << criteria[i].first << " ["
              << fmt(seconds_since(t0), 3) << " s]: " << o.detail << std::endl;
  }
  std::cout << (all ? "all acceptance criteria passed" : "some acceptance criteria FAILED") << std::endl;
  return all ? 0 : 1;
}
