#include <set>
#include <stdexcept>

#include "coplms/federation.hpp"
#include "coplms/training.hpp"

namespace coplms {

namespace {

constexpr std::size_t kServer = static_cast<std::size_t>(-1);
const std::string kServerName = "server";

std::set<LoraTarget> target_set(const ExperimentConfig& c) { return {c.lora.targets.begin(), c.lora.targets.end()}; }

std::string tag(std::size_t t, const std::string& who, const std::string& what) {
  return "round" + std::to_string(t) + ":" + who + ":" + what;
}

// Flat copy of several groups, for bitwise before/after audits.
std::vector<double> snapshot_groups(TinyTransformer& m, std::initializer_list<ParamGroup> groups) {
  std::vector<double> out;
  for (ParamGroup g : groups) {
    auto s = snapshot(m, g);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

void notify(const PhaseObserver& obs, Phase p, std::size_t t, std::size_t device, FederationState& state) {
  if (obs) obs(p, t, device, state);
}

bool evaluate_round(std::size_t t, const ExperimentConfig& config) {
  return t % config.eval.every == 0 || t == config.rounds;
}

EndpointMetrics eval_generation(const std::string& name, const std::string& kind, TinyTransformer& model,
                                const TokenizerSpec& tok, const LocalDataset& data, const ExperimentConfig& config,
                                std::vector<Prediction>* preds) {
  EndpointMetrics m;
  m.name = name;
  m.model = kind;
  const auto r = evaluate(model, tok, data.test, config.eval.max_new_tokens);
  m.rouge_l = r.rouge_l;
  m.em = r.em;
  m.test_loss = mean_sft_loss(model, tok, data.test);
  if (preds) *preds = r.predictions;
  return m;
}

template <typename F>
auto with_context(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw std::runtime_error(where + ": " + e.what());
  }
}

}  // namespace

std::string to_string(Phase p) {
  switch (p) {
    case Phase::BeforeDst: return "before_dst";
    case Phase::AfterDst: return "after_dst";
    case Phase::AfterSaml: return "after_saml";
    case Phase::AfterUpload: return "after_upload";
    case Phase::AfterAggregate: return "after_aggregate";
    case Phase::AfterServerSaml: return "after_server_saml";
    case Phase::AfterDownload: return "after_download";
  }
  return "?";
}

nlohmann::json to_json(const RoundReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json endpoints = nlohmann::json::array();
  for (const auto& e : r.endpoints) {
    endpoints.push_back({{"name", e.name},
                         {"model", e.model},
                         {"rouge_l", opt(e.rouge_l)},
                         {"em", opt(e.em)},
                         {"test_loss", opt(e.test_loss)},
                         {"train_losses", e.train_losses}});
  }
  return {{"round", r.round},
          {"endpoints", endpoints},
          {"comm", {{"uploads", r.uploads}, {"downloads", r.downloads}, {"scalars", r.scalars}}},
          {"audit",
           {{"dst_only_adapters", r.audit.dst_only_adapters},
            {"saml_only_lora", r.audit.saml_only_lora},
            {"base_constant_across_upload", r.audit.base_constant_across_upload},
            {"downloads_identical", r.audit.downloads_identical}}}};
}

FederationState init_coplms(const Setup& setup, const ExperimentConfig& config) {
  FederationState state;
  state.seed = setup.seed;
  const auto targets = target_set(config);
  state.server.tok = setup.server_tok;
  state.server.data = setup.partition.server;
  state.server.llm = setup.llm;
  state.server.llm->attach_lora(targets, config.lora.rank, derive_seed(setup.seed, "lora:llm"));
  state.server.dpm = setup.dpm;
  state.server.dpm->attach_lora(targets, config.lora.rank, derive_seed(setup.seed, "lora:dpm"));

  for (std::size_t i = 0; i < config.num_devices; ++i) {
    DeviceState d;
    d.id = i;
    d.name = "device" + std::to_string(i);
    d.arch = config.devices[i];
    d.slm_tok = setup.device_toks[i];
    d.slm = setup.slms[i];
    d.slm.attach_lora(targets, config.lora.rank, derive_seed(setup.seed, "lora:slm" + std::to_string(i)));
    // Every device starts from the server's proxy, LoRA included.
    d.dpm = *state.server.dpm;
    if (!config.ablations.no_dst) {
      d.dpm->attach_domain_adapters(config.adapter_bottleneck, derive_seed(setup.seed, "adapter" + std::to_string(i)));
    }
    d.data = setup.partition.devices[i];
    state.devices.push_back(std::move(d));
  }
  return state;
}

RoundReport run_round(FederationState& state, std::size_t t, const ExperimentConfig& config,
                      const PhaseObserver& observer) {
  RoundReport report;
  report.round = t;
  const std::size_t ledger_before = state.ledger.messages().size();
  ServerState& server = state.server;
  if (!server.dpm || !server.llm) throw std::logic_error("run_round: server is not initialized");

  std::vector<BlockSet> uploads;
  std::vector<std::vector<double>> frozen_after_saml;
  std::vector<std::vector<double>> device_losses(state.devices.size());
  for (auto& d : state.devices) {
    if (!d.dpm) throw std::logic_error("run_round: " + d.name + " has no proxy model");
    TinyTransformer& dpm = *d.dpm;
    notify(observer, Phase::BeforeDst, t, d.id, state);

    if (!config.ablations.no_dst) {
      const auto before = snapshot_groups(dpm, {ParamGroup::Base, ParamGroup::Lora});
      const auto r = with_context(d.name + " dst", [&] {
        return dst(dpm, tokenize_dataset(server.tok, d.data.train), config.optimizer.dst_epochs,
                   config.local_optimizer(), derive_seed(state.seed, tag(t, d.name, "dst")));
      });
      device_losses[d.id].push_back(r.epoch_losses.back());
      if (snapshot_groups(dpm, {ParamGroup::Base, ParamGroup::Lora}) != before) report.audit.dst_only_adapters = false;
    }
    notify(observer, Phase::AfterDst, t, d.id, state);

    const auto dpm_fixed = snapshot_groups(dpm, {ParamGroup::Base, ParamGroup::Adapter});
    const auto slm_fixed = snapshot_groups(d.slm, {ParamGroup::Base, ParamGroup::Adapter});
    const auto r = with_context(d.name + " saml", [&] {
      return saml(dpm, server.tok, d.slm, d.slm_tok, d.data.train, config.saml_config(config.optimizer.saml_epochs),
                  derive_seed(state.seed, tag(t, d.name, "saml")));
    });
    device_losses[d.id].push_back(r.proxy_loss);
    device_losses[d.id].push_back(r.peer_loss);
    if (snapshot_groups(dpm, {ParamGroup::Base, ParamGroup::Adapter}) != dpm_fixed ||
        snapshot_groups(d.slm, {ParamGroup::Base, ParamGroup::Adapter}) != slm_fixed) {
      report.audit.saml_only_lora = false;
    }
    notify(observer, Phase::AfterSaml, t, d.id, state);

    frozen_after_saml.push_back(snapshot_groups(dpm, {ParamGroup::Base, ParamGroup::Adapter}));
    uploads.push_back(transmit(state.ledger, t, Direction::Upload, d.name, kServerName, r.proxy_lora));
    ++report.uploads;
    notify(observer, Phase::AfterUpload, t, d.id, state);
  }

  // Barrier: the server acts only once every upload has arrived.
  TinyTransformer& sdpm = *server.dpm;
  const auto server_fixed = snapshot_groups(sdpm, {ParamGroup::Base, ParamGroup::Adapter});
  load_lora(sdpm, aggregate_lora(uploads));
  notify(observer, Phase::AfterAggregate, t, kServer, state);

  std::vector<double> server_losses;
  if (!config.ablations.no_server_saml) {
    const auto llm_fixed = snapshot_groups(*server.llm, {ParamGroup::Base, ParamGroup::Adapter});
    const auto r = with_context("server saml", [&] {
      return saml(sdpm, server.tok, *server.llm, server.tok, server.data.train,
                  config.saml_config(config.optimizer.server_saml_epochs),
                  derive_seed(state.seed, tag(t, kServerName, "saml")));
    });
    server_losses = {r.proxy_loss, r.peer_loss};
    if (snapshot_groups(*server.llm, {ParamGroup::Base, ParamGroup::Adapter}) != llm_fixed) {
      report.audit.saml_only_lora = false;
    }
    notify(observer, Phase::AfterServerSaml, t, kServer, state);
  }
  if (snapshot_groups(sdpm, {ParamGroup::Base, ParamGroup::Adapter}) != server_fixed) {
    report.audit.base_constant_across_upload = false;
  }

  const BlockSet global = extract_lora(sdpm);
  for (auto& d : state.devices) {
    const BlockSet received = transmit(state.ledger, t, Direction::Download, kServerName, d.name, global);
    load_lora(*d.dpm, received);
    ++report.downloads;
    if (extract_lora(*d.dpm) != global) report.audit.downloads_identical = false;
    if (snapshot_groups(*d.dpm, {ParamGroup::Base, ParamGroup::Adapter}) != frozen_after_saml[d.id]) {
      report.audit.base_constant_across_upload = false;
    }
    notify(observer, Phase::AfterDownload, t, d.id, state);
  }

  for (std::size_t i = ledger_before; i < state.ledger.messages().size(); ++i) {
    report.scalars += state.ledger.messages()[i].scalar_count;
  }

  const bool eval = evaluate_round(t, config);
  for (auto& d : state.devices) {
    EndpointMetrics slm;
    slm.name = d.name;
    slm.model = "slm";
    if (eval) {
      std::vector<Prediction> preds;
      slm = eval_generation(d.name, "slm", d.slm, d.slm_tok, d.data, config, &preds);
      report.predictions.push_back(std::move(preds));
    }
    slm.train_losses = {device_losses[d.id].back()};
    EndpointMetrics dpm;
    dpm.name = d.name;
    dpm.model = "dpm";
    if (eval) dpm.test_loss = mean_sft_loss(*d.dpm, server.tok, d.data.test);
    dpm.train_losses.assign(device_losses[d.id].begin(), device_losses[d.id].end() - 1);
    report.endpoints.push_back(std::move(slm));
    report.endpoints.push_back(std::move(dpm));
  }
  EndpointMetrics llm;
  llm.name = kServerName;
  llm.model = "llm";
  EndpointMetrics sdm;
  sdm.name = kServerName;
  sdm.model = "dpm";
  if (eval) {
    std::vector<Prediction> preds;
    llm = eval_generation(kServerName, "llm", *server.llm, server.tok, server.data, config, &preds);
    report.predictions.push_back(std::move(preds));
    sdm.test_loss = mean_sft_loss(sdpm, server.tok, server.data.test);
  }
  if (!server_losses.empty()) {
    sdm.train_losses = {server_losses[0]};
    llm.train_losses = {server_losses[1]};
  }
  report.endpoints.push_back(std::move(llm));
  report.endpoints.push_back(std::move(sdm));
  return report;
}

namespace {

nlohmann::json comm_summary(FederationState& state) {
  nlohmann::json devices = nlohmann::json::array();
  for (auto& d : state.devices) {
    std::size_t resident = d.slm.parameter_count();
    std::size_t exchanged = 0;
    if (d.dpm) {
      resident += d.dpm->parameter_count();
      exchanged = d.dpm->parameter_count(ParamGroup::Lora);
    } else if (!state.ledger.empty()) {
      exchanged = d.slm.parameter_count(ParamGroup::Lora);
    }
    devices.push_back({{"name", d.name},
                       {"resident_scalars", resident},
                       {"exchanged_block_scalars", exchanged},
                       {"comm_ratio", comm_ratio(state.ledger, d.name, resident)}});
  }
  return {{"total_scalars", state.ledger.total_scalars()},
          {"messages", state.ledger.messages().size()},
          {"devices", devices}};
}

// Per-device local LoRA finetuning of the SLM, as both baselines do each round.
std::vector<double> local_finetune(FederationState& state, std::size_t t, const ExperimentConfig& config) {
  std::vector<double> losses;
  for (auto& d : state.devices) {
    const auto r = with_context(d.name + " finetune", [&] {
      d.slm.train_only({ParamGroup::Lora});
      return finetune(d.slm, tokenize_dataset(d.slm_tok, d.data.train), config.optimizer.saml_epochs,
                      config.local_optimizer(), derive_seed(state.seed, tag(t, d.name, "saml")));
    });
    losses.push_back(r.epoch_losses.back());
  }
  return losses;
}

RoundReport slm_only_report(FederationState& state, std::size_t t, const ExperimentConfig& config,
                            const std::vector<double>& losses) {
  RoundReport report;
  report.round = t;
  const bool eval = evaluate_round(t, config);
  for (auto& d : state.devices) {
    EndpointMetrics m;
    m.name = d.name;
    m.model = "slm";
    if (eval) {
      std::vector<Prediction> preds;
      m = eval_generation(d.name, "slm", d.slm, d.slm_tok, d.data, config, &preds);
      report.predictions.push_back(std::move(preds));
    }
    m.train_losses = {losses[d.id]};
    report.endpoints.push_back(std::move(m));
  }
  return report;
}

FederationState init_slm_only(const Setup& setup, const ExperimentConfig& config, bool shared_lora_init) {
  FederationState state;
  state.seed = setup.seed;
  state.server.tok = setup.server_tok;
  state.server.data = setup.partition.server;
  for (std::size_t i = 0; i < config.num_devices; ++i) {
    DeviceState d;
    d.id = i;
    d.name = "device" + std::to_string(i);
    d.arch = config.devices[i];
    d.slm_tok = setup.device_toks[i];
    d.slm = setup.slms[i];
    const std::string lora_tag = shared_lora_init ? "lora:slm-shared" : "lora:slm" + std::to_string(i);
    d.slm.attach_lora(target_set(config), config.lora.rank, derive_seed(setup.seed, lora_tag));
    d.data = setup.partition.devices[i];
    state.devices.push_back(std::move(d));
  }
  return state;
}

}  // namespace

ExperimentResult run_coplms(const Setup& setup, const ExperimentConfig& config, const PhaseObserver& observer) {
  ExperimentResult out;
  out.init = setup.init;
  out.state = init_coplms(setup, config);
  for (std::size_t t = 1; t <= config.rounds; ++t) out.rounds.push_back(run_round(out.state, t, config, observer));
  out.comm = comm_summary(out.state);
  return out;
}

ExperimentResult baseline_standalone(const Setup& setup, const ExperimentConfig& config) {
  ExperimentResult out;
  out.init = setup.init;
  out.state = init_slm_only(setup, config, false);
  for (std::size_t t = 1; t <= config.rounds; ++t) {
    const auto losses = local_finetune(out.state, t, config);
    out.rounds.push_back(slm_only_report(out.state, t, config, losses));
  }
  out.comm = comm_summary(out.state);
  return out;
}

ExperimentResult baseline_fedlora(const Setup& setup, const ExperimentConfig& config) {
  for (const auto& d : config.devices) {
    if (!(d == config.devices.front())) {
      throw std::invalid_argument("fedlora: requires homogeneous device models, but arch '" + d.arch_tag +
                                  "' differs from '" + config.devices.front().arch_tag + "'");
    }
  }
  ExperimentResult out;
  out.init = setup.init;
  out.state = init_slm_only(setup, config, true);
  FederationState& state = out.state;
  for (std::size_t t = 1; t <= config.rounds; ++t) {
    const auto losses = local_finetune(state, t, config);
    std::vector<BlockSet> uploads;
    for (auto& d : state.devices) {
      uploads.push_back(transmit(state.ledger, t, Direction::Upload, d.name, kServerName, extract_lora(d.slm)));
    }
    const BlockSet global = aggregate_lora(uploads);
    for (auto& d : state.devices) {
      load_lora(d.slm, transmit(state.ledger, t, Direction::Download, kServerName, d.name, global));
    }
    auto report = slm_only_report(state, t, config, losses);
    report.uploads = report.downloads = state.devices.size();
    report.scalars = state.ledger.scalars_per_round().at(t);
    out.rounds.push_back(std::move(report));
  }
  out.comm = comm_summary(state);
  return out;
}

ExperimentResult run_method(const Setup& setup, const ExperimentConfig& config, const PhaseObserver& observer) {
  switch (config.method) {
    case Method::CoPlms: return run_coplms(setup, config, observer);
    case Method::Standalone: return baseline_standalone(setup, config);
    case Method::FedLora: return baseline_fedlora(setup, config);
  }
  throw std::logic_error("run_method: unknown method");
}

ExperimentResult run_experiment(const ExperimentConfig& config, std::uint64_t seed, PretrainCache* cache) {
  return run_method(prepare_setup(config, seed, cache), config);
}

nlohmann::json report_json(const ExperimentConfig& config, std::uint64_t seed, const ExperimentResult& r) {
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& rr : r.rounds) rounds.push_back(to_json(rr));
  return {{"method", to_string(config.method)},
          {"seed", seed},
          {"config", to_json(config)},
          {"init", r.init},
          {"rounds", rounds},
          {"comm", r.comm}};
}

}  // namespace coplms
