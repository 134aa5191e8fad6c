#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <stdexcept>

#include "coplms/data.hpp"

namespace coplms {

void PartitionSpec::validate() const {
  if (devices < 1) throw std::invalid_argument("partition: devices must be >= 1");
  if (!(lambda > 0.0)) throw std::invalid_argument("partition: lambda must be > 0");
  if (per_device < 2 || server_size < 2) throw std::invalid_argument("partition: dataset sizes must be >= 2");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("partition: train_fraction must lie in (0, 1)");
  }
}

std::vector<double> sample_dirichlet(std::size_t n, double lambda, std::mt19937_64& rng) {
  if (n == 0) throw std::invalid_argument("sample_dirichlet: empty support");
  if (!(lambda > 0.0)) throw std::invalid_argument("sample_dirichlet: lambda must be > 0");
  // Gamma(a) = Gamma(a + 1) * U^(1/a), so log Gamma(a) = log Gamma(a + 1) + log(U) / a.
  std::gamma_distribution<double> gamma(lambda + 1.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<double> logs(n);
  for (double& l : logs) {
    double u = uniform(rng);
    while (u <= 0.0) u = uniform(rng);
    l = std::log(gamma(rng)) + std::log(u) / lambda;
  }
  const double mx = *std::max_element(logs.begin(), logs.end());
  double sum = 0.0;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(logs[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

namespace {

LocalDataset split(const std::vector<QASample>& corpus, std::vector<std::size_t> ids, double train_fraction,
                   std::mt19937_64& rng) {
  std::shuffle(ids.begin(), ids.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(ids.size())));
  LocalDataset d;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto& samples = i < n_train ? d.train : d.test;
    auto& index = i < n_train ? d.train_ids : d.test_ids;
    samples.push_back(corpus[ids[i]]);
    index.push_back(ids[i]);
  }
  return d;
}

}  // namespace

Partition dirichlet_partition(const std::vector<QASample>& corpus, const PartitionSpec& spec) {
  spec.validate();
  Partition out;
  std::map<std::string, std::size_t> domain_index;
  for (const auto& s : corpus) {
    if (domain_index.emplace(s.domain, out.domains.size()).second) out.domains.push_back(s.domain);
  }
  const std::size_t D = out.domains.size();
  if (D == 0) throw std::invalid_argument("partition: empty corpus");

  std::vector<std::vector<std::size_t>> pool(D);
  for (std::size_t i = 0; i < corpus.size(); ++i) pool[domain_index[corpus[i].domain]].push_back(i);

  std::mt19937_64 rng(spec.seed);
  auto take = [&](std::size_t d) {
    std::uniform_int_distribution<std::size_t> pick(0, pool[d].size() - 1);
    const std::size_t k = pick(rng);
    const std::size_t id = pool[d][k];
    pool[d][k] = pool[d].back();
    pool[d].pop_back();
    return id;
  };
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  for (std::size_t dev = 0; dev < spec.devices; ++dev) {
    const std::vector<double> mix = sample_dirichlet(D, spec.lambda, rng);
    out.mixtures.push_back(mix);
    std::vector<std::size_t> ids;
    for (std::size_t n = 0; n < spec.per_device; ++n) {
      double mass = 0.0;
      for (std::size_t d = 0; d < D; ++d)
        if (!pool[d].empty()) mass += mix[d];
      std::size_t chosen = D;
      if (mass > 0.0) {
        double u = uniform(rng) * mass;
        for (std::size_t d = 0; d < D; ++d) {
          if (pool[d].empty()) continue;
          chosen = d;
          if (u < mix[d]) break;
          u -= mix[d];
        }
      } else {
        // Every domain the mixture favours is exhausted: fall back to any domain with stock.
        for (std::size_t d = 0; d < D && chosen == D; ++d)
          if (!pool[d].empty()) chosen = d;
      }
      if (chosen == D) {
        throw std::runtime_error("partition: global pool exhausted while filling device " + std::to_string(dev));
      }
      ids.push_back(take(chosen));
    }
    out.devices.push_back(split(corpus, std::move(ids), spec.train_fraction, rng));
  }

  std::vector<std::size_t> rest;
  for (auto& p : pool) rest.insert(rest.end(), p.begin(), p.end());
  if (rest.size() < spec.server_size) throw std::runtime_error("partition: global pool exhausted before server draw");
  std::sort(rest.begin(), rest.end());
  std::shuffle(rest.begin(), rest.end(), rng);
  rest.resize(spec.server_size);
  out.server = split(corpus, std::move(rest), spec.train_fraction, rng);
  return out;
}

double max_domain_share(const LocalDataset& d) {
  std::map<std::string, std::size_t> counts;
  for (const auto& s : d.train) ++counts[s.domain];
  for (const auto& s : d.test) ++counts[s.domain];
  std::size_t best = 0;
  for (auto& [k, v] : counts) best = std::max(best, v);
  return d.size() == 0 ? 0.0 : static_cast<double>(best) / static_cast<double>(d.size());
}

nlohmann::json partition_manifest(const Partition& p, const PartitionSpec& spec) {
  auto describe = [&](const LocalDataset& d) {
    std::map<std::string, std::size_t> counts;
    for (const auto& s : d.train) ++counts[s.domain];
    for (const auto& s : d.test) ++counts[s.domain];
    return nlohmann::json{{"train", d.train.size()},
                          {"test", d.test.size()},
                          {"domain_counts", counts},
                          {"max_domain_share", max_domain_share(d)},
                          {"train_ids", d.train_ids},
                          {"test_ids", d.test_ids}};
  };
  nlohmann::json j;
  j["spec"] = {{"devices", spec.devices},         {"lambda", spec.lambda},
               {"per_device", spec.per_device},   {"server_size", spec.server_size},
               {"train_fraction", spec.train_fraction}, {"seed", spec.seed}};
  j["domains"] = p.domains;
  j["devices"] = nlohmann::json::array();
  for (std::size_t i = 0; i < p.devices.size(); ++i) {
    auto d = describe(p.devices[i]);
    d["mixture"] = p.mixtures[i];
    j["devices"].push_back(std::move(d));
  }
  j["server"] = describe(p.server);
  return j;
}

}  // namespace coplms
