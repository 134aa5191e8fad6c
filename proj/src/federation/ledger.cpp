#include <set>
#include <sstream>
#include <stdexcept>

#include "coplms/federation.hpp"

namespace coplms {

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : tag) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  std::uint64_t z = seed ^ h;  // splitmix64 finalizer
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string to_string(Direction d) { return d == Direction::Upload ? "upload" : "download"; }

void CommLedger::append(Message m) {
  std::size_t n = 0;
  for (const auto& b : m.blocks) {
    std::size_t c = 1;
    for (auto d : b.shape) c *= d;
    n += c;
  }
  if (n != m.scalar_count) throw std::logic_error("ledger: scalar_count disagrees with payload descriptor");
  if (m.byte_count != m.scalar_count * 8) throw std::logic_error("ledger: byte_count must be scalar_count * 8");
  messages_.push_back(std::move(m));
}

std::size_t CommLedger::total_scalars() const {
  std::size_t n = 0;
  for (const auto& m : messages_) n += m.scalar_count;
  return n;
}

std::map<std::size_t, std::size_t> CommLedger::scalars_per_round() const {
  std::map<std::size_t, std::size_t> out;
  for (const auto& m : messages_) out[m.round] += m.scalar_count;
  return out;
}

std::map<std::string, std::size_t> CommLedger::scalars_per_endpoint() const {
  std::map<std::string, std::size_t> out;
  for (const auto& m : messages_) {
    out[m.from] += m.scalar_count;
    out[m.to] += m.scalar_count;
  }
  return out;
}

std::size_t CommLedger::round_count() const {
  std::set<std::size_t> rounds;
  for (const auto& m : messages_) rounds.insert(m.round);
  return rounds.size();
}

std::string CommLedger::to_csv() const {
  std::ostringstream out;
  out << "round,direction,from,to,blocks,scalar_count,byte_count,wire_bytes\n";
  for (const auto& m : messages_) {
    std::string blocks;
    for (const auto& b : m.blocks) {
      if (!blocks.empty()) blocks += ';';
      blocks += b.name + '[';
      for (std::size_t i = 0; i < b.shape.size(); ++i) blocks += (i ? "x" : "") + std::to_string(b.shape[i]);
      blocks += ']';
    }
    out << m.round << ',' << to_string(m.direction) << ',' << m.from << ',' << m.to << ',' << blocks << ','
        << m.scalar_count << ',' << m.byte_count << ',' << m.wire_bytes << '\n';
  }
  return out.str();
}

BlockSet transmit(CommLedger& ledger, std::size_t round, Direction dir, const std::string& from,
                  const std::string& to, const BlockSet& blocks) {
  const auto wire = encode_blocks(blocks);
  BlockSet received = decode_blocks(wire);
  Message m;
  m.round = round;
  m.direction = dir;
  m.from = from;
  m.to = to;
  for (const auto& b : received) m.blocks.push_back({b.name, b.value.shape()});
  m.scalar_count = scalar_count(received);
  m.byte_count = m.scalar_count * 8;
  m.wire_bytes = wire.size();
  ledger.append(std::move(m));
  return received;
}

BlockSet aggregate_lora(const std::vector<BlockSet>& uploads) {
  if (uploads.empty()) throw std::invalid_argument("aggregate_lora: no uploads");
  BlockSet out = uploads.front();
  for (std::size_t u = 1; u < uploads.size(); ++u) {
    if (uploads[u].size() != out.size()) throw std::invalid_argument("aggregate_lora: block count mismatch");
    for (std::size_t b = 0; b < out.size(); ++b) {
      const auto& in = uploads[u][b];
      if (in.name != out[b].name || in.value.shape() != out[b].value.shape()) {
        throw std::invalid_argument("aggregate_lora: block '" + in.name + "' " + in.value.shape_string() +
                                    " does not match '" + out[b].name + "' " + out[b].value.shape_string());
      }
      for (std::size_t i = 0; i < in.value.size(); ++i) out[b].value[i] += in.value[i];
    }
  }
  const double n = static_cast<double>(uploads.size());
  if (uploads.size() > 1)
    for (auto& b : out)
      for (double& v : b.value.values()) v /= n;
  return out;
}

double comm_ratio(const CommLedger& ledger, const std::string& endpoint, std::size_t resident_scalars) {
  if (ledger.empty()) return 0.0;
  if (resident_scalars == 0) throw std::invalid_argument("comm_ratio: endpoint has no resident parameters");
  const auto per_endpoint = ledger.scalars_per_endpoint();
  auto it = per_endpoint.find(endpoint);
  const double moved = it == per_endpoint.end() ? 0.0 : static_cast<double>(it->second);
  return moved / static_cast<double>(ledger.round_count()) / static_cast<double>(resident_scalars);
}

}  // namespace coplms
