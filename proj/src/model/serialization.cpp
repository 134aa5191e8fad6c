#include "coplms/serialization.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include "json.hpp"
#include <stdexcept>

namespace coplms {

static_assert(std::endian::native == std::endian::little, "block encoding assumes a little-endian host");

namespace {

constexpr char kBlockMagic[8] = {'C', 'O', 'P', 'L', 'M', 'B', 'L', 'K'};
constexpr char kCheckpointMagic[8] = {'C', 'O', 'P', 'L', 'M', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  template <typename T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t pos = 0) : bytes_(b), pos_(pos) {}
  template <typename T>
  T get() {
    T v;
    get_bytes(&v, sizeof(T));
    return v;
  }
  void get_bytes(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("block stream truncated at byte " + std::to_string(pos_));
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_;
};

void write_blocks(Writer& w, const BlockSet& blocks) {
  w.put_bytes(kBlockMagic, 8);
  w.put(kVersion);
  w.put(static_cast<std::uint32_t>(blocks.size()));
  for (const auto& b : blocks) {
    w.put(static_cast<std::uint32_t>(b.name.size()));
    w.put_bytes(b.name.data(), b.name.size());
    w.put(static_cast<std::uint32_t>(b.value.ndim()));
    for (std::size_t d : b.value.shape()) w.put(static_cast<std::uint64_t>(d));
    w.put_bytes(b.value.data(), b.value.size() * sizeof(double));
  }
}

BlockSet read_blocks(Reader& r) {
  char magic[8];
  r.get_bytes(magic, 8);
  if (std::memcmp(magic, kBlockMagic, 8) != 0) throw std::runtime_error("block stream: bad magic");
  if (const auto v = r.get<std::uint32_t>(); v != kVersion) {
    throw std::runtime_error("block stream: unsupported version " + std::to_string(v));
  }
  const auto count = r.get<std::uint32_t>();
  BlockSet out;
  for (std::uint32_t i = 0; i < count; ++i) {
    ParameterBlock b;
    b.name.resize(r.get<std::uint32_t>());
    r.get_bytes(b.name.data(), b.name.size());
    const auto ndim = r.get<std::uint32_t>();
    if (ndim > 8) throw std::runtime_error("block stream: implausible rank for block " + b.name);
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    Tensor t(shape);
    r.get_bytes(t.data(), t.size() * sizeof(double));
    b.value = std::move(t);
    out.push_back(std::move(b));
  }
  return out;
}

nlohmann::json layout_json(TinyTransformer& model) {
  const ModelConfig& c = model.config();
  nlohmann::json j = {{"layers", c.layers}, {"heads", c.heads},     {"hidden", c.hidden},
                      {"ffn", c.ffn},       {"vocab", c.vocab},     {"max_seq", c.max_seq},
                      {"arch_tag", c.arch_tag}};
  nlohmann::json lora = nullptr;
  if (model.has_lora()) {
    std::vector<std::string> targets;
    for (auto t : model.lora_targets()) targets.push_back(to_string(t));
    lora = {{"rank", model.lora_rank()}, {"targets", targets}};
  }
  j["lora"] = lora;
  j["adapter_bottleneck"] = model.has_adapters() ? model.layers().front().adapter->bottleneck : 0;
  std::map<std::string, bool> trainable;
  for (auto& np : model.named_parameters()) trainable[np.name] = np.param->trainable;
  j["trainable"] = trainable;
  return j;
}

}  // namespace

std::size_t scalar_count(const BlockSet& blocks) {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.value.size();
  return n;
}

std::vector<std::uint8_t> encode_blocks(const BlockSet& blocks) {
  Writer w;
  write_blocks(w, blocks);
  return std::move(w.bytes);
}

BlockSet decode_blocks(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  BlockSet out = read_blocks(r);
  if (r.pos() != bytes.size()) throw std::runtime_error("block stream: trailing bytes");
  return out;
}

BlockSet extract_group(TinyTransformer& model, ParamGroup group) {
  BlockSet out;
  for (auto& np : model.named_parameters())
    if (np.group == group) out.push_back({np.name, np.param->value});
  return out;
}

BlockSet extract_lora(TinyTransformer& model) {
  if (!model.has_lora()) throw std::logic_error("extract_lora: model has no LoRA attached");
  return extract_group(model, ParamGroup::Lora);
}

void load_lora(TinyTransformer& model, const BlockSet& blocks) {
  auto params = model.named_parameters();
  std::vector<NamedParameter> lora;
  for (auto& np : params)
    if (np.group == ParamGroup::Lora) lora.push_back(np);
  if (lora.size() != blocks.size()) {
    throw std::invalid_argument("load_lora: expected " + std::to_string(lora.size()) + " blocks, got " +
                                std::to_string(blocks.size()));
  }
  for (std::size_t i = 0; i < lora.size(); ++i) {
    if (lora[i].name != blocks[i].name || !lora[i].param->value.same_shape(blocks[i].value)) {
      throw std::invalid_argument("load_lora: block " + blocks[i].name + " " + blocks[i].value.shape_string() +
                                  " does not match " + lora[i].name + " " +
                                  lora[i].param->value.shape_string());
    }
  }
  for (std::size_t i = 0; i < lora.size(); ++i) lora[i].param->value = blocks[i].value;
}

std::vector<std::uint8_t> encode_checkpoint(TinyTransformer& model) {
  Writer w;
  w.put_bytes(kCheckpointMagic, 8);
  w.put(kVersion);
  const std::string layout = layout_json(model).dump();
  w.put(static_cast<std::uint32_t>(layout.size()));
  w.put_bytes(layout.data(), layout.size());
  BlockSet all;
  for (auto& np : model.named_parameters()) all.push_back({np.name, np.param->value});
  write_blocks(w, all);
  return std::move(w.bytes);
}

TinyTransformer decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[8];
  r.get_bytes(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw std::runtime_error("checkpoint: bad magic");
  if (const auto v = r.get<std::uint32_t>(); v != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(v));
  }
  std::string layout(r.get<std::uint32_t>(), '\0');
  r.get_bytes(layout.data(), layout.size());
  const auto j = nlohmann::json::parse(layout);

  ModelConfig c;
  c.layers = j.at("layers");
  c.heads = j.at("heads");
  c.hidden = j.at("hidden");
  c.ffn = j.at("ffn");
  c.vocab = j.at("vocab");
  c.max_seq = j.at("max_seq");
  c.arch_tag = j.at("arch_tag");
  TinyTransformer model(c, 0);
  if (!j.at("lora").is_null()) {
    std::set<LoraTarget> targets;
    for (const auto& t : j["lora"]["targets"]) targets.insert(lora_target_from_string(t.get<std::string>()));
    model.attach_lora(targets, j["lora"]["rank"].get<std::size_t>(), 0);
  }
  if (const std::size_t b = j.at("adapter_bottleneck"); b > 0) model.attach_domain_adapters(b, 0);

  const BlockSet blocks = read_blocks(r);
  if (r.pos() != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes");
  auto params = model.named_parameters();
  if (params.size() != blocks.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
  const auto& trainable = j.at("trainable");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != blocks[i].name || !params[i].param->value.same_shape(blocks[i].value)) {
      throw std::runtime_error("checkpoint: unexpected block " + blocks[i].name);
    }
    params[i].param->value = blocks[i].value;
    params[i].param->trainable = trainable.at(params[i].name).get<bool>();
    params[i].param->zero_grad();
  }
  return model;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void save_checkpoint(TinyTransformer& model, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(model));
}

TinyTransformer load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace coplms
