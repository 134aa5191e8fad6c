#pragma once

// Named parameter blocks and their binary encoding.
//
// Block stream (all integers little-endian):
//   magic   8 bytes  "COPLMBLK"
//   version u32      1
//   count   u32
//   per block:
//     name_len u32, name bytes
//     ndim     u32, dims u64[ndim]
//     values   f64[prod(dims)]
//
// Checkpoint file:
//   magic   8 bytes  "COPLMCKP"
//   version u32      1
//   config_len u32, config JSON bytes (ModelConfig + LoRA/adapter layout)
//   block stream of every parameter
//
// The LoRA payload exchanged between devices and the server is a block stream
// holding only "lora.*" blocks, so upload/download sizes are auditable byte for byte.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "coplms/model.hpp"

namespace coplms {

struct ParameterBlock {
  std::string name;
  Tensor value;

  bool operator==(const ParameterBlock& o) const {
    return name == o.name && value.shape() == o.value.shape() && value.values() == o.value.values();
  }
};

using BlockSet = std::vector<ParameterBlock>;

std::size_t scalar_count(const BlockSet& blocks);

std::vector<std::uint8_t> encode_blocks(const BlockSet& blocks);
BlockSet decode_blocks(const std::vector<std::uint8_t>& bytes);

// phi_lora of a model: every "lora.*" block in canonical order.
BlockSet extract_lora(TinyTransformer& model);
BlockSet extract_group(TinyTransformer& model, ParamGroup group);
// Overwrites the model's LoRA tensors; names and shapes must match exactly.
void load_lora(TinyTransformer& model, const BlockSet& blocks);

std::vector<std::uint8_t> encode_checkpoint(TinyTransformer& model);
TinyTransformer decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(TinyTransformer& model, const std::filesystem::path& path);
TinyTransformer load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace coplms
