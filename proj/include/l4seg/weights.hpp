#pragma once

// Minimal binary container for named tensors (".l4sw").
//
// Layout, all little-endian:
//   bytes 0..3    magic "L4SW"
//   bytes 4..7    u32 format version (= 1)
//   bytes 8..15   u64 header byte length
//   then          UTF-8 JSON header: { name: {dtype, shape, offset, nbytes} }
//   then          raw tensor payload; offsets are relative to payload start
//
// Writers sort names lexicographically and pack payload tightly in that order,
// so identical tensor sets produce identical files.

#include <map>
#include <string>
#include <vector>

#include "l4seg/tensor.hpp"

namespace l4s {

using NamedTensors = std::map<std::string, Tensor>;

void write_weights(const std::string& path, const NamedTensors& tensors);
// list form checks name uniqueness before writing
void write_weights(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<uint8_t> serialize_weights(const NamedTensors& tensors);

NamedTensors read_weights(const std::string& path);
NamedTensors parse_weights(const std::vector<uint8_t>& bytes);

}  // namespace l4s
