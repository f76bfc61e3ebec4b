#include "l4seg/weights.hpp"

#include <bit>
#include <cstring>

#include <json.hpp>

namespace l4s {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'L', '4', 'S', 'W'};
constexpr uint32_t kVersion = 1;
constexpr size_t kPreambleLen = 16;

using json = nlohmann::json;

void append_bytes(std::vector<uint8_t>& out, const void* p, size_t n) {
  const auto* b = static_cast<const uint8_t*>(p);
  out.insert(out.end(), b, b + n);
}

}  // namespace

std::vector<uint8_t> serialize_weights(const NamedTensors& tensors) {
  // std::map iterates in lexicographic name order already
  json header = json::object();
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (!t.defined()) fail(Err::usage, "write_weights: undefined tensor '" + name + "'");
    uint64_t nbytes = static_cast<uint64_t>(t.numel()) * dtype_size(t.dtype());
    json entry;
    entry["dtype"] = dtype_name(t.dtype());
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    entry["nbytes"] = nbytes;
    header[name] = entry;
    offset += nbytes;
  }
  std::string hs = header.dump();
  std::vector<uint8_t> out;
  out.reserve(kPreambleLen + hs.size() + offset);
  append_bytes(out, kMagic, 4);
  uint32_t ver = kVersion;
  append_bytes(out, &ver, 4);
  uint64_t hlen = hs.size();
  append_bytes(out, &hlen, 8);
  append_bytes(out, hs.data(), hs.size());
  for (const auto& [name, t] : tensors) {
    if (t.dtype() == Dtype::F32)
      append_bytes(out, t.data<float>(), static_cast<size_t>(t.numel()) * 4);
    else
      append_bytes(out, t.data<double>(), static_cast<size_t>(t.numel()) * 8);
  }
  return out;
}

void write_weights(const std::string& path, const NamedTensors& tensors) {
  std::vector<uint8_t> bytes = serialize_weights(tensors);
  write_file_bytes(path, bytes.data(), bytes.size());
}

void write_weights(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& tensors) {
  NamedTensors map;
  for (const auto& [name, t] : tensors)
    if (!map.emplace(name, t).second) fail(Err::duplicate_name, "duplicate tensor name '" + name + "'");
  write_weights(path, map);
}

NamedTensors parse_weights(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < kPreambleLen) fail(Err::truncated, "container shorter than the 16-byte preamble");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    fail(Err::bad_magic, "bad magic: expected \"L4SW\"");
  uint32_t ver;
  std::memcpy(&ver, bytes.data() + 4, 4);
  if (ver != kVersion)
    fail(Err::bad_version, "unsupported container version " + std::to_string(ver) + " (expected 1)");
  uint64_t hlen;
  std::memcpy(&hlen, bytes.data() + 8, 8);
  if (kPreambleLen + hlen > bytes.size()) fail(Err::truncated, "header extends past end of file");

  json header;
  try {
    header = json::parse(bytes.begin() + kPreambleLen, bytes.begin() + static_cast<int64_t>(kPreambleLen + hlen));
  } catch (const json::exception& e) {
    fail(Err::bad_header, std::string("header is not valid JSON: ") + e.what());
  }
  if (!header.is_object()) fail(Err::bad_header, "header must be a JSON object");

  size_t payload_size = bytes.size() - kPreambleLen - hlen;
  const uint8_t* payload = bytes.data() + kPreambleLen + hlen;

  NamedTensors out;
  uint64_t prev_end = 0;
  // json objects iterate in key order, matching the writer's payload order
  for (auto it = header.begin(); it != header.end(); ++it) {
    const std::string& name = it.key();
    const json& e = it.value();
    if (!e.is_object() || !e.contains("dtype") || !e.contains("shape") || !e.contains("offset") ||
        !e.contains("nbytes"))
      fail(Err::bad_header, "entry '" + name + "' missing required fields");
    std::string dts;
    Shape shape;
    uint64_t offset, nbytes;
    try {
      dts = e.at("dtype").get<std::string>();
      shape = e.at("shape").get<Shape>();
      offset = e.at("offset").get<uint64_t>();
      nbytes = e.at("nbytes").get<uint64_t>();
    } catch (const json::exception& ex) {
      fail(Err::bad_header, "entry '" + name + "' has malformed fields: " + ex.what());
    }
    Dtype dt;
    if (dts == "f32")
      dt = Dtype::F32;
    else if (dts == "f64")
      dt = Dtype::F64;
    else
      fail(Err::bad_header, "entry '" + name + "' has unknown dtype '" + dts + "'");
    for (int64_t d : shape)
      if (d < 0) fail(Err::bad_header, "entry '" + name + "' has negative extent");
    uint64_t want = static_cast<uint64_t>(shape_numel(shape)) * dtype_size(dt);
    if (want != nbytes)
      fail(Err::size_mismatch, "entry '" + name + "': nbytes " + std::to_string(nbytes) +
                                   " != shape*dtype " + std::to_string(want));
    if (offset < prev_end)
      fail(Err::bad_offsets, "entry '" + name + "': offset " + std::to_string(offset) +
                                 " overlaps previous tensor ending at " + std::to_string(prev_end));
    if (offset + nbytes > payload_size)
      fail(Err::truncated, "entry '" + name + "': payload truncated (needs " +
                               std::to_string(offset + nbytes) + " bytes, file has " +
                               std::to_string(payload_size) + ")");
    prev_end = offset + nbytes;

    Tensor t = Tensor::zeros(shape, dt);
    if (dt == Dtype::F32)
      std::memcpy(t.data_mut<float>(), payload + offset, nbytes);
    else
      std::memcpy(t.data_mut<double>(), payload + offset, nbytes);
    out.emplace(name, std::move(t));
  }
  return out;
}

NamedTensors read_weights(const std::string& path) { return parse_weights(read_file_bytes(path)); }

}  // namespace l4s
