#include "vgpt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

#include "vgpt/digest.hpp"
#include "vgpt/image_io.hpp"

namespace vgpt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint32_t get_u32(const uint8_t* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
  return v;
}

uint64_t get_u64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const CkptFile& file) {
  nlohmann::ordered_json header;
  header["version"] = kCkptVersion;
  header["meta"] = file.meta.is_null() ? nlohmann::ordered_json::object() : file.meta;
  nlohmann::ordered_json groups = nlohmann::ordered_json::array();
  uint64_t offset = 0;
  uint64_t payload_floats = 0;
  for (const CkptEntry& e : file.entries) {
    int64_t n = shape_numel(e.shape);
    if (static_cast<int64_t>(e.data.size()) != n)
      throw std::invalid_argument("vgpt: checkpoint entry data/shape mismatch: " + e.group + "/" + e.name);
    nlohmann::ordered_json g;
    g["group"] = e.group;
    g["name"] = e.name;
    g["shape"] = e.shape;
    g["offset"] = offset;
    groups.push_back(std::move(g));
    offset += static_cast<uint64_t>(n) * 4;
    payload_floats += static_cast<uint64_t>(n);
  }
  header["groups"] = std::move(groups);
  std::string header_str = header.dump();

  std::vector<uint8_t> out;
  out.reserve(16 + header_str.size() + payload_floats * 4 + 32);
  out.insert(out.end(), kCkptMagic, kCkptMagic + 4);
  put_u32(out, kCkptVersion);
  put_u64(out, header_str.size());
  out.insert(out.end(), header_str.begin(), header_str.end());
  size_t payload_start = out.size();
  for (const CkptEntry& e : file.entries) {
    size_t pos = out.size();
    out.resize(pos + e.data.size() * 4);
    std::memcpy(out.data() + pos, e.data.data(), e.data.size() * 4);
  }
  Sha256 digest = sha256(out.data() + payload_start, out.size() - payload_start);
  out.insert(out.end(), digest.begin(), digest.end());
  atomic_write_file(path, out.data(), out.size());
}

CkptFile load_checkpoint(const std::string& path) {
  std::vector<uint8_t> bytes = read_file_bytes(path);
  if (bytes.size() < 16 + 32) throw std::runtime_error("vgpt: truncated checkpoint: " + path);
  if (std::memcmp(bytes.data(), kCkptMagic, 4) != 0)
    throw std::runtime_error("vgpt: bad checkpoint magic: " + path);
  uint32_t version = get_u32(bytes.data() + 4);
  if (version != kCkptVersion)
    throw std::runtime_error("vgpt: unsupported checkpoint version " + std::to_string(version));
  uint64_t header_len = get_u64(bytes.data() + 8);
  if (16 + header_len + 32 > bytes.size()) throw std::runtime_error("vgpt: truncated checkpoint: " + path);
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<ptrdiff_t>(header_len));
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("vgpt: bad checkpoint header: ") + e.what());
  }
  size_t payload_start = 16 + static_cast<size_t>(header_len);
  size_t payload_len = bytes.size() - payload_start - 32;
  Sha256 stored;
  std::memcpy(stored.data(), bytes.data() + bytes.size() - 32, 32);
  Sha256 actual = sha256(bytes.data() + payload_start, payload_len);
  if (stored != actual) throw std::runtime_error("vgpt: checkpoint payload hash mismatch: " + path);

  CkptFile file;
  file.meta = header.value("meta", nlohmann::ordered_json::object());
  uint64_t expect_offset = 0;
  for (const auto& g : header.at("groups")) {
    CkptEntry e;
    e.group = g.at("group").get<std::string>();
    e.name = g.at("name").get<std::string>();
    e.shape = g.at("shape").get<Shape>();
    uint64_t offset = g.at("offset").get<uint64_t>();
    if (offset != expect_offset)
      throw std::runtime_error("vgpt: checkpoint offsets not packed/ascending: " + path);
    uint64_t n = static_cast<uint64_t>(shape_numel(e.shape));
    if (offset + n * 4 > payload_len) throw std::runtime_error("vgpt: checkpoint payload overrun: " + path);
    e.data.resize(n);
    std::memcpy(e.data.data(), bytes.data() + payload_start + offset, n * 4);
    expect_offset = offset + n * 4;
    file.entries.push_back(std::move(e));
  }
  if (expect_offset != payload_len)
    throw std::runtime_error("vgpt: checkpoint payload length mismatch: " + path);
  return file;
}

}  // namespace vgpt
