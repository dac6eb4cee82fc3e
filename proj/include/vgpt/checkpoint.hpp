#pragma once

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "vgpt/tensor.hpp"

namespace vgpt {

using ordered_json = nlohmann::ordered_json;

inline constexpr char kCkptMagic[4] = {'V', 'G', 'P', 'T'};
inline constexpr uint32_t kCkptVersion = 1;

struct CkptEntry {
  std::string group;
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct CkptFile {
  nlohmann::ordered_json meta;  // free-form, written into the header
  std::vector<CkptEntry> entries;
};

// Layout: magic "VGPT" | u32 LE version | u64 LE header length | header JSON |
// payload of little-endian f32 | 32-byte SHA-256 of the payload.
// Header JSON: {"version":…, "meta":{…}, "groups":[{"group","name","shape","offset"},…]}
// with offsets in bytes from the start of the payload, ascending and packed.
void save_checkpoint(const std::string& path, const CkptFile& file);
CkptFile load_checkpoint(const std::string& path);

}  // namespace vgpt
