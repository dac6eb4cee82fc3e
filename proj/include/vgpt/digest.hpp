#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace vgpt {

using Sha256 = std::array<uint8_t, 32>;

Sha256 sha256(const void* data, size_t len);
Sha256 sha256(const std::vector<uint8_t>& bytes);
Sha256 sha256_file(const std::string& path);
std::string hex(const Sha256& d);

}  // namespace vgpt
