#include "vgpt/image_io.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace vgpt {

namespace {

uint8_t quantize01(float v) {
  if (!(v >= 0.0f)) v = 0.0f;
  if (v > 1.0f) v = 1.0f;
  int q = static_cast<int>(std::floor(v * 255.0f + 0.5f));
  if (q < 0) q = 0;
  if (q > 255) q = 255;
  return static_cast<uint8_t>(q);
}

}  // namespace

std::vector<uint8_t> encode_ppm(const Image& img) {
  if (img.h <= 0 || img.w <= 0 || img.rgb.size() != static_cast<size_t>(img.h) * img.w * 3)
    throw std::invalid_argument("vgpt: encode_ppm: inconsistent image");
  char header[64];
  int n = std::snprintf(header, sizeof(header), "P6\n%d %d\n255\n", img.w, img.h);
  std::vector<uint8_t> out(header, header + n);
  out.reserve(out.size() + img.rgb.size());
  for (float v : img.rgb) out.push_back(quantize01(v));
  return out;
}

Image decode_ppm(const std::vector<uint8_t>& bytes) {
  // Accept exactly the canonical header this writer produces.
  size_t pos = 0;
  auto expect = [&](const char* s) {
    size_t n = std::strlen(s);
    if (bytes.size() - pos < n || std::memcmp(bytes.data() + pos, s, n) != 0)
      throw std::runtime_error("vgpt: malformed PPM header");
    pos += n;
  };
  auto read_int = [&]() {
    if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9')
      throw std::runtime_error("vgpt: malformed PPM header");
    if (bytes[pos] == '0' && pos + 1 < bytes.size() && bytes[pos + 1] >= '0' && bytes[pos + 1] <= '9')
      throw std::runtime_error("vgpt: malformed PPM header");
    long v = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1 << 20) throw std::runtime_error("vgpt: PPM dimensions too large");
      ++pos;
    }
    return static_cast<int>(v);
  };
  expect("P6\n");
  int w = read_int();
  expect(" ");
  int h = read_int();
  expect("\n255\n");
  if (w <= 0 || h <= 0) throw std::runtime_error("vgpt: malformed PPM header");
  size_t need = static_cast<size_t>(w) * h * 3;
  if (bytes.size() - pos != need) throw std::runtime_error("vgpt: PPM payload length mismatch");
  Image img;
  img.h = h;
  img.w = w;
  img.rgb.resize(need);
  for (size_t i = 0; i < need; ++i) img.rgb[i] = static_cast<float>(bytes[pos + i]) / 255.0f;
  return img;
}

Image read_ppm(const std::string& path) { return decode_ppm(read_file_bytes(path)); }

void write_ppm(const std::string& path, const Image& img) {
  std::vector<uint8_t> bytes = encode_ppm(img);
  atomic_write_file(path, bytes.data(), bytes.size());
}

void atomic_write_file(const std::string& path, const void* data, size_t len) {
  namespace fs = std::filesystem;
  fs::path target(path);
  fs::path dir = target.parent_path();
  if (dir.empty()) dir = ".";
  fs::path tmp = dir / (target.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("vgpt: cannot open for writing: " + tmp.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
    if (!out) throw std::runtime_error("vgpt: short write: " + tmp.string());
  }
  fs::rename(tmp, target);
}

void atomic_write_file(const std::string& path, const std::string& text) {
  atomic_write_file(path, text.data(), text.size());
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("vgpt: cannot open file: " + path);
  std::streamsize size = in.tellg();
  in.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw std::runtime_error("vgpt: short read: " + path);
  return bytes;
}

}  // namespace vgpt
