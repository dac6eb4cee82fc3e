#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vgpt {

// RGB image with values in [0,1], row-major [h][w][3].
struct Image {
  int h = 0;
  int w = 0;
  std::vector<float> rgb;

  float& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  float at(int y, int x, int c) const { return rgb[(static_cast<size_t>(y) * w + x) * 3 + c]; }
};

// Strict binary PPM subset: header is exactly "P6\n{w} {h}\n255\n" followed by
// w*h*3 bytes. Write is the inverse with round-half-up quantization, so
// write(read(f)) is byte-identical for every file this reader accepts.
Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& img);

std::vector<uint8_t> encode_ppm(const Image& img);
Image decode_ppm(const std::vector<uint8_t>& bytes);

// write-temp-then-rename in the destination directory
void atomic_write_file(const std::string& path, const void* data, size_t len);
void atomic_write_file(const std::string& path, const std::string& text);
std::vector<uint8_t> read_file_bytes(const std::string& path);

}  // namespace vgpt
