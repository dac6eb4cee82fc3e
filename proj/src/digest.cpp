#include "vgpt/digest.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <memory>
#include <stdexcept>

namespace vgpt {

namespace {

struct CtxDeleter {
  void operator()(EVP_MD_CTX* c) const { EVP_MD_CTX_free(c); }
};

}  // namespace

Sha256 sha256(const void* data, size_t len) {
  std::unique_ptr<EVP_MD_CTX, CtxDeleter> ctx(EVP_MD_CTX_new());
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("vgpt: sha256 init failed");
  if (len > 0 && EVP_DigestUpdate(ctx.get(), data, len) != 1)
    throw std::runtime_error("vgpt: sha256 update failed");
  Sha256 out{};
  unsigned int out_len = 0;
  if (EVP_DigestFinal_ex(ctx.get(), out.data(), &out_len) != 1 || out_len != out.size())
    throw std::runtime_error("vgpt: sha256 final failed");
  return out;
}

Sha256 sha256(const std::vector<uint8_t>& bytes) { return sha256(bytes.data(), bytes.size()); }

Sha256 sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("vgpt: cannot open file for hashing: " + path);
  std::unique_ptr<EVP_MD_CTX, CtxDeleter> ctx(EVP_MD_CTX_new());
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("vgpt: sha256 init failed");
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    std::streamsize got = in.gcount();
    if (got > 0 && EVP_DigestUpdate(ctx.get(), buf, static_cast<size_t>(got)) != 1)
      throw std::runtime_error("vgpt: sha256 update failed");
  }
  Sha256 out{};
  unsigned int out_len = 0;
  if (EVP_DigestFinal_ex(ctx.get(), out.data(), &out_len) != 1 || out_len != out.size())
    throw std::runtime_error("vgpt: sha256 final failed");
  return out;
}

std::string hex(const Sha256& d) {
  static const char* k = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (uint8_t b : d) {
    s.push_back(k[b >> 4]);
    s.push_back(k[b & 0xF]);
  }
  return s;
}

}  // namespace vgpt
