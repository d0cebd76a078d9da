#include "nsvit/hash.hpp"

#include <openssl/evp.h>

#include <array>
#include <fstream>

#include "nsvit/errors.hpp"

namespace nsvit {

Sha256::Sha256() {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  NSVIT_REQUIRE(ctx != nullptr, "sha256: context allocation failed");
  NSVIT_REQUIRE(EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) == 1,
                "sha256: digest init failed");
  ctx_ = ctx;
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void Sha256::update(const void* data, size_t len) {
  NSVIT_REQUIRE(!done_, "sha256: update after finalize");
  NSVIT_REQUIRE(EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data, len) == 1,
                "sha256: digest update failed");
}

void Sha256::update(std::span<const std::byte> bytes) {
  update(bytes.data(), bytes.size());
}

void Sha256::update(std::string_view text) { update(text.data(), text.size()); }

std::string Sha256::hex_digest() {
  NSVIT_REQUIRE(!done_, "sha256: finalize called twice");
  done_ = true;
  std::array<unsigned char, EVP_MAX_MD_SIZE> raw{};
  unsigned int raw_len = 0;
  NSVIT_REQUIRE(
      EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), raw.data(), &raw_len) == 1,
      "sha256: digest finalize failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex(raw_len * 2, '0');
  for (unsigned int i = 0; i < raw_len; ++i) {
    hex[i * 2] = kHex[raw[i] >> 4];
    hex[i * 2 + 1] = kHex[raw[i] & 0xf];
  }
  return hex;
}

std::string sha256_hex(std::string_view text) {
  Sha256 h;
  h.update(text);
  return h.hex_digest();
}

std::string sha256_hex(std::span<const std::byte> bytes) {
  Sha256 h;
  h.update(bytes);
  return h.hex_digest();
}

std::string sha256_file_hex(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  NSVIT_IO_REQUIRE(in.good(), "cannot open file for hashing: ", path.string());
  Sha256 h;
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    const auto got = in.gcount();
    if (got > 0) h.update(buf.data(), static_cast<size_t>(got));
  }
  NSVIT_IO_REQUIRE(in.eof(), "read error while hashing: ", path.string());
  return h.hex_digest();
}

}  // namespace nsvit
