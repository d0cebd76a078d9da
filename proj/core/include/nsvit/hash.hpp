#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

namespace nsvit {

// Incremental SHA-256; digests are lowercase hex.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, size_t len);
  void update(std::span<const std::byte> bytes);
  void update(std::string_view text);
  std::string hex_digest();  // finalizes; object must not be reused afterwards

 private:
  void* ctx_;
  bool done_ = false;
};

std::string sha256_hex(std::string_view text);
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_file_hex(const std::filesystem::path& path);

}  // namespace nsvit
