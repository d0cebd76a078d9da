#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "nsvit/tensor.hpp"
#include "nsvit/vit.hpp"

namespace nsvit {

inline constexpr uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Little-endian primitive framing shared by checkpoints and tensor blobs.
namespace wire {
void write_u16(std::ostream& os, uint16_t v);
void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
void write_f32(std::ostream& os, float v);
uint16_t read_u16(std::istream& is);
uint32_t read_u32(std::istream& is);
uint64_t read_u64(std::istream& is);
float read_f32(std::istream& is);
}  // namespace wire

// One tensor record: name length u16 + UTF-8 name, rank u8, dims u64 each,
// then the raw f32 row-major payload.
void write_tensor_record(std::ostream& os, const std::string& name, const Tensor& t);
NamedTensor read_tensor_record(std::istream& is);

void save_checkpoint(const std::filesystem::path& path, const VitConfig& cfg,
                     const VitParams& params);

struct Checkpoint {
  VitConfig config;
  VitParams params;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace nsvit
