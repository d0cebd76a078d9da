#include "nsvit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "nsvit/errors.hpp"

namespace nsvit {

namespace wire {

namespace {

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
  NSVIT_IO_REQUIRE(os.good(), "write failed");
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  NSVIT_IO_REQUIRE(is.gcount() == static_cast<std::streamsize>(sizeof(T)),
                   "unexpected end of file at byte offset ",
                   static_cast<int64_t>(is.tellg()));
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u16(std::ostream& os, uint16_t v) { write_le<uint16_t>(os, v); }
void write_u32(std::ostream& os, uint32_t v) { write_le<uint32_t>(os, v); }
void write_u64(std::ostream& os, uint64_t v) { write_le<uint64_t>(os, v); }
void write_f32(std::ostream& os, float v) { write_le<uint32_t>(os, std::bit_cast<uint32_t>(v)); }
uint16_t read_u16(std::istream& is) { return read_le<uint16_t>(is); }
uint32_t read_u32(std::istream& is) { return read_le<uint32_t>(is); }
uint64_t read_u64(std::istream& is) { return read_le<uint64_t>(is); }
float read_f32(std::istream& is) { return std::bit_cast<float>(read_le<uint32_t>(is)); }

}  // namespace wire

void write_tensor_record(std::ostream& os, const std::string& name, const Tensor& t) {
  NSVIT_REQUIRE(t.defined(), "tensor record \"", name, "\": undefined tensor");
  NSVIT_REQUIRE(name.size() <= UINT16_MAX, "tensor record name too long: ", name.size());
  wire::write_u16(os, static_cast<uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  const auto rank = static_cast<uint8_t>(t.rank());
  os.put(static_cast<char>(rank));
  for (int d : t.shape()) wire::write_u64(os, static_cast<uint64_t>(d));
  static_assert(std::endian::native == std::endian::little,
                "f32 payload fast path assumes a little-endian host");
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.data().size() * sizeof(float)));
  NSVIT_IO_REQUIRE(os.good(), "write failed for tensor record \"", name, "\"");
}

NamedTensor read_tensor_record(std::istream& is) {
  const uint16_t name_len = wire::read_u16(is);
  std::string name(name_len, '\0');
  is.read(name.data(), name_len);
  NSVIT_IO_REQUIRE(is.gcount() == static_cast<std::streamsize>(name_len),
                   "unexpected end of file while reading tensor name");
  const int rank = is.get();
  NSVIT_IO_REQUIRE(rank != std::istream::traits_type::eof(),
                   "unexpected end of file while reading rank of \"", name, "\"");
  std::vector<int> shape;
  shape.reserve(static_cast<size_t>(rank));
  uint64_t numel = 1;
  for (int i = 0; i < rank; ++i) {
    const uint64_t d = wire::read_u64(is);
    NSVIT_IO_REQUIRE(d > 0 && d <= (1ull << 31), "tensor \"", name,
                     "\": implausible dimension ", d);
    numel *= d;
    NSVIT_IO_REQUIRE(numel <= (1ull << 32), "tensor \"", name, "\": too many elements");
    shape.push_back(static_cast<int>(d));
  }
  std::vector<float> data(numel);
  static_assert(std::endian::native == std::endian::little,
                "f32 payload fast path assumes a little-endian host");
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(numel * sizeof(float)));
  NSVIT_IO_REQUIRE(is.gcount() == static_cast<std::streamsize>(numel * sizeof(float)),
                   "unexpected end of file in payload of \"", name, "\"");
  return NamedTensor{std::move(name), Tensor::from_data(std::move(shape), std::move(data))};
}

namespace {

constexpr char kMagic[4] = {'N', 'S', 'V', 'T'};

void write_config(std::ostream& os, const VitConfig& c) {
  wire::write_u32(os, static_cast<uint32_t>(c.image_size));
  wire::write_u32(os, static_cast<uint32_t>(c.channels));
  wire::write_u32(os, static_cast<uint32_t>(c.patch_size));
  wire::write_u32(os, static_cast<uint32_t>(c.depth));
  wire::write_u32(os, static_cast<uint32_t>(c.embed_dim));
  wire::write_u32(os, static_cast<uint32_t>(c.heads));
  wire::write_u32(os, static_cast<uint32_t>(c.mlp_ratio));
  wire::write_u32(os, static_cast<uint32_t>(c.num_classes));
  // layernorm_eps travels as the raw bit pattern of its f32 value.
  wire::write_u32(os, std::bit_cast<uint32_t>(c.layernorm_eps));
}

VitConfig read_config(std::istream& is) {
  VitConfig c;
  c.image_size = static_cast<int>(wire::read_u32(is));
  c.channels = static_cast<int>(wire::read_u32(is));
  c.patch_size = static_cast<int>(wire::read_u32(is));
  c.depth = static_cast<int>(wire::read_u32(is));
  c.embed_dim = static_cast<int>(wire::read_u32(is));
  c.heads = static_cast<int>(wire::read_u32(is));
  c.mlp_ratio = static_cast<int>(wire::read_u32(is));
  c.num_classes = static_cast<int>(wire::read_u32(is));
  c.layernorm_eps = std::bit_cast<float>(wire::read_u32(is));
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const VitConfig& cfg,
                     const VitParams& params) {
  params.validate(cfg);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  NSVIT_IO_REQUIRE(os.good(), "cannot open checkpoint for writing: ", path.string());
  os.write(kMagic, 4);
  wire::write_u32(os, kCheckpointVersion);
  write_config(os, cfg);
  const auto named = params.named();
  wire::write_u32(os, static_cast<uint32_t>(named.size()));
  for (const auto& [name, t] : named) write_tensor_record(os, name, t);
  os.flush();
  NSVIT_IO_REQUIRE(os.good(), "write failed for checkpoint: ", path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  NSVIT_IO_REQUIRE(is.good(), "cannot open checkpoint: ", path.string());
  char magic[4] = {};
  is.read(magic, 4);
  NSVIT_IO_REQUIRE(is.gcount() == 4 && std::memcmp(magic, kMagic, 4) == 0,
                   "bad checkpoint magic in ", path.string());
  const uint32_t version = wire::read_u32(is);
  NSVIT_IO_REQUIRE(version == kCheckpointVersion, "unsupported checkpoint version ",
                   version, " in ", path.string(), " (expected ", kCheckpointVersion, ")");
  const VitConfig cfg = read_config(is);
  try {
    cfg.validate();
  } catch (const ContractError& e) {
    throw IoError(detail::concat("invalid config block in ", path.string(), ": ",
                                 e.what()));
  }
  const uint32_t count = wire::read_u32(is);
  std::map<std::string, Tensor> by_name;
  for (uint32_t i = 0; i < count; ++i) {
    NamedTensor rec = read_tensor_record(is);
    NSVIT_IO_REQUIRE(by_name.emplace(rec.name, rec.tensor).second,
                     "duplicate tensor \"", rec.name, "\" in ", path.string());
  }

  VitParams params;
  params.layers.resize(static_cast<size_t>(cfg.depth));
  auto take = [&](const std::string& name) {
    auto it = by_name.find(name);
    NSVIT_IO_REQUIRE(it != by_name.end(), "checkpoint ", path.string(),
                     " is missing tensor \"", name, "\"");
    Tensor t = it->second;
    by_name.erase(it);
    return t;
  };
  params.patch_w = take("patch.w");
  params.patch_b = take("patch.b");
  params.pos_embed = take("pos_embed");
  params.cls_token = take("cls_token");
  for (int l = 0; l < cfg.depth; ++l) {
    auto& lp = params.layers[static_cast<size_t>(l)];
    const std::string base = detail::concat("layer", l, ".");
    lp.ln1_gamma = take(base + "ln1.gamma");
    lp.ln1_beta = take(base + "ln1.beta");
    lp.qkv_w = take(base + "qkv.w");
    lp.qkv_b = take(base + "qkv.b");
    lp.proj_w = take(base + "proj.w");
    lp.proj_b = take(base + "proj.b");
    lp.ln2_gamma = take(base + "ln2.gamma");
    lp.ln2_beta = take(base + "ln2.beta");
    lp.fc1_w = take(base + "fc1.w");
    lp.fc1_b = take(base + "fc1.b");
    lp.fc2_w = take(base + "fc2.w");
    lp.fc2_b = take(base + "fc2.b");
  }
  params.lnf_gamma = take("lnf.gamma");
  params.lnf_beta = take("lnf.beta");
  params.head_w = take("head.w");
  params.head_b = take("head.b");
  NSVIT_IO_REQUIRE(by_name.empty(), "checkpoint ", path.string(), " has ",
                   by_name.size(), " unexpected tensors (first: \"",
                   by_name.empty() ? "" : by_name.begin()->first, "\")");
  try {
    params.validate(cfg);
  } catch (const ContractError& e) {
    throw IoError(detail::concat("invalid tensor shapes in ", path.string(), ": ",
                                 e.what()));
  }
  return Checkpoint{cfg, std::move(params)};
}

}  // namespace nsvit
