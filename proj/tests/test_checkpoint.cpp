#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "common.hpp"
#include "nsvit/checkpoint.hpp"
#include "nsvit/errors.hpp"
#include "nsvit/hash.hpp"
#include "nsvit/vit.hpp"

namespace fs = std::filesystem;
using nsvit::Rng;
using nsvit::Tensor;
using nsvit::VitConfig;
using nsvit::VitModel;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("nsvit_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

VitConfig cfg() {
  VitConfig c;
  c.image_size = 8;
  c.channels = 3;
  c.patch_size = 4;
  c.depth = 2;
  c.embed_dim = 8;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.num_classes = 3;
  return c;
}

}  // namespace

TEST_CASE("wire primitives round-trip") {
  std::stringstream ss;
  nsvit::wire::write_u16(ss, 0xabcd);
  nsvit::wire::write_u32(ss, 0xdeadbeef);
  nsvit::wire::write_u64(ss, 0x0123456789abcdefull);
  nsvit::wire::write_f32(ss, -0.0f);
  nsvit::wire::write_f32(ss, 1e-6f);
  CHECK(nsvit::wire::read_u16(ss) == 0xabcd);
  CHECK(nsvit::wire::read_u32(ss) == 0xdeadbeef);
  CHECK(nsvit::wire::read_u64(ss) == 0x0123456789abcdefull);
  const float neg_zero = nsvit::wire::read_f32(ss);
  CHECK(std::signbit(neg_zero));
  CHECK(neg_zero == 0.0f);
  CHECK(nsvit::wire::read_f32(ss) == 1e-6f);
}

TEST_CASE("tensor records round-trip bitwise") {
  Rng rng(1);
  Tensor t = testutil::random_tensor({3, 4}, rng);
  std::stringstream ss;
  nsvit::write_tensor_record(ss, "some.tensor", t);
  nsvit::NamedTensor back = nsvit::read_tensor_record(ss);
  CHECK(back.name == "some.tensor");
  CHECK(back.tensor.shape() == t.shape());
  CHECK(testutil::max_abs_diff(back.tensor.data(), t.data()) == 0.0);
}

TEST_CASE("checkpoint save/load round-trips config and parameters bitwise") {
  TempDir tmp;
  const fs::path file = tmp.path / "model.nsvt";
  Rng rng(7);
  VitModel m = VitModel::random_init(cfg(), rng);
  nsvit::save_checkpoint(file, m.config(), m.params());

  nsvit::Checkpoint back = nsvit::load_checkpoint(file);
  CHECK(back.config == m.config());
  auto a = m.params().named();
  auto b = back.params.named();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.shape() == b[i].second.shape());
    CHECK(testutil::max_abs_diff(a[i].second.data(), b[i].second.data()) == 0.0);
  }

  // Same params written twice produce byte-identical files.
  const fs::path file2 = tmp.path / "model2.nsvt";
  nsvit::save_checkpoint(file2, m.config(), m.params());
  CHECK(nsvit::sha256_file_hex(file) == nsvit::sha256_file_hex(file2));

  // Loaded model predicts identically.
  VitModel m2(back.config, std::move(back.params));
  Tensor img = testutil::random_tensor({3, 8, 8}, rng, 0.0, 1.0);
  Tensor l1 = m.forward(img);
  Tensor l2 = m2.forward(img);
  CHECK(testutil::max_abs_diff(l1.data(), l2.data()) == 0.0);
}

TEST_CASE("loader rejects bad magic, bad version, truncation, missing tensors") {
  TempDir tmp;
  const fs::path file = tmp.path / "model.nsvt";
  Rng rng(9);
  VitModel m = VitModel::random_init(cfg(), rng);
  nsvit::save_checkpoint(file, m.config(), m.params());

  auto read_bytes = [&](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  auto write_bytes = [&](const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };
  const std::string good = read_bytes(file);

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  write_bytes(tmp.path / "bad_magic.nsvt", bad_magic);
  CHECK_THROWS_AS(nsvit::load_checkpoint(tmp.path / "bad_magic.nsvt"), nsvit::IoError);

  std::string bad_version = good;
  bad_version[4] = 99;
  write_bytes(tmp.path / "bad_version.nsvt", bad_version);
  CHECK_THROWS_AS(nsvit::load_checkpoint(tmp.path / "bad_version.nsvt"), nsvit::IoError);

  write_bytes(tmp.path / "trunc.nsvt", good.substr(0, good.size() / 2));
  CHECK_THROWS_AS(nsvit::load_checkpoint(tmp.path / "trunc.nsvt"), nsvit::IoError);

  CHECK_THROWS_AS(nsvit::load_checkpoint(tmp.path / "absent.nsvt"), nsvit::IoError);

  // A syntactically valid file missing one named tensor.
  {
    std::ofstream os(tmp.path / "missing.nsvt", std::ios::binary);
    os.write("NSVT", 4);
    nsvit::wire::write_u32(os, nsvit::kCheckpointVersion);
    const VitConfig c = cfg();
    nsvit::wire::write_u32(os, static_cast<uint32_t>(c.image_size));
    nsvit::wire::write_u32(os, static_cast<uint32_t>(c.channels));
    nsvit::wire::write_u32(os, static_cast<uint32_t>(c.patch_size));
    nsvit::wire::write_u32(os, static_cast<uint32_t>(c.depth));
    nsvit::wire::write_u32(os, static_cast<uint32_t>(c.embed_dim));
    nsvit::wire::write_u32(os, static_cast<uint32_t>(c.heads));
    nsvit::wire::write_u32(os, static_cast<uint32_t>(c.mlp_ratio));
    nsvit::wire::write_u32(os, static_cast<uint32_t>(c.num_classes));
    nsvit::wire::write_u32(os, std::bit_cast<uint32_t>(c.layernorm_eps));
    nsvit::wire::write_u32(os, 1);
    nsvit::write_tensor_record(os, "patch.w", m.params().patch_w);
  }
  try {
    nsvit::load_checkpoint(tmp.path / "missing.nsvt");
    FAIL("expected IoError");
  } catch (const nsvit::IoError& e) {
    CHECK(std::string(e.what()).find("missing tensor") != std::string::npos);
  }
}
