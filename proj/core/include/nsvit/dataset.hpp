#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nsvit/tensor.hpp"

namespace nsvit {

enum class Split : uint8_t { kTrain = 0, kVal = 1, kTest = 2 };
std::string_view split_name(Split s);
Split split_from_name(std::string_view name);

// Images are {C, H, W} float tensors with values in [0, 1].
struct Dataset {
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::vector<Split> splits;  // same length as images
  std::vector<std::string> class_names;
  int num_classes = 0;

  size_t size() const { return images.size(); }
  void validate() const;
  std::vector<size_t> split_indices(Split s) const;
  Dataset subset(Split s) const;
  std::vector<int64_t> class_counts() const;
};

// Procedural-shapes corpus: classes cycle through oriented bars, rings,
// checkers, and gradients, with a per-class parameter bucket and per-sample
// seeded jitter. Pixels are quantized to the 8-bit grid, so a dataset-file
// round trip is lossless.
struct SyntheticSpec {
  int num_classes = 10;
  int count = 2000;
  int channels = 3;
  int image_size = 32;
  uint64_t seed = 7;

  void validate() const;
};

Dataset synthetic_shapes(const SyntheticSpec& spec);

// Binary dataset file: magic "NSDS", u32 count, u32 C, u32 H, u32 W, u32 K
// (little-endian), then per record a u8 label and C*H*W u8 pixels. Pixels
// quantize as round(v * 255) on save and scale as q / 255 on load.
void save_nsds(const std::filesystem::path& path, const Dataset& ds);
Dataset load_nsds(const std::filesystem::path& path);

// Directory-per-class loader: each subdirectory is one class (sorted by
// name); binary PPM (P6) and PGM (P5) images are decoded, converted to the
// requested channel count, and bilinearly resized to size x size.
Dataset load_image_directory(const std::filesystem::path& root, int channels, int size);

// Dispatcher: "synthetic:k=10,n=2000,size=32,channels=3,seed=7" builds the
// generator spec (all keys optional); a directory path loads per-class
// images; any other path loads a binary dataset file.
Dataset load_dataset(const std::string& path_or_spec, int channels, int size);

// Deterministically assigns split tags over a seeded shuffle: the first
// round(test_fraction*n) samples become test, the next round(val_fraction*n)
// val, the rest train.
void assign_splits(Dataset& ds, double val_fraction, double test_fraction,
                   uint64_t seed);

}  // namespace nsvit
