#include "nsvit/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "nsvit/errors.hpp"
#include "nsvit/rng.hpp"

namespace nsvit {

namespace fs = std::filesystem;

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  throw ContractError("unknown split");
}

Split split_from_name(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw ContractError(detail::concat("unknown split name: ", name));
}

void Dataset::validate() const {
  NSVIT_REQUIRE(labels.size() == images.size(), "images/labels size mismatch: ",
                images.size(), " vs ", labels.size());
  NSVIT_REQUIRE(splits.size() == images.size(), "images/splits size mismatch: ",
                images.size(), " vs ", splits.size());
  NSVIT_REQUIRE(num_classes > 0, "num_classes must be positive");
  NSVIT_REQUIRE(class_names.empty() ||
                    class_names.size() == static_cast<size_t>(num_classes),
                "class_names must be empty or have one entry per class");
  for (size_t i = 0; i < images.size(); ++i) {
    NSVIT_REQUIRE(labels[i] >= 0 && labels[i] < num_classes, "label ", labels[i],
                  " out of range at sample ", i);
    NSVIT_REQUIRE(images[i].shape().size() == 3, "image ", i, " is not rank-3");
    NSVIT_REQUIRE(images[i].shape() == images[0].shape(),
                  "inconsistent image shapes at sample ", i);
    for (float v : images[i].data())
      NSVIT_REQUIRE(v >= 0.0f && v <= 1.0f, "pixel out of [0,1] at sample ", i);
  }
}

std::vector<size_t> Dataset::split_indices(Split s) const {
  std::vector<size_t> idx;
  for (size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == s) idx.push_back(i);
  return idx;
}

Dataset Dataset::subset(Split s) const {
  Dataset out;
  out.num_classes = num_classes;
  out.class_names = class_names;
  for (size_t i : split_indices(s)) {
    out.images.push_back(images[i]);
    out.labels.push_back(labels[i]);
    out.splits.push_back(s);
  }
  return out;
}

std::vector<int64_t> Dataset::class_counts() const {
  std::vector<int64_t> counts(static_cast<size_t>(std::max(num_classes, 0)), 0);
  for (int l : labels) {
    NSVIT_REQUIRE(l >= 0 && l < num_classes, "label ", l, " out of range");
    ++counts[static_cast<size_t>(l)];
  }
  return counts;
}

void SyntheticSpec::validate() const {
  NSVIT_REQUIRE(num_classes >= 1, "num_classes must be >= 1, got ", num_classes);
  NSVIT_REQUIRE(count >= 1, "count must be >= 1, got ", count);
  NSVIT_REQUIRE(channels == 1 || channels == 3, "channels must be 1 or 3, got ",
                channels);
  NSVIT_REQUIRE(image_size >= 4, "image_size must be >= 4, got ", image_size);
}

namespace {

constexpr const char* kFamilyNames[4] = {"bars", "rings", "checkers", "gradients"};

// Pattern intensity in [0,1] for class (family, bucket) at pixel (x, y).
// The per-sample rng supplies small jitters; draw order is fixed.
struct PatternParams {
  int family = 0;
  double theta = 0.0, freq = 0.0, phase = 0.0;
  double cx = 0.0, cy = 0.0;
  int cell = 3;
  double ox = 0.0, oy = 0.0, hi = 0.85, lo = 0.15;
  double span = 1.0;
};

PatternParams draw_params(int family, int bucket, int size, Rng& rng) {
  constexpr double pi = std::numbers::pi;
  PatternParams p;
  p.family = family;
  switch (family) {
    case 0:  // oriented bars: class signal is the stripe orientation
      p.theta = bucket * pi / 3.0 + rng.uniform(-0.05, 0.05);
      p.freq = 0.25 * (1.0 + rng.uniform(-0.04, 0.04));
      p.phase = rng.uniform(-0.25, 0.25);
      break;
    case 1:  // rings: class signal is the radial frequency
      p.freq = (0.10 + 0.05 * bucket) * (1.0 + rng.uniform(-0.04, 0.04));
      p.cx = 0.5 * (size - 1) + rng.uniform(-0.75, 0.75);
      p.cy = 0.5 * (size - 1) + rng.uniform(-0.75, 0.75);
      p.phase = rng.uniform(-0.25, 0.25);
      break;
    case 2:  // checkers: class signal is the cell size
      p.cell = 3 + 3 * bucket;
      p.ox = rng.uniform(-1.0, 1.0);
      p.oy = rng.uniform(-1.0, 1.0);
      p.hi = 0.85 + rng.uniform(-0.05, 0.05);
      p.lo = 0.15 + rng.uniform(-0.05, 0.05);
      break;
    default:  // gradients: class signal is the ramp direction
      p.theta = bucket * pi / 2.0 + rng.uniform(-0.08, 0.08);
      p.span = size - 1.0;
      break;
  }
  return p;
}

double pattern_value(const PatternParams& p, int x, int y) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  switch (p.family) {
    case 0: {
      const double u = x * std::cos(p.theta) + y * std::sin(p.theta);
      return 0.5 + 0.45 * std::sin(two_pi * p.freq * u + p.phase);
    }
    case 1: {
      const double r = std::hypot(x - p.cx, y - p.cy);
      return 0.5 + 0.45 * std::sin(two_pi * p.freq * r + p.phase);
    }
    case 2: {
      const auto fx = static_cast<int64_t>(std::floor((x + p.ox) / p.cell));
      const auto fy = static_cast<int64_t>(std::floor((y + p.oy) / p.cell));
      return ((fx + fy) & 1) ? p.hi : p.lo;
    }
    default: {
      const double u = x * std::cos(p.theta) + y * std::sin(p.theta);
      const double t = std::clamp(0.5 + u / (2.0 * p.span), 0.0, 1.0);
      return 0.05 + 0.9 * t;
    }
  }
}

float quantize_unit(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  const auto q = static_cast<int>(std::lround(c * 255.0));
  return static_cast<float>(q) / 255.0f;
}

}  // namespace

Dataset synthetic_shapes(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.num_classes = spec.num_classes;
  for (int k = 0; k < spec.num_classes; ++k) {
    ds.class_names.push_back(detail::concat(kFamilyNames[k % 4], "-", k / 4));
  }
  const int hw = spec.image_size;
  ds.images.reserve(static_cast<size_t>(spec.count));
  for (int i = 0; i < spec.count; ++i) {
    const int k = i % spec.num_classes;
    Rng rng = Rng::stream(spec.seed, "dataset.synthetic", static_cast<uint64_t>(i));
    PatternParams params = draw_params(k % 4, k / 4, hw, rng);
    std::vector<double> gains(static_cast<size_t>(spec.channels));
    for (int c = 0; c < spec.channels; ++c)
      gains[static_cast<size_t>(c)] =
          (1.0 - 0.12 * c) * (1.0 + rng.uniform(-0.04, 0.04));

    Tensor img = Tensor::zeros({spec.channels, hw, hw});
    float* out = img.data_mut().data();
    for (int c = 0; c < spec.channels; ++c) {
      for (int y = 0; y < hw; ++y) {
        for (int x = 0; x < hw; ++x) {
          const double v = pattern_value(params, x, y) * gains[static_cast<size_t>(c)] +
                           rng.uniform(-0.02, 0.02);
          out[(static_cast<int64_t>(c) * hw + y) * hw + x] = quantize_unit(v);
        }
      }
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(k);
    ds.splits.push_back(Split::kTrain);
  }
  return ds;
}

namespace {

// Offset-tracking reader so format errors can name the exact byte.
struct ByteReader {
  std::istream& is;
  const fs::path& path;
  uint64_t offset = 0;

  void read(void* dst, size_t n, const char* what) {
    is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    const auto got = static_cast<size_t>(is.gcount());
    NSVIT_IO_REQUIRE(got == n, "truncated dataset file ", path.string(),
                     ": ran out at byte offset ", offset + got, " while reading ",
                     what);
    offset += n;
  }
  uint32_t read_u32(const char* what) {
    unsigned char b[4];
    read(b, 4, what);
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
  }
};

void write_u32_le(std::ostream& os, uint32_t v) {
  const unsigned char b[4] = {
      static_cast<unsigned char>(v & 0xff),
      static_cast<unsigned char>((v >> 8) & 0xff),
      static_cast<unsigned char>((v >> 16) & 0xff),
      static_cast<unsigned char>((v >> 24) & 0xff),
  };
  os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

void save_nsds(const fs::path& path, const Dataset& ds) {
  ds.validate();
  NSVIT_REQUIRE(!ds.images.empty(), "refusing to save an empty dataset");
  const std::vector<int>& shape = ds.images[0].shape();

  std::ofstream os(path, std::ios::binary);
  NSVIT_IO_REQUIRE(os.good(), "cannot open dataset file for writing: ",
                   path.string());
  os.write("NSDS", 4);
  write_u32_le(os, static_cast<uint32_t>(ds.images.size()));
  write_u32_le(os, static_cast<uint32_t>(shape[0]));
  write_u32_le(os, static_cast<uint32_t>(shape[1]));
  write_u32_le(os, static_cast<uint32_t>(shape[2]));
  write_u32_le(os, static_cast<uint32_t>(ds.num_classes));

  std::vector<unsigned char> record;
  for (size_t i = 0; i < ds.images.size(); ++i) {
    record.clear();
    record.push_back(static_cast<unsigned char>(ds.labels[i]));
    for (float v : ds.images[i].data()) {
      const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
      record.push_back(static_cast<unsigned char>(std::lround(c * 255.0)));
    }
    os.write(reinterpret_cast<const char*>(record.data()),
             static_cast<std::streamsize>(record.size()));
  }
  NSVIT_IO_REQUIRE(os.good(), "failed writing dataset file: ", path.string());
}

Dataset load_nsds(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  NSVIT_IO_REQUIRE(is.good(), "cannot open dataset file: ", path.string());
  ByteReader r{is, path};

  char magic[4];
  r.read(magic, 4, "magic");
  NSVIT_IO_REQUIRE(std::memcmp(magic, "NSDS", 4) == 0,
                   "malformed dataset header at byte offset 0 in ", path.string(),
                   ": bad magic");
  const uint32_t count = r.read_u32("sample count");
  const uint32_t channels = r.read_u32("channel count");
  const uint32_t height = r.read_u32("image height");
  const uint32_t width = r.read_u32("image width");
  const uint32_t num_classes = r.read_u32("class count");
  NSVIT_IO_REQUIRE(channels >= 1 && height >= 1 && width >= 1 && num_classes >= 1,
                   "malformed dataset header at byte offset 4 in ", path.string(),
                   ": zero dimension");
  const uint64_t pixels =
      static_cast<uint64_t>(channels) * height * width;
  NSVIT_IO_REQUIRE(pixels <= (1u << 26), "malformed dataset header in ",
                   path.string(), ": implausible image size");

  Dataset ds;
  ds.num_classes = static_cast<int>(num_classes);
  for (uint32_t k = 0; k < num_classes; ++k)
    ds.class_names.push_back(detail::concat("class-", k));

  std::vector<unsigned char> buf(pixels);
  for (uint32_t i = 0; i < count; ++i) {
    const uint64_t label_offset = r.offset;
    unsigned char label = 0;
    r.read(&label, 1, "record label");
    NSVIT_IO_REQUIRE(label < num_classes, "label ", static_cast<int>(label),
                     " >= class count ", num_classes, " at byte offset ",
                     label_offset, " in ", path.string());
    r.read(buf.data(), buf.size(), "record pixels");

    Tensor img = Tensor::zeros({static_cast<int>(channels), static_cast<int>(height),
                                static_cast<int>(width)});
    float* out = img.data_mut().data();
    for (uint64_t j = 0; j < pixels; ++j)
      out[j] = static_cast<float>(buf[j]) / 255.0f;
    ds.images.push_back(std::move(img));
    ds.labels.push_back(static_cast<int>(label));
    ds.splits.push_back(Split::kTrain);
  }

  is.peek();
  NSVIT_IO_REQUIRE(is.eof(), "trailing bytes at byte offset ", r.offset, " in ",
                   path.string());
  return ds;
}

namespace {

struct PnmImage {
  int width = 0, height = 0, channels = 0;
  std::vector<float> planar;  // [c][y][x], values in [0,1]
};

int pnm_read_int(std::istream& is, const fs::path& path) {
  // Skip whitespace and '#' comment lines between header tokens.
  int ch = is.get();
  while (ch != EOF && (std::isspace(ch) || ch == '#')) {
    if (ch == '#')
      while (ch != EOF && ch != '\n') ch = is.get();
    ch = is.get();
  }
  NSVIT_IO_REQUIRE(ch != EOF && std::isdigit(ch), "malformed image header in ",
                   path.string());
  long value = 0;
  while (ch != EOF && std::isdigit(ch)) {
    value = value * 10 + (ch - '0');
    NSVIT_IO_REQUIRE(value <= (1 << 24), "implausible header value in ",
                     path.string());
    ch = is.get();
  }
  NSVIT_IO_REQUIRE(ch == EOF || std::isspace(ch), "malformed image header in ",
                   path.string());
  if (ch != EOF) is.unget();
  return static_cast<int>(value);
}

PnmImage load_pnm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  NSVIT_IO_REQUIRE(is.good(), "cannot open image: ", path.string());
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  NSVIT_IO_REQUIRE(is.good() && m0 == 'P' && (m1 == '5' || m1 == '6'),
                   "unsupported image format (want binary PGM/PPM): ",
                   path.string());
  PnmImage img;
  img.channels = (m1 == '6') ? 3 : 1;
  img.width = pnm_read_int(is, path);
  img.height = pnm_read_int(is, path);
  const int maxval = pnm_read_int(is, path);
  NSVIT_IO_REQUIRE(maxval >= 1 && maxval <= 255,
                   "unsupported image max value ", maxval, " in ", path.string());
  is.get();  // single whitespace byte before the raster

  const size_t n = static_cast<size_t>(img.width) * static_cast<size_t>(img.height) *
                   static_cast<size_t>(img.channels);
  NSVIT_IO_REQUIRE(n > 0, "empty image: ", path.string());
  std::vector<unsigned char> raw(n);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
  NSVIT_IO_REQUIRE(static_cast<size_t>(is.gcount()) == n, "truncated image raster in ",
                   path.string());

  // Interleaved raster to planar floats.
  img.planar.resize(n);
  const size_t hw = static_cast<size_t>(img.width) * static_cast<size_t>(img.height);
  for (size_t p = 0; p < hw; ++p)
    for (int c = 0; c < img.channels; ++c)
      img.planar[static_cast<size_t>(c) * hw + p] =
          static_cast<float>(raw[p * static_cast<size_t>(img.channels) +
                                 static_cast<size_t>(c)]) /
          static_cast<float>(maxval);
  return img;
}

PnmImage convert_channels(PnmImage img, int want) {
  if (img.channels == want) return img;
  const size_t hw = static_cast<size_t>(img.width) * static_cast<size_t>(img.height);
  PnmImage out;
  out.width = img.width;
  out.height = img.height;
  out.channels = want;
  out.planar.resize(hw * static_cast<size_t>(want));
  if (img.channels == 1 && want == 3) {
    for (int c = 0; c < 3; ++c)
      std::copy_n(img.planar.begin(), hw,
                  out.planar.begin() + static_cast<int64_t>(c) * static_cast<int64_t>(hw));
  } else if (img.channels == 3 && want == 1) {
    for (size_t p = 0; p < hw; ++p)
      out.planar[p] = 0.299f * img.planar[p] + 0.587f * img.planar[hw + p] +
                      0.114f * img.planar[2 * hw + p];
  } else {
    throw ContractError(detail::concat("unsupported channel conversion ",
                                       img.channels, " -> ", want));
  }
  return out;
}

// Bilinear resample with half-pixel centers (align_corners = false).
Tensor resize_bilinear(const PnmImage& img, int size) {
  Tensor out = Tensor::zeros({img.channels, size, size});
  float* dst = out.data_mut().data();
  const size_t src_hw =
      static_cast<size_t>(img.width) * static_cast<size_t>(img.height);
  const double sx_scale = static_cast<double>(img.width) / size;
  const double sy_scale = static_cast<double>(img.height) / size;
  for (int c = 0; c < img.channels; ++c) {
    const float* src = img.planar.data() + static_cast<size_t>(c) * src_hw;
    for (int dy = 0; dy < size; ++dy) {
      const double sy = std::clamp((dy + 0.5) * sy_scale - 0.5, 0.0,
                                   static_cast<double>(img.height - 1));
      const int y0 = static_cast<int>(sy);
      const int y1 = std::min(y0 + 1, img.height - 1);
      const double ty = sy - y0;
      for (int dx = 0; dx < size; ++dx) {
        const double sx = std::clamp((dx + 0.5) * sx_scale - 0.5, 0.0,
                                     static_cast<double>(img.width - 1));
        const int x0 = static_cast<int>(sx);
        const int x1 = std::min(x0 + 1, img.width - 1);
        const double tx = sx - x0;
        const double top = (1.0 - tx) * src[y0 * img.width + x0] +
                           tx * src[y0 * img.width + x1];
        const double bot = (1.0 - tx) * src[y1 * img.width + x0] +
                           tx * src[y1 * img.width + x1];
        dst[(static_cast<int64_t>(c) * size + dy) * size + dx] =
            static_cast<float>((1.0 - ty) * top + ty * bot);
      }
    }
  }
  return out;
}

bool has_pnm_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return ext == ".ppm" || ext == ".pgm";
}

}  // namespace

Dataset load_image_directory(const fs::path& root, int channels, int size) {
  NSVIT_REQUIRE(channels == 1 || channels == 3, "channels must be 1 or 3, got ",
                channels);
  NSVIT_REQUIRE(size >= 1, "size must be >= 1, got ", size);
  NSVIT_IO_REQUIRE(fs::is_directory(root), "not a directory: ", root.string());

  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  NSVIT_IO_REQUIRE(!class_dirs.empty(), "no class subdirectories under ",
                   root.string());

  Dataset ds;
  ds.num_classes = static_cast<int>(class_dirs.size());
  for (int k = 0; k < ds.num_classes; ++k) {
    const fs::path& dir = class_dirs[static_cast<size_t>(k)];
    ds.class_names.push_back(dir.filename().string());
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
      if (entry.is_regular_file() && has_pnm_extension(entry.path()))
        files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const fs::path& file : files) {
      PnmImage img = convert_channels(load_pnm(file), channels);
      ds.images.push_back(resize_bilinear(img, size));
      ds.labels.push_back(k);
      ds.splits.push_back(Split::kTrain);
    }
  }
  NSVIT_IO_REQUIRE(!ds.images.empty(), "no PGM/PPM images under ", root.string());
  return ds;
}

namespace {

SyntheticSpec parse_synthetic_spec(const std::string& spec_str, int channels,
                                   int size) {
  SyntheticSpec spec;
  spec.channels = channels;
  spec.image_size = size;
  std::string body = spec_str.substr(std::string("synthetic:").size());
  size_t pos = 0;
  while (pos < body.size()) {
    size_t end = body.find(',', pos);
    if (end == std::string::npos) end = body.size();
    const std::string item = body.substr(pos, end - pos);
    pos = end + 1;
    if (item.empty()) continue;
    const size_t eq = item.find('=');
    NSVIT_REQUIRE(eq != std::string::npos, "bad synthetic spec item: ", item);
    const std::string key = item.substr(0, eq);
    const std::string value = item.substr(eq + 1);
    try {
      if (key == "k") {
        spec.num_classes = std::stoi(value);
      } else if (key == "n") {
        spec.count = std::stoi(value);
      } else if (key == "size") {
        spec.image_size = std::stoi(value);
      } else if (key == "channels") {
        spec.channels = std::stoi(value);
      } else if (key == "seed") {
        spec.seed = std::stoull(value);
      } else {
        throw ContractError(detail::concat("unknown synthetic spec key: ", key));
      }
    } catch (const std::invalid_argument&) {
      throw ContractError(detail::concat("bad synthetic spec value: ", item));
    } catch (const std::out_of_range&) {
      throw ContractError(detail::concat("bad synthetic spec value: ", item));
    }
  }
  return spec;
}

}  // namespace

Dataset load_dataset(const std::string& path_or_spec, int channels, int size) {
  if (path_or_spec.rfind("synthetic:", 0) == 0)
    return synthetic_shapes(parse_synthetic_spec(path_or_spec, channels, size));
  if (fs::is_directory(path_or_spec))
    return load_image_directory(path_or_spec, channels, size);
  return load_nsds(path_or_spec);
}

void assign_splits(Dataset& ds, double val_fraction, double test_fraction,
                   uint64_t seed) {
  NSVIT_REQUIRE(val_fraction >= 0.0 && test_fraction >= 0.0 &&
                    val_fraction + test_fraction <= 1.0,
                "split fractions must be nonnegative and sum to at most 1");
  NSVIT_REQUIRE(ds.splits.size() == ds.images.size(),
                "dataset splits not sized before assignment");
  const size_t n = ds.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng::stream(seed, "dataset.split");
  rng.shuffle(order);

  const auto n_test = static_cast<size_t>(
      std::llround(test_fraction * static_cast<double>(n)));
  const auto n_val = static_cast<size_t>(
      std::llround(val_fraction * static_cast<double>(n)));
  NSVIT_REQUIRE(n_test + n_val <= n, "split fractions leave no room");
  for (size_t i = 0; i < n; ++i) {
    Split s = Split::kTrain;
    if (i < n_test)
      s = Split::kTest;
    else if (i < n_test + n_val)
      s = Split::kVal;
    ds.splits[order[i]] = s;
  }
}

}  // namespace nsvit
