#include "protopart/data_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

namespace protopart {

namespace {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// little-endian byte buffers with offset-carrying errors
// ---------------------------------------------------------------------------

struct Writer {
  std::vector<unsigned char> bytes;

  void u32(std::uint32_t v) {
    bytes.push_back(static_cast<unsigned char>(v & 0xff));
    bytes.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    bytes.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    bytes.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 8; ++i) {
      bytes.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xff));
    }
  }
  void raw(const unsigned char* data, std::size_t n) {
    bytes.insert(bytes.end(), data, data + n);
  }
  void magic(const char tag[4]) {
    raw(reinterpret_cast<const unsigned char*>(tag), 4);
  }
  std::uint32_t crc() const {
    return static_cast<std::uint32_t>(
        crc32(0L, bytes.data(), static_cast<uInt>(bytes.size())));
  }
};

struct Reader {
  const std::vector<unsigned char>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > bytes.size()) {
      throw ParseError(std::string("truncated while reading ") + what, pos);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    }
    pos += 4;
    return v;
  }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
      bits |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
    }
    pos += 8;
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  const unsigned char* raw(std::size_t n, const char* what) {
    need(n, what);
    const unsigned char* p = bytes.data() + pos;
    pos += n;
    return p;
  }
  void expect_magic(const char tag[4]) {
    need(4, "magic");
    if (std::memcmp(bytes.data() + pos, tag, 4) != 0) {
      throw ParseError("bad magic, expected " + std::string(tag, 4), pos);
    }
    pos += 4;
  }
};

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path, 0);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("short write to " + path);
}

// Verifies the trailing CRC-32 and returns a reader over the payload that
// refuses to run past it.
std::uint32_t stored_crc(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4) throw ParseError("file shorter than its checksum", 0);
  std::uint32_t v = 0;
  const std::size_t base = bytes.size() - 4;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(bytes[base + i]) << (8 * i);
  }
  return v;
}

std::uint32_t computed_crc(const std::vector<unsigned char>& bytes) {
  return static_cast<std::uint32_t>(
      crc32(0L, bytes.data(), static_cast<uInt>(bytes.size() - 4)));
}

unsigned char to_byte(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0);
  const double scaled = std::floor(clamped * 255.0 + 0.5);  // round half-up
  return static_cast<unsigned char>(std::min(scaled, 255.0));
}

}  // namespace

// ---------------------------------------------------------------------------
// ppds
// ---------------------------------------------------------------------------

void save_ppds(const Dataset& dataset, const std::string& path) {
  if (dataset.size() < 1) throw DatasetError("refusing to write an empty dataset");
  const int h = dataset.images[0].extent(0);
  const int w = dataset.images[0].extent(1);
  Writer out;
  out.magic("PPDS");
  out.u32(1);
  out.u32(static_cast<std::uint32_t>(dataset.size()));
  out.u32(static_cast<std::uint32_t>(dataset.class_count()));
  out.u32(static_cast<std::uint32_t>(h));
  out.u32(static_cast<std::uint32_t>(w));
  for (int i = 0; i < dataset.size(); ++i) {
    const Tensor& img = dataset.images[i];
    if (img.shape != Shape{h, w, 3}) {
      throw DatasetError("image " + std::to_string(i) + " has mismatched extents");
    }
    if (dataset.labels[i] < 0 || dataset.labels[i] >= dataset.class_count()) {
      throw DatasetError("label out of range at image " + std::to_string(i));
    }
    out.u32(static_cast<std::uint32_t>(dataset.labels[i]));
    for (double v : img.values) out.bytes.push_back(to_byte(v));
  }
  out.u32(out.crc());
  write_file(path, out.bytes);
}

Dataset load_ppds(const std::string& path) {
  const std::vector<unsigned char> bytes = read_file(path);
  if (bytes.size() < 4 || stored_crc(bytes) != computed_crc(bytes)) {
    throw ParseError("checksum mismatch", bytes.size() < 4 ? 0 : bytes.size() - 4);
  }
  Reader in{bytes};
  in.expect_magic("PPDS");
  const std::uint32_t version = in.u32("version");
  if (version != 1) throw ParseError("unsupported dataset version", in.pos - 4);
  const std::uint32_t n = in.u32("image count");
  const std::uint32_t k = in.u32("class count");
  const std::uint32_t h = in.u32("image height");
  const std::uint32_t w = in.u32("image width");
  if (n < 1 || k < 1 || h < 1 || w < 1) {
    throw DatasetError("degenerate dataset header");
  }
  Dataset ds;
  for (std::uint32_t c = 0; c < k; ++c) ds.class_names.push_back(std::to_string(c));
  const std::size_t pixels = static_cast<std::size_t>(h) * w * 3;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t label = in.u32("record label");
    if (label >= k) {
      throw DatasetError("label " + std::to_string(label) +
                         " out of range in record " + std::to_string(i));
    }
    const unsigned char* px = in.raw(pixels, "pixel payload");
    Tensor img = Tensor::zeros({static_cast<int>(h), static_cast<int>(w), 3});
    for (std::size_t j = 0; j < pixels; ++j) img.values[j] = px[j] / 255.0;
    ds.images.push_back(std::move(img));
    ds.labels.push_back(static_cast<int>(label));
  }
  if (in.pos + 4 != bytes.size()) {
    throw ParseError("trailing bytes after the declared payload", in.pos + 4);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// PPM
// ---------------------------------------------------------------------------

void write_ppm(const Tensor& image, const std::string& path) {
  if (image.rank() != 3 || image.extent(2) != 3) {
    throw ShapeError("write_ppm expects an H x W x 3 image");
  }
  const int h = image.extent(0), w = image.extent(1);
  std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<unsigned char> bytes(header.begin(), header.end());
  for (double v : image.values) bytes.push_back(to_byte(v));
  write_file(path, bytes);
}

namespace {

// Whitespace- and comment-skipping token scanner for the PPM header.
int ppm_int(const std::vector<unsigned char>& bytes, std::size_t& pos,
            const char* what) {
  while (pos < bytes.size()) {
    if (bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(bytes[pos])) {
      ++pos;
    } else {
      break;
    }
  }
  if (pos >= bytes.size() || !std::isdigit(bytes[pos])) {
    throw ParseError(std::string("expected integer for ") + what, pos);
  }
  long v = 0;
  while (pos < bytes.size() && std::isdigit(bytes[pos])) {
    v = v * 10 + (bytes[pos] - '0');
    if (v > 1 << 24) throw ParseError(std::string("absurd value for ") + what, pos);
    ++pos;
  }
  return static_cast<int>(v);
}

}  // namespace

Tensor read_ppm(const std::string& path) {
  const std::vector<unsigned char> bytes = read_file(path);
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw ParseError("not a P6 PPM file", 0);
  }
  std::size_t pos = 2;
  const int w = ppm_int(bytes, pos, "width");
  const int h = ppm_int(bytes, pos, "height");
  const int maxval = ppm_int(bytes, pos, "maxval");
  if (maxval != 255) throw ParseError("only maxval 255 is supported", pos);
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw ParseError("missing separator after maxval", pos);
  }
  ++pos;  // single whitespace byte, then binary pixels
  const std::size_t pixels = static_cast<std::size_t>(h) * w * 3;
  if (pos + pixels != bytes.size()) {
    throw ParseError("pixel payload length mismatch", pos);
  }
  Tensor img = Tensor::zeros({h, w, 3});
  for (std::size_t i = 0; i < pixels; ++i) img.values[i] = bytes[pos + i] / 255.0;
  return img;
}

// ---------------------------------------------------------------------------
// ppm-tree
// ---------------------------------------------------------------------------

Dataset load_ppm_tree(const std::string& root) {
  if (!fs::is_directory(root)) {
    throw DatasetError("not a directory: " + root);
  }
  std::vector<std::string> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path().filename().string());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw DatasetError("no class directories under " + root);

  Dataset ds;
  ds.class_names = class_dirs;
  Shape extents;
  for (std::size_t k = 0; k < class_dirs.size(); ++k) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(fs::path(root) / class_dirs[k])) {
      if (entry.is_regular_file()) files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    for (const std::string& file : files) {
      Tensor img = read_ppm(file);
      if (extents.empty()) {
        extents = img.shape;
      } else if (img.shape != extents) {
        throw DatasetError("inconsistent image extents at " + file);
      }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(static_cast<int>(k));
    }
  }
  if (ds.images.empty()) throw DatasetError("no images under " + root);
  return ds;
}

Dataset load_dataset(const std::string& path, const std::string& format) {
  if (format == "ppds") return load_ppds(path);
  if (format == "ppm-tree") return load_ppm_tree(path);
  throw ArgumentError("unknown dataset format: " + format);
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

Tensor flip_horizontal(const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("flip expects an H x W x C image");
  const int h = image.extent(0), w = image.extent(1), c = image.extent(2);
  Tensor out = Tensor::zeros(image.shape);
  for (int r = 0; r < h; ++r) {
    for (int col = 0; col < w; ++col) {
      for (int k = 0; k < c; ++k) {
        out.values[(r * w + col) * c + k] =
            image.values[(r * w + (w - 1 - col)) * c + k];
      }
    }
  }
  return out;
}

Tensor rotate_nearest(const Tensor& image, double degrees) {
  if (image.rank() != 3) throw ShapeError("rotate expects an H x W x C image");
  const int h = image.extent(0), w = image.extent(1), c = image.extent(2);
  const double rad = degrees * std::acos(-1.0) / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cr = (h - 1) / 2.0, cc = (w - 1) / 2.0;
  Tensor out = Tensor::zeros(image.shape);
  for (int r = 0; r < h; ++r) {
    for (int col = 0; col < w; ++col) {
      const double sr = cs * (r - cr) + sn * (col - cc) + cr;
      const double sc = -sn * (r - cr) + cs * (col - cc) + cc;
      const int ir = std::clamp(static_cast<int>(std::lround(sr)), 0, h - 1);
      const int ic = std::clamp(static_cast<int>(std::lround(sc)), 0, w - 1);
      for (int k = 0; k < c; ++k) {
        out.values[(r * w + col) * c + k] = image.values[(ir * w + ic) * c + k];
      }
    }
  }
  return out;
}

Tensor crop_resize(const Tensor& image, int off_r, int off_c) {
  if (image.rank() != 3) throw ShapeError("crop expects an H x W x C image");
  const int h = image.extent(0), w = image.extent(1), c = image.extent(2);
  const int ch = std::max(1, (h * 7) / 8);
  const int cw = std::max(1, (w * 7) / 8);
  if (off_r < 0 || off_c < 0 || off_r + ch > h || off_c + cw > w) {
    throw ArgumentError("crop anchor out of range");
  }
  Tensor out = Tensor::zeros(image.shape);
  for (int r = 0; r < h; ++r) {
    const int sr = off_r + std::min(ch - 1, (r * ch) / h);
    for (int col = 0; col < w; ++col) {
      const int sc = off_c + std::min(cw - 1, (col * cw) / w);
      for (int k = 0; k < c; ++k) {
        out.values[(r * w + col) * c + k] = image.values[(sr * w + sc) * c + k];
      }
    }
  }
  return out;
}

Dataset augment_offline(const Dataset& dataset, std::span<const AugmentOp> ops,
                        int copies, unsigned int seed) {
  if (copies < 0) throw ArgumentError("copies must be >= 0");
  Dataset out = dataset;
  if (copies == 0) return out;
  if (ops.empty()) throw ArgumentError("no augmentation ops to draw from");

  std::mt19937 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, ops.size() - 1);
  std::uniform_real_distribution<double> angle(-15.0, 15.0);

  const int n = dataset.size();
  for (int i = 0; i < n; ++i) {
    const Tensor& img = dataset.images[i];
    const int h = img.extent(0), w = img.extent(1);
    const int ch = std::max(1, (h * 7) / 8);
    const int cw = std::max(1, (w * 7) / 8);
    std::uniform_int_distribution<int> row(0, h - ch);
    std::uniform_int_distribution<int> col(0, w - cw);
    for (int c = 0; c < copies; ++c) {
      Tensor aug;
      switch (ops[pick(rng)]) {
        case AugmentOp::kFlip:
          aug = flip_horizontal(img);
          break;
        case AugmentOp::kRotate:
          aug = rotate_nearest(img, angle(rng));
          break;
        case AugmentOp::kCrop:
          aug = crop_resize(img, row(rng), col(rng));
          break;
      }
      out.images.push_back(std::move(aug));
      out.labels.push_back(dataset.labels[i]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

namespace {

void write_array(Writer& out, const Tensor& t) {
  out.u32(static_cast<std::uint32_t>(t.rank()));
  for (int e : t.shape) out.u32(static_cast<std::uint32_t>(e));
  for (double v : t.values) out.f64(v);
}

Tensor read_array(Reader& in, const char* what) {
  const std::uint32_t rank = in.u32(what);
  if (rank < 1 || rank > 4) throw ParseError(std::string("bad rank for ") + what, in.pos - 4);
  Shape shape;
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t e = in.u32(what);
    if (e < 1 || e > (1u << 24)) throw ParseError(std::string("bad extent for ") + what, in.pos - 4);
    shape.push_back(static_cast<int>(e));
    n *= e;
  }
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = in.f64(what);
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace

void save_checkpoint(const ProtoPNetModel& model, const std::string& path) {
  const ModelConfig& cfg = model.config;
  Writer out;
  out.magic("PPNX");
  out.u32(1);
  out.u32(static_cast<std::uint32_t>(cfg.image_h));
  out.u32(static_cast<std::uint32_t>(cfg.image_w));
  out.u32(static_cast<std::uint32_t>(cfg.image_c));
  out.u32(static_cast<std::uint32_t>(cfg.blocks.size()));
  for (const ConvBlockSpec& b : cfg.blocks) {
    out.u32(static_cast<std::uint32_t>(b.channels));
    out.u32(static_cast<std::uint32_t>(b.kernel));
    out.u32(static_cast<std::uint32_t>(b.stride));
    out.u32(static_cast<std::uint32_t>(b.padding));
    out.u32(b.pool ? 1 : 0);
  }
  out.u32(static_cast<std::uint32_t>(cfg.addon_channels));
  out.u32(static_cast<std::uint32_t>(cfg.proto_h));
  out.u32(static_cast<std::uint32_t>(cfg.proto_w));
  out.u32(static_cast<std::uint32_t>(cfg.class_count));
  for (int mk : cfg.prototypes_per_class) out.u32(static_cast<std::uint32_t>(mk));
  out.u32(model.seed);
  out.f64(cfg.epsilon);

  for (const Tensor& f : model.conv_filters) write_array(out, f);
  for (const Tensor& p : model.prototypes) write_array(out, p);
  out.u32(1);  // allocation: rank-1 u32 array
  out.u32(static_cast<std::uint32_t>(model.allocation.size()));
  for (int a : model.allocation) out.u32(static_cast<std::uint32_t>(a));
  write_array(out, model.last_layer);

  out.u32(out.crc());
  write_file(path, out.bytes);
}

ProtoPNetModel load_checkpoint(const std::string& path) {
  const std::vector<unsigned char> bytes = read_file(path);
  if (bytes.size() < 8) throw CorruptCheckpointError("checkpoint too short");
  if (stored_crc(bytes) != computed_crc(bytes)) {
    throw CorruptCheckpointError("checksum mismatch in " + path);
  }
  Reader in{bytes};
  in.expect_magic("PPNX");
  const std::uint32_t version = in.u32("version");
  if (version != 1) {
    throw UnsupportedVersionError("checkpoint version " + std::to_string(version));
  }

  ModelConfig cfg;
  cfg.image_h = static_cast<int>(in.u32("image_h"));
  cfg.image_w = static_cast<int>(in.u32("image_w"));
  cfg.image_c = static_cast<int>(in.u32("image_c"));
  const std::uint32_t blocks = in.u32("block count");
  if (blocks > 64) throw ParseError("absurd block count", in.pos - 4);
  for (std::uint32_t i = 0; i < blocks; ++i) {
    ConvBlockSpec b;
    b.channels = static_cast<int>(in.u32("block channels"));
    b.kernel = static_cast<int>(in.u32("block kernel"));
    b.stride = static_cast<int>(in.u32("block stride"));
    b.padding = static_cast<int>(in.u32("block padding"));
    b.pool = in.u32("block pool flag") != 0;
    cfg.blocks.push_back(b);
  }
  cfg.addon_channels = static_cast<int>(in.u32("addon channels"));
  cfg.proto_h = static_cast<int>(in.u32("proto_h"));
  cfg.proto_w = static_cast<int>(in.u32("proto_w"));
  cfg.class_count = static_cast<int>(in.u32("class count"));
  if (cfg.class_count < 1 || cfg.class_count > (1 << 20)) {
    throw ParseError("absurd class count", in.pos - 4);
  }
  for (int k = 0; k < cfg.class_count; ++k) {
    cfg.prototypes_per_class.push_back(static_cast<int>(in.u32("prototype count")));
  }
  ProtoPNetModel model;
  model.seed = in.u32("seed");
  cfg.epsilon = in.f64("epsilon");
  validate_config(cfg);
  model.config = cfg;

  for (std::size_t i = 0; i < cfg.blocks.size() + 2; ++i) {
    model.conv_filters.push_back(read_array(in, "backbone filter"));
  }
  const int m = cfg.total_prototypes();
  for (int j = 0; j < m; ++j) {
    model.prototypes.push_back(read_array(in, "prototype"));
  }
  const std::uint32_t arank = in.u32("allocation rank");
  const std::uint32_t acount = in.u32("allocation extent");
  if (arank != 1 || acount != static_cast<std::uint32_t>(m)) {
    throw ParseError("allocation array does not match prototype count", in.pos - 4);
  }
  for (std::uint32_t j = 0; j < acount; ++j) {
    const std::uint32_t a = in.u32("allocation entry");
    if (a >= static_cast<std::uint32_t>(cfg.class_count)) {
      throw ParseError("allocation entry out of class range", in.pos - 4);
    }
    model.allocation.push_back(static_cast<int>(a));
  }
  model.last_layer = read_array(in, "last layer");
  if (model.last_layer.shape != Shape{cfg.class_count, m}) {
    throw ParseError("last layer extents disagree with the config", in.pos);
  }
  if (in.pos + 4 != bytes.size()) {
    throw ParseError("trailing bytes after the declared payload", in.pos + 4);
  }
  return model;
}

}  // namespace protopart
