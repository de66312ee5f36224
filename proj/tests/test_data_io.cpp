#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "protopart/data_io.hpp"
#include "protopart/model.hpp"

using namespace protopart;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("protopart_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<unsigned char> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
}

void spit(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

void put_u32(std::vector<unsigned char>& bytes, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) bytes.push_back((v >> (8 * i)) & 0xff);
}

void refresh_crc(std::vector<unsigned char>& bytes) {
  const std::uint32_t c = static_cast<std::uint32_t>(
      crc32(0L, bytes.data(), static_cast<uInt>(bytes.size() - 4)));
  for (int i = 0; i < 4; ++i) bytes[bytes.size() - 4 + i] = (c >> (8 * i)) & 0xff;
}

// Images whose values sit exactly on the byte grid so save/load round-trips
// reproduce the doubles bit-for-bit.
Dataset quantized_dataset(int n, int k, int h, int w, unsigned int seed) {
  std::mt19937 rng(seed);
  Dataset ds;
  for (int c = 0; c < k; ++c) ds.class_names.push_back(std::to_string(c));
  for (int i = 0; i < n; ++i) {
    Tensor img = Tensor::zeros({h, w, 3});
    for (double& v : img.values) v = static_cast<double>(rng() % 256) / 255.0;
    ds.images.push_back(std::move(img));
    ds.labels.push_back(i % k);
  }
  return ds;
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.image_h = 10;
  cfg.image_w = 10;
  cfg.image_c = 3;
  cfg.blocks = {{.channels = 8, .kernel = 3, .stride = 1, .padding = 0, .pool = true}};
  cfg.addon_channels = 4;
  cfg.class_count = 2;
  cfg.prototypes_per_class = {2, 2};
  cfg.epsilon = 1e-4;
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// ppds
// ---------------------------------------------------------------------------

TEST_CASE("ppds header fields echo through a save-load cycle") {
  fs::path dir = temp_dir("ppds_echo");
  Dataset ds = quantized_dataset(2, 2, 8, 8, 1);
  ds.labels = {0, 1};
  const std::string path = (dir / "two.ppds").string();
  save_ppds(ds, path);
  Dataset back = load_ppds(path);
  CHECK(back.size() == 2);
  CHECK(back.class_count() == 2);
  CHECK(back.labels == std::vector<int>{0, 1});
  CHECK(back.images[0].shape == Shape{8, 8, 3});
}

TEST_CASE("ppds round trip preserves pixel bytes exactly") {
  fs::path dir = temp_dir("ppds_roundtrip");
  Dataset ds = quantized_dataset(5, 3, 6, 7, 2);
  const std::string a = (dir / "a.ppds").string();
  const std::string b = (dir / "b.ppds").string();
  save_ppds(ds, a);
  Dataset back = load_ppds(a);
  for (int i = 0; i < ds.size(); ++i) {
    CHECK(back.images[i].values == ds.images[i].values);
  }
  CHECK(back.labels == ds.labels);
  save_ppds(back, b);
  CHECK(slurp(a) == slurp(b));
}

TEST_CASE("ppds rejects corruption, truncation, and bad labels") {
  fs::path dir = temp_dir("ppds_bad");
  Dataset ds = quantized_dataset(2, 2, 4, 4, 3);
  const std::string path = (dir / "ok.ppds").string();
  save_ppds(ds, path);

  std::vector<unsigned char> bytes = slurp(path);
  std::vector<unsigned char> flipped = bytes;
  flipped[30] ^= 0x01;
  spit(dir / "flipped.ppds", flipped);
  CHECK_THROWS_AS(load_ppds((dir / "flipped.ppds").string()), ParseError);

  std::vector<unsigned char> truncated(bytes.begin(), bytes.begin() + 40);
  spit(dir / "short.ppds", truncated);
  CHECK_THROWS_AS(load_ppds((dir / "short.ppds").string()), ParseError);

  // Hand-built file with a label outside the declared class count but a
  // valid checksum.
  std::vector<unsigned char> bad;
  bad.insert(bad.end(), {'P', 'P', 'D', 'S'});
  put_u32(bad, 1);  // version
  put_u32(bad, 1);  // N
  put_u32(bad, 1);  // K
  put_u32(bad, 1);  // H
  put_u32(bad, 1);  // W
  put_u32(bad, 5);  // label 5 with K=1
  bad.insert(bad.end(), {10, 20, 30});
  put_u32(bad, 0);
  refresh_crc(bad);
  spit(dir / "label.ppds", bad);
  CHECK_THROWS_AS(load_ppds((dir / "label.ppds").string()), DatasetError);

  // Wrong version, checksum made consistent again.
  std::vector<unsigned char> versioned = bytes;
  versioned[4] = 9;
  refresh_crc(versioned);
  spit(dir / "version.ppds", versioned);
  CHECK_THROWS_AS(load_ppds((dir / "version.ppds").string()), ParseError);
}

TEST_CASE("parse errors carry the byte offset") {
  fs::path dir = temp_dir("ppds_offset");
  std::vector<unsigned char> junk{'X', 'X', 'X', 'X', 0, 0, 0, 0};
  put_u32(junk, 0);
  refresh_crc(junk);
  spit(dir / "junk.ppds", junk);
  try {
    load_ppds((dir / "junk.ppds").string());
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.byte_offset() == 0);
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// PPM
// ---------------------------------------------------------------------------

TEST_CASE("ppm writer emits the canonical header and zero payload") {
  fs::path dir = temp_dir("ppm_zero");
  write_ppm(Tensor::zeros({2, 2, 3}), (dir / "z.ppm").string());
  const std::vector<unsigned char> bytes = slurp(dir / "z.ppm");
  const std::string header = "P6\n2 2\n255\n";
  REQUIRE(bytes.size() == header.size() + 12);
  CHECK(std::memcmp(bytes.data(), header.data(), header.size()) == 0);
  for (std::size_t i = header.size(); i < bytes.size(); ++i) CHECK(bytes[i] == 0);
}

TEST_CASE("ppm rounding: 1.0 becomes 255 and 0.5 rounds half-up to 128") {
  fs::path dir = temp_dir("ppm_round");
  Tensor img = Tensor::zeros({1, 1, 3});
  img.values = {1.0, 0.5, 0.0};
  write_ppm(img, (dir / "r.ppm").string());
  const std::vector<unsigned char> bytes = slurp(dir / "r.ppm");
  const std::size_t base = bytes.size() - 3;
  CHECK(bytes[base + 0] == 255);
  CHECK(bytes[base + 1] == 128);  // 0.5*255 = 127.5 rounds up
  CHECK(bytes[base + 2] == 0);
}

TEST_CASE("ppm read-write round trip on quantized values") {
  fs::path dir = temp_dir("ppm_roundtrip");
  std::mt19937 rng(4);
  Tensor img = Tensor::zeros({5, 3, 3});
  for (double& v : img.values) v = static_cast<double>(rng() % 256) / 255.0;
  write_ppm(img, (dir / "x.ppm").string());
  Tensor back = read_ppm((dir / "x.ppm").string());
  CHECK(back.shape == img.shape);
  CHECK(back.values == img.values);
}

TEST_CASE("ppm reader rejects malformed files") {
  fs::path dir = temp_dir("ppm_bad");
  spit(dir / "bad.ppm", {'P', '5', '\n'});
  CHECK_THROWS_AS(read_ppm((dir / "bad.ppm").string()), ParseError);
  spit(dir / "short.ppm", {'P', '6', '\n', '2', ' ', '2', '\n', '2', '5', '5', '\n', 0, 0});
  CHECK_THROWS_AS(read_ppm((dir / "short.ppm").string()), ParseError);
}

// ---------------------------------------------------------------------------
// ppm-tree
// ---------------------------------------------------------------------------

TEST_CASE("ppm tree assigns class indices lexicographically") {
  fs::path dir = temp_dir("tree");
  fs::create_directories(dir / "b");
  fs::create_directories(dir / "a");
  Tensor img = Tensor::full({2, 2, 3}, 1.0);
  write_ppm(img, (dir / "b" / "1.ppm").string());
  write_ppm(img, (dir / "a" / "1.ppm").string());
  write_ppm(img, (dir / "a" / "2.ppm").string());

  Dataset ds = load_ppm_tree(dir.string());
  CHECK(ds.class_names == std::vector<std::string>{"a", "b"});
  CHECK(ds.labels == std::vector<int>{0, 0, 1});
  CHECK(ds.size() == 3);

  Dataset via_dispatch = load_dataset(dir.string(), "ppm-tree");
  CHECK(via_dispatch.labels == ds.labels);
  CHECK_THROWS_AS(load_dataset(dir.string(), "bmp"), ArgumentError);
}

TEST_CASE("ppm tree rejects mismatched extents") {
  fs::path dir = temp_dir("tree_bad");
  fs::create_directories(dir / "a");
  write_ppm(Tensor::full({2, 2, 3}, 0.5), (dir / "a" / "1.ppm").string());
  write_ppm(Tensor::full({3, 3, 3}, 0.5), (dir / "a" / "2.ppm").string());
  CHECK_THROWS_AS(load_ppm_tree(dir.string()), DatasetError);
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

TEST_CASE("zero copies leaves the dataset untouched") {
  Dataset ds = quantized_dataset(3, 2, 6, 6, 5);
  const std::vector<AugmentOp> ops{AugmentOp::kFlip};
  Dataset out = augment_offline(ds, ops, 0, 1);
  CHECK(out.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(out.images[i].values == ds.images[i].values);
}

TEST_CASE("horizontal flip is an involution") {
  Dataset ds = quantized_dataset(1, 1, 5, 7, 6);
  Tensor once = flip_horizontal(ds.images[0]);
  CHECK(once.values != ds.images[0].values);
  Tensor twice = flip_horizontal(once);
  CHECK(twice.values == ds.images[0].values);
}

TEST_CASE("augmentation is deterministic in the seed and append-only") {
  Dataset ds = quantized_dataset(4, 2, 8, 8, 7);
  const std::vector<AugmentOp> ops{AugmentOp::kFlip, AugmentOp::kRotate,
                                   AugmentOp::kCrop};
  Dataset a = augment_offline(ds, ops, 2, 99);
  Dataset b = augment_offline(ds, ops, 2, 99);
  REQUIRE(a.size() == 12);
  REQUIRE(b.size() == 12);
  for (int i = 0; i < 12; ++i) CHECK(a.images[i].values == b.images[i].values);
  CHECK(a.labels == b.labels);

  // Originals stay in place, appended entries carry the source labels.
  for (int i = 0; i < 4; ++i) CHECK(a.images[i].values == ds.images[i].values);
  for (int i = 0; i < 4; ++i) {
    for (int c = 0; c < 2; ++c) CHECK(a.labels[4 + i * 2 + c] == ds.labels[i]);
  }

  Dataset c = augment_offline(ds, ops, 2, 100);
  bool any_difference = false;
  for (int i = 4; i < 12; ++i) {
    if (c.images[i].values != a.images[i].values) any_difference = true;
  }
  CHECK(any_difference);

  CHECK_THROWS_AS(augment_offline(ds, ops, -1, 0), ArgumentError);
  CHECK_THROWS_AS(augment_offline(ds, std::vector<AugmentOp>{}, 1, 0),
                  ArgumentError);
}

TEST_CASE("rotation and crop keep extents and the value range") {
  Dataset ds = quantized_dataset(1, 1, 9, 9, 8);
  Tensor rot = rotate_nearest(ds.images[0], 12.5);
  CHECK(rot.shape == ds.images[0].shape);
  Tensor crop = crop_resize(ds.images[0], 1, 0);
  CHECK(crop.shape == ds.images[0].shape);
  for (double v : rot.values) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK_THROWS_AS(crop_resize(ds.images[0], 5, 0), ArgumentError);
  // Rotation by zero degrees is the identity.
  CHECK(rotate_nearest(ds.images[0], 0.0).values == ds.images[0].values);
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

TEST_CASE("checkpoint round trip reproduces every array bit-exactly") {
  fs::path dir = temp_dir("ckpt_roundtrip");
  ProtoPNetModel model = build_model(tiny_config(), 11);
  const std::string path = (dir / "m.ppnx").string();
  save_checkpoint(model, path);
  ProtoPNetModel back = load_checkpoint(path);

  REQUIRE(back.conv_filters.size() == model.conv_filters.size());
  for (std::size_t i = 0; i < model.conv_filters.size(); ++i) {
    CHECK(back.conv_filters[i].shape == model.conv_filters[i].shape);
    CHECK(back.conv_filters[i].values == model.conv_filters[i].values);
  }
  REQUIRE(back.prototypes.size() == model.prototypes.size());
  for (std::size_t j = 0; j < model.prototypes.size(); ++j) {
    CHECK(back.prototypes[j].values == model.prototypes[j].values);
  }
  CHECK(back.allocation == model.allocation);
  CHECK(back.last_layer.values == model.last_layer.values);
  CHECK(back.seed == model.seed);
  CHECK(back.config.epsilon == model.config.epsilon);

  // Inference is bit-identical on a fixed probe input.
  std::mt19937 rng(12);
  Tensor x = Tensor::zeros({10, 10, 3});
  for (double& v : x.values) v = static_cast<double>(rng() % 256) / 255.0;
  ModelOutput a = model_forward(x, model);
  ModelOutput b = model_forward(x, back);
  CHECK(a.logits.values == b.logits.values);
  CHECK(a.scores.values == b.scores.values);
  CHECK(a.latent.values == b.latent.values);
}

TEST_CASE("checkpoint corruption and version failures") {
  fs::path dir = temp_dir("ckpt_bad");
  ProtoPNetModel model = build_model(tiny_config(), 13);
  const std::string path = (dir / "m.ppnx").string();
  save_checkpoint(model, path);

  std::vector<unsigned char> bytes = slurp(path);
  std::vector<unsigned char> flipped = bytes;
  flipped[100] ^= 0x40;
  spit(dir / "flip.ppnx", flipped);
  CHECK_THROWS_AS(load_checkpoint((dir / "flip.ppnx").string()),
                  CorruptCheckpointError);

  std::vector<unsigned char> versioned = bytes;
  versioned[4] = 2;
  refresh_crc(versioned);
  spit(dir / "v2.ppnx", versioned);
  CHECK_THROWS_AS(load_checkpoint((dir / "v2.ppnx").string()),
                  UnsupportedVersionError);

  std::vector<unsigned char> truncated(bytes.begin(), bytes.begin() + 64);
  spit(dir / "short.ppnx", truncated);
  CHECK_THROWS_AS(load_checkpoint((dir / "short.ppnx").string()),
                  CorruptCheckpointError);
}

TEST_CASE("prototype edits change only the prototype span of the file") {
  fs::path dir = temp_dir("ckpt_span");
  ProtoPNetModel model = build_model(tiny_config(), 14);
  save_checkpoint(model, (dir / "a.ppnx").string());

  ProtoPNetModel moved = model;
  for (Tensor& p : moved.prototypes) {
    for (double& v : p.values) v = 0.25;
  }
  save_checkpoint(moved, (dir / "b.ppnx").string());

  const std::vector<unsigned char> a = slurp(dir / "a.ppnx");
  const std::vector<unsigned char> b = slurp(dir / "b.ppnx");
  REQUIRE(a.size() == b.size());

  // Identical until the prototype arrays begin; the trailing checksum and
  // the prototype payloads are the only differing spans. Locate the span
  // from the format: prototypes sit between the backbone filters and the
  // allocation array.
  std::size_t first_diff = 0;
  while (first_diff < a.size() && a[first_diff] == b[first_diff]) ++first_diff;
  std::size_t last_diff = a.size();
  while (last_diff > 0 && a[last_diff - 1] == b[last_diff - 1]) --last_diff;
  REQUIRE(first_diff < last_diff);

  // Nothing before the prototypes differs: the backbone span is identical.
  // Compute where the prototype section starts.
  std::size_t conv_bytes = 0;
  for (const Tensor& f : model.conv_filters) {
    conv_bytes += 4 + 4 * f.shape.size() + 8 * f.values.size();
  }
  // Header: magic+version (8) + config block.
  const ModelConfig& cfg = model.config;
  const std::size_t config_bytes = 4 * (3 + 1 + 5 * cfg.blocks.size() + 4 +
                                        cfg.prototypes_per_class.size() + 1) + 8;
  const std::size_t proto_start = 8 + config_bytes + conv_bytes;
  std::size_t proto_bytes = 0;
  for (const Tensor& p : model.prototypes) {
    proto_bytes += 4 + 4 * p.shape.size() + 8 * p.values.size();
  }
  CHECK(first_diff >= proto_start);
  const bool in_proto_span = last_diff <= proto_start + proto_bytes;
  const bool is_checksum = last_diff > a.size() - 5;
  CHECK((in_proto_span || is_checksum));
  // The bytes between the prototype span and the checksum are identical.
  for (std::size_t i = proto_start + proto_bytes; i + 4 < a.size(); ++i) {
    CHECK(a[i] == b[i]);
  }
}
