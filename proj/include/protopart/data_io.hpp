#pragma once

#include <span>
#include <string>
#include <vector>

#include "protopart/model.hpp"
#include "protopart/tensor.hpp"

namespace protopart {

// Images are H x W x 3 tensors with values in [0,1], all sharing extents.
struct Dataset {
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::vector<std::string> class_names;
  std::string split;  // free-form tag, e.g. "train" or "test"

  int class_count() const { return static_cast<int>(class_names.size()); }
  int size() const { return static_cast<int>(images.size()); }
};

// Binary dataset container (little-endian): magic "PPDS", u32 version=1,
// u32 N, u32 K, u32 H, u32 W, then N records of (u32 label, H*W*3 RGB
// bytes row-major), then u32 CRC-32 of every preceding byte.
Dataset load_ppds(const std::string& path);
void save_ppds(const Dataset& dataset, const std::string& path);

// Directory with one subdirectory per class holding P6 PPM files. Classes
// and files are taken in lexicographic order, so indices are stable.
Dataset load_ppm_tree(const std::string& root);

// Dispatches on format name: "ppds" or "ppm-tree".
Dataset load_dataset(const std::string& path, const std::string& format);

// ---------------------------------------------------------------------------
// Offline augmentation
// ---------------------------------------------------------------------------

enum class AugmentOp { kFlip, kRotate, kCrop };

// Mirror across the vertical axis. Applying it twice restores the input.
Tensor flip_horizontal(const Tensor& image);

// Rotation about the image center with nearest-neighbor sampling; source
// coordinates outside the image clamp to the border (edge padding).
Tensor rotate_nearest(const Tensor& image, double degrees);

// Crops a window of 7/8 the original extent anchored at (off_r, off_c) and
// rescales it back to the full size with nearest-neighbor sampling.
Tensor crop_resize(const Tensor& image, int off_r, int off_c);

// Appends `copies` transformed variants per image, each produced by one op
// drawn uniformly from `ops` with parameters drawn from `seed` (rotation
// angle in [-15, +15] degrees, crop offset uniform over valid anchors).
// The original entries are never modified. Deterministic given seed.
Dataset augment_offline(const Dataset& dataset, std::span<const AugmentOp> ops,
                        int copies, unsigned int seed);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

// Binary model container (little-endian): magic "PPNX", u32 version=1,
// then the config block
//   u32 image_h, image_w, image_c
//   u32 block_count, then per block u32 channels, kernel, stride, padding,
//       pool (0/1)
//   u32 addon_channels, proto_h, proto_w, class_count
//   u32 prototypes_per_class[class_count]
//   u32 seed
//   f64 epsilon
// then each parameter array as (u32 rank, u32 extents..., f64 payload
// row-major) in the order backbone filters, prototypes, allocation (u32
// payload instead of f64), last layer; then u32 CRC-32 of every preceding
// byte.
void save_checkpoint(const ProtoPNetModel& model, const std::string& path);
ProtoPNetModel load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// PPM images
// ---------------------------------------------------------------------------

// P6, maxval 255. Values are clamped to [0,1] and rounded half-up.
void write_ppm(const Tensor& image, const std::string& path);
Tensor read_ppm(const std::string& path);

}  // namespace protopart
