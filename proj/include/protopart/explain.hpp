#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "protopart/data_io.hpp"
#include "protopart/model.hpp"
#include "protopart/tensor.hpp"

namespace protopart {

// Minimal axis-aligned pixel rectangle, inclusive top/left and exclusive
// bottom/right, satisfying 0 <= top < bottom <= H and 0 <= left < right <= W.
struct PatchBox {
  int top = 0;
  int left = 0;
  int bottom = 0;
  int right = 0;
  int image_id = -1;        // set by callers that know the source image
  double percentile = 95.0; // threshold rule used to cut the box
};

// One row of the reasoning table: how strongly prototype j fired on the
// input and what that contributes to the predicted class.
struct PrototypeEntry {
  int prototype = 0;
  int class_id = 0;       // class the prototype belongs to
  double score = 0.0;     // similarity at the nearest patch
  double weight = 0.0;    // last-layer weight from j to the predicted class
  double points = 0.0;    // score * weight
  Tensor activation_map;  // similarity upsampled to input resolution
  PatchBox box;
};

// Faithful decomposition of one prediction: points[k][j] is prototype j's
// contribution to the class-k logit, so every row of `points` sums to the
// corresponding logit exactly.
struct Explanation {
  int image_id = -1;
  int predicted = 0;
  std::vector<double> logits;               // from the forward pass
  std::vector<std::vector<double>> points;  // class_count x prototype_count
  std::vector<double> class_points;         // row sums of `points`
  std::vector<PrototypeEntry> entries;      // one per prototype
};

struct NearestPrototype {
  int prototype = 0;
  int class_id = 0;
  double score = 0.0;
  PatchBox box;
};

struct NearestPatch {
  int image = 0;
  int row = 0;
  int col = 0;
  int class_id = 0;
  double distance = 0.0;  // squared distance to the prototype
};

struct PruneEntry {
  int prototype = 0;
  int class_id = 0;
  std::vector<NearestPatch> nearest;  // the Z nearest training patches
  int own_count = 0;                  // how many of them share the class
  bool pruned = false;
};

struct PruneReport {
  std::vector<PruneEntry> entries;
  int before = 0;
  int after = 0;
  // Classes whose prototypes were all marked prunable; the mark is undone
  // for them so no class ends up empty.
  std::vector<int> protected_classes;
};

// Bilinear interpolation of a rank-2 map onto a larger grid, corners
// pinned to corners. Target extents must be at least the source extents.
Tensor upsample_map(const Tensor& map, int target_h, int target_w);

// Smallest rectangle covering every pixel whose value reaches the given
// percentile of the map. The threshold is the ascending-order value of
// rank ceil(p/100 * N); ties at the threshold are included.
PatchBox extract_patch_box(const Tensor& map, double percentile = 95.0);

// Runs the model on x and decomposes the logits into per-prototype
// contributions with upsampled activation maps and patch boxes.
Explanation explain_image(const ProtoPNetModel& model, const Tensor& x,
                          double percentile = 95.0);

// One text row per prototype (`proto_id class score weight points
// box=(t,l,b,r)`), then one total per class.
std::string serialize_explanation(const Explanation& explanation);

// Prototypes ranked by descending similarity on x; top_n must be between
// 1 and the prototype count.
std::vector<NearestPrototype> nearest_prototypes_to_image(
    const ProtoPNetModel& model, const Tensor& x, int top_n);

// Training patches ranked by ascending squared distance to prototype j;
// ties keep (image, row, column) order.
std::vector<NearestPatch> nearest_patches_to_prototype(
    const ProtoPNetModel& model, const Dataset& dataset, int j, int top_n);

// Drops every prototype whose z nearest training patches contain fewer
// than tau of its own class, except that a class is never emptied. The
// returned model has the surviving prototypes and last-layer columns.
std::pair<ProtoPNetModel, PruneReport> prune_prototypes(
    const ProtoPNetModel& model, const Dataset& dataset, int z, int tau);

// Element-wise sum of each model's logits on x. Models must agree on the
// class count and input extents.
std::vector<double> ensemble_logits(std::span<const ProtoPNetModel> models,
                                    const Tensor& x);

// Min-max normalizes the map, colors it through a fixed 256-entry
// blue-to-red table, and alpha-blends it at 0.5 over the image. The map
// must already be at image resolution; the result is H x W x 3.
Tensor render_heatmap(const Tensor& image, const Tensor& map);

}  // namespace protopart
