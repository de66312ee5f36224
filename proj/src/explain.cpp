#include "protopart/explain.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <vector>

#include "protopart/errors.hpp"

namespace protopart {

namespace {

void check_rank2(const Tensor& map, const char* what) {
  if (map.rank() != 2) {
    throw ArgumentError(std::string(what) + " must be a rank-2 map");
  }
}

// Similarity transform applied to every entry of a distance map.
Tensor activation_map_from_distances(const Tensor& distances, double eps) {
  Tensor out = distances;
  out.tape = nullptr;
  out.node = -1;
  for (double& v : out.values) v = prototype_activation(v, eps);
  return out;
}

// 256 colors from blue through green to red, linear in the index.
const std::array<std::array<double, 3>, 256>& heat_table() {
  static const std::array<std::array<double, 3>, 256> table = [] {
    std::array<std::array<double, 3>, 256> t{};
    for (int i = 0; i < 256; ++i) {
      double f = i / 255.0;
      t[i] = {f, 1.0 - std::abs(2.0 * f - 1.0), 1.0 - f};
    }
    return t;
  }();
  return table;
}

void check_same_geometry(const ProtoPNetModel& a, const ProtoPNetModel& b) {
  if (a.config.class_count != b.config.class_count) {
    throw ArgumentError("ensemble models disagree on the class count");
  }
  if (a.config.image_h != b.config.image_h ||
      a.config.image_w != b.config.image_w ||
      a.config.image_c != b.config.image_c) {
    throw ArgumentError("ensemble models disagree on the input extents");
  }
}

}  // namespace

Tensor upsample_map(const Tensor& map, int target_h, int target_w) {
  check_rank2(map, "upsample input");
  const int sh = map.extent(0);
  const int sw = map.extent(1);
  if (target_h < sh || target_w < sw) {
    throw ArgumentError("upsample target extents must not shrink the map");
  }
  Tensor out = Tensor::zeros({target_h, target_w});
  for (int r = 0; r < target_h; ++r) {
    double sr = target_h == 1 ? 0.0 : r * (sh - 1.0) / (target_h - 1.0);
    int r0 = static_cast<int>(std::floor(sr));
    int r1 = std::min(r0 + 1, sh - 1);
    double fr = sr - r0;
    for (int c = 0; c < target_w; ++c) {
      double sc = target_w == 1 ? 0.0 : c * (sw - 1.0) / (target_w - 1.0);
      int c0 = static_cast<int>(std::floor(sc));
      int c1 = std::min(c0 + 1, sw - 1);
      double fc = sc - c0;
      double v00 = map.values[r0 * sw + c0];
      double v01 = map.values[r0 * sw + c1];
      double v10 = map.values[r1 * sw + c0];
      double v11 = map.values[r1 * sw + c1];
      out.values[r * target_w + c] = (1.0 - fr) * (1.0 - fc) * v00 +
                                     (1.0 - fr) * fc * v01 +
                                     fr * (1.0 - fc) * v10 + fr * fc * v11;
    }
  }
  return out;
}

PatchBox extract_patch_box(const Tensor& map, double percentile) {
  check_rank2(map, "patch box input");
  if (!(percentile > 0.0 && percentile < 100.0)) {
    throw ArgumentError("percentile must lie strictly between 0 and 100");
  }
  const int h = map.extent(0);
  const int w = map.extent(1);
  const int n = h * w;
  std::vector<double> sorted(map.values);
  std::sort(sorted.begin(), sorted.end());
  int rank = static_cast<int>(std::ceil(percentile / 100.0 * n));  // 1-based
  rank = std::min(std::max(rank, 1), n);
  const double threshold = sorted[rank - 1];

  PatchBox box;
  box.percentile = percentile;
  int top = h, left = w, bottom = -1, right = -1;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (map.values[r * w + c] >= threshold) {
        top = std::min(top, r);
        left = std::min(left, c);
        bottom = std::max(bottom, r);
        right = std::max(right, c);
      }
    }
  }
  box.top = top;
  box.left = left;
  box.bottom = bottom + 1;  // exclusive
  box.right = right + 1;
  return box;
}

Explanation explain_image(const ProtoPNetModel& model, const Tensor& x,
                          double percentile) {
  if (!(percentile > 0.0 && percentile < 100.0)) {
    throw ArgumentError("percentile must lie strictly between 0 and 100");
  }
  ModelOutput out = model_forward(x, model);
  const int k = model.config.class_count;
  const int m = model.config.total_prototypes();

  Explanation e;
  e.predicted = predicted_class(out.logits);
  e.logits = out.logits.values;
  e.points.assign(k, std::vector<double>(m, 0.0));
  e.class_points.assign(k, 0.0);
  for (int cls = 0; cls < k; ++cls) {
    double total = 0.0;
    for (int j = 0; j < m; ++j) {
      double p = model.last_layer.values[cls * m + j] * out.scores.values[j];
      e.points[cls][j] = p;
      total += p;
    }
    e.class_points[cls] = total;
  }

  e.entries.resize(m);
  for (int j = 0; j < m; ++j) {
    PrototypeEntry& entry = e.entries[j];
    entry.prototype = j;
    entry.class_id = model.allocation[j];
    entry.score = out.scores.values[j];
    entry.weight = model.last_layer.values[e.predicted * m + j];
    entry.points = e.points[e.predicted][j];
    Tensor act =
        activation_map_from_distances(out.distance_maps[j], model.config.epsilon);
    entry.activation_map =
        upsample_map(act, model.config.image_h, model.config.image_w);
    entry.box = extract_patch_box(entry.activation_map, percentile);
    entry.box.image_id = e.image_id;
  }
  return e;
}

std::string serialize_explanation(const Explanation& explanation) {
  std::ostringstream out;
  out.precision(6);
  out << "predicted=" << explanation.predicted << "\n";
  for (const PrototypeEntry& entry : explanation.entries) {
    out << entry.prototype << " " << entry.class_id << " " << entry.score
        << " " << entry.weight << " " << entry.points << " box=("
        << entry.box.top << "," << entry.box.left << "," << entry.box.bottom
        << "," << entry.box.right << ")\n";
  }
  for (std::size_t cls = 0; cls < explanation.class_points.size(); ++cls) {
    out << "total class=" << cls << " points=" << explanation.class_points[cls]
        << "\n";
  }
  return out.str();
}

std::vector<NearestPrototype> nearest_prototypes_to_image(
    const ProtoPNetModel& model, const Tensor& x, int top_n) {
  const int m = model.config.total_prototypes();
  if (top_n < 1 || top_n > m) {
    throw ArgumentError("top_n must lie between 1 and the prototype count");
  }
  ModelOutput out = model_forward(x, model);
  std::vector<int> order(m);
  for (int j = 0; j < m; ++j) order[j] = j;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return out.scores.values[a] > out.scores.values[b];
  });
  std::vector<NearestPrototype> result;
  result.reserve(top_n);
  for (int rank = 0; rank < top_n; ++rank) {
    int j = order[rank];
    NearestPrototype near;
    near.prototype = j;
    near.class_id = model.allocation[j];
    near.score = out.scores.values[j];
    Tensor act =
        activation_map_from_distances(out.distance_maps[j], model.config.epsilon);
    near.box = extract_patch_box(
        upsample_map(act, model.config.image_h, model.config.image_w));
    result.push_back(near);
  }
  return result;
}

std::vector<NearestPatch> nearest_patches_to_prototype(
    const ProtoPNetModel& model, const Dataset& dataset, int j, int top_n) {
  const int m = model.config.total_prototypes();
  if (j < 0 || j >= m) throw ArgumentError("prototype index out of range");
  if (dataset.size() == 0) throw DatasetError("dataset is empty");
  for (int label : dataset.labels) {
    if (label < 0 || label >= model.config.class_count) {
      throw DatasetError("dataset label outside the model's classes");
    }
  }
  const std::vector<Tensor> one(1, model.prototypes[j]);
  std::vector<NearestPatch> all;
  for (int i = 0; i < dataset.size(); ++i) {
    Tensor z = backbone_forward(dataset.images[i],
                                std::span<const Tensor>(model.conv_filters),
                                model.config);
    Tensor map = l2_distance_map(z, one[0]);
    const int oh = map.extent(0);
    const int ow = map.extent(1);
    for (int r = 0; r < oh; ++r) {
      for (int c = 0; c < ow; ++c) {
        all.push_back(NearestPatch{i, r, c, dataset.labels[i],
                                   map.values[r * ow + c]});
      }
    }
  }
  if (top_n < 1 || top_n > static_cast<int>(all.size())) {
    throw ArgumentError("top_n must lie between 1 and the patch count");
  }
  // Stable sort keeps the (image, row, column) scan order among ties.
  std::stable_sort(all.begin(), all.end(),
                   [](const NearestPatch& a, const NearestPatch& b) {
                     return a.distance < b.distance;
                   });
  all.resize(top_n);
  return all;
}

std::pair<ProtoPNetModel, PruneReport> prune_prototypes(
    const ProtoPNetModel& model, const Dataset& dataset, int z, int tau) {
  if (z < 1 || tau < 1 || tau > z) {
    throw ArgumentError("prune thresholds must satisfy 1 <= tau <= z");
  }
  const int m = model.config.total_prototypes();
  const int k = model.config.class_count;

  PruneReport report;
  report.before = m;
  report.entries.resize(m);
  for (int j = 0; j < m; ++j) {
    PruneEntry& entry = report.entries[j];
    entry.prototype = j;
    entry.class_id = model.allocation[j];
    entry.nearest = nearest_patches_to_prototype(model, dataset, j, z);
    entry.own_count = 0;
    for (const NearestPatch& patch : entry.nearest) {
      if (patch.class_id == entry.class_id) ++entry.own_count;
    }
    entry.pruned = entry.own_count < tau;
  }

  // Never empty a class: if every prototype of a class is marked, keep
  // them all and record the class as protected.
  for (int cls = 0; cls < k; ++cls) {
    bool any_survivor = false;
    for (const PruneEntry& entry : report.entries) {
      if (entry.class_id == cls && !entry.pruned) {
        any_survivor = true;
        break;
      }
    }
    if (!any_survivor) {
      report.protected_classes.push_back(cls);
      for (PruneEntry& entry : report.entries) {
        if (entry.class_id == cls) entry.pruned = false;
      }
    }
  }

  ProtoPNetModel reduced;
  reduced.config = model.config;
  reduced.conv_filters = model.conv_filters;
  reduced.seed = model.seed;
  std::vector<int> survivors;
  for (int j = 0; j < m; ++j) {
    if (!report.entries[j].pruned) survivors.push_back(j);
  }
  report.after = static_cast<int>(survivors.size());

  std::vector<int> per_class(k, 0);
  for (int j : survivors) {
    reduced.prototypes.push_back(model.prototypes[j]);
    reduced.allocation.push_back(model.allocation[j]);
    ++per_class[model.allocation[j]];
  }
  reduced.config.prototypes_per_class = per_class;

  const int m2 = report.after;
  reduced.last_layer = Tensor::zeros({k, m2});
  for (int cls = 0; cls < k; ++cls) {
    for (int idx = 0; idx < m2; ++idx) {
      reduced.last_layer.values[cls * m2 + idx] =
          model.last_layer.values[cls * m + survivors[idx]];
    }
  }
  validate_config(reduced.config);
  return {std::move(reduced), std::move(report)};
}

std::vector<double> ensemble_logits(std::span<const ProtoPNetModel> models,
                                    const Tensor& x) {
  if (models.empty()) throw ArgumentError("ensemble needs at least one model");
  for (const ProtoPNetModel& model : models) {
    check_same_geometry(models[0], model);
  }
  std::vector<double> total(models[0].config.class_count, 0.0);
  for (const ProtoPNetModel& model : models) {
    ModelOutput out = model_forward(x, model);
    for (std::size_t cls = 0; cls < total.size(); ++cls) {
      total[cls] += out.logits.values[cls];
    }
  }
  return total;
}

Tensor render_heatmap(const Tensor& image, const Tensor& map) {
  check_rank2(map, "heatmap input");
  if (image.rank() != 3) {
    throw ArgumentError("heatmap image must be H x W x C");
  }
  const int h = image.extent(0);
  const int w = image.extent(1);
  const int c = image.extent(2);
  if (c != 1 && c != 3) {
    throw ArgumentError("heatmap image must have 1 or 3 channels");
  }
  if (map.extent(0) != h || map.extent(1) != w) {
    throw ArgumentError("heatmap map extents must match the image");
  }
  double lo = map.values[0];
  double hi = map.values[0];
  for (double v : map.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double span = hi - lo;
  const auto& table = heat_table();
  Tensor out = Tensor::zeros({h, w, 3});
  for (int r = 0; r < h; ++r) {
    for (int col = 0; col < w; ++col) {
      double v = map.values[r * w + col];
      double f = span > 0.0 ? (v - lo) / span : 0.0;
      int idx = static_cast<int>(std::floor(f * 255.0 + 0.5));
      idx = std::min(std::max(idx, 0), 255);
      for (int ch = 0; ch < 3; ++ch) {
        double base = c == 1 ? image.values[(r * w + col) * 1]
                             : image.values[(r * w + col) * 3 + ch];
        out.values[(r * w + col) * 3 + ch] = 0.5 * base + 0.5 * table[idx][ch];
      }
    }
  }
  return out;
}

}  // namespace protopart
