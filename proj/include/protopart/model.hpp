#pragma once

#include <span>
#include <vector>

#include "protopart/tensor.hpp"

namespace protopart {

// One backbone stage: a square-kernel convolution followed by ReLU and,
// when pool is set, a 2x2 max pool of stride 2.
struct ConvBlockSpec {
  int channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 0;
  bool pool = false;
};

struct ModelConfig {
  int image_h = 32;
  int image_w = 32;
  int image_c = 3;
  std::vector<ConvBlockSpec> blocks;
  int addon_channels = 32;           // D: width of the two 1x1 add-on layers
  int proto_h = 1;                   // H1
  int proto_w = 1;                   // W1
  int class_count = 0;               // K
  std::vector<int> prototypes_per_class;  // m_k, one entry per class
  double epsilon = 1e-4;             // similarity transform constant

  int total_prototypes() const;      // m = sum of m_k
};

// Uniform m' prototypes for each of K classes.
ModelConfig with_uniform_prototypes(ModelConfig config, int per_class);

// Spatial size of the backbone output for this config: the conv blocks are
// applied in order, then the two 1x1 add-on layers (which keep H and W).
// Returns {H, W}.
std::pair<int, int> latent_extent(const ModelConfig& config);

// Throws ConfigError on violated invariants: a class without prototypes,
// epsilon outside (0,1), a prototype larger than the latent map, or a block
// chain that collapses below 1x1.
void validate_config(const ModelConfig& config);

// Full parameter set. conv_filters holds one tensor per conv block followed
// by the two 1x1 add-on layers, so its length is blocks.size() + 2.
// prototypes holds m tensors of shape H1 x W1 x D. allocation[j] is the
// class that prototype j belongs to. last_layer is K x m, bias-free.
struct ProtoPNetModel {
  ModelConfig config;
  std::vector<Tensor> conv_filters;
  std::vector<Tensor> prototypes;
  std::vector<int> allocation;
  Tensor last_layer;
  unsigned int seed = 0;  // seed the parameters were built from
};

struct ModelOutput {
  Tensor logits;                     // length K
  Tensor scores;                     // length m, similarity per prototype
  Tensor min_distances;              // length m, min distance-map entry per prototype
  std::vector<Tensor> distance_maps; // m maps, (H-H1+1) x (W-W1+1)
  Tensor latent;                     // H x W x D, values in (0,1)
};

// log((d2 + 1)/(d2 + eps)): strictly positive and strictly decreasing in
// d2 for 0 < eps < 1. Scalar convenience mirror of log_distance_ratio.
double prototype_activation(double d2, double eps);

// w_h[k][j] = 1 when allocation[j] == k, else -0.5.
Tensor init_last_layer(std::span<const int> allocation, int class_count);

// Deterministic construction from a seed: conv filters He-uniform,
// prototypes uniform on (0,1), last layer from init_last_layer.
ProtoPNetModel build_model(const ModelConfig& config, unsigned int seed);

// Backbone alone: conv blocks (ReLU, optional pool) then 1x1 add-on layers
// with ReLU and sigmoid. filters may be tracked (training) or not.
Tensor backbone_forward(const Tensor& x, std::span<const Tensor> filters,
                        const ModelConfig& config);

// Prototype layer on a latent map: distance map per prototype, score =
// activation at the minimum map entry (equal to the max over patches of the
// activation, by monotonicity).
struct PrototypeForward {
  Tensor scores;
  Tensor min_distances;
  std::vector<Tensor> distance_maps;
};
PrototypeForward prototype_forward(const Tensor& z,
                                   std::span<const Tensor> prototypes,
                                   double eps);

// Prototype indices allocated to `label` / to every other class.
std::vector<int> own_prototype_indices(std::span<const int> allocation, int label);
std::vector<int> off_prototype_indices(std::span<const int> allocation, int label);

// Assembles the graph from explicit parameter tensors; used directly by
// training with watched copies.
ModelOutput forward_graph(const Tensor& x, std::span<const Tensor> conv_filters,
                          std::span<const Tensor> prototypes,
                          const Tensor& last_layer, const ModelConfig& config);

// Untracked inference on the model's own parameters.
ModelOutput model_forward(const Tensor& x, const ProtoPNetModel& model);

// Index of the largest logit; ties break to the lowest class id.
int predicted_class(const Tensor& logits);

}  // namespace protopart
