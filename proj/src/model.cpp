#include "protopart/model.hpp"

#include <cmath>
#include <random>
#include <string>

namespace protopart {

int ModelConfig::total_prototypes() const {
  int m = 0;
  for (int mk : prototypes_per_class) m += mk;
  return m;
}

ModelConfig with_uniform_prototypes(ModelConfig config, int per_class) {
  config.prototypes_per_class.assign(config.class_count, per_class);
  return config;
}

std::pair<int, int> latent_extent(const ModelConfig& config) {
  int h = config.image_h, w = config.image_w;
  for (const ConvBlockSpec& b : config.blocks) {
    if (b.channels < 1 || b.kernel < 1 || b.stride < 1 || b.padding < 0) {
      throw ConfigError("conv block with non-positive channels, kernel, or stride");
    }
    h = (h + 2 * b.padding - b.kernel) / b.stride + 1;
    w = (w + 2 * b.padding - b.kernel) / b.stride + 1;
    if (b.pool) {
      h = (h - 2) / 2 + 1;
      w = (w - 2) / 2 + 1;
    }
    if (h < 1 || w < 1) {
      throw ConfigError("backbone collapses the image below 1x1");
    }
  }
  return {h, w};
}

void validate_config(const ModelConfig& config) {
  if (config.image_h < 1 || config.image_w < 1 || config.image_c < 1) {
    throw ConfigError("non-positive input size");
  }
  if (config.blocks.empty()) throw ConfigError("backbone needs at least one conv block");
  if (config.addon_channels < 1) throw ConfigError("add-on channel count must be >= 1");
  if (config.class_count < 1) throw ConfigError("class count must be >= 1");
  if (static_cast<int>(config.prototypes_per_class.size()) != config.class_count) {
    throw ConfigError("prototypes_per_class must list one count per class");
  }
  for (int mk : config.prototypes_per_class) {
    if (mk < 1) throw ConfigError("every class needs at least one prototype");
  }
  if (!(config.epsilon > 0.0 && config.epsilon < 1.0)) {
    throw ConfigError("epsilon must lie in (0,1)");
  }
  const auto [h, w] = latent_extent(config);
  if (config.proto_h < 1 || config.proto_w < 1 || config.proto_h > h ||
      config.proto_w > w) {
    throw ConfigError("prototype extent " + std::to_string(config.proto_h) +
                      "x" + std::to_string(config.proto_w) +
                      " does not fit the " + std::to_string(h) + "x" +
                      std::to_string(w) + " latent map");
  }
}

double prototype_activation(double d2, double eps) {
  if (d2 < 0.0) throw ArgumentError("squared distance must be >= 0");
  if (!(eps > 0.0 && eps < 1.0)) throw ArgumentError("epsilon must lie in (0,1)");
  return std::log((d2 + 1.0) / (d2 + eps));
}

Tensor init_last_layer(std::span<const int> allocation, int class_count) {
  const int m = static_cast<int>(allocation.size());
  if (m < 1) throw ArgumentError("empty prototype allocation");
  Tensor w = Tensor::zeros({class_count, m});
  for (int j = 0; j < m; ++j) {
    if (allocation[j] < 0 || allocation[j] >= class_count) {
      throw ArgumentError("allocation entry out of class range");
    }
    for (int k = 0; k < class_count; ++k) {
      w.values[static_cast<std::size_t>(k) * m + j] =
          allocation[j] == k ? 1.0 : -0.5;
    }
  }
  return w;
}

ProtoPNetModel build_model(const ModelConfig& config, unsigned int seed) {
  validate_config(config);
  std::mt19937 rng(seed);

  ProtoPNetModel model;
  model.config = config;
  model.seed = seed;

  int cin = config.image_c;
  for (const ConvBlockSpec& b : config.blocks) {
    Tensor f = Tensor::zeros({b.kernel, b.kernel, cin, b.channels});
    const double fan_in = static_cast<double>(b.kernel) * b.kernel * cin;
    std::uniform_real_distribution<double> dist(-std::sqrt(6.0 / fan_in),
                                                std::sqrt(6.0 / fan_in));
    for (double& v : f.values) v = dist(rng);
    model.conv_filters.push_back(std::move(f));
    cin = b.channels;
  }
  const int d = config.addon_channels;
  for (int layer = 0; layer < 2; ++layer) {
    const int cout = d;
    Tensor f = Tensor::zeros({1, 1, cin, cout});
    std::uniform_real_distribution<double> dist(-std::sqrt(6.0 / cin),
                                                std::sqrt(6.0 / cin));
    for (double& v : f.values) v = dist(rng);
    model.conv_filters.push_back(std::move(f));
    cin = cout;
  }

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int k = 0; k < config.class_count; ++k) {
    for (int j = 0; j < config.prototypes_per_class[k]; ++j) {
      Tensor p = Tensor::zeros({config.proto_h, config.proto_w, d});
      for (double& v : p.values) v = unit(rng);
      model.prototypes.push_back(std::move(p));
      model.allocation.push_back(k);
    }
  }

  model.last_layer = init_last_layer(model.allocation, config.class_count);
  return model;
}

Tensor backbone_forward(const Tensor& x, std::span<const Tensor> filters,
                        const ModelConfig& config) {
  if (filters.size() != config.blocks.size() + 2) {
    throw ArgumentError("filter count does not match the backbone spec");
  }
  Tensor h = x;
  for (std::size_t i = 0; i < config.blocks.size(); ++i) {
    const ConvBlockSpec& b = config.blocks[i];
    h = elementwise(conv2d(h, filters[i], b.stride, b.padding),
                    Elementwise::kRelu);
    if (b.pool) h = max_pool_window(h, 2, 2);
  }
  h = elementwise(conv2d(h, filters[config.blocks.size()], 1, 0),
                  Elementwise::kRelu);
  h = elementwise(conv2d(h, filters[config.blocks.size() + 1], 1, 0),
                  Elementwise::kSigmoid);
  return h;
}

PrototypeForward prototype_forward(const Tensor& z,
                                   std::span<const Tensor> prototypes,
                                   double eps) {
  PrototypeForward out;
  std::vector<Tensor> mins;
  mins.reserve(prototypes.size());
  for (const Tensor& p : prototypes) {
    Tensor map = l2_distance_map(z, p);
    mins.push_back(reduce_min_global(map));
    out.distance_maps.push_back(std::move(map));
  }
  out.min_distances = concat_scalars(mins);
  out.scores = log_distance_ratio(out.min_distances, eps);
  return out;
}

std::vector<int> own_prototype_indices(std::span<const int> allocation,
                                       int label) {
  std::vector<int> idx;
  for (std::size_t j = 0; j < allocation.size(); ++j) {
    if (allocation[j] == label) idx.push_back(static_cast<int>(j));
  }
  return idx;
}

std::vector<int> off_prototype_indices(std::span<const int> allocation,
                                       int label) {
  std::vector<int> idx;
  for (std::size_t j = 0; j < allocation.size(); ++j) {
    if (allocation[j] != label) idx.push_back(static_cast<int>(j));
  }
  return idx;
}

ModelOutput forward_graph(const Tensor& x, std::span<const Tensor> conv_filters,
                          std::span<const Tensor> prototypes,
                          const Tensor& last_layer, const ModelConfig& config) {
  if (x.shape != Shape{config.image_h, config.image_w, config.image_c}) {
    throw ShapeError("input image does not match the configured size");
  }
  ModelOutput out;
  out.latent = backbone_forward(x, conv_filters, config);
  PrototypeForward pf =
      prototype_forward(out.latent, prototypes, config.epsilon);
  out.scores = std::move(pf.scores);
  out.min_distances = std::move(pf.min_distances);
  out.distance_maps = std::move(pf.distance_maps);
  out.logits = linear(out.scores, last_layer);
  return out;
}

ModelOutput model_forward(const Tensor& x, const ProtoPNetModel& model) {
  return forward_graph(x, model.conv_filters, model.prototypes,
                       model.last_layer, model.config);
}

int predicted_class(const Tensor& logits) {
  int best = 0;
  for (int k = 1; k < static_cast<int>(logits.size()); ++k) {
    if (logits.values[k] > logits.values[best]) best = k;
  }
  return best;
}

}  // namespace protopart
