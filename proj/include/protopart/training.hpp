#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "protopart/data_io.hpp"
#include "protopart/model.hpp"
#include "protopart/tensor.hpp"

namespace protopart {

struct TrainConfig {
  double lambda_cluster = 0.8;     // weight on the cluster cost
  double lambda_separation = 0.08; // weight on the separation cost
  double lambda_l1 = 1e-4;         // off-class last-layer penalty
  double lr_backbone = 1e-2;
  double lr_prototypes = 3e-3;
  double momentum = 0.9;
  int batch_size = 32;
  int stage1_epochs = 10;
  int stage3_epochs = 20;
  int cycles = 2;
  int workers = 1;                 // sample-parallel fan-out per batch
  unsigned int seed = 0;           // epoch shuffling
};

void validate_train_config(const TrainConfig& config);

// One entry per completed epoch in every array.
struct StageReport {
  std::vector<double> crsent;
  std::vector<double> clst;
  std::vector<double> sep;
  std::vector<double> total;
  std::vector<double> accuracy;
  double seconds = 0.0;
};

// `epoch=<n> crsent=<v> clst=<v> sep=<v> total=<v> acc=<v>`, 1-based n.
std::string format_epoch_line(int epoch, double crsent, double clst, double sep,
                              double total, double accuracy);
void print_report(const StageReport& report, std::ostream& out);

// Mean over the batch of the smallest squared distance from any own-class
// prototype to any latent patch. Always >= 0.
double cluster_cost(std::span<const Tensor> latents, std::span<const int> labels,
                    const ProtoPNetModel& model);

// Negative mean of the smallest off-class prototype-to-patch squared
// distance. Always <= 0. Requires at least two classes.
double separation_cost(std::span<const Tensor> latents,
                       std::span<const int> labels,
                       const ProtoPNetModel& model);

// Mean cross-entropy + lambda_cluster * Clst + lambda_separation * Sep over
// the given images. Reference (untracked) evaluation of the stage-1
// objective.
double joint_objective(std::span<const Tensor> images,
                       std::span<const int> labels,
                       const ProtoPNetModel& model, const TrainConfig& config);

// Gradients of the stage-1 batch objective for every backbone filter and
// prototype, evaluated sample-by-sample on private tapes and reduced in
// sample order (bitwise reproducible for any worker count). Also reports
// the batch's objective pieces and correct-prediction count.
struct BatchGradients {
  std::vector<std::vector<double>> conv;       // one buffer per filter
  std::vector<std::vector<double>> prototypes; // one buffer per prototype
  double crsent_sum = 0.0;   // per-sample sums, not yet divided by n
  double clst_sum = 0.0;
  double sep_sum = 0.0;      // smallest off-class distances; Sep = -mean
  int correct = 0;
};
BatchGradients batch_gradients(const ProtoPNetModel& model,
                               std::span<const Tensor> images,
                               std::span<const int> labels,
                               const TrainConfig& config);

// Minibatch SGD with momentum on the backbone and prototypes; the last
// layer is never touched. Throws DivergenceError when the objective stops
// being finite.
StageReport stage1_sgd(ProtoPNetModel& model, const Dataset& dataset,
                       const TrainConfig& config);

// Full-batch proximal gradient descent on the last layer only, over the
// convex objective mean CrsEnt + lambda_l1 * sum |off-class weights|.
// Backbone and prototypes are read-only; similarity scores are precomputed
// once. The step size 1 / (0.5 * max_i |s_i|^2) guarantees a non-increasing
// objective.
StageReport stage3_convex_last_layer(ProtoPNetModel& model,
                                     const Dataset& dataset,
                                     const TrainConfig& config);

// config.cycles repetitions of stage 1, prototype projection, stage 3.
// Returns one report per executed stage in order.
std::vector<StageReport> train_full(ProtoPNetModel& model,
                                    const Dataset& dataset,
                                    const TrainConfig& config);

// Fraction of images whose argmax logit equals the label.
double accuracy(const ProtoPNetModel& model, const Dataset& dataset);

}  // namespace protopart
