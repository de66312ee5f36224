#pragma once

#include <span>
#include <string>
#include <vector>

#include "protopart/data_io.hpp"
#include "protopart/model.hpp"
#include "protopart/tensor.hpp"

namespace protopart {

struct ProjectionRecord {
  int prototype = 0;          // j
  int class_id = 0;           // class the prototype belongs to
  Tensor before;              // value prior to projection
  Tensor after;               // value after projection, equals the source patch
  int image = 0;              // source training-image index
  int row = 0;                // patch anchor within the latent map
  int col = 0;
  double move_distance = 0.0; // L2 norm of (after - before)
};

// Replaces every prototype with its nearest latent patch among training
// images of its own class. Ties break lexicographically by (image index,
// row, column). One record per prototype, in prototype order.
std::vector<ProjectionRecord> project_prototypes(ProtoPNetModel& model,
                                                 const Dataset& dataset);

// theta = min(sqrt(1+delta) - 1, 1 - 1/sqrt(2-delta)) and
// delta_max = m' * ln((1+delta) * (2-delta)). Natural log throughout.
struct TheoremConstants {
  double theta = 0.0;
  double delta_max = 0.0;
};
TheoremConstants theorem_constants(double delta, int m_prime);

// Outcome of checking the projection-stability bound on one input. The
// logit columns are computed under the substituted 1/0 weight pattern; the
// *_true columns use the model's actual last layer and are informational.
struct TheoremReport {
  int image_id = -1;
  int correct_class = 0;   // argmax pre-projection logit under 1/0 weights
  double delta = 0.0;
  double theta = 0.0;
  int m_prime = 0;
  double delta_max = 0.0;
  bool a1 = false;  // nearest patch unchanged per prototype
  bool a2a = false; // incorrect-class moves within theta * dist - sqrt(eps)
  bool a2b = false; // correct-class moves within (sqrt(1+delta)-1) * dist, dist <= sqrt(1-delta)
  bool a3 = false;  // uniform prototype count per class
  bool a4 = false;  // 1/0 weight pattern in effect
  std::vector<double> logits_before;
  std::vector<double> logits_after;
  std::vector<double> logit_change;       // after - before
  std::vector<double> logits_before_true;
  std::vector<double> logits_after_true;
  bool margin_ok = false;            // pre-projection top-2 gap >= 2 * delta_max
  bool prediction_unchanged = false;
  std::string verdict;               // bound_holds | assumptions_unmet | bound_violated

  bool assumptions_hold() const { return a1 && a2a && a2b && a3 && a4; }
};

// Core check on an explicit latent map and prototype banks; the building
// block for both the model-level verifier and constructed test instances.
TheoremReport verify_projection_theorem_latent(
    const Tensor& z, std::span<const Tensor> prototypes_before,
    std::span<const Tensor> prototypes_after, std::span<const int> allocation,
    int class_count, double eps, double delta);

// Model-level wrapper: checks the two models agree on everything except
// the prototype bank, runs the shared backbone on x, and delegates to the
// latent-level check.
TheoremReport verify_projection_theorem(const ProtoPNetModel& before,
                                        const ProtoPNetModel& after,
                                        const Tensor& x, double delta);

// key=value lines, one assumption flag per line.
std::string serialize_report(const TheoremReport& report);

}  // namespace protopart
