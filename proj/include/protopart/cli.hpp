#pragma once

#include <string>
#include <vector>

#include "protopart/model.hpp"
#include "protopart/training.hpp"

namespace protopart {

// Model and training settings read from a line-oriented key=value file.
// Blank lines and lines starting with '#' are skipped; unknown keys are
// rejected rather than ignored. Recognized keys mirror the config structs:
//   model:  image_h image_w image_c addon_channels proto_h proto_w epsilon
//           block=<channels>,<kernel>,<stride>,<padding>,<0|1>  (repeatable)
//           prototypes_per_class=<m0>,<m1>,...   or   per_class=<m'>
//   train:  lambda_cluster lambda_separation lambda_l1 lr_backbone
//           lr_prototypes momentum batch_size stage1_epochs stage3_epochs
//           cycles workers seed
struct RunSpec {
  ModelConfig model;
  TrainConfig train;
  int per_class = 0;              // uniform prototype count; 0 when unset
  bool has_image_extents = false; // image_h/image_w/image_c were given
};

RunSpec parse_run_spec(const std::string& text);

// Dispatches argv (without the program name) to a subcommand. Returns 0 on
// success, 1 on a domain error (message on standard error), 2 on a usage
// error such as an unknown flag or subcommand.
int run_cli(const std::vector<std::string>& args);

}  // namespace protopart
