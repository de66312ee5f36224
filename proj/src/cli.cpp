#include "protopart/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "protopart/data_io.hpp"
#include "protopart/errors.hpp"
#include "protopart/explain.hpp"
#include "protopart/projection.hpp"

namespace protopart {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double out;
  try {
    out = std::stod(value, &used);
  } catch (const std::exception&) {
    throw ConfigError("config value for '" + key + "' is not a number: " + value);
  }
  if (used != value.size()) {
    throw ConfigError("config value for '" + key + "' is not a number: " + value);
  }
  return out;
}

int parse_int(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  int out;
  try {
    out = std::stoi(value, &used);
  } catch (const std::exception&) {
    throw ConfigError("config value for '" + key + "' is not an integer: " + value);
  }
  if (used != value.size()) {
    throw ConfigError("config value for '" + key + "' is not an integer: " + value);
  }
  return out;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  std::istringstream in(value);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_int(key, trim(item)));
  if (out.empty()) throw ConfigError("config value for '" + key + "' is empty");
  return out;
}

ConvBlockSpec parse_block(const std::string& value) {
  std::vector<int> parts = parse_int_list("block", value);
  if (parts.size() != 5) {
    throw ConfigError(
        "block must be <channels>,<kernel>,<stride>,<padding>,<0|1>: " + value);
  }
  if (parts[4] != 0 && parts[4] != 1) {
    throw ConfigError("block pool field must be 0 or 1: " + value);
  }
  return ConvBlockSpec{parts[0], parts[1], parts[2], parts[3], parts[4] == 1};
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open config file: " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

std::string format_accuracy_line(double accuracy_value, int n) {
  std::ostringstream out;
  out.precision(6);
  out << "accuracy=" << accuracy_value << " n=" << n;
  return out.str();
}

// Index of the largest entry, lowest index on ties.
int argmax_index(const std::vector<double>& values) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(values.size()); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::string padded_id(int j) {
  std::string s = std::to_string(j);
  while (s.size() < 3) s.insert(s.begin(), '0');
  return s;
}

// Fills image extents from the dataset (or checks them when the config
// pinned its own), resolves the prototype allocation, and validates.
ModelConfig resolve_model_config(RunSpec spec, const Dataset& data) {
  ModelConfig cfg = spec.model;
  if (data.size() == 0) throw DatasetError("dataset is empty");
  const Tensor& first = data.images[0];
  if (spec.has_image_extents) {
    if (cfg.image_h != first.extent(0) || cfg.image_w != first.extent(1) ||
        cfg.image_c != first.extent(2)) {
      throw ConfigError("config image extents disagree with the dataset");
    }
  } else {
    cfg.image_h = first.extent(0);
    cfg.image_w = first.extent(1);
    cfg.image_c = first.extent(2);
  }
  cfg.class_count = data.class_count();
  if (!cfg.prototypes_per_class.empty()) {
    if (static_cast<int>(cfg.prototypes_per_class.size()) != cfg.class_count) {
      throw ConfigError("prototypes_per_class length must equal the class count");
    }
  } else {
    const int per = spec.per_class > 0 ? spec.per_class : 3;
    cfg = with_uniform_prototypes(cfg, per);
  }
  validate_config(cfg);
  return cfg;
}

void check_labels_fit(const ProtoPNetModel& model, const Dataset& data) {
  for (int label : data.labels) {
    if (label < 0 || label >= model.config.class_count) {
      throw DatasetError("dataset label outside the model's classes");
    }
  }
}

void check_image_extents(const ProtoPNetModel& model, const Tensor& image) {
  if (image.rank() != 3 || image.extent(0) != model.config.image_h ||
      image.extent(1) != model.config.image_w ||
      image.extent(2) != model.config.image_c) {
    throw ArgumentError("image extents do not match the model input");
  }
}

Tensor crop_pixels(const Tensor& image, const PatchBox& box) {
  const int w = image.extent(1);
  const int c = image.extent(2);
  const int bh = box.bottom - box.top;
  const int bw = box.right - box.left;
  Tensor out = Tensor::zeros({bh, bw, c});
  for (int r = 0; r < bh; ++r) {
    for (int col = 0; col < bw; ++col) {
      for (int ch = 0; ch < c; ++ch) {
        out.values[(r * bw + col) * c + ch] =
            image.values[((box.top + r) * w + (box.left + col)) * c + ch];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommand bodies. Each receives fully parsed flags and may throw domain
// errors; run_cli translates them into exit codes.
// ---------------------------------------------------------------------------

struct CommonFlags {
  std::string data_path;
  std::string format = "ppds";
};

int cmd_train(const CommonFlags& common, const std::string& config_path,
              const std::string& out_path, unsigned int seed, bool seed_given,
              int workers, bool workers_given) {
  Dataset data = load_dataset(common.data_path, common.format);
  RunSpec spec = config_path.empty() ? RunSpec{}
                                     : parse_run_spec(read_text_file(config_path));
  if (seed_given) spec.train.seed = seed;
  if (workers_given) spec.train.workers = workers;
  ModelConfig cfg = resolve_model_config(spec, data);
  validate_train_config(spec.train);
  ProtoPNetModel model = build_model(cfg, spec.train.seed);
  // train_full runs stage 1, projection, stage 3 per cycle; projection has
  // no epochs, so two reports come back per cycle.
  std::vector<StageReport> reports = train_full(model, data, spec.train);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    std::cout << "cycle=" << i / 2 + 1
              << " stage=" << (i % 2 == 0 ? "stage1" : "stage3") << "\n";
    print_report(reports[i], std::cout);
  }
  save_checkpoint(model, out_path);
  std::cout << "saved=" << out_path << "\n";
  return 0;
}

int cmd_push(const CommonFlags& common, const std::string& ckpt,
             const std::string& out_path, const std::string& records_path) {
  ProtoPNetModel model = load_checkpoint(ckpt);
  Dataset data = load_dataset(common.data_path, common.format);
  check_labels_fit(model, data);
  std::vector<ProjectionRecord> records = project_prototypes(model, data);
  save_checkpoint(model, out_path);
  std::ostringstream out;
  out.precision(6);
  for (const ProjectionRecord& rec : records) {
    out << "prototype=" << rec.prototype << " class=" << rec.class_id
        << " image=" << rec.image << " row=" << rec.row << " col=" << rec.col
        << " move=" << rec.move_distance << "\n";
  }
  if (records_path.empty()) {
    std::cout << out.str();
  } else {
    std::ofstream file(records_path, std::ios::binary);
    if (!file) throw ArgumentError("cannot write records file: " + records_path);
    file << out.str();
  }
  std::cout << "saved=" << out_path << "\n";
  return 0;
}

int cmd_last_layer(const CommonFlags& common, const std::string& ckpt,
                   const std::string& config_path, const std::string& out_path) {
  ProtoPNetModel model = load_checkpoint(ckpt);
  Dataset data = load_dataset(common.data_path, common.format);
  check_labels_fit(model, data);
  RunSpec spec = config_path.empty() ? RunSpec{}
                                     : parse_run_spec(read_text_file(config_path));
  validate_train_config(spec.train);
  StageReport report = stage3_convex_last_layer(model, data, spec.train);
  print_report(report, std::cout);
  save_checkpoint(model, out_path);
  std::cout << "saved=" << out_path << "\n";
  return 0;
}

int cmd_eval(const CommonFlags& common, const std::string& ckpt) {
  ProtoPNetModel model = load_checkpoint(ckpt);
  Dataset data = load_dataset(common.data_path, common.format);
  check_labels_fit(model, data);
  std::cout << format_accuracy_line(accuracy(model, data), data.size()) << "\n";
  return 0;
}

int cmd_explain(const std::string& ckpt, const std::string& image_path,
                const std::string& out_dir, double percentile) {
  ProtoPNetModel model = load_checkpoint(ckpt);
  Tensor image = read_ppm(image_path);
  check_image_extents(model, image);
  Explanation e = explain_image(model, image, percentile);
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  for (const PrototypeEntry& entry : e.entries) {
    Tensor heat = render_heatmap(image, entry.activation_map);
    write_ppm(heat, (dir / ("heatmap_" + padded_id(entry.prototype) + ".ppm")).string());
    Tensor patch = crop_pixels(image, entry.box);
    write_ppm(patch, (dir / ("patch_" + padded_id(entry.prototype) + ".ppm")).string());
  }
  const std::string report = serialize_explanation(e);
  std::ofstream file(dir / "report.txt", std::ios::binary);
  if (!file) throw ArgumentError("cannot write report under: " + out_dir);
  file << report;
  std::cout << report;
  return 0;
}

int cmd_nearest(const CommonFlags& common, const std::string& ckpt,
                int prototype, bool prototype_given,
                const std::string& image_path, int top) {
  ProtoPNetModel model = load_checkpoint(ckpt);
  std::ostringstream out;
  out.precision(6);
  if (prototype_given) {
    Dataset data = load_dataset(common.data_path, common.format);
    check_labels_fit(model, data);
    auto ranked = nearest_patches_to_prototype(model, data, prototype, top);
    for (std::size_t t = 0; t < ranked.size(); ++t) {
      out << "rank=" << t + 1 << " image=" << ranked[t].image
          << " row=" << ranked[t].row << " col=" << ranked[t].col
          << " class=" << ranked[t].class_id
          << " distance=" << ranked[t].distance << "\n";
    }
  } else {
    Tensor image = read_ppm(image_path);
    check_image_extents(model, image);
    auto ranked = nearest_prototypes_to_image(model, image, top);
    for (std::size_t t = 0; t < ranked.size(); ++t) {
      out << "rank=" << t + 1 << " prototype=" << ranked[t].prototype
          << " class=" << ranked[t].class_id << " score=" << ranked[t].score
          << " box=(" << ranked[t].box.top << "," << ranked[t].box.left << ","
          << ranked[t].box.bottom << "," << ranked[t].box.right << ")\n";
    }
  }
  std::cout << out.str();
  return 0;
}

int cmd_prune(const CommonFlags& common, const std::string& ckpt,
              const std::string& out_path, int z, int tau,
              const std::string& report_path) {
  ProtoPNetModel model = load_checkpoint(ckpt);
  Dataset data = load_dataset(common.data_path, common.format);
  check_labels_fit(model, data);
  auto [reduced, report] = prune_prototypes(model, data, z, tau);
  save_checkpoint(reduced, out_path);
  std::ostringstream out;
  out.precision(6);
  for (const PruneEntry& entry : report.entries) {
    out << "prototype=" << entry.prototype << " class=" << entry.class_id
        << " own=" << entry.own_count << " pruned=" << (entry.pruned ? 1 : 0)
        << "\n";
  }
  for (int cls : report.protected_classes) out << "protected class=" << cls << "\n";
  out << "before=" << report.before << " after=" << report.after << "\n";
  if (!report_path.empty()) {
    std::ofstream file(report_path, std::ios::binary);
    if (!file) throw ArgumentError("cannot write report file: " + report_path);
    file << out.str();
    for (const PruneEntry& entry : report.entries) {
      for (std::size_t t = 0; t < entry.nearest.size(); ++t) {
        const NearestPatch& p = entry.nearest[t];
        file << "prototype=" << entry.prototype << " rank=" << t + 1
             << " image=" << p.image << " row=" << p.row << " col=" << p.col
             << " class=" << p.class_id << " distance=" << p.distance << "\n";
      }
    }
  }
  std::cout << out.str();
  std::cout << "saved=" << out_path << "\n";
  return 0;
}

int cmd_verify_theorem(const CommonFlags& common, const std::string& before_path,
                       const std::string& after_path, double delta,
                       int image_index, bool image_given) {
  ProtoPNetModel before = load_checkpoint(before_path);
  ProtoPNetModel after = load_checkpoint(after_path);
  Dataset data = load_dataset(common.data_path, common.format);
  if (image_given) {
    if (image_index < 0 || image_index >= data.size()) {
      throw ArgumentError("image index out of range");
    }
    TheoremReport report =
        verify_projection_theorem(before, after, data.images[image_index], delta);
    report.image_id = image_index;
    std::cout << serialize_report(report);
    return report.verdict == "bound_violated" ? 1 : 0;
  }
  int violated = 0;
  for (int i = 0; i < data.size(); ++i) {
    TheoremReport report =
        verify_projection_theorem(before, after, data.images[i], delta);
    double max_change = 0.0;
    for (double c : report.logit_change) max_change = std::max(max_change, std::abs(c));
    std::ostringstream line;
    line.precision(6);
    line << "image=" << i << " verdict=" << report.verdict
         << " max_change=" << max_change << " delta_max=" << report.delta_max
         << " prediction_unchanged=" << (report.prediction_unchanged ? 1 : 0)
         << "\n";
    std::cout << line.str();
    if (report.verdict == "bound_violated") ++violated;
  }
  std::cout << "violations=" << violated << "\n";
  return violated > 0 ? 1 : 0;
}

int cmd_ensemble(const CommonFlags& common, const std::vector<std::string>& ckpts) {
  std::vector<ProtoPNetModel> models;
  models.reserve(ckpts.size());
  for (const std::string& path : ckpts) models.push_back(load_checkpoint(path));
  Dataset data = load_dataset(common.data_path, common.format);
  if (models.empty()) throw ArgumentError("ensemble needs at least one model");
  for (const ProtoPNetModel& model : models) check_labels_fit(model, data);
  int correct = 0;
  for (int i = 0; i < data.size(); ++i) {
    std::vector<double> logits = ensemble_logits(models, data.images[i]);
    if (argmax_index(logits) == data.labels[i]) ++correct;
  }
  const double acc = static_cast<double>(correct) / data.size();
  std::cout << format_accuracy_line(acc, data.size()) << "\n";
  return 0;
}

int cmd_augment(const CommonFlags& common, const std::string& out_path,
                int copies, unsigned int seed, const std::string& ops_text) {
  Dataset data = load_dataset(common.data_path, common.format);
  std::vector<AugmentOp> ops;
  std::istringstream in(ops_text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item == "flip") {
      ops.push_back(AugmentOp::kFlip);
    } else if (item == "rotate") {
      ops.push_back(AugmentOp::kRotate);
    } else if (item == "crop") {
      ops.push_back(AugmentOp::kCrop);
    } else {
      throw ArgumentError("unknown augmentation op: " + item);
    }
  }
  Dataset augmented = augment_offline(data, ops, copies, seed);
  save_ppds(augmented, out_path);
  std::cout << "images=" << augmented.size() << " saved=" << out_path << "\n";
  return 0;
}

// Finite-difference audit of the stage-1 gradients on small random
// instances; prints the worst relative error observed.
int cmd_gradcheck(int instances, unsigned int seed) {
  if (instances < 1) throw ArgumentError("instances must be at least 1");
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0;
  for (int t = 0; t < instances; ++t) {
    ModelConfig cfg;
    cfg.image_h = 6;
    cfg.image_w = 6;
    cfg.image_c = 3;
    cfg.blocks = {{.channels = 3, .kernel = 3, .stride = 1, .padding = 0,
                   .pool = false}};
    cfg.addon_channels = 4;
    cfg.class_count = 2;
    cfg.prototypes_per_class = {1, 1};
    ProtoPNetModel model = build_model(cfg, seed + 100 * t);
    TrainConfig tc;
    tc.workers = 1;

    std::vector<Tensor> images;
    std::vector<int> labels;
    for (int i = 0; i < 2; ++i) {
      Tensor x = Tensor::zeros({cfg.image_h, cfg.image_w, cfg.image_c});
      for (double& v : x.values) v = unit(rng);
      images.push_back(x);
      labels.push_back(i);
    }
    BatchGradients grads = batch_gradients(model, images, labels, tc);

    const double h = 1e-5;
    for (int j = 0; j < cfg.total_prototypes(); ++j) {
      std::uniform_int_distribution<std::size_t> pick(
          0, model.prototypes[j].values.size() - 1);
      std::size_t idx = pick(rng);
      double saved = model.prototypes[j].values[idx];
      model.prototypes[j].values[idx] = saved + h;
      double up = joint_objective(images, labels, model, tc);
      model.prototypes[j].values[idx] = saved - h;
      double down = joint_objective(images, labels, model, tc);
      model.prototypes[j].values[idx] = saved;
      double fd = (up - down) / (2.0 * h);
      double g = grads.prototypes[j][idx];
      worst = std::max(worst, std::abs(g - fd) / std::max(1.0, std::abs(fd)));
    }
    for (std::size_t f = 0; f < model.conv_filters.size(); ++f) {
      std::uniform_int_distribution<std::size_t> pick(
          0, model.conv_filters[f].values.size() - 1);
      std::size_t idx = pick(rng);
      double saved = model.conv_filters[f].values[idx];
      model.conv_filters[f].values[idx] = saved + h;
      double up = joint_objective(images, labels, model, tc);
      model.conv_filters[f].values[idx] = saved - h;
      double down = joint_objective(images, labels, model, tc);
      model.conv_filters[f].values[idx] = saved;
      double fd = (up - down) / (2.0 * h);
      double g = grads.conv[f][idx];
      worst = std::max(worst, std::abs(g - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  std::ostringstream out;
  out.precision(6);
  out << "instances=" << instances << " max_rel_err=" << worst
      << " status=" << (worst < 1e-4 ? "pass" : "fail") << "\n";
  std::cout << out.str();
  return worst < 1e-4 ? 0 : 1;
}

}  // namespace

RunSpec parse_run_spec(const std::string& text) {
  RunSpec spec;
  spec.model.blocks.clear();
  spec.model.prototypes_per_class.clear();
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  bool has_h = false, has_w = false, has_c = false;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) +
                        " is not key=value: " + line);
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "image_h") {
      spec.model.image_h = parse_int(key, value);
      has_h = true;
    } else if (key == "image_w") {
      spec.model.image_w = parse_int(key, value);
      has_w = true;
    } else if (key == "image_c") {
      spec.model.image_c = parse_int(key, value);
      has_c = true;
    } else if (key == "addon_channels") {
      spec.model.addon_channels = parse_int(key, value);
    } else if (key == "proto_h") {
      spec.model.proto_h = parse_int(key, value);
    } else if (key == "proto_w") {
      spec.model.proto_w = parse_int(key, value);
    } else if (key == "epsilon") {
      spec.model.epsilon = parse_double(key, value);
    } else if (key == "block") {
      spec.model.blocks.push_back(parse_block(value));
    } else if (key == "prototypes_per_class") {
      spec.model.prototypes_per_class = parse_int_list(key, value);
    } else if (key == "per_class") {
      spec.per_class = parse_int(key, value);
      if (spec.per_class < 1) throw ConfigError("per_class must be positive");
    } else if (key == "lambda_cluster") {
      spec.train.lambda_cluster = parse_double(key, value);
    } else if (key == "lambda_separation") {
      spec.train.lambda_separation = parse_double(key, value);
    } else if (key == "lambda_l1") {
      spec.train.lambda_l1 = parse_double(key, value);
    } else if (key == "lr_backbone") {
      spec.train.lr_backbone = parse_double(key, value);
    } else if (key == "lr_prototypes") {
      spec.train.lr_prototypes = parse_double(key, value);
    } else if (key == "momentum") {
      spec.train.momentum = parse_double(key, value);
    } else if (key == "batch_size") {
      spec.train.batch_size = parse_int(key, value);
    } else if (key == "stage1_epochs") {
      spec.train.stage1_epochs = parse_int(key, value);
    } else if (key == "stage3_epochs") {
      spec.train.stage3_epochs = parse_int(key, value);
    } else if (key == "cycles") {
      spec.train.cycles = parse_int(key, value);
    } else if (key == "workers") {
      spec.train.workers = parse_int(key, value);
    } else if (key == "seed") {
      spec.train.seed = static_cast<unsigned int>(parse_int(key, value));
    } else {
      throw ConfigError("unknown config key on line " + std::to_string(line_no) +
                        ": " + key);
    }
  }
  if (has_h != has_w || has_h != has_c) {
    throw ConfigError("image_h, image_w, and image_c must be given together");
  }
  spec.has_image_extents = has_h;
  return spec;
}

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"prototypical-part image classifier"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "three-stage training from scratch");
  CommonFlags train_common;
  std::string train_config, train_out;
  unsigned int train_seed = 0;
  int train_workers = 1;
  train->add_option("--data", train_common.data_path, "training dataset")->required();
  train->add_option("--format", train_common.format, "ppds or ppm-tree");
  train->add_option("--config", train_config, "key=value settings file");
  train->add_option("--out", train_out, "checkpoint to write")->required();
  auto* train_seed_opt = train->add_option("--seed", train_seed, "run seed");
  auto* train_workers_opt = train->add_option("--workers", train_workers, "parallel fan-out");

  // push
  auto* push = app.add_subcommand("push", "project prototypes onto patches");
  CommonFlags push_common;
  std::string push_ckpt, push_out, push_records;
  push->add_option("--ckpt", push_ckpt, "input checkpoint")->required();
  push->add_option("--data", push_common.data_path, "training dataset")->required();
  push->add_option("--format", push_common.format, "ppds or ppm-tree");
  push->add_option("--out", push_out, "checkpoint to write")->required();
  push->add_option("--records", push_records, "write projection records here");

  // last-layer
  auto* last = app.add_subcommand("last-layer", "convex last-layer stage only");
  CommonFlags last_common;
  std::string last_ckpt, last_config, last_out;
  last->add_option("--ckpt", last_ckpt, "input checkpoint")->required();
  last->add_option("--data", last_common.data_path, "training dataset")->required();
  last->add_option("--format", last_common.format, "ppds or ppm-tree");
  last->add_option("--config", last_config, "key=value settings file");
  last->add_option("--out", last_out, "checkpoint to write")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "accuracy on a dataset");
  CommonFlags eval_common;
  std::string eval_ckpt;
  eval->add_option("--ckpt", eval_ckpt, "checkpoint")->required();
  eval->add_option("--data", eval_common.data_path, "dataset")->required();
  eval->add_option("--format", eval_common.format, "ppds or ppm-tree");

  // explain
  auto* explain = app.add_subcommand("explain", "per-prototype evidence for one image");
  std::string explain_ckpt, explain_image_path, explain_dir;
  double explain_percentile = 95.0;
  explain->add_option("--ckpt", explain_ckpt, "checkpoint")->required();
  explain->add_option("--image", explain_image_path, "P6 PPM image")->required();
  explain->add_option("--out-dir", explain_dir, "directory for heatmaps and report")->required();
  explain->add_option("--percentile", explain_percentile, "patch box percentile");

  // nearest
  auto* nearest = app.add_subcommand("nearest", "nearest patches or prototypes");
  CommonFlags nearest_common;
  std::string nearest_ckpt, nearest_image;
  int nearest_proto = 0, nearest_top = 5;
  nearest->add_option("--ckpt", nearest_ckpt, "checkpoint")->required();
  nearest->add_option("--data", nearest_common.data_path, "dataset (prototype mode)");
  nearest->add_option("--format", nearest_common.format, "ppds or ppm-tree");
  auto* nearest_proto_opt =
      nearest->add_option("--prototype", nearest_proto, "rank patches for this prototype");
  auto* nearest_image_opt =
      nearest->add_option("--image", nearest_image, "rank prototypes for this image");
  nearest->add_option("--top", nearest_top, "entries to print");

  // prune
  auto* prune = app.add_subcommand("prune", "drop weakly supported prototypes");
  CommonFlags prune_common;
  std::string prune_ckpt, prune_out, prune_report;
  int prune_z = 6, prune_tau = 3;
  prune->add_option("--ckpt", prune_ckpt, "checkpoint")->required();
  prune->add_option("--data", prune_common.data_path, "training dataset")->required();
  prune->add_option("--format", prune_common.format, "ppds or ppm-tree");
  prune->add_option("--out", prune_out, "checkpoint to write")->required();
  prune->add_option("--z", prune_z, "neighbourhood size");
  prune->add_option("--tau", prune_tau, "own-class threshold");
  prune->add_option("--report", prune_report, "write the full report here");

  // verify-theorem
  auto* verify = app.add_subcommand("verify-theorem", "projection stability bound");
  CommonFlags verify_common;
  std::string verify_before, verify_after;
  double verify_delta = 0.5;
  int verify_image = 0;
  verify->add_option("--before", verify_before, "pre-projection checkpoint")->required();
  verify->add_option("--after", verify_after, "post-projection checkpoint")->required();
  verify->add_option("--delta", verify_delta, "delta in (0,1)")->required();
  verify->add_option("--data", verify_common.data_path, "dataset")->required();
  verify->add_option("--format", verify_common.format, "ppds or ppm-tree");
  auto* verify_image_opt =
      verify->add_option("--image", verify_image, "check a single image index");

  // ensemble
  auto* ensemble = app.add_subcommand("ensemble", "summed logits of several models");
  CommonFlags ensemble_common;
  std::vector<std::string> ensemble_ckpts;
  ensemble->add_option("--ckpt", ensemble_ckpts, "checkpoint (repeatable)")->required();
  ensemble->add_option("--data", ensemble_common.data_path, "dataset")->required();
  ensemble->add_option("--format", ensemble_common.format, "ppds or ppm-tree");

  // augment
  auto* augment = app.add_subcommand("augment", "offline dataset augmentation");
  CommonFlags augment_common;
  std::string augment_out, augment_ops = "flip,rotate,crop";
  int augment_copies = 0;
  unsigned int augment_seed = 0;
  augment->add_option("--data", augment_common.data_path, "input dataset")->required();
  augment->add_option("--format", augment_common.format, "ppds or ppm-tree");
  augment->add_option("--out", augment_out, "ppds file to write")->required();
  augment->add_option("--copies", augment_copies, "variants per image")->required();
  augment->add_option("--seed", augment_seed, "augmentation seed");
  augment->add_option("--ops", augment_ops, "comma list of flip,rotate,crop");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  int gradcheck_instances = 20;
  unsigned int gradcheck_seed = 1;
  gradcheck->add_option("--instances", gradcheck_instances, "random instances");
  gradcheck->add_option("--seed", gradcheck_seed, "audit seed");

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("protopart");
  for (const std::string& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    if (train->parsed()) {
      return cmd_train(train_common, train_config, train_out, train_seed,
                       train_seed_opt->count() > 0, train_workers,
                       train_workers_opt->count() > 0);
    }
    if (push->parsed()) {
      return cmd_push(push_common, push_ckpt, push_out, push_records);
    }
    if (last->parsed()) {
      return cmd_last_layer(last_common, last_ckpt, last_config, last_out);
    }
    if (eval->parsed()) return cmd_eval(eval_common, eval_ckpt);
    if (explain->parsed()) {
      return cmd_explain(explain_ckpt, explain_image_path, explain_dir,
                         explain_percentile);
    }
    if (nearest->parsed()) {
      const bool has_proto = nearest_proto_opt->count() > 0;
      const bool has_image = nearest_image_opt->count() > 0;
      if (has_proto == has_image) {
        std::cerr << "nearest needs exactly one of --prototype or --image\n";
        return 2;
      }
      if (has_proto && nearest_common.data_path.empty()) {
        std::cerr << "nearest --prototype needs --data\n";
        return 2;
      }
      return cmd_nearest(nearest_common, nearest_ckpt, nearest_proto, has_proto,
                         nearest_image, nearest_top);
    }
    if (prune->parsed()) {
      return cmd_prune(prune_common, prune_ckpt, prune_out, prune_z, prune_tau,
                       prune_report);
    }
    if (verify->parsed()) {
      return cmd_verify_theorem(verify_common, verify_before, verify_after,
                                verify_delta, verify_image,
                                verify_image_opt->count() > 0);
    }
    if (ensemble->parsed()) return cmd_ensemble(ensemble_common, ensemble_ckpts);
    if (augment->parsed()) {
      return cmd_augment(augment_common, augment_out, augment_copies,
                         augment_seed, augment_ops);
    }
    if (gradcheck->parsed()) {
      return cmd_gradcheck(gradcheck_instances, gradcheck_seed);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "no subcommand given\n";
  return 2;
}

}  // namespace protopart
