#include "protopart/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

#include "protopart/projection.hpp"

namespace protopart {

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point start) {
  return std::chrono::duration<double>(clock_type::now() - start).count();
}

// Smallest squared distance from any listed prototype to any patch of z.
double min_min_distance(const Tensor& z, const ProtoPNetModel& model,
                        std::span<const int> prototype_indices) {
  double best = std::numeric_limits<double>::infinity();
  for (int j : prototype_indices) {
    const Tensor map = l2_distance_map(z, model.prototypes[j]);
    for (double v : map.values) best = std::min(best, v);
  }
  return best;
}

void check_labels(std::span<const int> labels, int class_count) {
  for (int y : labels) {
    if (y < 0 || y >= class_count) {
      throw ArgumentError("label outside the model's class range");
    }
  }
}

}  // namespace

void validate_train_config(const TrainConfig& config) {
  if (config.lambda_cluster < 0.0 || config.lambda_separation < 0.0 ||
      config.lambda_l1 < 0.0) {
    throw ConfigError("objective weights must be >= 0");
  }
  if (config.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (config.stage1_epochs < 0 || config.stage3_epochs < 0 || config.cycles < 0) {
    throw ConfigError("epoch and cycle counts must be >= 0");
  }
  if (config.workers < 1) throw ConfigError("worker count must be >= 1");
  if (config.momentum < 0.0 || config.momentum >= 1.0) {
    throw ConfigError("momentum must lie in [0,1)");
  }
}

std::string format_epoch_line(int epoch, double crsent, double clst, double sep,
                              double total, double accuracy) {
  std::ostringstream out;
  out.precision(6);
  out << "epoch=" << epoch << " crsent=" << crsent << " clst=" << clst
      << " sep=" << sep << " total=" << total << " acc=" << accuracy;
  return out.str();
}

void print_report(const StageReport& report, std::ostream& out) {
  for (std::size_t e = 0; e < report.total.size(); ++e) {
    out << format_epoch_line(static_cast<int>(e) + 1, report.crsent[e],
                             report.clst[e], report.sep[e], report.total[e],
                             report.accuracy[e])
        << "\n";
  }
}

double cluster_cost(std::span<const Tensor> latents, std::span<const int> labels,
                    const ProtoPNetModel& model) {
  if (latents.empty() || latents.size() != labels.size()) {
    throw ArgumentError("cluster cost needs matching non-empty latents and labels");
  }
  check_labels(labels, model.config.class_count);
  double sum = 0.0;
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const std::vector<int> own =
        own_prototype_indices(model.allocation, labels[i]);
    sum += min_min_distance(latents[i], model, own);
  }
  return sum / static_cast<double>(latents.size());
}

double separation_cost(std::span<const Tensor> latents,
                       std::span<const int> labels,
                       const ProtoPNetModel& model) {
  if (latents.empty() || latents.size() != labels.size()) {
    throw ArgumentError("separation cost needs matching non-empty latents and labels");
  }
  if (model.config.class_count < 2) {
    throw ConfigError("separation cost needs at least two classes");
  }
  check_labels(labels, model.config.class_count);
  double sum = 0.0;
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const std::vector<int> off =
        off_prototype_indices(model.allocation, labels[i]);
    sum += min_min_distance(latents[i], model, off);
  }
  return -sum / static_cast<double>(latents.size());
}

double joint_objective(std::span<const Tensor> images,
                       std::span<const int> labels,
                       const ProtoPNetModel& model, const TrainConfig& config) {
  if (images.empty() || images.size() != labels.size()) {
    throw ArgumentError("joint objective needs matching non-empty images and labels");
  }
  if (config.lambda_separation > 0.0 && model.config.class_count < 2) {
    throw ConfigError("separation term needs at least two classes");
  }
  check_labels(labels, model.config.class_count);
  double ce = 0.0, clst = 0.0, sepd = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const ModelOutput out = model_forward(images[i], model);
    ce += softmax_cross_entropy(out.logits, labels[i]).scalar();
    const std::vector<int> own =
        own_prototype_indices(model.allocation, labels[i]);
    double best = std::numeric_limits<double>::infinity();
    for (int j : own) best = std::min(best, out.min_distances.values[j]);
    clst += best;
    if (model.config.class_count >= 2) {
      const std::vector<int> off =
          off_prototype_indices(model.allocation, labels[i]);
      best = std::numeric_limits<double>::infinity();
      for (int j : off) best = std::min(best, out.min_distances.values[j]);
      sepd += best;
    }
  }
  const double n = static_cast<double>(images.size());
  return ce / n + config.lambda_cluster * (clst / n) +
         config.lambda_separation * (-sepd / n);
}

namespace {

struct SampleResult {
  std::vector<std::vector<double>> conv;
  std::vector<std::vector<double>> prototypes;
  double ce = 0.0;
  double clst = 0.0;
  double sepd = 0.0;
  bool correct = false;
};

// Forward + backward for one sample on a private tape. The last layer stays
// untracked: stage 1 never differentiates it.
SampleResult eval_sample(const ProtoPNetModel& model, const Tensor& x, int label,
                         const TrainConfig& config) {
  Tape tape;
  std::vector<Tensor> conv;
  conv.reserve(model.conv_filters.size());
  for (const Tensor& f : model.conv_filters) conv.push_back(tape.watch(f));
  std::vector<Tensor> protos;
  protos.reserve(model.prototypes.size());
  for (const Tensor& p : model.prototypes) protos.push_back(tape.watch(p));

  const ModelOutput out =
      forward_graph(x, conv, protos, model.last_layer, model.config);
  const Tensor ce = softmax_cross_entropy(out.logits, label);
  const std::vector<int> own = own_prototype_indices(model.allocation, label);
  const Tensor clst = min_over(out.min_distances, own);

  std::vector<Tensor> terms{ce, clst};
  std::vector<double> coeffs{1.0, config.lambda_cluster};
  Tensor sepd;
  const std::vector<int> off = off_prototype_indices(model.allocation, label);
  if (!off.empty()) {
    sepd = min_over(out.min_distances, off);
    terms.push_back(sepd);
    coeffs.push_back(-config.lambda_separation);
  } else if (config.lambda_separation > 0.0) {
    throw ConfigError("separation term needs at least two classes");
  }
  const Tensor loss = weighted_sum(terms, coeffs);
  tape.backward(loss);

  SampleResult result;
  result.ce = ce.scalar();
  result.clst = clst.scalar();
  result.sepd = off.empty() ? 0.0 : sepd.scalar();
  result.correct = predicted_class(out.logits) == label;
  for (const Tensor& f : conv) result.conv.push_back(f.grad());
  for (const Tensor& p : protos) result.prototypes.push_back(p.grad());
  return result;
}

}  // namespace

BatchGradients batch_gradients(const ProtoPNetModel& model,
                               std::span<const Tensor> images,
                               std::span<const int> labels,
                               const TrainConfig& config) {
  if (images.empty() || images.size() != labels.size()) {
    throw ArgumentError("batch needs matching non-empty images and labels");
  }
  const int n = static_cast<int>(images.size());
  std::vector<SampleResult> slots(n);

  const int workers = std::min(config.workers, n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) {
      slots[i] = eval_sample(model, images[i], labels[i], config);
    }
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> failures(workers);
    for (int t = 0; t < workers; ++t) {
      pool.emplace_back([&, t]() {
        try {
          for (int i = t; i < n; i += workers) {
            slots[i] = eval_sample(model, images[i], labels[i], config);
          }
        } catch (...) {
          failures[t] = std::current_exception();
        }
      });
    }
    for (std::thread& th : pool) th.join();
    for (const std::exception_ptr& e : failures) {
      if (e) std::rethrow_exception(e);
    }
  }

  // Reduce in sample order so the result is independent of the worker count.
  BatchGradients out;
  out.conv.resize(model.conv_filters.size());
  for (std::size_t f = 0; f < model.conv_filters.size(); ++f) {
    out.conv[f].assign(model.conv_filters[f].size(), 0.0);
  }
  out.prototypes.resize(model.prototypes.size());
  for (std::size_t j = 0; j < model.prototypes.size(); ++j) {
    out.prototypes[j].assign(model.prototypes[j].size(), 0.0);
  }
  for (int i = 0; i < n; ++i) {
    const SampleResult& s = slots[i];
    for (std::size_t f = 0; f < out.conv.size(); ++f) {
      for (std::size_t k = 0; k < out.conv[f].size(); ++k) {
        out.conv[f][k] += s.conv[f][k];
      }
    }
    for (std::size_t j = 0; j < out.prototypes.size(); ++j) {
      for (std::size_t k = 0; k < out.prototypes[j].size(); ++k) {
        out.prototypes[j][k] += s.prototypes[j][k];
      }
    }
    out.crsent_sum += s.ce;
    out.clst_sum += s.clst;
    out.sep_sum += s.sepd;
    out.correct += s.correct ? 1 : 0;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  for (auto& buf : out.conv) {
    for (double& g : buf) g *= inv_n;
  }
  for (auto& buf : out.prototypes) {
    for (double& g : buf) g *= inv_n;
  }
  return out;
}

StageReport stage1_sgd(ProtoPNetModel& model, const Dataset& dataset,
                       const TrainConfig& config) {
  validate_train_config(config);
  if (dataset.size() < 1) throw DatasetError("empty training set");
  check_labels(dataset.labels, model.config.class_count);

  StageReport report;
  const auto start = clock_type::now();
  if (config.stage1_epochs == 0) return report;

  std::vector<std::vector<double>> vel_conv(model.conv_filters.size());
  for (std::size_t f = 0; f < vel_conv.size(); ++f) {
    vel_conv[f].assign(model.conv_filters[f].size(), 0.0);
  }
  std::vector<std::vector<double>> vel_proto(model.prototypes.size());
  for (std::size_t j = 0; j < vel_proto.size(); ++j) {
    vel_proto[j].assign(model.prototypes[j].size(), 0.0);
  }

  std::mt19937 rng(config.seed);
  std::vector<int> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  const int n = dataset.size();

  for (int epoch = 1; epoch <= config.stage1_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double ce_sum = 0.0, clst_sum = 0.0, sepd_sum = 0.0;
    int correct = 0;

    for (int begin = 0; begin < n; begin += config.batch_size) {
      const int end = std::min(begin + config.batch_size, n);
      std::vector<Tensor> images;
      std::vector<int> labels;
      images.reserve(end - begin);
      for (int i = begin; i < end; ++i) {
        images.push_back(dataset.images[order[i]]);
        labels.push_back(dataset.labels[order[i]]);
      }
      const BatchGradients grads = batch_gradients(model, images, labels, config);

      const double nb = static_cast<double>(end - begin);
      const double batch_total =
          grads.crsent_sum / nb + config.lambda_cluster * (grads.clst_sum / nb) +
          config.lambda_separation * (-grads.sep_sum / nb);
      if (!std::isfinite(batch_total)) {
        throw DivergenceError("stage-1 objective is not finite", epoch);
      }

      for (std::size_t f = 0; f < model.conv_filters.size(); ++f) {
        for (std::size_t k = 0; k < vel_conv[f].size(); ++k) {
          vel_conv[f][k] = config.momentum * vel_conv[f][k] + grads.conv[f][k];
          model.conv_filters[f].values[k] -= config.lr_backbone * vel_conv[f][k];
        }
      }
      for (std::size_t j = 0; j < model.prototypes.size(); ++j) {
        for (std::size_t k = 0; k < vel_proto[j].size(); ++k) {
          vel_proto[j][k] =
              config.momentum * vel_proto[j][k] + grads.prototypes[j][k];
          model.prototypes[j].values[k] -= config.lr_prototypes * vel_proto[j][k];
        }
      }

      ce_sum += grads.crsent_sum;
      clst_sum += grads.clst_sum;
      sepd_sum += grads.sep_sum;
      correct += grads.correct;
    }

    const double dn = static_cast<double>(n);
    const double crsent = ce_sum / dn;
    const double clst = clst_sum / dn;
    const double sep = -sepd_sum / dn;
    report.crsent.push_back(crsent);
    report.clst.push_back(clst);
    report.sep.push_back(sep);
    report.total.push_back(crsent + config.lambda_cluster * clst +
                           config.lambda_separation * sep);
    report.accuracy.push_back(correct / dn);
  }
  report.seconds = seconds_since(start);
  return report;
}

StageReport stage3_convex_last_layer(ProtoPNetModel& model,
                                     const Dataset& dataset,
                                     const TrainConfig& config) {
  validate_train_config(config);
  if (dataset.size() < 1) throw DatasetError("empty training set");
  check_labels(dataset.labels, model.config.class_count);

  StageReport report;
  const auto start = clock_type::now();
  const int n = dataset.size();
  const int k_classes = model.config.class_count;
  const int m = static_cast<int>(model.prototypes.size());

  // One forward pass: scores feed the convex problem, min distances give
  // the (frozen) cluster and separation readings for the log lines.
  std::vector<std::vector<double>> scores(n);
  double clst_frozen = 0.0, sepd_frozen = 0.0;
  for (int i = 0; i < n; ++i) {
    const ModelOutput out = model_forward(dataset.images[i], model);
    scores[i] = out.scores.values;
    const std::vector<int> own =
        own_prototype_indices(model.allocation, dataset.labels[i]);
    double best = std::numeric_limits<double>::infinity();
    for (int j : own) best = std::min(best, out.min_distances.values[j]);
    clst_frozen += best;
    const std::vector<int> off =
        off_prototype_indices(model.allocation, dataset.labels[i]);
    if (!off.empty()) {
      best = std::numeric_limits<double>::infinity();
      for (int j : off) best = std::min(best, out.min_distances.values[j]);
      sepd_frozen += best;
    }
  }
  clst_frozen /= n;
  sepd_frozen /= n;
  const double sep_frozen = -sepd_frozen;

  // Smoothness bound for the softmax term: the Hessian in logit space has
  // norm at most 1/2, so L = 0.5 * max_i |s_i|^2 bounds the full objective
  // and step 1/L makes proximal descent monotone.
  double max_norm2 = 0.0;
  for (const auto& s : scores) {
    double norm2 = 0.0;
    for (double v : s) norm2 += v * v;
    max_norm2 = std::max(max_norm2, norm2);
  }
  const double step = max_norm2 > 0.0 ? 1.0 / (0.5 * max_norm2) : 1.0;

  std::vector<double>& w = model.last_layer.values;
  auto evaluate = [&](double& ce_out, int& correct_out) {
    ce_out = 0.0;
    correct_out = 0;
    for (int i = 0; i < n; ++i) {
      Tensor s({m}, scores[i]);
      const Tensor logits = linear(s, model.last_layer);
      ce_out += softmax_cross_entropy(logits, dataset.labels[i]).scalar();
      if (predicted_class(logits) == dataset.labels[i]) ++correct_out;
    }
    ce_out /= n;
  };

  for (int epoch = 1; epoch <= config.stage3_epochs; ++epoch) {
    // Full-batch gradient of the smooth part at the current weights.
    std::vector<double> grad(static_cast<std::size_t>(k_classes) * m, 0.0);
    for (int i = 0; i < n; ++i) {
      Tensor s({m}, scores[i]);
      const Tensor logits = linear(s, model.last_layer);
      const double mx =
          *std::max_element(logits.values.begin(), logits.values.end());
      std::vector<double> p(k_classes);
      double sum = 0.0;
      for (int k = 0; k < k_classes; ++k) {
        p[k] = std::exp(logits.values[k] - mx);
        sum += p[k];
      }
      for (int k = 0; k < k_classes; ++k) {
        const double coeff =
            p[k] / sum - (k == dataset.labels[i] ? 1.0 : 0.0);
        for (int j = 0; j < m; ++j) {
          grad[static_cast<std::size_t>(k) * m + j] += coeff * scores[i][j];
        }
      }
    }
    for (double& g : grad) g /= n;

    // Gradient step, then the proximal shrink on off-class entries only.
    for (int k = 0; k < k_classes; ++k) {
      for (int j = 0; j < m; ++j) {
        const std::size_t idx = static_cast<std::size_t>(k) * m + j;
        double v = w[idx] - step * grad[idx];
        if (model.allocation[j] != k) {
          const double shrink = step * config.lambda_l1;
          if (v > shrink) {
            v -= shrink;
          } else if (v < -shrink) {
            v += shrink;
          } else {
            v = 0.0;
          }
        }
        w[idx] = v;
      }
    }

    double ce = 0.0;
    int correct = 0;
    evaluate(ce, correct);
    double l1 = 0.0;
    for (int k = 0; k < k_classes; ++k) {
      for (int j = 0; j < m; ++j) {
        if (model.allocation[j] != k) {
          l1 += std::abs(w[static_cast<std::size_t>(k) * m + j]);
        }
      }
    }
    report.crsent.push_back(ce);
    report.clst.push_back(clst_frozen);
    report.sep.push_back(sep_frozen);
    report.total.push_back(ce + config.lambda_l1 * l1);
    report.accuracy.push_back(static_cast<double>(correct) / n);
  }
  report.seconds = seconds_since(start);
  return report;
}

std::vector<StageReport> train_full(ProtoPNetModel& model,
                                    const Dataset& dataset,
                                    const TrainConfig& config) {
  validate_train_config(config);
  if (dataset.size() < 1) throw DatasetError("empty training set");
  std::vector<int> counts(model.config.class_count, 0);
  for (int y : dataset.labels) {
    if (y < 0 || y >= model.config.class_count) {
      throw DatasetError("label outside the model's class range");
    }
    ++counts[y];
  }
  for (int k = 0; k < model.config.class_count; ++k) {
    if (counts[k] == 0) {
      throw DatasetError("class " + std::to_string(k) +
                         " has no training images");
    }
  }

  std::vector<StageReport> reports;
  for (int cycle = 0; cycle < config.cycles; ++cycle) {
    reports.push_back(stage1_sgd(model, dataset, config));
    project_prototypes(model, dataset);
    reports.push_back(stage3_convex_last_layer(model, dataset, config));
  }
  return reports;
}

double accuracy(const ProtoPNetModel& model, const Dataset& dataset) {
  if (dataset.size() < 1) throw DatasetError("empty dataset");
  int correct = 0;
  for (int i = 0; i < dataset.size(); ++i) {
    const ModelOutput out = model_forward(dataset.images[i], model);
    if (predicted_class(out.logits) == dataset.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / dataset.size();
}

}  // namespace protopart
