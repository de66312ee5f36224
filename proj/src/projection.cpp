#include "protopart/projection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace protopart {

namespace {

double patch_squared_distance(const Tensor& z, const Tensor& p, int r, int c) {
  const int w = z.extent(1), d = z.extent(2);
  const int ph = p.extent(0), pw = p.extent(1);
  double acc = 0.0;
  for (int a = 0; a < ph; ++a) {
    for (int b = 0; b < pw; ++b) {
      for (int k = 0; k < d; ++k) {
        const double diff = z.values[((r + a) * w + (c + b)) * d + k] -
                            p.values[(a * pw + b) * d + k];
        acc += diff * diff;
      }
    }
  }
  return acc;
}

Tensor extract_patch(const Tensor& z, int r, int c, int ph, int pw) {
  const int w = z.extent(1), d = z.extent(2);
  Tensor patch = Tensor::zeros({ph, pw, d});
  for (int a = 0; a < ph; ++a) {
    for (int b = 0; b < pw; ++b) {
      for (int k = 0; k < d; ++k) {
        patch.values[(a * pw + b) * d + k] =
            z.values[((r + a) * w + (c + b)) * d + k];
      }
    }
  }
  return patch;
}

double l2_norm_diff(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double diff = a.values[i] - b.values[i];
    acc += diff * diff;
  }
  return std::sqrt(acc);
}

}  // namespace

std::vector<ProjectionRecord> project_prototypes(ProtoPNetModel& model,
                                                 const Dataset& dataset) {
  const ModelConfig& cfg = model.config;
  std::vector<int> class_counts(cfg.class_count, 0);
  for (int y : dataset.labels) {
    if (y < 0 || y >= cfg.class_count) {
      throw DatasetError("label outside the model's class range");
    }
    ++class_counts[y];
  }
  for (int k = 0; k < cfg.class_count; ++k) {
    if (class_counts[k] == 0) {
      throw DatasetError("class " + std::to_string(k) +
                         " has no training images to project onto");
    }
  }

  const int m = static_cast<int>(model.prototypes.size());
  std::vector<double> best(m, std::numeric_limits<double>::infinity());
  std::vector<ProjectionRecord> records(m);
  for (int j = 0; j < m; ++j) {
    records[j].prototype = j;
    records[j].class_id = model.allocation[j];
    records[j].before = model.prototypes[j];
  }

  // One forward pass per image; strict improvement over an (image, row,
  // column)-ordered scan realizes the lexicographic tie-break.
  for (int i = 0; i < dataset.size(); ++i) {
    const Tensor z =
        backbone_forward(dataset.images[i], model.conv_filters, cfg);
    const int oh = z.extent(0) - cfg.proto_h + 1;
    const int ow = z.extent(1) - cfg.proto_w + 1;
    for (int j = 0; j < m; ++j) {
      if (model.allocation[j] != dataset.labels[i]) continue;
      for (int r = 0; r < oh; ++r) {
        for (int c = 0; c < ow; ++c) {
          const double d2 = patch_squared_distance(z, model.prototypes[j], r, c);
          if (d2 < best[j]) {
            best[j] = d2;
            records[j].image = i;
            records[j].row = r;
            records[j].col = c;
            records[j].after = extract_patch(z, r, c, cfg.proto_h, cfg.proto_w);
          }
        }
      }
    }
  }

  for (int j = 0; j < m; ++j) {
    records[j].move_distance = l2_norm_diff(records[j].after, records[j].before);
    model.prototypes[j] = records[j].after;
  }
  return records;
}

TheoremConstants theorem_constants(double delta, int m_prime) {
  if (!(delta > 0.0 && delta < 1.0)) {
    throw ArgumentError("delta must lie in (0,1)");
  }
  if (m_prime < 1) throw ArgumentError("m' must be >= 1");
  TheoremConstants out;
  out.theta = std::min(std::sqrt(1.0 + delta) - 1.0,
                       1.0 - 1.0 / std::sqrt(2.0 - delta));
  out.delta_max = m_prime * std::log((1.0 + delta) * (2.0 - delta));
  return out;
}

TheoremReport verify_projection_theorem_latent(
    const Tensor& z, std::span<const Tensor> prototypes_before,
    std::span<const Tensor> prototypes_after, std::span<const int> allocation,
    int class_count, double eps, double delta) {
  const int m = static_cast<int>(prototypes_before.size());
  if (prototypes_after.size() != prototypes_before.size() ||
      allocation.size() != prototypes_before.size()) {
    throw ArgumentError("prototype banks and allocation differ in length");
  }
  if (m == 0) throw ArgumentError("no prototypes to verify");

  TheoremReport rep;
  rep.delta = delta;

  // A3: uniform prototype count per class. Delta_max uses the largest
  // per-class count; when A3 holds they are all equal anyway.
  std::vector<int> counts(class_count, 0);
  for (int a : allocation) {
    if (a < 0 || a >= class_count) {
      throw ArgumentError("allocation entry out of class range");
    }
    counts[a]++;
  }
  rep.a3 = std::all_of(counts.begin(), counts.end(),
                       [&](int c) { return c == counts[0]; });
  rep.m_prime = *std::max_element(counts.begin(), counts.end());
  const TheoremConstants constants = theorem_constants(delta, rep.m_prime);
  rep.theta = constants.theta;
  rep.delta_max = constants.delta_max;
  rep.a4 = true;  // the 1/0 pattern is substituted below by construction

  // Per-prototype minima and argmin locations before and after.
  struct Nearest {
    double d2 = 0.0;
    int r = 0, c = 0;
  };
  const int oh = z.extent(0) - prototypes_before[0].extent(0) + 1;
  const int ow = z.extent(1) - prototypes_before[0].extent(1) + 1;
  auto nearest = [&](const Tensor& p) {
    Nearest best;
    best.d2 = std::numeric_limits<double>::infinity();
    for (int r = 0; r < oh; ++r) {
      for (int c = 0; c < ow; ++c) {
        const double d2 = patch_squared_distance(z, p, r, c);
        if (d2 < best.d2) best = {d2, r, c};
      }
    }
    return best;
  };

  rep.a1 = true;
  rep.a2a = true;
  rep.a2b = true;
  std::vector<double> score_before(m), score_after(m);

  // The correct class is fixed by the pre-projection prediction under the
  // substituted weights, so compute the before-scores first.
  std::vector<Nearest> nb(m), na(m);
  for (int j = 0; j < m; ++j) {
    nb[j] = nearest(prototypes_before[j]);
    na[j] = nearest(prototypes_after[j]);
    score_before[j] = prototype_activation(nb[j].d2, eps);
    score_after[j] = prototype_activation(na[j].d2, eps);
    if (nb[j].r != na[j].r || nb[j].c != na[j].c) rep.a1 = false;
  }

  auto class_logits = [&](const std::vector<double>& scores) {
    std::vector<double> logits(class_count, 0.0);
    for (int j = 0; j < m; ++j) logits[allocation[j]] += scores[j];
    return logits;
  };
  rep.logits_before = class_logits(score_before);
  rep.logits_after = class_logits(score_after);
  rep.logit_change.resize(class_count);
  for (int k = 0; k < class_count; ++k) {
    rep.logit_change[k] = rep.logits_after[k] - rep.logits_before[k];
  }
  rep.correct_class = static_cast<int>(
      std::max_element(rep.logits_before.begin(), rep.logits_before.end()) -
      rep.logits_before.begin());

  // A2a and A2b: prototype moves against nearest-patch distances.
  const double sqrt_eps = std::sqrt(eps);
  for (int j = 0; j < m; ++j) {
    const double move = l2_norm_diff(prototypes_after[j], prototypes_before[j]);
    const double dist = std::sqrt(nb[j].d2);
    if (allocation[j] == rep.correct_class) {
      if (move > (std::sqrt(1.0 + delta) - 1.0) * dist) rep.a2b = false;
      if (dist > std::sqrt(1.0 - delta)) rep.a2b = false;
    } else {
      if (move > rep.theta * dist - sqrt_eps) rep.a2a = false;
    }
  }

  // Conclusion columns.
  double top1 = -std::numeric_limits<double>::infinity(), top2 = top1;
  for (double v : rep.logits_before) {
    if (v > top1) {
      top2 = top1;
      top1 = v;
    } else if (v > top2) {
      top2 = v;
    }
  }
  rep.margin_ok = class_count >= 2 && (top1 - top2) >= 2.0 * rep.delta_max;
  int argmax_after = 0;
  for (int k = 1; k < class_count; ++k) {
    if (rep.logits_after[k] > rep.logits_after[argmax_after]) argmax_after = k;
  }
  rep.prediction_unchanged = argmax_after == rep.correct_class;

  if (!rep.assumptions_hold()) {
    rep.verdict = "assumptions_unmet";
  } else {
    bool bound = rep.logit_change[rep.correct_class] >= -rep.delta_max;
    for (int k = 0; k < class_count; ++k) {
      if (k == rep.correct_class) continue;
      if (rep.logit_change[k] > rep.delta_max) bound = false;
    }
    if (bound && rep.margin_ok && !rep.prediction_unchanged) bound = false;
    rep.verdict = bound ? "bound_holds" : "bound_violated";
  }
  return rep;
}

TheoremReport verify_projection_theorem(const ProtoPNetModel& before,
                                        const ProtoPNetModel& after,
                                        const Tensor& x, double delta) {
  if (before.conv_filters.size() != after.conv_filters.size()) {
    throw ArgumentError("models disagree on backbone depth");
  }
  for (std::size_t i = 0; i < before.conv_filters.size(); ++i) {
    if (before.conv_filters[i].values != after.conv_filters[i].values) {
      throw ArgumentError("models disagree on backbone weights");
    }
  }
  if (before.allocation != after.allocation ||
      before.config.class_count != after.config.class_count ||
      before.config.epsilon != after.config.epsilon) {
    throw ArgumentError("models disagree on prototype allocation or config");
  }
  const Tensor z = backbone_forward(x, before.conv_filters, before.config);
  TheoremReport rep = verify_projection_theorem_latent(
      z, before.prototypes, after.prototypes, before.allocation,
      before.config.class_count, before.config.epsilon, delta);

  // Informational: the same logits under the models' real last layers.
  auto true_logits = [&z](const ProtoPNetModel& model) {
    PrototypeForward pf =
        prototype_forward(z, model.prototypes, model.config.epsilon);
    return linear(pf.scores, model.last_layer).values;
  };
  rep.logits_before_true = true_logits(before);
  rep.logits_after_true = true_logits(after);
  return rep;
}

std::string serialize_report(const TheoremReport& report) {
  std::ostringstream out;
  out.precision(12);
  out << "image=" << report.image_id << "\n";
  out << "class=" << report.correct_class << "\n";
  out << "delta=" << report.delta << "\n";
  out << "theta=" << report.theta << "\n";
  out << "m_prime=" << report.m_prime << "\n";
  out << "delta_max=" << report.delta_max << "\n";
  out << "a1=" << (report.a1 ? "pass" : "fail") << "\n";
  out << "a2a=" << (report.a2a ? "pass" : "fail") << "\n";
  out << "a2b=" << (report.a2b ? "pass" : "fail") << "\n";
  out << "a3=" << (report.a3 ? "pass" : "fail") << "\n";
  out << "a4=" << (report.a4 ? "pass" : "fail") << "\n";
  for (std::size_t k = 0; k < report.logit_change.size(); ++k) {
    out << "logit_change_" << k << "=" << report.logit_change[k] << "\n";
  }
  for (std::size_t k = 0; k < report.logits_before_true.size(); ++k) {
    out << "true_logit_change_" << k << "="
        << report.logits_after_true[k] - report.logits_before_true[k] << "\n";
  }
  out << "margin_ok=" << (report.margin_ok ? "true" : "false") << "\n";
  out << "prediction_unchanged="
      << (report.prediction_unchanged ? "true" : "false") << "\n";
  out << "verdict=" << report.verdict << "\n";
  return out.str();
}

}  // namespace protopart
