#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "protopart/model.hpp"
#include "protopart/projection.hpp"
#include "theorem_instances.hpp"

using namespace protopart;

namespace {

// 10x10x3 image -> conv 3x3 (8 channels) -> pool -> 4x4x8 -> add-ons -> 4x4x4.
ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.image_h = 10;
  cfg.image_w = 10;
  cfg.image_c = 3;
  cfg.blocks = {{.channels = 8, .kernel = 3, .stride = 1, .padding = 0, .pool = true}};
  cfg.addon_channels = 4;
  cfg.class_count = 2;
  cfg.prototypes_per_class = {2, 2};
  cfg.epsilon = 1e-4;
  return cfg;
}

Tensor random_image(const ModelConfig& cfg, std::mt19937& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Tensor x = Tensor::zeros({cfg.image_h, cfg.image_w, cfg.image_c});
  for (double& v : x.values) v = dist(rng);
  return x;
}

Dataset toy_dataset(const ModelConfig& cfg, int per_class, unsigned int seed) {
  std::mt19937 rng(seed);
  Dataset data;
  data.split = "train";
  for (int k = 0; k < cfg.class_count; ++k) {
    data.class_names.push_back(std::to_string(k));
  }
  for (int k = 0; k < cfg.class_count; ++k) {
    for (int i = 0; i < per_class; ++i) {
      data.images.push_back(random_image(cfg, rng));
      data.labels.push_back(k);
    }
  }
  return data;
}

// Test-local squared distance between a latent patch and a prototype.
double patch_d2(const Tensor& z, const Tensor& p, int r, int c) {
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

Tensor patch_at(const Tensor& z, int r, int c, int ph, int pw) {
  const int w = z.extent(1), d = z.extent(2);
  Tensor out = Tensor::zeros({ph, pw, d});
  for (int a = 0; a < ph; ++a) {
    for (int b = 0; b < pw; ++b) {
      for (int k = 0; k < d; ++k) {
        out.values[(a * pw + b) * d + k] =
            z.values[((r + a) * w + (c + b)) * d + k];
      }
    }
  }
  return out;
}

// Latent used by the handcrafted verifier cases: 2x2 map, two channels.
Tensor handcrafted_latent() {
  Tensor z = Tensor::zeros({2, 2, 2});
  z.values = {0.5, 0.5, 0.1, 0.9, 0.9, 0.1, 0.2, 0.2};
  return z;
}

Tensor proto2(double a, double b) {
  Tensor p = Tensor::zeros({1, 1, 2});
  p.values = {a, b};
  return p;
}

// Four prototypes whose nearest patches sit at distance 0.25 (class 0, the
// winner) and 0.30 (class 1), comfortably inside every assumption at zero
// move for all deltas in the sweep.
std::vector<Tensor> handcrafted_bank() {
  const double s = 0.25 / std::sqrt(2.0);
  return {proto2(0.5 + s, 0.5 + s), proto2(0.2, 0.45), proto2(0.1, 0.6),
          proto2(0.9, 0.4)};
}

const std::vector<double> kDeltaSweep = {0.1, 0.3, 0.5, 0.7, 0.9};

}  // namespace

// ---------------------------------------------------------------------------
// theorem constants
// ---------------------------------------------------------------------------

TEST_CASE("constants match direct evaluation at delta 0.5") {
  const TheoremConstants c = theorem_constants(0.5, 10);
  CHECK(c.delta_max == doctest::Approx(8.1093).epsilon(1e-4));
  CHECK(c.theta == doctest::Approx(0.1835).epsilon(1e-3));
  // Bitwise agreement with the defining formulas.
  CHECK(c.delta_max == 10 * std::log(1.5 * 1.5));
  CHECK(c.theta == std::min(std::sqrt(1.5) - 1.0, 1.0 - 1.0 / std::sqrt(1.5)));
  // The min picks the second branch at delta = 0.5.
  CHECK(c.theta == 1.0 - 1.0 / std::sqrt(1.5));

  const TheoremConstants single = theorem_constants(0.5, 1);
  CHECK(single.delta_max == doctest::Approx(0.8109).epsilon(1e-3));
  CHECK(single.theta == c.theta);
}

TEST_CASE("constants approach the small-delta limits") {
  const TheoremConstants c = theorem_constants(1e-9, 3);
  CHECK(c.theta >= 0.0);
  CHECK(c.theta < 1e-8);
  CHECK(c.delta_max == doctest::Approx(3.0 * std::log(2.0)).epsilon(1e-8));
}

TEST_CASE("constants reject out-of-range arguments") {
  CHECK_THROWS_AS(theorem_constants(0.0, 3), ArgumentError);
  CHECK_THROWS_AS(theorem_constants(1.0, 3), ArgumentError);
  CHECK_THROWS_AS(theorem_constants(-0.2, 3), ArgumentError);
  CHECK_THROWS_AS(theorem_constants(1.5, 3), ArgumentError);
  CHECK_THROWS_AS(theorem_constants(0.5, 0), ArgumentError);
}

// ---------------------------------------------------------------------------
// prototype projection
// ---------------------------------------------------------------------------

TEST_CASE("prototype equal to a patch stays put with move distance zero") {
  ModelConfig cfg = tiny_config();
  ProtoPNetModel model = build_model(cfg, 7);
  Dataset data = toy_dataset(cfg, 2, 11);

  const Tensor z = backbone_forward(data.images[1], model.conv_filters, cfg);
  model.prototypes[0] = patch_at(z, 2, 3, cfg.proto_h, cfg.proto_w);
  const Tensor frozen = model.prototypes[0];

  const std::vector<ProjectionRecord> records = project_prototypes(model, data);
  CHECK(records[0].move_distance == 0.0);
  CHECK(records[0].image == 1);
  CHECK(records[0].row == 2);
  CHECK(records[0].col == 3);
  CHECK(model.prototypes[0].values == frozen.values);
}

TEST_CASE("single image with a 2x2 latent matches the four-way scan") {
  ModelConfig cfg;
  cfg.image_h = 4;
  cfg.image_w = 4;
  cfg.image_c = 1;
  cfg.blocks = {{.channels = 2, .kernel = 3, .stride = 1, .padding = 0, .pool = false}};
  cfg.addon_channels = 2;
  cfg.class_count = 1;
  cfg.prototypes_per_class = {1};
  ProtoPNetModel model = build_model(cfg, 3);

  Dataset data;
  data.split = "train";
  data.class_names = {"only"};
  std::mt19937 rng(21);
  data.images.push_back(random_image(cfg, rng));
  data.labels.push_back(0);

  const Tensor z = backbone_forward(data.images[0], model.conv_filters, cfg);
  REQUIRE(z.extent(0) == 2);
  REQUIRE(z.extent(1) == 2);
  const Tensor p = model.prototypes[0];

  int want_r = 0, want_c = 0;
  double want = patch_d2(z, p, 0, 0);
  for (int r = 0; r < 2; ++r) {
    for (int c = 0; c < 2; ++c) {
      const double d2 = patch_d2(z, p, r, c);
      if (d2 < want) {
        want = d2;
        want_r = r;
        want_c = c;
      }
    }
  }

  const std::vector<ProjectionRecord> records = project_prototypes(model, data);
  CHECK(records[0].row == want_r);
  CHECK(records[0].col == want_c);
  CHECK(records[0].image == 0);
  CHECK(model.prototypes[0].values == patch_at(z, want_r, want_c, 1, 1).values);
}

TEST_CASE("projection agrees with an exhaustive same-class scan") {
  ModelConfig cfg = tiny_config();
  ProtoPNetModel model = build_model(cfg, 19);
  Dataset data = toy_dataset(cfg, 3, 23);
  const std::vector<Tensor> original = model.prototypes;

  // Independent oracle: latents first, then a full lexicographic scan.
  std::vector<Tensor> latents;
  for (const Tensor& x : data.images) {
    latents.push_back(backbone_forward(x, model.conv_filters, cfg));
  }
  const int oh = latents[0].extent(0) - cfg.proto_h + 1;
  const int ow = latents[0].extent(1) - cfg.proto_w + 1;

  const std::vector<ProjectionRecord> records = project_prototypes(model, data);
  REQUIRE(records.size() == original.size());

  for (std::size_t j = 0; j < original.size(); ++j) {
    double best = 1e300;
    int bi = -1, br = 0, bc = 0;
    for (int i = 0; i < data.size(); ++i) {
      if (data.labels[i] != model.allocation[j]) continue;
      for (int r = 0; r < oh; ++r) {
        for (int c = 0; c < ow; ++c) {
          const double d2 = patch_d2(latents[i], original[j], r, c);
          if (d2 < best) {
            best = d2;
            bi = i;
            br = r;
            bc = c;
          }
        }
      }
    }
    CHECK(records[j].image == bi);
    CHECK(records[j].row == br);
    CHECK(records[j].col == bc);
    CHECK(records[j].class_id == model.allocation[j]);
    CHECK(records[j].before.values == original[j].values);

    const Tensor want = patch_at(latents[bi], br, bc, cfg.proto_h, cfg.proto_w);
    CHECK(records[j].after.values == want.values);
    CHECK(model.prototypes[j].values == want.values);

    // The chosen patch is at least as close as every same-class patch.
    for (int i = 0; i < data.size(); ++i) {
      if (data.labels[i] != model.allocation[j]) continue;
      for (int r = 0; r < oh; ++r) {
        for (int c = 0; c < ow; ++c) {
          CHECK(best <= patch_d2(latents[i], original[j], r, c));
        }
      }
    }

    double norm = 0.0;
    for (std::size_t t = 0; t < want.values.size(); ++t) {
      const double diff = want.values[t] - original[j].values[t];
      norm += diff * diff;
    }
    CHECK(records[j].move_distance ==
          doctest::Approx(std::sqrt(norm)).epsilon(1e-12));
  }
}

TEST_CASE("every projected prototype equals a same-class latent patch") {
  ModelConfig cfg = tiny_config();
  ProtoPNetModel model = build_model(cfg, 29);
  Dataset data = toy_dataset(cfg, 3, 31);
  project_prototypes(model, data);

  const int oh = latent_extent(cfg).first - cfg.proto_h + 1;
  const int ow = latent_extent(cfg).second - cfg.proto_w + 1;
  for (std::size_t j = 0; j < model.prototypes.size(); ++j) {
    bool found = false;
    for (int i = 0; i < data.size() && !found; ++i) {
      if (data.labels[i] != model.allocation[j]) continue;
      const Tensor z = backbone_forward(data.images[i], model.conv_filters, cfg);
      for (int r = 0; r < oh && !found; ++r) {
        for (int c = 0; c < ow && !found; ++c) {
          found = patch_at(z, r, c, cfg.proto_h, cfg.proto_w).values ==
                  model.prototypes[j].values;
        }
      }
    }
    CHECK(found);
  }
}

TEST_CASE("projection result does not depend on dataset order") {
  ModelConfig cfg = tiny_config();
  Dataset data = toy_dataset(cfg, 3, 37);

  Dataset shuffled;
  shuffled.split = data.split;
  shuffled.class_names = data.class_names;
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937 rng(5);
  std::shuffle(order.begin(), order.end(), rng);
  for (int i : order) {
    shuffled.images.push_back(data.images[i]);
    shuffled.labels.push_back(data.labels[i]);
  }

  ProtoPNetModel a = build_model(cfg, 41);
  ProtoPNetModel b = build_model(cfg, 41);
  project_prototypes(a, data);
  project_prototypes(b, shuffled);
  for (std::size_t j = 0; j < a.prototypes.size(); ++j) {
    CHECK(a.prototypes[j].values == b.prototypes[j].values);
  }
}

TEST_CASE("projection rejects datasets missing a class") {
  ModelConfig cfg = tiny_config();
  ProtoPNetModel model = build_model(cfg, 43);

  Dataset data;
  data.split = "train";
  data.class_names = {"0", "1"};
  std::mt19937 rng(47);
  data.images.push_back(random_image(cfg, rng));
  data.labels.push_back(0);  // class 1 absent
  CHECK_THROWS_AS(project_prototypes(model, data), DatasetError);

  data.labels[0] = 9;  // out of range
  CHECK_THROWS_AS(project_prototypes(model, data), DatasetError);
}

TEST_CASE("projection costs no more than three forward sweeps") {
  ModelConfig cfg = tiny_config();
  ProtoPNetModel model = build_model(cfg, 53);
  Dataset data = toy_dataset(cfg, 8, 59);

  using clock = std::chrono::steady_clock;
  auto time_best_of = [](int repeats, auto&& fn) {
    double best = 1e300;
    for (int r = 0; r < repeats; ++r) {
      const auto start = clock::now();
      fn();
      best = std::min(best,
                      std::chrono::duration<double>(clock::now() - start).count());
    }
    return best;
  };

  const double forward_seconds = time_best_of(3, [&]() {
    for (int i = 0; i < data.size(); ++i) {
      volatile double sink = model_forward(data.images[i], model).logits.values[0];
      (void)sink;
    }
  });
  const double projection_seconds = time_best_of(3, [&]() {
    ProtoPNetModel copy = model;
    project_prototypes(copy, data);
  });
  CHECK(projection_seconds <= 3.0 * forward_seconds + 0.02);
}

// ---------------------------------------------------------------------------
// stability verifier: handcrafted latent instances
// ---------------------------------------------------------------------------

TEST_CASE("zero move passes every assumption and changes no logits") {
  const Tensor z = handcrafted_latent();
  const std::vector<Tensor> bank = handcrafted_bank();
  const std::vector<int> allocation = {0, 0, 1, 1};

  for (double delta : kDeltaSweep) {
    CAPTURE(delta);
    const TheoremReport rep = verify_projection_theorem_latent(
        z, bank, bank, allocation, 2, 1e-4, delta);
    CHECK(rep.a1);
    CHECK(rep.a2a);
    CHECK(rep.a2b);
    CHECK(rep.a3);
    CHECK(rep.a4);
    CHECK(rep.correct_class == 0);
    CHECK(rep.m_prime == 2);
    for (double change : rep.logit_change) CHECK(change == 0.0);
    CHECK(rep.verdict == "bound_holds");
    CHECK(rep.prediction_unchanged);
    CHECK_FALSE(rep.margin_ok);  // the gap here is far below 2 * delta_max
  }
}

TEST_CASE("in-budget moves keep the bound at delta 0.5") {
  const Tensor z = handcrafted_latent();
  const std::vector<Tensor> before = handcrafted_bank();
  const std::vector<int> allocation = {0, 0, 1, 1};
  const double delta = 0.5;
  const TheoremConstants constants = theorem_constants(delta, 2);

  // Slide each prototype toward its nearest patch by half its budget:
  // correct class may move (sqrt(1.5)-1) * dist, off-class theta * dist
  // minus sqrt(eps).
  const std::vector<std::pair<double, double>> targets = {
      {0.5, 0.5}, {0.2, 0.2}, {0.1, 0.9}, {0.9, 0.1}};
  const std::vector<double> dists = {0.25, 0.25, 0.30, 0.30};
  std::vector<Tensor> after;
  for (int j = 0; j < 4; ++j) {
    const double budget =
        allocation[j] == 0
            ? (std::sqrt(1.5) - 1.0) * dists[j]
            : constants.theta * dists[j] - std::sqrt(1e-4);
    REQUIRE(budget > 0.0);
    Tensor moved = before[j];
    const double dx = targets[j].first - moved.values[0];
    const double dy = targets[j].second - moved.values[1];
    moved.values[0] += 0.5 * budget * dx / dists[j];
    moved.values[1] += 0.5 * budget * dy / dists[j];
    after.push_back(moved);
  }

  const TheoremReport rep = verify_projection_theorem_latent(
      z, before, after, allocation, 2, 1e-4, delta);
  CHECK(rep.assumptions_hold());
  CHECK(rep.verdict == "bound_holds");
  CHECK(rep.correct_class == 0);
  CHECK(rep.logit_change[0] >= -rep.delta_max - 1e-12);
  CHECK(rep.logit_change[1] <= rep.delta_max + 1e-12);
}

TEST_CASE("an out-of-budget off-class move reads assumptions unmet") {
  const Tensor z = handcrafted_latent();
  const std::vector<Tensor> before = handcrafted_bank();
  std::vector<Tensor> after = before;
  // Slide the third prototype 0.2 toward its nearest patch (0.1, 0.9):
  // far beyond theta * 0.3 - sqrt(eps) for every delta in the sweep, yet
  // small enough that the nearest patch itself stays the same.
  after[2].values[1] += 0.2;

  const std::vector<int> allocation = {0, 0, 1, 1};
  for (double delta : kDeltaSweep) {
    CAPTURE(delta);
    const TheoremReport rep = verify_projection_theorem_latent(
        z, before, after, allocation, 2, 1e-4, delta);
    CHECK(rep.a1);
    CHECK_FALSE(rep.a2a);
    CHECK(rep.a2b);
    CHECK(rep.verdict == "assumptions_unmet");
  }
}

TEST_CASE("uneven prototype allocation fails the uniform-count flag") {
  const Tensor z = handcrafted_latent();
  std::vector<Tensor> bank = handcrafted_bank();
  bank.pop_back();  // three prototypes: two for class 0, one for class 1

  const std::vector<int> uneven = {0, 0, 1};
  const TheoremReport rep = verify_projection_theorem_latent(
      z, bank, bank, uneven, 2, 1e-4, 0.5);
  CHECK_FALSE(rep.a3);
  CHECK(rep.m_prime == 2);  // the larger class drives the bound
  CHECK(rep.verdict == "assumptions_unmet");
}

TEST_CASE("verifier validates its inputs") {
  const Tensor z = handcrafted_latent();
  const std::vector<Tensor> bank = handcrafted_bank();
  const std::vector<Tensor> short_bank(bank.begin(), bank.end() - 1);
  const std::vector<Tensor> empty_bank;
  const std::vector<int> allocation = {0, 0, 1, 1};
  const std::vector<int> short_alloc = {0, 0, 1};
  const std::vector<int> bad_alloc = {0, 0, 1, 7};
  const std::vector<int> empty_alloc;

  CHECK_THROWS_AS(verify_projection_theorem_latent(z, bank, short_bank,
                                                   allocation, 2, 1e-4, 0.5),
                  ArgumentError);
  CHECK_THROWS_AS(verify_projection_theorem_latent(z, bank, bank, short_alloc,
                                                   2, 1e-4, 0.5),
                  ArgumentError);
  CHECK_THROWS_AS(verify_projection_theorem_latent(z, empty_bank, empty_bank,
                                                   empty_alloc, 2, 1e-4, 0.5),
                  ArgumentError);
  CHECK_THROWS_AS(verify_projection_theorem_latent(z, bank, bank, bad_alloc, 2,
                                                   1e-4, 0.5),
                  ArgumentError);
}

// ---------------------------------------------------------------------------
// stability verifier: generated instances across the delta sweep
// ---------------------------------------------------------------------------

TEST_CASE("constructed in-budget instances never violate the bound") {
  int checked = 0;
  for (double delta : kDeltaSweep) {
    for (unsigned int seed = 1; seed <= 10; ++seed) {
      CAPTURE(delta);
      CAPTURE(seed);
      const testing::LatentInstance inst =
          testing::make_theorem_instance(seed, delta);
      const TheoremReport rep = verify_projection_theorem_latent(
          inst.z, inst.before, inst.after, inst.allocation, inst.class_count,
          inst.eps, delta);
      CHECK(rep.a1);
      CHECK(rep.a2a);
      CHECK(rep.a2b);
      CHECK(rep.a3);
      CHECK(rep.a4);
      CHECK(rep.verdict == "bound_holds");
      CHECK(rep.correct_class == 0);
      CHECK(rep.logit_change[rep.correct_class] >= -rep.delta_max - 1e-12);
      for (int k = 0; k < inst.class_count; ++k) {
        if (k == rep.correct_class) continue;
        CHECK(rep.logit_change[k] <= rep.delta_max + 1e-12);
      }
      if (rep.margin_ok) CHECK(rep.prediction_unchanged);
      ++checked;
    }
  }
  CHECK(checked == 50);
}

// ---------------------------------------------------------------------------
// stability verifier: model-level wrapper
// ---------------------------------------------------------------------------

TEST_CASE("model wrapper rejects mismatched models") {
  ModelConfig cfg = tiny_config();
  const ProtoPNetModel base = build_model(cfg, 61);
  std::mt19937 rng(67);
  const Tensor x = random_image(cfg, rng);

  ProtoPNetModel other_backbone = build_model(cfg, 62);
  other_backbone.prototypes = base.prototypes;
  CHECK_THROWS_AS(verify_projection_theorem(base, other_backbone, x, 0.5),
                  ArgumentError);

  ProtoPNetModel other_eps = base;
  other_eps.config.epsilon = 1e-3;
  CHECK_THROWS_AS(verify_projection_theorem(base, other_eps, x, 0.5),
                  ArgumentError);

  ModelConfig lopsided = cfg;
  lopsided.prototypes_per_class = {1, 3};
  ProtoPNetModel other_alloc = build_model(lopsided, 61);
  other_alloc.conv_filters = base.conv_filters;
  CHECK_THROWS_AS(verify_projection_theorem(base, other_alloc, x, 0.5),
                  ArgumentError);
}

TEST_CASE("identical models report zero change under the wrapper") {
  ModelConfig cfg = tiny_config();
  const ProtoPNetModel model = build_model(cfg, 71);
  std::mt19937 rng(73);
  const Tensor x = random_image(cfg, rng);

  const TheoremReport rep = verify_projection_theorem(model, model, x, 0.5);
  for (double change : rep.logit_change) {
    CHECK(change == 0.0);
    CHECK(std::abs(change) <= rep.delta_max);
  }
  REQUIRE(rep.logits_before_true.size() == 2);
  REQUIRE(rep.logits_after_true.size() == 2);
  for (int k = 0; k < 2; ++k) {
    CHECK(rep.logits_before_true[k] == rep.logits_after_true[k]);
  }
}

TEST_CASE("a real projection never yields a bound violation") {
  ModelConfig cfg = tiny_config();
  ProtoPNetModel before = build_model(cfg, 79);
  Dataset data = toy_dataset(cfg, 3, 83);

  ProtoPNetModel after = before;
  project_prototypes(after, data);

  for (double delta : kDeltaSweep) {
    for (int i = 0; i < data.size(); ++i) {
      CAPTURE(delta);
      CAPTURE(i);
      const TheoremReport rep =
          verify_projection_theorem(before, after, data.images[i], delta);
      // The theorem promises: whenever the assumptions hold the bound
      // holds, so the only acceptable verdicts are these two.
      const bool acceptable =
          rep.verdict == "bound_holds" || rep.verdict == "assumptions_unmet";
      CHECK(acceptable);
      if (!rep.assumptions_hold()) CHECK(rep.verdict == "assumptions_unmet");
    }
  }
}

// ---------------------------------------------------------------------------
// report serialization
// ---------------------------------------------------------------------------

TEST_CASE("serialized reports are line-oriented key=value text") {
  const Tensor z = handcrafted_latent();
  const std::vector<Tensor> bank = handcrafted_bank();
  const std::vector<int> allocation = {0, 0, 1, 1};
  const TheoremReport rep = verify_projection_theorem_latent(
      z, bank, bank, allocation, 2, 1e-4, 0.5);
  const std::string text = serialize_report(rep);

  for (const char* key :
       {"image=", "class=", "delta=", "theta=", "m_prime=", "delta_max=",
        "a1=", "a2a=", "a2b=", "a3=", "a4=", "logit_change_0=",
        "logit_change_1=", "margin_ok=", "prediction_unchanged=",
        "verdict="}) {
    CAPTURE(key);
    CHECK(text.find(key) != std::string::npos);
  }
  CHECK(text.find("a1=pass") != std::string::npos);
  CHECK(text.find("verdict=bound_holds") != std::string::npos);

  // Every line is a single key=value pair.
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(start, end - start);
    if (!line.empty()) {
      CHECK(std::count(line.begin(), line.end(), '=') == 1);
    }
    start = end + 1;
  }

  // A failing flag serializes as fail.
  std::vector<Tensor> moved = bank;
  moved[2].values[1] += 0.2;
  const TheoremReport bad = verify_projection_theorem_latent(
      z, bank, moved, allocation, 2, 1e-4, 0.5);
  const std::string bad_text = serialize_report(bad);
  CHECK(bad_text.find("a2a=fail") != std::string::npos);
  CHECK(bad_text.find("verdict=assumptions_unmet") != std::string::npos);
}
