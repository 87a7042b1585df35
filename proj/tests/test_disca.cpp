#include <doctest.h>

#include <cmath>

#include "clickseg/agent.hpp"
#include "clickseg/error.hpp"
#include "clickseg/experiment.hpp"
#include "clickseg/metrics.hpp"
#include "clickseg/retrain.hpp"
#include "support.hpp"

using namespace clickseg;

namespace {

// Direct Eq.-style evaluation in long double from probabilities.
long double reference_loss(const Tensor3<double>& f, const std::vector<int>& cls, const Tensor3<double>& p0,
                           double lambda) {
  long double ce = 0, l1 = 0;
  int annotated = 0;
  for (std::size_t i = 0; i < cls.size(); ++i)
    if (cls[i] >= 0) {
      ce -= std::log(std::max<long double>(f.data[cls[i] * f.plane() + i], kLogFloor));
      ++annotated;
    }
  for (std::size_t j = 0; j < f.data.size(); ++j) l1 += std::abs((long double)f.data[j] - p0.data[j]);
  return (annotated ? ce / annotated : 0) + lambda * l1 / f.data.size();
}

Tensor3<double> softmax_d(const Tensor3<double>& z) {
  Tensor3<double> p(z.channels, z.height, z.width);
  for (std::size_t i = 0; i < z.plane(); ++i) {
    double m = -1e300, s = 0;
    for (int k = 0; k < z.channels; ++k) m = std::max(m, z.data[k * z.plane() + i]);
    for (int k = 0; k < z.channels; ++k) s += std::exp(z.data[k * z.plane() + i] - m);
    for (int k = 0; k < z.channels; ++k) p.data[k * z.plane() + i] = std::exp(z.data[k * z.plane() + i] - m) / s;
  }
  return p;
}

PredictionMap map_of(std::initializer_list<float> values, int n, int h, int w) {
  PredictionMap p{Tensor3<float>(n, h, w)};
  std::copy(values.begin(), values.end(), p.probabilities.data.begin());
  return p;
}

}  // namespace

TEST_CASE("sparse target examples") {
  const SparseTarget empty = build_sparse_target({}, 4, 5, 3);
  for (auto v : empty.values.data) REQUIRE(v == -1);
  CHECK(empty.annotated_count() == 0);

  const SparseTarget one = build_sparse_target({{3, 4, 2, ClickOrigin::human}}, 6, 6, 6);
  for (int k = 0; k < 6; ++k) CHECK(one.values.at(k, 3, 4) == (k == 2 ? 1 : 0));
  CHECK(one.values.at(0, 0, 0) == -1);
  CHECK(one.annotated_class(3 * 6 + 4) == 2);

  const SparseTarget twice = build_sparse_target({{1, 1, 1, ClickOrigin::human}, {1, 1, 0, ClickOrigin::human}}, 3, 3, 2);
  CHECK(twice.values.at(0, 1, 1) == 1);
  CHECK(twice.values.at(1, 1, 1) == 0);
}

TEST_CASE("sparse target matches a replay of the click history") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<ClickAnnotation> clicks;
    for (int i = 0; i < 12; ++i)
      clicks.push_back({static_cast<int>(rng() % 4), static_cast<int>(rng() % 4), static_cast<int>(rng() % 3),
                        ClickOrigin::simulated});
    std::vector<int> last(16, -1);
    for (const auto& c : clicks) last[c.row * 4 + c.col] = c.class_id;
    const SparseTarget t = build_sparse_target(clicks, 4, 4, 3);
    for (std::size_t i = 0; i < 16; ++i) {
      REQUIRE(t.annotated_class(i) == last[i]);
      int ones = 0, minus = 0;
      for (int k = 0; k < 3; ++k) {
        ones += t.values.data[k * 16 + i] == 1;
        minus += t.values.data[k * 16 + i] == -1;
      }
      REQUIRE(((ones == 1 && minus == 0) || (ones == 0 && minus == 3)));
    }
  }
}

TEST_CASE("interactive loss examples") {
  SUBCASE("prediction equal to p0 and no annotation") {
    const auto f = map_of({0.3F, 0.7F}, 2, 1, 1);
    CHECK(interactive_loss(f, build_sparse_target({}, 1, 1, 2), f, 1.0).total == 0.0);
  }
  SUBCASE("one pixel, two classes, hand evaluated") {
    const auto f = map_of({0.8F, 0.2F}, 2, 1, 1), p0 = map_of({0.6F, 0.4F}, 2, 1, 1);
    const LossTerms t = interactive_loss(f, build_sparse_target({{0, 0, 0, ClickOrigin::human}}, 1, 1, 2), p0, 1.0);
    CHECK(t.cross_entropy == doctest::Approx(0.2231435513).epsilon(1e-6));
    CHECK(t.recall == doctest::Approx(0.2).epsilon(1e-6));
    CHECK(t.total == doctest::Approx(0.4231435513).epsilon(1e-6));
  }
  SUBCASE("certain and unchanged") {
    const auto f = map_of({1.0F, 0.0F}, 2, 1, 1);
    CHECK(interactive_loss(f, build_sparse_target({{0, 0, 0, ClickOrigin::human}}, 1, 1, 2), f, 1.0).total == 0.0);
  }
}

TEST_CASE("loss decomposition") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor3<double> z(3, 5, 4), z0(3, 5, 4);
    for (auto& v : z.data) v = static_cast<double>(rng() % 2000) / 500.0 - 2.0;
    for (auto& v : z0.data) v = static_cast<double>(rng() % 2000) / 500.0 - 2.0;
    const auto f = softmax_d(z), p0 = softmax_d(z0);
    std::vector<ClickAnnotation> clicks{{1, 1, 2, ClickOrigin::human}, {3, 0, 0, ClickOrigin::human}};
    const auto target = build_sparse_target(clicks, 5, 4, 3);
    const double lambda = 0.5 + trial;
    const LossTerms zero = interactive_loss(f, target, p0, 0.0);
    CHECK(zero.total == doctest::Approx(zero.cross_entropy));
    const LossTerms none = interactive_loss(f, build_sparse_target({}, 5, 4, 3), p0, lambda);
    CHECK(none.cross_entropy == 0.0);
    CHECK(none.total == doctest::Approx(lambda * none.recall));
    std::vector<int> cls(20, -1);
    cls[1 * 4 + 1] = 2;
    cls[3 * 4 + 0] = 0;
    CHECK(interactive_loss(f, target, p0, lambda).total ==
          doctest::Approx(static_cast<double>(reference_loss(f, cls, p0, lambda))).epsilon(1e-12));
  }
}

TEST_CASE("logit gradient matches central differences (4x4x3, double)") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor3<double> z(3, 4, 4), z0(3, 4, 4);
    for (auto& v : z.data) v = static_cast<double>(rng() % 2000) / 500.0 - 2.0;
    for (auto& v : z0.data) v = static_cast<double>(rng() % 2000) / 500.0 - 2.0;
    const auto p0 = softmax_d(z0);
    std::vector<ClickAnnotation> clicks;
    for (int i = 0; i < 1 + trial % 5; ++i)
      clicks.push_back({static_cast<int>(rng() % 4), static_cast<int>(rng() % 4), static_cast<int>(rng() % 3),
                        ClickOrigin::human});
    const auto target = build_sparse_target(clicks, 4, 4, 3);
    Tensor3<double> grad;
    interactive_loss_logits(z, target, p0, 1.0, &grad);
    const double h = 1e-6;
    for (std::size_t i = 0; i < z.data.size(); ++i) {
      Tensor3<double> up = z, down = z;
      up.data[i] += h;
      down.data[i] -= h;
      const double fd = (interactive_loss_logits(up, target, p0, 1.0).total -
                         interactive_loss_logits(down, target, p0, 1.0).total) /
                        (2 * h);
      REQUIRE(std::abs(fd - grad.data[i]) <= 1e-4 * std::max(1e-3, std::abs(fd)));
    }
  }
}

TEST_CASE("DiscaConfig validation and JSON") {
  DiscaConfig c;
  CHECK(c.lambda == 1.0);
  CHECK(c.steps == 10);
  CHECK(c.learning_rate == 2e-6);
  CHECK(c.ac_dropout_probability == 0.5);
  CHECK_NOTHROW(c.validate());
  c.lambda = 10;
  c.ac_enabled = false;
  const nlohmann::json j = c;
  const DiscaConfig back = j.get<DiscaConfig>();
  CHECK(back.lambda == 10);
  CHECK_FALSE(back.ac_enabled);
  DiscaConfig bad;
  bad.steps = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.learning_rate = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.lambda = -1;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("refine restores parameters bit-exactly after a non-finite loss") {
  std::mt19937_64 rng(4);
  ModelConfig cfg;
  cfg.widths = {4, 6, 8};
  SegmentationModel model(cfg, 2);
  const RasterImage img = testsupport::random_image(3, 12, 12, rng);
  PredictionMap p0 = forward(model, img);
  p0.frozen = true;
  DiscaConfig dc;
  dc.learning_rate = 1e-2;
  const auto before = model.parameters();
  for (int at : {0, 3, 9}) {
    std::mt19937_64 r(1);
    bool diverged = false;
    try {
      refine(model, img, {{2, 2, 1, ClickOrigin::human}}, p0, dc, r, at);
    } catch (const Error& e) {
      diverged = e.code() == ErrorCode::diverged;
    }
    CHECK(diverged);
    REQUIRE(model.parameters() == before);
  }
  std::mt19937_64 r(1);
  refine(model, img, {{2, 2, 1, ClickOrigin::human}}, p0, dc, r);
  CHECK_FALSE(model.parameters() == before);
}

TEST_CASE("ablation toggles") {
  std::mt19937_64 rng(5);
  ModelConfig cfg;
  cfg.widths = {4, 6, 8};
  const SegmentationModel base(cfg, 3);
  const RasterImage img = testsupport::random_image(3, 12, 12, rng);
  PredictionMap p0 = forward(base, img);
  p0.frozen = true;
  const std::vector<ClickAnnotation> clicks{{2, 2, 1, ClickOrigin::human}, {8, 9, 0, ClickOrigin::human}};
  DiscaConfig dc;
  dc.learning_rate = 1e-2;

  SUBCASE("ac disabled equals dropping the annotation channels every step") {
    SegmentationModel a = base, b = base;
    DiscaConfig off = dc, always = dc;
    off.ac_enabled = false;
    always.ac_dropout_probability = 1.0;
    std::mt19937_64 r1(7), r2(7);
    refine(a, img, clicks, p0, off, r1);
    refine(b, img, clicks, p0, always, r2);
    CHECK(a.parameters() == b.parameters());
  }
  SUBCASE("regularization disabled equals lambda zero") {
    SegmentationModel a = base, b = base;
    DiscaConfig off = dc, zero = dc;
    off.regularization_enabled = false;
    zero.lambda = 0.0;
    std::mt19937_64 r1(7), r2(7);
    refine(a, img, clicks, p0, off, r1);
    refine(b, img, clicks, p0, zero, r2);
    CHECK(a.parameters() == b.parameters());
  }
  SUBCASE("no clicks and no regularization leaves parameters alone") {
    SegmentationModel a = base;
    DiscaConfig off = dc;
    off.regularization_enabled = false;
    std::mt19937_64 r1(7);
    refine(a, img, {}, p0, off, r1);
    CHECK(a.parameters() == base.parameters());
  }
}

TEST_CASE("session weights") {
  ModelConfig cfg;
  cfg.widths = {4, 6, 8};
  const SegmentationModel ckpt(cfg, 3);
  SessionWeights reset(ckpt, WeightPolicy::reset_per_image);
  // images A, B, A: both passes over A start from the checkpoint
  auto& a1 = reset.begin_image();
  const auto start_a1 = a1.parameters();
  a1.parameters()[0] += 1.0F;
  auto& b = reset.begin_image();
  b.parameters()[1] += 1.0F;
  auto& a2 = reset.begin_image();
  CHECK(a2.parameters() == start_a1);

  SessionWeights seq(ckpt, WeightPolicy::sequential);
  seq.begin_image().parameters()[0] += 1.0F;
  CHECK(seq.begin_image().parameters()[0] == ckpt.parameters()[0] + 1.0F);
  CHECK(weight_policy_from_string(to_string(WeightPolicy::sequential)) == WeightPolicy::sequential);
}

TEST_SUITE("fixture") {
  TEST_CASE("zero clicks with lambda > 0 keep the argmax") {
    SegmentationModel model = SegmentationModel::load(testsupport::fixture_checkpoint());
    const ToyPreset p = toy_preset();
    ToyConfig cfg = p.train;
    cfg.count = 5;
    for (const auto& [img, lab] : generate_toy(p.test_seed + 5, cfg)) {
      SegmentationModel m = model;
      PredictionMap p0 = forward(m, img);
      p0.frozen = true;
      std::mt19937_64 rng(1);
      const auto r = refine(m, img, {}, p0, p.disca, rng);
      CHECK(r.prediction.argmax() == p0.argmax());
      CHECK(r.losses.front() == doctest::Approx(0.0).epsilon(1e-9));
    }
  }

  TEST_CASE("one correct click in a misclassified blob rarely hurts the tile") {
    const SegmentationModel model = SegmentationModel::load(testsupport::fixture_checkpoint());
    const ToyPreset p = toy_preset();
    ToyConfig cfg = p.shifted;
    cfg.height = cfg.width = 64;
    cfg.count = 50;
    const auto tiles = generate_toy(p.test_seed + 50, cfg);
    int trials = 0, not_worse = 0;
    for (std::size_t i = 0; i < tiles.size(); ++i) {
      const auto& [img, lab] = tiles[i];
      SegmentationModel m = model;
      PredictionMap p0 = forward(m, img);
      p0.frozen = true;
      const auto comps = error_components(p0, lab);
      if (comps.empty()) continue;
      const Pixel at = comps[0].interior;
      DiscaConfig dc = p.disca;
      dc.seed = i;
      std::mt19937_64 rng(i);
      const auto r = refine(m, img, {{at.row, at.col, lab.at(at.row, at.col), ClickOrigin::simulated}}, p0, dc, rng);
      ++trials;
      not_worse += iou(r.prediction, lab).mean >= iou(p0, lab).mean;
    }
    MESSAGE("not worse in " << not_worse << "/" << trials);
    REQUIRE(trials >= 40);
    CHECK(not_worse >= 0.9 * trials);
  }

  TEST_CASE("AC-only changes stay inside the receptive field; DISCA reaches beyond") {
    SegmentationModel model = SegmentationModel::load(testsupport::fixture_checkpoint());
    const ToyPreset p = toy_preset();
    ToyConfig cfg = p.shifted;
    cfg.height = cfg.width = 128;
    cfg.count = 3;
    const int radius = model.network().receptive_radius();
    bool disca_global = false;
    for (const auto& [img, lab] : generate_toy(p.test_seed + 7, cfg)) {
      PredictionMap p0 = forward(model, img);
      p0.frozen = true;
      const auto comps = error_components(p0, lab);
      REQUIRE_FALSE(comps.empty());
      const Pixel at = comps[0].interior;
      const ClickAnnotation click{at.row, at.col, lab.at(at.row, at.col), ClickOrigin::simulated};
      const auto enc = encode({click}, 128, 128, 2, model.config().encoding);
      const PredictionMap ac = forward(model, img, enc);
      // the encoding footprint spreads the click by ceil(radius) pixels
      const int reach = radius + static_cast<int>(std::ceil(model.config().encoding.radius));
      std::vector<bool> ac_changed(128 * 128, false);
      for (int r = 0; r < 128; ++r)
        for (int c = 0; c < 128; ++c)
          for (int k = 0; k < 2; ++k) {
            const bool differs = ac.probabilities.at(k, r, c) != p0.probabilities.at(k, r, c);
            if (differs) ac_changed[r * 128 + c] = true;
            if (std::max(std::abs(r - at.row), std::abs(c - at.col)) > reach) REQUIRE_FALSE(differs);
          }
      SegmentationModel m = model;
      std::mt19937_64 rng(3);
      const auto d = refine(m, img, {click}, p0, p.disca, rng);
      const auto pa = p0.argmax(), da = d.prediction.argmax();
      for (int i = 0; i < 128 * 128; ++i)
        if (!ac_changed[i] && pa[i] != da[i]) disca_global = true;
    }
    CHECK(disca_global);
  }
}
