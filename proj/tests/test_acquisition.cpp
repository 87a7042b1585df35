#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "clickseg/acquisition.hpp"
#include "clickseg/error.hpp"
#include "clickseg/experiment.hpp"
#include "support.hpp"

using namespace clickseg;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.widths = {4, 6, 8};
  return cfg;
}

PredictionMap single_pixel(std::vector<float> p) {
  PredictionMap m{Tensor3<float>(static_cast<int>(p.size()), 1, 1)};
  m.probabilities.data = std::move(p);
  return m;
}

struct Separation {
  double wrong = 0, right = 0;
};

Separation split_by_error(const UncertaintyMap& u, const std::vector<int>& predicted, const LabelMask& lab) {
  double sw = 0, sr = 0;
  long long nw = 0, nr = 0;
  for (std::size_t i = 0; i < u.scores.size(); ++i) {
    if (lab.ignored(i)) continue;
    if (predicted[i] == lab.labels[i]) {
      sr += u.scores[i];
      ++nr;
    } else {
      sw += u.scores[i];
      ++nw;
    }
  }
  return {nw ? sw / nw : 0.0, nr ? sr / nr : 0.0};
}

}  // namespace

TEST_CASE("entropy examples") {
  CHECK(entropy(single_pixel({0.5F, 0.5F})).scores[0] == doctest::Approx(std::log(2.0)));
  CHECK(entropy(single_pixel({1.0F, 0.0F})).scores[0] == 0.0F);
  CHECK(entropy(single_pixel({0.7F, 0.2F, 0.1F})).scores[0] == doctest::Approx(0.8018185).epsilon(1e-6));
  const std::vector<double> p{0.7, 0.2, 0.1};
  CHECK(entropy(std::span<const double>(p)) == doctest::Approx(0.80181855).epsilon(1e-8));
}

TEST_CASE("entropy bounds and permutation invariance") {
  std::mt19937_64 rng(1);
  for (int n = 2; n <= 6; ++n) {
    std::vector<double> uniform(n, 1.0 / n), onehot(n, 0.0);
    onehot[n - 1] = 1.0;
    CHECK(entropy(std::span<const double>(uniform)) == doctest::Approx(std::log(n)).epsilon(1e-14));
    CHECK(entropy(std::span<const double>(onehot)) == 0.0);
    for (int t = 0; t < 50; ++t) {
      std::vector<double> p(n);
      for (auto& v : p) v = std::exponential_distribution<double>(1.0)(rng);
      const double s = std::accumulate(p.begin(), p.end(), 0.0);
      for (auto& v : p) v /= s;
      const double h = entropy(std::span<const double>(p));
      REQUIRE(h >= 0.0);
      REQUIRE(h <= std::log(n) + 1e-12);
      std::shuffle(p.begin(), p.end(), rng);
      REQUIRE(entropy(std::span<const double>(p)) == doctest::Approx(h).epsilon(1e-14));
    }
  }
}

TEST_CASE("MC dropout") {
  std::mt19937_64 rng(2);
  ModelConfig cfg = small_config();
  const SegmentationModel model(cfg, 4);
  const RasterImage img = testsupport::random_image(3, 2, 2, rng);
  const AnnotationTensor zeros{Tensor3<float>(2, 2, 2)};

  SUBCASE("zero rate gives zero variance") {
    McDropoutConfig mc;
    mc.dropout_rate = 0.0;
    for (float v : mc_dropout(model, img, zeros, mc).scores) CHECK(std::abs(v) < 1e-12F);
  }
  SUBCASE("seeded determinism") {
    McDropoutConfig mc;
    CHECK(mc_dropout(model, img, zeros, mc).scores == mc_dropout(model, img, zeros, mc).scores);
  }
  SUBCASE("fewer than two passes is rejected") {
    McDropoutConfig mc;
    mc.passes = 1;
    CHECK_THROWS_AS(mc_dropout(model, img, zeros, mc), Error);
  }
  SUBCASE("two-pass variance over the same dropout masks") {
    for (double rate : {0.1, 0.5}) {
      McDropoutConfig mc;
      mc.dropout_rate = rate;
      mc.passes = 5;
      const auto got = mc_dropout(model, img, zeros, mc);
      // replay the passes with an identically seeded generator
      std::mt19937_64 replay(mc.seed);
      const nn::ForwardOptions opts{true, rate, &replay};
      const Tensor3<float> input = model.assemble_input(img, &zeros);
      std::vector<Tensor3<float>> passes;
      for (int i = 0; i < mc.passes; ++i) passes.push_back(nn::softmax(model.network().forward(input, opts, nullptr)));
      for (std::size_t px = 0; px < 4; ++px) {
        double total = 0;
        for (int k = 0; k < 2; ++k) {
          double mean = 0;
          for (const auto& p : passes) mean += p.data[k * 4 + px];
          mean /= mc.passes;
          double var = 0;
          for (const auto& p : passes) var += (p.data[k * 4 + px] - mean) * (p.data[k * 4 + px] - mean);
          total += var / mc.passes;
        }
        CHECK(got.scores[px] == doctest::Approx(total).epsilon(1e-4));
      }
    }
  }
}

TEST_CASE("ODIN limiting cases") {
  std::mt19937_64 rng(3);
  const SegmentationModel model(small_config(), 5);
  const RasterImage img = testsupport::random_image(3, 6, 7, rng);
  const AnnotationTensor zeros{Tensor3<float>(2, 6, 7)};
  SUBCASE("no perturbation, no tempering") {
    OdinConfig oc;
    oc.epsilon = 0;
    oc.temperature = 1;
    const auto u = odin(model, img, zeros, oc);
    const auto p = forward(model, img);
    for (std::size_t i = 0; i < u.scores.size(); ++i)
      CHECK(u.scores[i] == doctest::Approx(1.0 - std::max(p.probabilities.data[i], p.probabilities.data[42 + i])));
  }
  SUBCASE("huge temperature flattens to 1/N") {
    OdinConfig oc;
    oc.temperature = 1e6;
    for (float v : odin(model, img, zeros, oc).scores) CHECK(v == doctest::Approx(0.5).epsilon(1e-4));
  }
  SUBCASE("perturbation toward the prediction raises confidence") {
    OdinConfig toward, away, none;
    toward.temperature = away.temperature = none.temperature = 1.0;
    away.toward_prediction = false;
    none.epsilon = 0;
    const auto a = odin(model, img, zeros, toward), b = odin(model, img, zeros, away), c = odin(model, img, zeros, none);
    const double ma = std::accumulate(a.scores.begin(), a.scores.end(), 0.0);
    const double mb = std::accumulate(b.scores.begin(), b.scores.end(), 0.0);
    const double mc = std::accumulate(c.scores.begin(), c.scores.end(), 0.0);
    CHECK(ma < mc);
    CHECK(mb > mc);
  }
  SUBCASE("invalid settings") {
    OdinConfig oc;
    oc.temperature = 0.5;
    CHECK_THROWS_AS(odin(model, img, zeros, oc), Error);
    oc = {};
    oc.epsilon = -1;
    CHECK_THROWS_AS(odin(model, img, zeros, oc), Error);
  }
}

TEST_CASE("ConfidNet head") {
  std::mt19937_64 rng(4);
  const SegmentationModel model(small_config(), 6);
  const int tap = model.network().feature_tap_channels();
  const ConfidNetHead head(tap, {4, 6, 5, 3, 1}, 1);
  const RasterImage img = testsupport::random_image(3, 8, 12, rng);
  const AnnotationTensor zeros{Tensor3<float>(2, 8, 12)};

  SUBCASE("untrained head is 0.5 everywhere") {
    const auto u = confidnet_score(model, img, zeros, head);
    REQUIRE(u.height == 8);
    REQUIRE(u.width == 12);
    for (float v : u.scores) CHECK(v == 0.5F);
  }
  SUBCASE("backward matches finite differences") {
    ConfidNetHead h = head;
    Tensor3<float> feat(tap, 4, 5);
    for (auto& v : feat.data) v = static_cast<float>(rng() % 1000) / 1000.0F;
    ConfidNetHead::Cache cache;
    const Tensor3<float> out = h.forward(feat, &cache);
    Tensor3<float> w(1, out.height, out.width);
    for (auto& v : w.data) v = static_cast<float>(rng() % 1000) / 1000.0F - 0.5F;
    std::vector<float> grads(h.parameters().size(), 0.0F);
    h.backward(cache, w, grads);
    auto objective = [&](const ConfidNetHead& hh) {
      const Tensor3<float> o = hh.forward(feat);
      double s = 0;
      for (std::size_t i = 0; i < o.data.size(); ++i) s += double(w.data[i]) * o.data[i];
      return s;
    };
    // directional derivatives; directions whose difference quotient is not
    // stable under halving the step cross a ReLU kink and are skipped
    auto quotient = [&](const std::vector<float>& d, float step) {
      ConfidNetHead up = h, down = h;
      for (std::size_t i = 0; i < d.size(); ++i) {
        up.parameters()[i] += step * d[i];
        down.parameters()[i] -= step * d[i];
      }
      return (objective(up) - objective(down)) / (2.0 * step);
    };
    int checked = 0;
    for (int t = 0; t < 12; ++t) {
      std::vector<float> d(grads.size());
      for (auto& x : d) x = std::normal_distribution<float>()(rng);
      double analytic = 0;
      for (std::size_t i = 0; i < d.size(); ++i) analytic += double(grads[i]) * d[i];
      const double coarse = quotient(d, 1e-3F), mid = quotient(d, 5e-4F), fine = quotient(d, 2.5e-4F);
      const double tol = 5e-3 * std::abs(fine) + 1e-3;
      if (std::abs(coarse - mid) > tol || std::abs(mid - fine) > tol) continue;
      CHECK(analytic == doctest::Approx(fine).epsilon(1e-2));
      ++checked;
    }
    CHECK(checked >= 4);
  }
  SUBCASE("training leaves the downstream model untouched and records its identity") {
    ToyConfig toy;
    toy.height = toy.width = 16;
    toy.count = 3;
    const auto data = generate_toy(1, toy);
    const std::string before = model.hash();
    ConfidNetTrainConfig tc;
    tc.epochs = 2;
    const ConfidNetHead trained = confidnet_train(model, head, data, tc);
    CHECK(model.hash() == before);
    CHECK(trained.model_hash() == before);
    const auto u = confidnet_score(model, img, zeros, trained);
    for (float v : u.scores) CHECK((v > 0.0F && v < 1.0F));
    const SegmentationModel other(small_config(), 99);
    CHECK_THROWS_AS(confidnet_score(other, img, zeros, trained), Error);
    CHECK_NOTHROW(confidnet_score(other, img, zeros, trained, false));
    const auto dir = testsupport::scratch_dir("confidnet");
    trained.save(dir / "h.confidnet");
    const ConfidNetHead back = ConfidNetHead::load(dir / "h.confidnet");
    CHECK(back.parameters() == trained.parameters());
    CHECK(back.model_hash() == trained.model_hash());
    CHECK(back.widths() == trained.widths());
  }
  SUBCASE("wrong tap width is a mismatch") {
    ToyConfig toy;
    toy.height = toy.width = 16;
    CHECK_THROWS_AS(confidnet_train(model, ConfidNetHead(tap + 1, {4, 6, 5, 3, 1}, 1), generate_toy(1, toy), {}), Error);
  }
}

TEST_CASE("method names and export") {
  for (auto m : {AcquisitionMethod::entropy, AcquisitionMethod::mc_dropout, AcquisitionMethod::odin,
                 AcquisitionMethod::confidnet})
    CHECK(acquisition_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(acquisition_from_string("ensemble"), Error);
  UncertaintyMap u;
  u.height = 2;
  u.width = 3;
  u.scores = {0, 0.1F, 0.2F, 0.3F, 0.4F, 0.5F};
  u.method = "entropy";
  u.wall_time = 0.25;
  const auto dir = testsupport::scratch_dir("uncertainty_export");
  save_uncertainty(dir / "u.png", u, {{"note", "x"}});
  const auto loaded = load_raster(dir / "u.png");
  CHECK(loaded.image.channels() == 1);
  CHECK(loaded.image.pixels.data.front() == 0.0F);
  CHECK(loaded.image.pixels.data.back() == 1.0F);
  std::ifstream side(dir / "u.png.json");
  const auto j = nlohmann::json::parse(side);
  CHECK(j.at("method") == "entropy");
  CHECK(j.at("wall_time") == 0.25);
  CHECK(j.contains("config"));
}

TEST_SUITE("fixture") {
  TEST_CASE("every method scores misclassified pixels higher, ODIN in both sign conventions") {
    const SegmentationModel model = SegmentationModel::load(testsupport::fixture_checkpoint());
    const ConfidNetHead head = ConfidNetHead::load(testsupport::fixture_confidnet());
    const ToyPreset p = toy_preset();
    ToyConfig cfg = p.test;
    cfg.count = 2;
    cfg.height = cfg.width = 128;
    for (const auto& [img, lab] : generate_toy(p.test_seed + 11, cfg)) {
      const AnnotationTensor zeros{Tensor3<float>(2, img.height(), img.width())};
      const auto predicted = forward(model, img).argmax();
      AcquisitionSettings settings;
      settings.confidnet = &head;
      for (auto m : {AcquisitionMethod::entropy, AcquisitionMethod::mc_dropout, AcquisitionMethod::odin,
                     AcquisitionMethod::confidnet}) {
        const auto s = split_by_error(estimate_uncertainty(m, model, img, zeros, settings), predicted, lab);
        MESSAGE(to_string(m) << " wrong " << s.wrong << " right " << s.right);
        CHECK(s.wrong > s.right);
      }
      OdinConfig away;
      away.toward_prediction = false;
      const auto s = split_by_error(odin(model, img, zeros, away), predicted, lab);
      CHECK(s.wrong > s.right);
    }
  }
}
