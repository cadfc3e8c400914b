#include <doctest.h>

#include <algorithm>

#include "iap/baselines.hpp"
#include "iap/error.hpp"
#include "iap/eval.hpp"
#include "test_util.hpp"

using namespace iap;
using iap::testing::random_8bit_image;
using iap::testing::random_image;

namespace {

// logits = x on a 1x1x10 input: the argmax is wherever the image is brightest.
Classifier identity_classifier() {
  Classifier f = make_classifier("linear", 10, Shape{1, 1, 1, 10});
  auto& lin = dynamic_cast<nn::Linear&>(f.network().layer(0));
  lin.weight().fill(0.0);
  lin.bias().fill(0.0);
  for (int c = 0; c < 10; ++c) lin.weight().at(c, c, 0, 0) = 1.0;
  return f;
}

ImageTensor one_hot(int c) {
  ImageTensor x(1, 1, 10, -1.0);
  x.set(0, 0, c, 1.0);
  return x;
}

ImageTensor hflip(const ImageTensor& x) {
  ImageTensor out(x.channels(), x.height(), x.width());
  for (int c = 0; c < x.channels(); ++c) {
    for (int y = 0; y < x.height(); ++y) {
      for (int i = 0; i < x.width(); ++i) out.set(c, y, i, x.at(c, y, x.width() - 1 - i));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("success rate: correct classifications give 0") {
  const Classifier f = identity_classifier();
  std::vector<AdvSample> s;
  for (int c = 0; c < 10; ++c) s.push_back({one_hot(c), c});
  CHECK(success_rate(f, s) == 0.0);
  CHECK(success_rate(f, s, true, 3) == doctest::Approx(0.1));
  CHECK_THROWS_AS(success_rate(f, std::vector<AdvSample>{}), ConfigError);
}

TEST_CASE("success rate with random labels is about (C - 1) / C") {
  const Classifier f = identity_classifier();
  Rng rng(1);
  std::vector<AdvSample> s;
  for (int i = 0; i < 1000; ++i) s.push_back({one_hot(uniform_int(rng, 0, 9)), uniform_int(rng, 0, 9)});
  const double r = success_rate(f, s);
  CHECK(r >= 0.85);
  CHECK(r <= 0.95);
}

TEST_CASE("transfer matrix: single model and duplicated model") {
  const Classifier f = identity_classifier();
  Rng rng(2);
  std::vector<AdvSample> set;
  for (int i = 0; i < 50; ++i) set.push_back({one_hot(uniform_int(rng, 0, 9)), uniform_int(rng, 0, 9)});
  const std::vector<const Classifier*> one{&f};
  const std::vector<std::vector<AdvSample>> sets{set};
  const auto m1 = transfer_matrix(one, sets);
  REQUIRE(m1.size() == 1);
  REQUIRE(m1[0].size() == 1);
  CHECK(m1[0][0] == success_rate(f, set));

  const Classifier g = f;
  std::vector<AdvSample> other;
  for (int i = 0; i < 50; ++i) other.push_back({one_hot(uniform_int(rng, 0, 9)), uniform_int(rng, 0, 9)});
  const std::vector<const Classifier*> two{&f, &g};
  const std::vector<std::vector<AdvSample>> both{set, other};
  const auto m2 = transfer_matrix(two, both);
  for (int s = 0; s < 2; ++s) CHECK(m2[static_cast<std::size_t>(s)][0] == m2[static_cast<std::size_t>(s)][1]);
  CHECK(m2[0][0] == success_rate(f, set));
  CHECK(m2[1][1] == success_rate(g, other));
  for (const auto& row : m2) {
    for (double v : row) CHECK((v >= 0.0 && v <= 1.0));
  }
  CHECK_THROWS_AS(transfer_matrix(two, std::vector<std::vector<AdvSample>>{}), ConfigError);
}

TEST_CASE("saliency: parallel matches the reference and is deterministic") {
  Rng rng(3);
  for (int t = 0; t < 5; ++t) {
    const ImageTensor x = random_8bit_image(rng, 3, uniform_int(rng, 5, 24), uniform_int(rng, 5, 24));
    const auto a = saliency_map(x);
    CHECK(a == reference::saliency_map(x));
    CHECK(a == saliency_map(x));
    for (double v : a) CHECK((v >= 0.0 && v <= 1.0));
  }
}

TEST_CASE("saliency: constant image, bright dot, flip equivariance") {
  for (double v : saliency_map(ImageTensor(3, 16, 16, 0.2))) CHECK(v == 0.0);

  ImageTensor dot(3, 32, 32, -1.0);
  for (int c = 0; c < 3; ++c) dot.set(c, 11, 20, 1.0);
  const auto m = saliency_map(dot);
  const auto peak = std::max_element(m.begin(), m.end()) - m.begin();
  CHECK(std::abs(static_cast<int>(peak) / 32 - 11) <= 2);
  CHECK(std::abs(static_cast<int>(peak) % 32 - 20) <= 2);

  Rng rng(4);
  const ImageTensor x = random_8bit_image(rng, 3, 14, 19);
  const auto a = saliency_map(x);
  const auto b = saliency_map(hflip(x));
  for (int y = 0; y < 14; ++y) {
    for (int i = 0; i < 19; ++i) {
      CHECK(b[static_cast<std::size_t>(y * 19 + i)] ==
            doctest::Approx(a[static_cast<std::size_t>(y * 19 + 18 - i)]).epsilon(1e-9));
    }
  }
}

TEST_CASE("detection risk") {
  Rng rng(5);
  const ImageTensor x = random_8bit_image(rng, 3, 32, 32);
  const PatchPlacement loc{10, 12, 6, 6};
  CHECK(detection_risk(x, x, loc).delta == 0.0);

  // Smooth textured background with a saturated patch.
  ImageTensor bg(3, 32, 32);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 32; ++y) {
      for (int i = 0; i < 32; ++i) bg.set(c, y, i, 0.3 * std::sin(0.4 * (y + 2 * i + c)));
    }
  }
  const ImageTensor red = apply_patch(bg, ImageTensor(3, 6, 6, std::vector<double>(108, -1.0)), loc);
  ImageTensor extreme = red;
  for (int y = 0; y < 6; ++y) {
    for (int i = 0; i < 6; ++i) extreme.set(0, loc.top + y, loc.left + i, 1.0);
  }
  const DetectionRisk d = detection_risk(bg, extreme, loc);
  CHECK(d.delta > 0.0);
  CHECK(d.ratio_patched > d.ratio_clean);
  CHECK_THROWS_AS(detection_risk(bg, bg, {0, 0, 32, 32}), BoundsError);
}

TEST_CASE("pixel delta histograms") {
  Rng rng(6);
  const ImageTensor x = random_8bit_image(rng, 3, 9, 7);
  const auto same = pixel_delta_histogram(x, x);
  REQUIRE(same.size() == static_cast<std::size_t>(kDeltaBins));
  CHECK(same[255] == 3 * 9 * 7);
  CHECK(histogram_total(same) == 3 * 9 * 7);

  for (int t = 0; t < 20; ++t) {
    const ImageTensor a = random_image(rng, 3, 9, 7);
    const ImageTensor b = random_image(rng, 3, 9, 7);
    CHECK(histogram_total(pixel_delta_histogram(a, b)) == 3 * 9 * 7);
    CHECK(histogram_total(pixel_delta_histogram(a, b, {1, 2, 3, 4})) == 3 * 3 * 4);
  }
  ImageTensor black(1, 1, 2, -1.0);
  ImageTensor white(1, 1, 2, 1.0);
  const auto full = pixel_delta_histogram(black, white);
  CHECK(full[510] == 2);
  CHECK(histogram_mass_outside(full, 8) == 2);
  CHECK_THROWS_AS(pixel_delta_histogram(x, ImageTensor(3, 9, 6)), ShapeError);

  Classifier f = make_classifier("cnn-s", 10, Shape{1, 3, 16, 16});
  Rng init(7);
  f.network().initialize(init, nn::Init::kKaimingUniform);
  const ImageTensor img = random_8bit_image(rng, 3, 16, 16);
  PgdConfig c;
  c.steps = 5;
  const ImageTensor adv = pgd_attack(f, img, 0, c, 3);
  CHECK(histogram_mass_outside(pixel_delta_histogram(img, adv), 8) == 0);
}

TEST_CASE("physical simulation") {
  Classifier f = make_classifier("cnn-s", 10, Shape{1, 3, 32, 32});
  Rng init(8);
  f.network().initialize(init, nn::Init::kKaimingUniform);
  Rng rng(9);
  const ImageTensor x = random_8bit_image(rng, 3, 32, 32);
  const PhysicalGrid grid;
  const auto recs = simulate_physical(f, x, 2, grid, 17);
  REQUIRE(recs.size() == 15);
  int identity = 0;
  const int digital = argmax(f.logits(x));
  for (const auto& r : recs) {
    CHECK(r.image.height() == 32);
    if (r.angle == 0.0 && r.distance == 1.0) {
      ++identity;
      CHECK(r.image == x);
      CHECK(r.prediction == digital);
      CHECK(r.success == (digital != 2));
    }
  }
  CHECK(identity == 1);
  const auto again = simulate_physical(f, x, 2, grid, 17);
  for (std::size_t i = 0; i < recs.size(); ++i) CHECK(again[i].image == recs[i].image);
  CHECK(perspective_warp(x, 0.0) == x);

  PhysicalGrid wide;
  wide.angles = {50.0};
  CHECK_THROWS_AS(wide.validate(), ConfigError);
  PhysicalGrid near;
  near.distances = {0.5};
  CHECK_THROWS_AS(simulate_physical(f, x, 2, near, 1), ConfigError);
}
