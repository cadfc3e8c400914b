#include <doctest.h>

#include <fmt/format.h>

#include <fstream>
#include <numeric>

#include "iap/dataset.hpp"
#include "iap/error.hpp"
#include "iap/training.hpp"
#include "iap/victims.hpp"
#include "test_util.hpp"

using namespace iap;
using iap::testing::fd_check;
using iap::testing::random_image;

namespace {

const Shape kInput{1, 3, 32, 32};

Classifier linear_classifier(const std::vector<double>& w, const std::vector<double>& b, int classes, Shape in) {
  Classifier f = make_classifier("linear", classes, in);
  auto& lin = dynamic_cast<nn::Linear&>(f.network().layer(0));
  lin.weight().values() = w;
  lin.bias().values() = b;
  return f;
}

// Two flat-color classes, each color drawn from a Gaussian blob.
Dataset toy_blobs(int per_class, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  d.labels = {"dark", "light"};
  for (int split = 0; split < 2; ++split) {
    for (int i = 0; i < per_class; ++i) {
      for (int cls = 0; cls < 2; ++cls) {
        const double centre = cls == 0 ? -0.4 : 0.4;
        ImageTensor x(3, 8, 8);
        for (int c = 0; c < 3; ++c) {
          const double v = std::clamp(normal(rng, centre, 0.15), -1.0, 1.0);
          for (int y = 0; y < 8; ++y) {
            for (int k = 0; k < 8; ++k) x.set(c, y, k, v);
          }
        }
        LabeledImage item{x, cls, fmt::format("{}/{}/{}", split ? "test" : "train", cls, i)};
        (split ? d.test : d.train).push_back(item);
      }
    }
  }
  return d;
}

}  // namespace

TEST_CASE("argmax breaks ties toward the lowest index; softmax normalizes") {
  CHECK(argmax(std::vector<double>{1, 3, 3, 2}) == 1);
  CHECK(argmax(std::vector<double>{0, 0, 0}) == 0);
  const auto p = softmax(std::vector<double>{1000, 999, -5});
  CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("every zoo architecture yields finite deterministic logits") {
  Rng rng(1);
  for (const auto& arch : architecture_ids()) {
    CAPTURE(arch);
    Classifier f = make_classifier(arch, 10, kInput);
    Rng init(2);
    f.network().initialize(init, nn::Init::kKaimingUniform);
    const ImageTensor x = random_image(rng, 3, 32, 32);
    const auto z = f.logits(x);
    REQUIRE(z.size() == 10);
    for (double v : z) CHECK(std::isfinite(v));
    const auto p = softmax(z);
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
    const std::vector<ImageTensor> dup{x, x};
    const Tensor zb = f.logits_batch(stack_batch(dup));
    for (int c = 0; c < 10; ++c) CHECK(zb.at(0, c, 0, 0) == zb.at(1, c, 0, 0));
    CHECK(f.logits(x) == z);
  }
}

TEST_CASE("hand-built linear classifier: affine logits and exact input gradient") {
  const Shape in{1, 1, 1, 3};
  const std::vector<double> w{1.0, -2.0, 0.5, 0.0, 3.0, -1.0};
  const Classifier f = linear_classifier(w, {0.25, -0.5}, 2, in);
  const ImageTensor x(1, 1, 3, std::vector<double>{0.2, -0.4, 0.6});
  const auto z = f.logits(x);
  CHECK(z[0] == doctest::Approx(0.2 + 0.8 + 0.3 + 0.25).epsilon(1e-12));
  CHECK(z[1] == doctest::Approx(-1.2 - 0.6 - 0.5).epsilon(1e-12));
  for (int c = 0; c < 2; ++c) {
    const Tensor g = f.score_gradient(x, c, "input");
    for (int i = 0; i < 3; ++i) CHECK(g[static_cast<std::size_t>(i)] == w[static_cast<std::size_t>(c * 3 + i)]);
  }
}

TEST_CASE("feature_maps: shapes, zero input through a bias-free stack, hand convolution") {
  nn::Network net;
  net.emplace<nn::Conv2d>(3, 4).emplace<nn::ReLU>().mark_point("block1");
  net.emplace<nn::GlobalAvgPool>().emplace<nn::Linear>(4, 2).mark_point("logits");
  Rng rng(3);
  net.initialize(rng, nn::Init::kKaimingUniform);
  auto& conv = dynamic_cast<nn::Conv2d&>(net.layer(0));
  conv.bias().fill(0.0);
  Classifier f("custom", net, 2, Shape{1, 3, 6, 6});
  const Tensor zero = f.feature_maps(ImageTensor(3, 6, 6, 0.0), "block1");
  CHECK(zero.c() == f.point_channels("block1"));
  for (double v : zero.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS((void)f.feature_maps(ImageTensor(3, 6, 6), "nope"), ConfigError);

  // Identity-like kernel: out channel k copies input channel k % 3.
  auto& c2 = dynamic_cast<nn::Conv2d&>(f.network().layer(0));
  c2.weight().fill(0.0);
  for (int k = 0; k < 4; ++k) c2.weight().at(k, k % 3, 1, 1) = 1.0;
  const ImageTensor x = random_image(rng, 3, 6, 6);
  const Tensor m = f.feature_maps(x, "block1");
  for (int k = 0; k < 4; ++k) {
    for (int y = 0; y < 6; ++y) {
      for (int i = 0; i < 6; ++i) CHECK(m.at(0, k, y, i) == doctest::Approx(std::max(0.0, x.at(k % 3, y, i))).epsilon(1e-12));
    }
  }
}

TEST_CASE("score_gradient matches finite differences for every architecture") {
  Rng rng(4);
  for (const auto& arch : architecture_ids()) {
    CAPTURE(arch);
    Classifier f = make_classifier(arch, 10, kInput);
    Rng init(5);
    f.network().initialize(init, nn::Init::kKaimingUniform);
    const ImageTensor x = random_image(rng, 3, 32, 32);
    const int c = uniform_int(rng, 0, 9);
    const Tensor g = f.score_gradient(x, c, "input");
    auto score = [&](const Tensor& t) { return f.logits(ImageTensor::clamped(t))[static_cast<std::size_t>(c)]; };
    // Keep probes away from the clamp by shrinking x.
    Tensor xt = x.as_batch();
    for (auto& v : xt.values()) v *= 0.9;
    const Tensor gt = f.score_gradient(ImageTensor::from_tensor(xt), c, "input");
    CHECK(fd_check(score, xt, gt, rng, 20, 1e-6) < 1e-2);
    CHECK(g.shape() == Shape{1, 3, 32, 32});

    for (const auto& point : f.points()) {
      if (point == "input" || point == "logits" || point == kSoftmaxPoint) continue;
      const Tensor a = f.feature_maps(x, point);
      const Tensor ga = f.score_gradient(x, c, point);
      CHECK(ga.shape() == a.shape());
    }
  }
}

TEST_CASE("gradient at a point wrt the downstream softmax is rejected; bad classes and shapes too") {
  Classifier f = make_classifier("cnn-s", 10, kInput);
  const ImageTensor x(3, 32, 32);
  CHECK_THROWS_AS((void)f.score_gradient(x, 0, std::string(kSoftmaxPoint)), ConfigError);
  CHECK_THROWS_AS((void)f.score_gradient(x, 10, "input"), BoundsError);
  CHECK_THROWS_AS((void)f.score_gradient(x, -1, "input"), BoundsError);
  CHECK_THROWS_AS((void)f.logits(ImageTensor(3, 16, 16)), ShapeError);
}

TEST_CASE("inference and gradients do not mutate parameters") {
  Classifier f = make_classifier("cnn-d", 10, kInput);
  Rng rng(6);
  f.network().initialize(rng, nn::Init::kKaimingUniform);
  const std::string before = f.digest();
  const ImageTensor x = random_image(rng, 3, 32, 32);
  (void)f.logits(x);
  (void)f.score_gradient(x, 3, "input");
  (void)f.score_gradient(x, 3, "block2");
  (void)f.feature_maps(x, "block1");
  CHECK(f.digest() == before);
}

TEST_CASE("checkpoint round trip and corruption detection") {
  Classifier f = make_classifier("cnn-s", 10, kInput);
  Rng rng(7);
  f.network().initialize(rng, nn::Init::kKaimingUniform);
  f.metrics["test_accuracy"] = 0.5;
  f.provenance.mode = "adversarial";
  f.provenance.eps = 0.1;
  const auto dir = iap::testing::temp_dir("ckpt");
  save_classifier(dir, "m", f);
  const Classifier g = load_classifier(dir, "m");
  CHECK(g.digest() == f.digest());
  CHECK(g.metrics == f.metrics);
  CHECK(g.provenance.eps == 0.1);
  {
    std::fstream blob(dir / "m.bin", std::ios::in | std::ios::out | std::ios::binary);
    blob.seekp(16);
    blob.put('\x7f');
  }
  CHECK_THROWS_WITH_AS(load_classifier(dir, "m"), doctest::Contains("m.bin"), IntegrityError);
}

TEST_CASE("training: toy blobs reach held-out accuracy >= 0.99") {
  const Dataset d = toy_blobs(100, 11);
  TrainSchedule s;
  s.epochs = 20;
  s.batch = 16;
  s.lr = 0.02;
  const Classifier f = train_classifier(d, "linear", s);
  CHECK(f.metrics.at("test_accuracy").get<double>() >= 0.99);
  CHECK(f.metrics.contains("final_loss"));
}

TEST_CASE("training preconditions") {
  Dataset empty;
  empty.labels = {"a", "b"};
  CHECK_THROWS_AS(train_classifier(empty, "linear", {}), ConfigError);
  const Dataset d = toy_blobs(4, 1);
  PgdConfig bad;
  bad.norm = "l3";
  CHECK_THROWS_AS(adversarial_train(d, "linear", {}, bad), ConfigError);
  PgdConfig neg;
  neg.eps = -0.1;
  CHECK_THROWS_AS(adversarial_train(d, "linear", {}, neg), ConfigError);
}

TEST_CASE("adversarial training with eps = 0 reproduces standard training") {
  const Dataset d = toy_blobs(20, 3);
  TrainSchedule s;
  s.epochs = 3;
  s.batch = 8;
  PgdConfig zero;
  zero.eps = 0.0;
  const Classifier a = train_classifier(d, "cnn-s", s);
  const Classifier b = adversarial_train(d, "cnn-s", s, zero);
  CHECK(a.digest() == b.digest());
  CHECK(b.provenance.mode == "adversarial");
  CHECK(b.provenance.norm == "linf");
}

TEST_CASE("desk dataset is deterministic and exact on the 8-bit grid") {
  DeskDatasetSpec spec;
  spec.train_per_class = 3;
  spec.test_per_class = 2;
  const Dataset a = generate_desk_dataset(spec);
  const Dataset b = generate_desk_dataset(spec);
  REQUIRE(a.train.size() == 30);
  CHECK(a.num_classes() == 10);
  for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(a.train[i].image == b.train[i].image);
  for (const auto& item : a.test) {
    CHECK(quantize_8bit(item.image) == item.image);
  }
  const auto dir = iap::testing::temp_dir("desk");
  write_desk_dataset(dir, spec);
  const Dataset c = load_dataset(dir);
  CHECK(c.labels == a.labels);
  for (std::size_t i = 0; i < a.test.size(); ++i) CHECK(c.test[i].image == a.test[i].image);
  CHECK_THROWS_WITH(load_dataset(dir / "missing"), doctest::Contains("make-dataset"));
}

TEST_CASE("desk CNN and adversarial fine-tuning [slow]") {
  DeskDatasetSpec spec;
  spec.train_per_class = 200;
  spec.test_per_class = 20;
  const Dataset d = generate_desk_dataset(spec);
  TrainSchedule s;
  s.epochs = 12;
  s.lr = 0.004;
  const Classifier f = train_classifier(d, "cnn-s", s);
  CHECK(f.metrics.at("test_accuracy").get<double>() >= 0.70);

  PgdConfig pgd;
  pgd.eps = 8.0 / 127.5;
  pgd.step_size = 3.0 / 127.5;
  pgd.steps = 3;
  TrainSchedule r;
  r.epochs = 4;
  r.lr = 0.001;
  r.eps_warmup_epochs = 1;
  r.seed = 2;
  const Classifier g = adversarial_train(d, "cnn-s", r, pgd, &f);
  CHECK(g.provenance.eps == pgd.eps);
  const double rf = robust_accuracy(f, d.test, pgd, 5);
  const double rg = robust_accuracy(g, d.test, pgd, 5);
  CHECK(rg > rf);
}
