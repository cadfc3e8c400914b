#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "iap/error.hpp"
#include "iap/patchgan.hpp"
#include "test_util.hpp"

using namespace iap;
using iap::testing::fd_check;
using iap::testing::random_image;
using iap::testing::random_tensor;

namespace {

constexpr double kTol = 1e-5;

Tensor patch_of(int c, int h, int w, std::vector<double> v) { return Tensor({1, c, h, w}, std::move(v)); }

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Classifier toy_victim(std::uint64_t seed) {
  Classifier f = make_classifier("linear", 2, Shape{1, 3, 16, 16});
  Rng rng(seed);
  f.network().initialize(rng, nn::Init::kKaimingUniform);
  return f;
}

IapConfig toy_config(int iterations) {
  IapConfig c;
  c.r = 0.75;
  c.scales = 1;
  c.iterations = iterations;
  c.channels = 8;
  c.blocks = 3;
  c.seed = 5;
  c.coupling_check_every = 5;
  return c;
}

struct Toy {
  Classifier f = toy_victim(3);
  LabeledImage x;
  PatchPlacement loc{4, 4, 8, 8};
  IapConfig cfg = toy_config(200);
  GeneratorStack stack;

  Toy() {
    Rng rng(11);
    x.image = random_image(rng, 3, 16, 16);
    x.label = argmax(f.logits(x.image));
    x.id = "toy";
    stack = train_iap(x, f, loc, cfg);
  }
};

const Toy& toy() {
  static const Toy t;
  return t;
}

}  // namespace

TEST_CASE("attack loss hand examples") {
  const std::vector<double> a{5, 1, 0};
  const std::vector<double> b{1, 5, 0};
  const std::vector<double> t{0, 0, 3};
  CHECK(cw_loss(a, 0, 0.0, false) == doctest::Approx(4.0).epsilon(kTol));
  CHECK(cw_loss(b, 0, 0.0, false) == doctest::Approx(0.0).epsilon(kTol));
  CHECK(cw_loss(t, 2, 0.0, true) == doctest::Approx(0.0).epsilon(kTol));
  CHECK(cw_loss(b, 0, 2.0, false) == doctest::Approx(-2.0).epsilon(kTol));
  CHECK_THROWS_AS(cw_loss(a, 3, 0.0, false), BoundsError);
  CHECK_THROWS_AS(cw_loss(a, -1, 0.0, true), BoundsError);
}

TEST_CASE("reconstruction loss hand examples") {
  Rng rng(1);
  const Tensor p = random_tensor(rng, {1, 3, 4, 4});
  CHECK(rec_loss(p, p) == 0.0);
  Tensor q = p;
  for (auto& v : q.values()) v += 0.1;
  CHECK(std::abs(rec_loss(q, p) - 0.48) <= kTol);
  Tensor np = p;
  Tensor nq = q;
  for (auto& v : np.values()) v = -v;
  for (auto& v : nq.values()) v = -v;
  CHECK(std::abs(rec_loss(nq, np) - rec_loss(q, p)) <= kTol);
  CHECK_THROWS_AS(rec_loss(p, Tensor({1, 3, 4, 5})), ShapeError);
}

TEST_CASE("total variation hand examples") {
  CHECK(tv_loss(Tensor({1, 3, 5, 5}, 0.4)) == 0.0);
  CHECK(std::abs(tv_loss(patch_of(1, 2, 2, {0, 1, 0, 1})) - 2.0) <= kTol);
  Rng rng(2);
  const Tensor p = random_tensor(rng, {1, 3, 6, 5});
  Tensor s = p;
  for (auto& v : s.values()) v += 0.3;
  CHECK(std::abs(tv_loss(s) - tv_loss(p)) <= kTol);
  CHECK(tv_loss(Tensor({1, 3, 1, 1}, 0.7)) == 0.0);
}

TEST_CASE("non-printability hand examples") {
  const std::vector<Rgb> two{Rgb{1, 1, 1}, Rgb{-1, -1, -1}};
  CHECK(std::abs(nps_loss(Tensor({1, 3, 1, 1}, 0.0), two) - 3.0) <= kTol);
  const auto pal = default_palette();
  REQUIRE(pal.size() == 27);
  Tensor onpal({1, 3, 2, 2});
  for (int k = 0; k < 4; ++k) {
    for (int c = 0; c < 3; ++c) onpal.at(0, c, k / 2, k % 2) = pal[static_cast<std::size_t>(k * 5)][static_cast<std::size_t>(c)];
  }
  CHECK(nps_loss(onpal, pal) == 0.0);
  CHECK_THROWS_AS(nps_loss(onpal, std::vector<Rgb>{}), ConfigError);
  // Per-channel mode: |0-1|*|0+1| per channel, three channels.
  CHECK(std::abs(nps_loss(Tensor({1, 3, 1, 1}, 0.0), two, NpsDistance::kPerChannel) - 3.0) <= kTol);
}

TEST_CASE("total loss hand examples") {
  const LossComponents c{2.0, 3.0, 4.0, 5.0, 6.0};
  LossWeights zero;
  zero.alpha = zero.beta = zero.gamma = zero.delta = 0.0;
  CHECK(total_loss(c, zero) == 2.0);
  LossWeights ones;
  ones.alpha = ones.beta = ones.gamma = ones.delta = 1.0;
  CHECK(std::abs(total_loss({1, 1, 1, 1, 1}, ones) - 5.0) <= kTol);
  LossWeights w;
  LossWeights w2 = w;
  w2.beta = 2.0 * w.beta;
  CHECK(std::abs((total_loss(c, w2) - total_loss(c, w)) - w.beta * c.rec) <= kTol);
  CHECK_THROWS_AS(total_loss({1, NAN, 1, 1, 1}, w), NumericError);
  LossWeights neg;
  neg.gamma = -1.0;
  CHECK_THROWS_AS(neg.validate(), ConfigError);
}

TEST_CASE("gradient penalty of a linear critic is (||w|| - 1)^2") {
  nn::Network d;
  d.emplace<nn::Linear>(12, 1);
  Rng rng(3);
  d.initialize(rng, nn::Init::kKaimingUniform);
  const Tensor& w = dynamic_cast<nn::Linear&>(d.layer(0)).weight();
  const double norm = std::sqrt(dot(w, w));
  const Tensor real = random_tensor(rng, {4, 3, 2, 2});
  const Tensor fake = random_tensor(rng, {4, 3, 2, 2});
  for (double n : critic_gradient_norms(d, fake)) CHECK(std::abs(n - norm) <= kTol);
  Rng u(4);
  const GanLossResult g = gan_loss(d, real, fake, 10.0, u);
  CHECK(std::abs(g.penalty - (norm - 1.0) * (norm - 1.0)) <= kTol);

  Rng u2(4);
  const GanLossResult same = gan_loss(d, real, real, 10.0, u2);
  CHECK(std::abs(same.critic_loss - 10.0 * same.penalty) <= kTol);
  CHECK_THROWS_AS(gan_loss(d, real, Tensor({3, 3, 2, 2}), 10.0, u2), ShapeError);
}

TEST_CASE("constant critic with no penalty") {
  nn::Network d;
  d.emplace<nn::Linear>(12, 1);
  auto& lin = dynamic_cast<nn::Linear&>(d.layer(0));
  lin.weight().fill(0.0);
  lin.bias().fill(0.7);
  Rng rng(5);
  const Tensor real = random_tensor(rng, {2, 3, 2, 2});
  const Tensor fake = random_tensor(rng, {2, 3, 2, 2});
  const GanLossResult g = gan_loss(d, real, fake, 0.0, rng);
  CHECK(std::abs(g.critic_loss) <= kTol);
  CHECK(std::abs(g.generator_loss + 0.7) <= kTol);
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(6);
  SUBCASE("attack loss") {
    for (bool targeted : {false, true}) {
      Tensor z = random_tensor(rng, {1, 5, 1, 1}, -3.0, 3.0);
      z[2] += 6.0;
      std::vector<double> g(5);
      const int cls = targeted ? 4 : 2;
      cw_loss(z.values(), cls, 0.0, targeted, g);
      Tensor gt({1, 5, 1, 1}, g);
      CHECK(fd_check([&](const Tensor& t) { return cw_loss(t.values(), cls, 0.0, targeted); }, z, gt, rng) < 1e-2);
    }
  }
  SUBCASE("reconstruction") {
    const Tensor a = random_tensor(rng, {2, 3, 4, 4});
    const Tensor b = random_tensor(rng, {2, 3, 4, 4});
    Tensor g;
    rec_loss(a, b, &g);
    CHECK(fd_check([&](const Tensor& t) { return rec_loss(t, b); }, a, g, rng) < 1e-2);
  }
  SUBCASE("total variation") {
    const Tensor p = random_tensor(rng, {1, 3, 5, 6});
    Tensor g;
    tv_loss(p, &g);
    CHECK(fd_check([](const Tensor& t) { return tv_loss(t); }, p, g, rng) < 1e-2);
  }
  SUBCASE("non-printability") {
    const Tensor p = random_tensor(rng, {1, 3, 4, 4});
    const auto pal = default_palette();
    for (NpsDistance mode : {NpsDistance::kEuclidean, NpsDistance::kPerChannel}) {
      Tensor g;
      nps_loss(p, pal, mode, &g);
      CHECK(fd_check([&](const Tensor& t) { return nps_loss(t, pal, mode); }, p, g, rng) < 1e-2);
    }
  }
  // Parameter checks use a small step: with N(0, 0.02) weights the
  // instance-norm blocks curve sharply at the 1e-3 scale.
  SUBCASE("critic losses") {
    nn::Network d = make_critic(3, 4, 2);
    Rng init(7);
    d.initialize(init, nn::Init::kNormal002);
    const Tensor real = random_tensor(rng, {2, 3, 8, 8});
    const Tensor fake = random_tensor(rng, {2, 3, 8, 8});
    Tensor gf;
    critic_generator_loss(d, fake, &gf);
    CHECK(fd_check([&](const Tensor& t) { return critic_generator_loss(d, t, nullptr); }, fake, gf, rng) < 1e-2);

    nn::Gradients gd = d.zero_gradients();
    Rng u(8);
    gan_loss(d, real, fake, 10.0, u, &gd);
    auto params = d.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      const Tensor base = *params[k];
      auto loss = [&](const Tensor& pp) {
        *params[k] = pp;
        Rng uu(8);
        const double v = gan_loss(d, real, fake, 10.0, uu).critic_loss;
        *params[k] = base;
        return v;
      };
      CHECK(fd_check(loss, base, gd.tensors[k], rng, 20, 1e-6) < 1e-2);
    }
  }
  SUBCASE("generator parameters") {
    ScaleGenerator g(4, 2);
    Rng init(9);
    g.network().initialize(init, nn::Init::kNormal002);
    const Tensor z = random_tensor(rng, {1, 3, 6, 6});
    const Tensor prior = random_tensor(rng, {1, 3, 6, 6}, -0.8, 0.8);
    ScaleGenerator::Pass pass;
    const Tensor out = g.forward(z, &prior, &pass);
    const Tensor r = random_tensor(rng, out.shape());
    nn::Gradients grads = g.network().zero_gradients();
    g.backward(pass, r, grads);
    auto params = g.network().parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      const Tensor base = *params[k];
      auto loss = [&](const Tensor& pp) {
        *params[k] = pp;
        const double v = dot(g.forward(z, &prior), r);
        *params[k] = base;
        return v;
      };
      CHECK(fd_check(loss, base, grads.tensors[k], rng, 20, 1e-6) < 1e-2);
    }
  }
}

TEST_CASE("loss invariants on random inputs") {
  Rng rng(10);
  auto pal = default_palette();
  for (int t = 0; t < 100; ++t) {
    const double kappa = uniform(rng, 0.0, 3.0);
    const Tensor z = random_tensor(rng, {1, 6, 1, 1}, -5.0, 5.0);
    const int cls = uniform_int(rng, 0, 5);
    CHECK(cw_loss(z.values(), cls, kappa, t % 2 == 0) >= -kappa);
    const Tensor p = random_tensor(rng, {1, 3, 3, 4});
    CHECK(tv_loss(p) >= 0.0);
    CHECK(rec_loss(p, random_tensor(rng, p.shape())) >= 0.0);
    const double nps = nps_loss(p, pal);
    CHECK(nps >= 0.0);
    std::shuffle(pal.begin(), pal.end(), rng);
    CHECK(nps_loss(p, pal) == doctest::Approx(nps).epsilon(1e-9));
  }
}

TEST_CASE("generator with a zero head reproduces its prior") {
  ScaleGenerator g(4, 2);
  for (auto* p : g.network().parameters()) p->fill(0.0);
  Rng rng(12);
  const Tensor prior = random_tensor(rng, {1, 3, 5, 5}, -0.9, 0.9);
  const Tensor out = g.forward(random_tensor(rng, prior.shape()), &prior);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(prior[i]).epsilon(1e-9));
}

TEST_CASE("train_scale contracts") {
  const Classifier f = toy_victim(3);
  Rng rng(13);
  const ImageTensor x = random_image(rng, 3, 16, 16);
  const int y = argmax(f.logits(x));
  const PatchPlacement loc{4, 4, 8, 8};
  const ScalePyramid pyr = build_pyramid(x, loc, 0.75, 1, 8);
  GeneratorStack prior;
  prior.placement = loc;

  IapConfig none = toy_config(0);
  IapConfig no_critic = toy_config(4);
  no_critic.critic_steps = 0;
  const ScaleGAN a = train_scale(0, pyr, prior, f, x, y, none);
  const ScaleGAN b = train_scale(0, pyr, prior, f, x, y, no_critic);
  CHECK(a.critic.digest() == b.critic.digest());
  CHECK(a.generator.network().digest() != b.generator.network().digest());
  CHECK(b.frozen);

  const IapConfig cfg = toy_config(4);
  const ScaleGAN c1 = train_scale(0, pyr, prior, f, x, y, cfg);
  const ScaleGAN c2 = train_scale(0, pyr, prior, f, x, y, cfg);
  CHECK(c1.generator.network().digest() == c2.generator.network().digest());
  CHECK(c1.critic.digest() == c2.critic.digest());
  CHECK(c1.z_star.values() == c2.z_star.values());

  CHECK_THROWS_AS(train_scale(1, pyr, prior, f, x, y, cfg), StateError);
  GeneratorStack unfrozen = prior;
  unfrozen.scales.push_back(c1);
  unfrozen.scales.back().frozen = false;
  CHECK_THROWS_AS(train_scale(1, pyr, unfrozen, f, x, y, cfg), StateError);

  GeneratorStack one = prior;
  one.scales.push_back(c1);
  one.level_placements = {pyr.level(0).placement};
  const auto before = one.scales[0].generator.network().digest();
  (void)train_scale(1, pyr, one, f, x, y, cfg);
  CHECK(one.scales[0].generator.network().digest() == before);
}

TEST_CASE("train_iap preconditions") {
  const Classifier f = toy_victim(3);
  LabeledImage x{ImageTensor(3, 16, 16), 0, "z"};
  const IapConfig cfg = toy_config(1);
  CHECK_THROWS_AS(train_iap(x, f, {2, 2, 0, 0}, cfg), ConfigError);
  IapConfig t = cfg;
  t.targeted = true;
  t.target = 0;
  CHECK_THROWS_AS(train_iap(x, f, {2, 2, 4, 4}, t), ConfigError);
  IapConfig bad = cfg;
  bad.r = 1.0;
  CHECK_THROWS_AS(train_iap(x, f, {2, 2, 4, 4}, bad), ConfigError);
}

TEST_CASE("toy run: attack loss trends down and the stack is frozen") {
  const Toy& t = toy();
  REQUIRE(t.stack.complete());
  const auto& curve = t.stack.curve;
  REQUIRE(curve.size() == 400);
  CHECK(curve.back().adv <= curve.front().adv);
  CHECK(t.stack.coupling_checks > 0);
  for (const auto& s : t.stack.scales) CHECK(s.frozen);
}

TEST_CASE("generate: determinism, range and diversity") {
  const Toy& t = toy();
  const ImageTensor a = generate(t.stack, 1);
  CHECK(generate(t.stack, 1) == a);
  CHECK(a.height() == 8);
  CHECK(a.width() == 8);
  for (double v : a.data()) CHECK((v >= -1.0 && v <= 1.0));
  CHECK_FALSE(generate(t.stack, 2) == a);
  GeneratorStack partial = t.stack;
  partial.scales.pop_back();
  CHECK_THROWS_AS(generate(partial, 1), StateError);
}

TEST_CASE("stack save/load preserves generation") {
  const Toy& t = toy();
  const auto dir = iap::testing::temp_dir("stack");
  save_stack(dir, t.stack);
  const GeneratorStack s = load_stack(dir);
  CHECK(s.generator_digests() == t.stack.generator_digests());
  CHECK(s.critic_digests() == t.stack.critic_digests());
  CHECK(s.placement == t.stack.placement);
  CHECK(generate(s, 42) == generate(t.stack, 42));
  CHECK(s.curve.size() == t.stack.curve.size());
  std::filesystem::remove(dir / "manifest.json");
  CHECK_THROWS_AS(load_stack(dir), IntegrityError);
}
