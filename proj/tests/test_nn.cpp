#include <doctest.h>

#include <cmath>
#include <fstream>

#include "iap/error.hpp"
#include "iap/kernels.hpp"
#include "iap/nn/network.hpp"
#include "test_util.hpp"

using namespace iap;
using iap::testing::fd_check;
using iap::testing::random_tensor;

namespace {

double weighted_sum(const Tensor& y, const Tensor& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

// Input and parameter gradients of L = <layer(x), r> against central
// differences.
void check_layer(nn::Layer& layer, const Tensor& x, Rng& rng) {
  nn::LayerCache cache;
  const Tensor y = layer.forward(x, &cache);
  const Tensor r = random_tensor(rng, y.shape());
  std::vector<Tensor> pg;
  for (const auto& p : layer.params()) pg.emplace_back(p.shape());
  const Tensor gx = layer.backward(x, y, r, cache, pg);
  auto loss_x = [&](const Tensor& xx) {
    nn::LayerCache c;
    return weighted_sum(layer.forward(xx, &c), r);
  };
  CHECK(fd_check(loss_x, x, gx, rng) < 1e-2);
  auto params = layer.params();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor base = params[k];
    auto loss_p = [&](const Tensor& pp) {
      params[k] = pp;
      nn::LayerCache c;
      const double v = weighted_sum(layer.forward(x, &c), r);
      params[k] = base;
      return v;
    };
    CHECK(fd_check(loss_p, base, pg[k], rng) < 1e-2);
  }
}

}  // namespace

TEST_CASE("conv2d parallel kernel matches the serial reference bit-for-bit") {
  Rng rng(1);
  for (const kernels::ConvGeometry g : {kernels::ConvGeometry{3, 8, 3, 1, 1}, kernels::ConvGeometry{4, 5, 3, 2, 1},
                                        kernels::ConvGeometry{2, 3, 1, 1, 0}}) {
    const Tensor x = random_tensor(rng, {3, g.in_channels, 9, 7});
    const Tensor w = random_tensor(rng, {g.out_channels, g.in_channels, g.kernel, g.kernel});
    const Tensor b = random_tensor(rng, {1, g.out_channels, 1, 1});
    const Tensor y = kernels::conv2d_forward(x, w, b, g);
    const Tensor yr = kernels::reference::conv2d_forward(x, w, b, g);
    REQUIRE(y.shape() == yr.shape());
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(yr[i]).epsilon(1e-12));

    const Tensor gy = random_tensor(rng, y.shape());
    Tensor gx(x.shape()), gw(w.shape()), gb(b.shape());
    Tensor gxr(x.shape()), gwr(w.shape()), gbr(b.shape());
    kernels::conv2d_backward(x, w, gy, g, &gx, &gw, &gb);
    kernels::reference::conv2d_backward(x, w, gy, g, &gxr, &gwr, &gbr);
    for (std::size_t i = 0; i < gx.size(); ++i) CHECK(gx[i] == doctest::Approx(gxr[i]).epsilon(1e-12));
    for (std::size_t i = 0; i < gw.size(); ++i) CHECK(gw[i] == doctest::Approx(gwr[i]).epsilon(1e-12));
    for (std::size_t i = 0; i < gb.size(); ++i) CHECK(gb[i] == doctest::Approx(gbr[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d with an identity kernel reproduces the input") {
  Rng rng(2);
  const Tensor x = random_tensor(rng, {1, 1, 5, 5});
  Tensor w({1, 1, 3, 3}, 0.0);
  w[4] = 1.0;
  const Tensor y = kernels::conv2d_forward(x, w, Tensor({1, 1, 1, 1}), {1, 1, 3, 1, 1});
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-12));
}

TEST_CASE("conv2d matches a hand-convolved 3x3 example") {
  // 3x3 image 1..9, kernel with a single right-neighbour tap, zero padding.
  Tensor x({1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) x[static_cast<std::size_t>(i)] = i + 1;
  Tensor w({1, 1, 3, 3}, 0.0);
  w[5] = 2.0;  // (row 1, col 2)
  const Tensor y = kernels::conv2d_forward(x, w, Tensor({1, 1, 1, 1}, 0.5), {1, 1, 3, 1, 1});
  const double expect[9] = {4.5, 6.5, 0.5, 10.5, 12.5, 0.5, 16.5, 18.5, 0.5};
  for (int i = 0; i < 9; ++i) CHECK(y[static_cast<std::size_t>(i)] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("linear parallel kernel matches the reference") {
  Rng rng(3);
  const Tensor x = random_tensor(rng, {4, 3, 2, 2});
  const Tensor w = random_tensor(rng, {5, 12, 1, 1});
  const Tensor b = random_tensor(rng, {1, 5, 1, 1});
  const Tensor y = kernels::linear_forward(x, w, b);
  const Tensor yr = kernels::reference::linear_forward(x, w, b);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(yr[i]).epsilon(1e-12));
  const Tensor gy = random_tensor(rng, y.shape());
  Tensor gx(x.shape()), gw(w.shape()), gb(b.shape()), gxr(x.shape()), gwr(w.shape()), gbr(b.shape());
  kernels::linear_backward(x, w, gy, &gx, &gw, &gb);
  kernels::reference::linear_backward(x, w, gy, &gxr, &gwr, &gbr);
  for (std::size_t i = 0; i < gx.size(); ++i) CHECK(gx[i] == doctest::Approx(gxr[i]).epsilon(1e-12));
  for (std::size_t i = 0; i < gw.size(); ++i) CHECK(gw[i] == doctest::Approx(gwr[i]).epsilon(1e-12));
}

TEST_CASE("bilinear_resize_adjoint is the transpose of bilinear_resize") {
  Rng rng(4);
  for (auto [h, w, oh, ow] : {std::tuple{3, 4, 7, 5}, {6, 6, 4, 3}, {5, 5, 5, 5}}) {
    const Tensor a = random_tensor(rng, {1, 2, h, w});
    const Tensor b = random_tensor(rng, {1, 2, oh, ow});
    Tensor ra({1, 2, oh, ow});
    kernels::bilinear_resize(a.data(), 2, h, w, ra.data(), oh, ow);
    Tensor atb({1, 2, h, w});
    kernels::bilinear_resize_adjoint(b.data(), 2, h, w, atb.data(), oh, ow);
    CHECK(weighted_sum(ra, b) == doctest::Approx(weighted_sum(a, atb)).epsilon(1e-12));
  }
}

TEST_CASE("layer gradients match finite differences") {
  Rng rng(5);
  Rng init(6);
  SUBCASE("conv2d") {
    nn::Conv2d l(3, 4);
    l.initialize(init, nn::Init::kKaimingUniform);
    check_layer(l, random_tensor(rng, {2, 3, 5, 6}), rng);
  }
  SUBCASE("strided conv2d") {
    nn::Conv2d l(2, 3, 3, 2, 1);
    l.initialize(init, nn::Init::kNormal002);
    check_layer(l, random_tensor(rng, {1, 2, 7, 6}), rng);
  }
  SUBCASE("linear") {
    nn::Linear l(12, 5);
    l.initialize(init, nn::Init::kKaimingUniform);
    check_layer(l, random_tensor(rng, {3, 3, 2, 2}), rng);
  }
  SUBCASE("relu") {
    nn::ReLU l;
    check_layer(l, random_tensor(rng, {2, 3, 4, 4}), rng);
  }
  SUBCASE("leaky relu") {
    nn::LeakyReLU l(0.2);
    check_layer(l, random_tensor(rng, {2, 3, 4, 4}), rng);
  }
  SUBCASE("tanh") {
    nn::Tanh l;
    check_layer(l, random_tensor(rng, {2, 3, 4, 4}, -2.0, 2.0), rng);
  }
  SUBCASE("maxpool") {
    nn::MaxPool2d l;
    check_layer(l, random_tensor(rng, {2, 3, 6, 6}), rng);
  }
  SUBCASE("global average pool") {
    nn::GlobalAvgPool l;
    check_layer(l, random_tensor(rng, {2, 3, 4, 5}), rng);
  }
  SUBCASE("instance norm") {
    nn::InstanceNorm2d l(3);
    l.initialize(init, nn::Init::kNormal002);
    check_layer(l, random_tensor(rng, {2, 3, 4, 4}), rng);
  }
}

TEST_CASE("network forward/backward and parameter persistence") {
  nn::Network net;
  net.emplace<nn::Conv2d>(3, 4).emplace<nn::ReLU>().mark_point("block1");
  net.emplace<nn::GlobalAvgPool>().emplace<nn::Linear>(4, 2).mark_point("logits");
  Rng rng(7);
  net.initialize(rng, nn::Init::kKaimingUniform);
  CHECK(net.point_index("input") == 0);
  CHECK(net.point_index("block1") == 2);
  CHECK(net.has_point("logits"));
  CHECK_FALSE(net.has_point("nope"));

  const Tensor x = random_tensor(rng, {2, 3, 5, 5});
  const Tensor r = random_tensor(rng, {2, 2, 1, 1});
  nn::Trace trace;
  const Tensor y = net.forward(x, &trace);
  nn::Gradients g = net.zero_gradients();
  const Tensor gx = net.backward(trace, r, &g);
  CHECK(fd_check([&](const Tensor& xx) { return weighted_sum(net.forward(xx), r); }, x, gx, rng) < 1e-2);

  const auto flat = net.flat_parameters();
  CHECK(flat.size() == net.parameter_count());
  nn::Network copy = net;
  CHECK(copy.digest() == net.digest());
  std::vector<double> bumped = flat;
  bumped[0] += 1.0;
  copy.load_flat_parameters(bumped);
  CHECK(copy.digest() != net.digest());
  CHECK_THROWS_AS(copy.load_flat_parameters(std::vector<double>(flat.size() - 1)), IntegrityError);

  const auto dir = iap::testing::temp_dir("blob");
  nn::write_parameter_blob(dir / "p.bin", net);
  nn::Network loaded = copy;
  nn::read_parameter_blob(dir / "p.bin", loaded);
  CHECK(loaded.digest() == net.digest());
  {
    std::ofstream trunc(dir / "t.bin", std::ios::binary);
    trunc.write("abcdefgh", 8);
  }
  CHECK_THROWS_AS(nn::read_parameter_blob(dir / "t.bin", loaded), IntegrityError);
}

TEST_CASE("Adam first step moves each parameter by lr against the gradient sign") {
  Tensor p({1, 1, 1, 3}, std::vector<double>{1.0, -2.0, 0.5});
  nn::Adam opt({&p}, nn::AdamConfig{0.1, 0.9, 0.999, 1e-8});
  opt.step({Tensor({1, 1, 1, 3}, std::vector<double>{4.0, -0.5, 0.0})});
  // Bias-corrected m/sqrt(v) = g/|g| on the first step.
  CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(-1.9).epsilon(1e-6));
  CHECK(p[2] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(opt.steps() == 1);
}
