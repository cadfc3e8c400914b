#include <algorithm>
#include <cmath>

#include "iap/error.hpp"
#include "iap/kernels.hpp"
#include "iap/patchgan.hpp"

namespace iap {

ScaleGenerator::ScaleGenerator(int channels, int blocks) {
  if (blocks < 1 || channels < 1) throw ConfigError("generator needs >= 1 block and channel");
  int ch = 3;
  for (int b = 0; b < blocks; ++b) {
    body_.emplace<nn::Conv2d>(ch, channels);
    body_.emplace<nn::InstanceNorm2d>(channels);
    body_.emplace<nn::LeakyReLU>(0.2);
    ch = channels;
  }
  body_.emplace<nn::Conv2d>(ch, 3);
}

Tensor ScaleGenerator::forward(const Tensor& noise, const Tensor* prior, Pass* pass) const {
  Tensor in = noise;
  if (prior != nullptr) {
    require_same_shape(noise, *prior, "generator prior");
    in += *prior;
  }
  Tensor out = body_.forward(in, pass != nullptr ? &pass->trace : nullptr);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double base = 0.0;
    if (prior != nullptr) base = std::atanh(std::clamp((*prior)[i], -0.999, 0.999));
    out[i] = std::tanh(out[i] + base);
  }
  if (pass != nullptr) pass->out = out;
  return out;
}

void ScaleGenerator::backward(const Pass& pass, const Tensor& grad_out, nn::Gradients& grads) const {
  require_same_shape(pass.out, grad_out, "generator backward");
  Tensor g(grad_out.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * (1.0 - pass.out[i] * pass.out[i]);
  (void)body_.backward(pass.trace, g, &grads);
}

Tensor upsample_batch(const Tensor& p, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("upsample: non-positive target size");
  Tensor out(Shape{p.n(), p.c(), out_h, out_w});
  for (int n = 0; n < p.n(); ++n) {
    kernels::bilinear_resize(p.sample(n), p.c(), p.h(), p.w(), out.sample(n), out_h, out_w);
  }
  return out;
}

bool GeneratorStack::complete() const {
  if (static_cast<int>(scales.size()) != finest + 1) return false;
  return std::all_of(scales.begin(), scales.end(), [](const ScaleGAN& s) { return s.frozen; });
}

std::vector<std::string> GeneratorStack::generator_digests() const {
  std::vector<std::string> out;
  for (const auto& s : scales) out.push_back(s.generator.network().digest());
  return out;
}

std::vector<std::string> GeneratorStack::critic_digests() const {
  std::vector<std::string> out;
  for (const auto& s : scales) out.push_back(s.critic.digest());
  return out;
}

std::vector<Tensor> run_chain(const GeneratorStack& stack, const std::vector<Tensor>& noises) {
  if (noises.size() != stack.scales.size()) throw ShapeError("run_chain: one noise map per scale");
  std::vector<Tensor> out;
  out.reserve(noises.size());
  for (std::size_t j = 0; j < noises.size(); ++j) {
    const Shape& s = stack.scales[j].patch_shape;
    if (noises[j].c() != s.c || noises[j].h() != s.h || noises[j].w() != s.w) {
      throw ShapeError("run_chain: noise at scale " + std::to_string(j) + " is " +
                       noises[j].shape().str() + ", expected " + s.str());
    }
    if (j == 0) {
      out.push_back(stack.scales[j].generator.forward(noises[j], nullptr));
    } else {
      const Tensor prior = upsample_batch(out.back(), s.h, s.w);
      out.push_back(stack.scales[j].generator.forward(noises[j], &prior));
    }
  }
  return out;
}

std::vector<Tensor> reconstruct(const GeneratorStack& stack) {
  std::vector<Tensor> z;
  for (const auto& s : stack.scales) z.push_back(s.z_star);
  return run_chain(stack, z);
}

ImageTensor generate(const GeneratorStack& stack, std::uint64_t seed) {
  if (!stack.complete()) throw StateError("generate: generator stack is not fully trained");
  Rng rng(splitmix64(seed));
  std::vector<Tensor> noises;
  for (const auto& s : stack.scales) {
    Tensor z(s.patch_shape);
    for (double& v : z.values()) v = s.sigma * normal(rng);
    noises.push_back(std::move(z));
  }
  return ImageTensor::clamped(run_chain(stack, noises).back());
}

}  // namespace iap
