#include <cmath>

#include "iap/error.hpp"
#include "iap/patchgan.hpp"

namespace iap {
namespace {

constexpr double kHvpStep = 1e-4;

// Forward with trace, then backprop a uniform per-sample weight over each
// output map. Returns the input gradient when `want_input` is set.
Tensor backprop_scores(const nn::Network& d, const Tensor& x, std::span<const double> weights,
                       nn::Gradients* grads, bool want_input, std::vector<double>* scores) {
  nn::Trace trace;
  const Tensor out = d.forward(x, &trace);
  const std::size_t per = out.shape().sample_size();
  if (scores != nullptr) {
    scores->assign(out.n(), 0.0);
    for (int n = 0; n < out.n(); ++n) {
      double s = 0.0;
      for (double v : out.sample(n)) s += v;
      (*scores)[n] = s / static_cast<double>(per);
    }
  }
  if (grads == nullptr && !want_input) return {};
  Tensor g(out.shape());
  for (int n = 0; n < out.n(); ++n) {
    for (double& v : g.sample(n)) v = weights[n] / static_cast<double>(per);
  }
  return d.backward(trace, g, grads, 0);
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double a : v) s += a;
  return s / static_cast<double>(v.size());
}

}  // namespace

nn::Network make_critic(int in_channels, int channels, int blocks) {
  if (blocks < 1 || channels < 1) throw ConfigError("critic needs >= 1 block and channel");
  nn::Network d;
  int ch = in_channels;
  for (int b = 0; b < blocks; ++b) {
    d.emplace<nn::Conv2d>(ch, channels);
    d.emplace<nn::InstanceNorm2d>(channels);
    d.emplace<nn::LeakyReLU>(0.2);
    ch = channels;
  }
  d.emplace<nn::Conv2d>(ch, 1);
  return d;
}

std::vector<double> critic_scores(const nn::Network& d, const Tensor& x) {
  std::vector<double> scores;
  backprop_scores(d, x, {}, nullptr, false, &scores);
  return scores;
}

double critic_generator_loss(const nn::Network& d, const Tensor& fake, Tensor* grad) {
  const std::vector<double> w(fake.n(), -1.0 / fake.n());
  std::vector<double> scores;
  Tensor g = backprop_scores(d, fake, w, nullptr, grad != nullptr, &scores);
  if (grad != nullptr) *grad = std::move(g);
  return -mean(scores);
}

std::vector<double> critic_gradient_norms(const nn::Network& d, const Tensor& x) {
  const std::vector<double> ones(x.n(), 1.0);
  const Tensor g = backprop_scores(d, x, ones, nullptr, true, nullptr);
  std::vector<double> norms(x.n());
  for (int n = 0; n < x.n(); ++n) {
    double s = 0.0;
    for (double v : g.sample(n)) s += v * v;
    norms[n] = std::sqrt(s);
  }
  return norms;
}

GanLossResult gan_loss(const nn::Network& d, const Tensor& real, const Tensor& fake,
                       double lambda_gp, Rng& rng, nn::Gradients* critic_grads, Tensor* fake_grad) {
  require_same_shape(real, fake, "gan_loss");
  if (!(lambda_gp >= 0.0)) throw ConfigError("gan_loss: lambda_gp must be >= 0");
  const int n = real.n();
  const double inv_n = 1.0 / n;
  GanLossResult r;

  std::vector<double> scores;
  const std::vector<double> w_real(n, -inv_n);
  backprop_scores(d, real, w_real, critic_grads, false, &scores);
  r.real_score = mean(scores);

  const std::vector<double> w_fake(n, inv_n);
  Tensor g_fake = backprop_scores(d, fake, w_fake, critic_grads, fake_grad != nullptr, &scores);
  r.fake_score = mean(scores);
  if (fake_grad != nullptr) {
    g_fake *= -1.0;
    *fake_grad = std::move(g_fake);
  }

  Tensor x_hat(real.shape());
  for (int i = 0; i < n; ++i) {
    const double u = uniform(rng, 0.0, 1.0);
    const auto a = real.sample(i);
    const auto b = fake.sample(i);
    auto o = x_hat.sample(i);
    for (std::size_t k = 0; k < o.size(); ++k) o[k] = u * a[k] + (1.0 - u) * b[k];
  }
  const std::vector<double> ones(n, 1.0);
  const Tensor g_hat = backprop_scores(d, x_hat, ones, nullptr, true, nullptr);
  std::vector<double> norms(n);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : g_hat.sample(i)) s += v * v;
    norms[i] = std::sqrt(s);
    r.penalty += (norms[i] - 1.0) * (norms[i] - 1.0) * inv_n;
  }

  if (critic_grads != nullptr && lambda_gp > 0.0) {
    // d/dtheta ||g|| = (d g / d theta)^T u with u = g / ||g||, which equals
    // the parameter gradient of the directional derivative s'(x_hat; u).
    Tensor plus = x_hat;
    Tensor minus = x_hat;
    std::vector<double> w_plus(n, 0.0);
    std::vector<double> w_minus(n, 0.0);
    for (int i = 0; i < n; ++i) {
      if (norms[i] == 0.0) continue;
      const auto g = g_hat.sample(i);
      auto p = plus.sample(i);
      auto m = minus.sample(i);
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double step = kHvpStep * g[k] / norms[i];
        p[k] += step;
        m[k] -= step;
      }
      const double c = lambda_gp * 2.0 * (norms[i] - 1.0) * inv_n / (2.0 * kHvpStep);
      w_plus[i] = c;
      w_minus[i] = -c;
    }
    backprop_scores(d, plus, w_plus, critic_grads, false, nullptr);
    backprop_scores(d, minus, w_minus, critic_grads, false, nullptr);
  }

  r.critic_loss = r.fake_score - r.real_score + lambda_gp * r.penalty;
  r.generator_loss = -r.fake_score;
  return r;
}

}  // namespace iap
