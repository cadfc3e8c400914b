#include "iap/nn/layers.hpp"

#include <cmath>
#include <limits>

#include "iap/error.hpp"

namespace iap::nn {
namespace {

void init_weight(Tensor& w, int fan_in, Rng& rng, Init scheme) {
  if (scheme == Init::kKaimingUniform) {
    const double bound = std::sqrt(6.0 / fan_in);
    for (double& v : w.values()) v = uniform(rng, -bound, bound);
  } else {
    for (double& v : w.values()) v = normal(rng, 0.0, 0.02);
  }
}

}  // namespace

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad)
    : geom_{in_channels, out_channels, kernel, stride, pad} {
  if (in_channels <= 0 || out_channels <= 0 || kernel <= 0 || stride <= 0 || pad < 0) {
    throw ConfigError("conv2d: invalid geometry");
  }
  params_.emplace_back(Shape{out_channels, in_channels, kernel, kernel});
  params_.emplace_back(Shape{1, out_channels, 1, 1});
}

Tensor Conv2d::forward(const Tensor& x, LayerCache* /*cache*/) const {
  return kernels::conv2d_forward(x, params_[0], params_[1], geom_);
}

Tensor Conv2d::backward(const Tensor& x, const Tensor& /*y*/, const Tensor& gy,
                        const LayerCache& /*cache*/, std::span<Tensor> param_grads) const {
  Tensor gx;
  const bool with_params = !param_grads.empty();
  kernels::conv2d_backward(x, params_[0], gy, geom_, &gx, with_params ? &param_grads[0] : nullptr,
                           with_params ? &param_grads[1] : nullptr);
  return gx;
}

void Conv2d::initialize(Rng& rng, Init scheme) {
  init_weight(params_[0], geom_.in_channels * geom_.kernel * geom_.kernel, rng, scheme);
  params_[1].fill(0.0);
}

nlohmann::json Conv2d::describe() const {
  return {{"kind", kind()},       {"in", geom_.in_channels}, {"out", geom_.out_channels},
          {"kernel", geom_.kernel}, {"stride", geom_.stride}, {"pad", geom_.pad}};
}

Linear::Linear(int in_features, int out_features) : in_(in_features), out_(out_features) {
  if (in_features <= 0 || out_features <= 0) throw ConfigError("linear: invalid size");
  params_.emplace_back(Shape{out_features, in_features, 1, 1});
  params_.emplace_back(Shape{1, out_features, 1, 1});
}

Tensor Linear::forward(const Tensor& x, LayerCache* /*cache*/) const {
  return kernels::linear_forward(x, params_[0], params_[1]);
}

Tensor Linear::backward(const Tensor& x, const Tensor& /*y*/, const Tensor& gy,
                        const LayerCache& /*cache*/, std::span<Tensor> param_grads) const {
  Tensor gx;
  const bool with_params = !param_grads.empty();
  kernels::linear_backward(x, params_[0], gy, &gx, with_params ? &param_grads[0] : nullptr,
                           with_params ? &param_grads[1] : nullptr);
  return gx;
}

void Linear::initialize(Rng& rng, Init scheme) {
  init_weight(params_[0], in_, rng, scheme);
  params_[1].fill(0.0);
}

nlohmann::json Linear::describe() const { return {{"kind", kind()}, {"in", in_}, {"out", out_}}; }

Tensor ReLU::forward(const Tensor& x, LayerCache* /*cache*/) const {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor ReLU::backward(const Tensor& x, const Tensor& /*y*/, const Tensor& gy,
                      const LayerCache& /*cache*/, std::span<Tensor> /*param_grads*/) const {
  Tensor gx = gy;
  for (std::size_t i = 0; i < gx.size(); ++i) {
    if (!(x[i] > 0.0)) gx[i] = 0.0;
  }
  return gx;
}

Tensor LeakyReLU::forward(const Tensor& x, LayerCache* /*cache*/) const {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : slope_ * v;
  return y;
}

Tensor LeakyReLU::backward(const Tensor& x, const Tensor& /*y*/, const Tensor& gy,
                           const LayerCache& /*cache*/, std::span<Tensor> /*param_grads*/) const {
  Tensor gx = gy;
  for (std::size_t i = 0; i < gx.size(); ++i) {
    if (!(x[i] > 0.0)) gx[i] *= slope_;
  }
  return gx;
}

nlohmann::json LeakyReLU::describe() const { return {{"kind", kind()}, {"slope", slope_}}; }

Tensor Tanh::forward(const Tensor& x, LayerCache* /*cache*/) const {
  Tensor y = x;
  for (double& v : y.values()) v = std::tanh(v);
  return y;
}

Tensor Tanh::backward(const Tensor& /*x*/, const Tensor& y, const Tensor& gy,
                      const LayerCache& /*cache*/, std::span<Tensor> /*param_grads*/) const {
  Tensor gx = gy;
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= 1.0 - y[i] * y[i];
  return gx;
}

Tensor MaxPool2d::forward(const Tensor& x, LayerCache* cache) const {
  const int oh = x.h() / 2;
  const int ow = x.w() / 2;
  if (oh == 0 || ow == 0) throw ShapeError("maxpool2: input " + x.shape().str() + " too small");
  Tensor y(Shape{x.n(), x.c(), oh, ow});
  std::vector<int> idx(y.size());
  std::size_t o = 0;
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      for (int yy = 0; yy < oh; ++yy) {
        for (int xx = 0; xx < ow; ++xx, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          int best_i = 0;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const int flat = ((n * x.c() + c) * x.h() + 2 * yy + dy) * x.w() + 2 * xx + dx;
              if (x[flat] > best) {
                best = x[flat];
                best_i = flat;
              }
            }
          }
          y[o] = best;
          idx[o] = best_i;
        }
      }
    }
  }
  if (cache != nullptr) cache->indices = std::move(idx);
  return y;
}

Tensor MaxPool2d::backward(const Tensor& x, const Tensor& /*y*/, const Tensor& gy,
                           const LayerCache& cache, std::span<Tensor> /*param_grads*/) const {
  if (cache.indices.size() != gy.size()) throw StateError("maxpool2: backward without cache");
  Tensor gx(x.shape());
  for (std::size_t o = 0; o < gy.size(); ++o) gx[cache.indices[o]] += gy[o];
  return gx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, LayerCache* /*cache*/) const {
  Tensor y(Shape{x.n(), x.c(), 1, 1});
  const int plane = x.h() * x.w();
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const double* src = x.data().data() + (static_cast<std::size_t>(n) * x.c() + c) * plane;
      double s = 0.0;
      for (int i = 0; i < plane; ++i) s += src[i];
      y.at(n, c, 0, 0) = s / plane;
    }
  }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& x, const Tensor& /*y*/, const Tensor& gy,
                               const LayerCache& /*cache*/,
                               std::span<Tensor> /*param_grads*/) const {
  Tensor gx(x.shape());
  const int plane = x.h() * x.w();
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const double g = gy.at(n, c, 0, 0) / plane;
      double* dst = gx.data().data() + (static_cast<std::size_t>(n) * x.c() + c) * plane;
      for (int i = 0; i < plane; ++i) dst[i] = g;
    }
  }
  return gx;
}

InstanceNorm2d::InstanceNorm2d(int channels, double eps) : channels_(channels), eps_(eps) {
  params_.emplace_back(Shape{1, channels, 1, 1}, 1.0);
  params_.emplace_back(Shape{1, channels, 1, 1}, 0.0);
}

Tensor InstanceNorm2d::forward(const Tensor& x, LayerCache* cache) const {
  if (x.c() != channels_) throw ShapeError("instance_norm: channel mismatch");
  const int plane = x.h() * x.w();
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(static_cast<std::size_t>(x.n()) * x.c());
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * x.c() + c) * plane;
      double mean = 0.0;
      for (int i = 0; i < plane; ++i) mean += x[base + i];
      mean /= plane;
      double var = 0.0;
      for (int i = 0; i < plane; ++i) var += (x[base + i] - mean) * (x[base + i] - mean);
      var /= plane;
      const double inv = 1.0 / std::sqrt(var + eps_);
      inv_std[static_cast<std::size_t>(n) * x.c() + c] = inv;
      const double g = params_[0][c];
      const double b = params_[1][c];
      for (int i = 0; i < plane; ++i) {
        const double xh = (x[base + i] - mean) * inv;
        xhat[base + i] = xh;
        y[base + i] = g * xh + b;
      }
    }
  }
  if (cache != nullptr) {
    cache->aux = std::move(xhat);
    cache->stats = std::move(inv_std);
  }
  return y;
}

Tensor InstanceNorm2d::backward(const Tensor& x, const Tensor& /*y*/, const Tensor& gy,
                                const LayerCache& cache, std::span<Tensor> param_grads) const {
  if (cache.aux.shape() != x.shape()) throw StateError("instance_norm: backward without cache");
  const int plane = x.h() * x.w();
  Tensor gx(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * x.c() + c) * plane;
      const double g = params_[0][c];
      const double inv = cache.stats[static_cast<std::size_t>(n) * x.c() + c];
      double sum_d = 0.0;
      double sum_dx = 0.0;
      double sum_gy = 0.0;
      double sum_gy_xh = 0.0;
      for (int i = 0; i < plane; ++i) {
        const double d = gy[base + i] * g;
        sum_d += d;
        sum_dx += d * cache.aux[base + i];
        sum_gy += gy[base + i];
        sum_gy_xh += gy[base + i] * cache.aux[base + i];
      }
      const double mean_d = sum_d / plane;
      const double mean_dx = sum_dx / plane;
      for (int i = 0; i < plane; ++i) {
        const double d = gy[base + i] * g;
        gx[base + i] = inv * (d - mean_d - cache.aux[base + i] * mean_dx);
      }
      if (!param_grads.empty()) {
        param_grads[0][c] += sum_gy_xh;
        param_grads[1][c] += sum_gy;
      }
    }
  }
  return gx;
}

void InstanceNorm2d::initialize(Rng& /*rng*/, Init /*scheme*/) {
  params_[0].fill(1.0);
  params_[1].fill(0.0);
}

nlohmann::json InstanceNorm2d::describe() const {
  return {{"kind", kind()}, {"channels", channels_}, {"eps", eps_}};
}

}  // namespace iap::nn
