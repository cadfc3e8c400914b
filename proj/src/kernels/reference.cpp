#include "iap/error.hpp"
#include "iap/kernels.hpp"

namespace iap::kernels::reference {

Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const Tensor& bias,
                      const ConvGeometry& g) {
  if (x.c() != g.in_channels) throw ShapeError("reference conv2d: channel mismatch");
  const int oh = g.out_h(x.h());
  const int ow = g.out_w(x.w());
  Tensor y(Shape{x.n(), g.out_channels, oh, ow});
  for (int n = 0; n < x.n(); ++n) {
    for (int o = 0; o < g.out_channels; ++o) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias[o];
          for (int ci = 0; ci < g.in_channels; ++ci) {
            for (int ky = 0; ky < g.kernel; ++ky) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= x.h()) continue;
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= x.w()) continue;
                acc += weight.at(o, ci, ky, kx) * x.at(n, ci, iy, ix);
              }
            }
          }
          y.at(n, o, oy, ox) = acc;
        }
      }
    }
  }
  return y;
}

void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& gy,
                     const ConvGeometry& g, Tensor* gx, Tensor* gweight, Tensor* gbias) {
  const int oh = g.out_h(x.h());
  const int ow = g.out_w(x.w());
  if (gx != nullptr) *gx = Tensor(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    for (int o = 0; o < g.out_channels; ++o) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const double go = gy.at(n, o, oy, ox);
          if (gbias != nullptr) (*gbias)[o] += go;
          for (int ci = 0; ci < g.in_channels; ++ci) {
            for (int ky = 0; ky < g.kernel; ++ky) {
              const int iy = oy * g.stride - g.pad + ky;
              if (iy < 0 || iy >= x.h()) continue;
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int ix = ox * g.stride - g.pad + kx;
                if (ix < 0 || ix >= x.w()) continue;
                if (gweight != nullptr) gweight->at(o, ci, ky, kx) += go * x.at(n, ci, iy, ix);
                if (gx != nullptr) gx->at(n, ci, iy, ix) += go * weight.at(o, ci, ky, kx);
              }
            }
          }
        }
      }
    }
  }
}

Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const int in = weight.c();
  const int out = weight.n();
  if (x.shape().sample_size() != static_cast<std::size_t>(in)) {
    throw ShapeError("reference linear: size mismatch");
  }
  Tensor y(Shape{x.n(), out, 1, 1});
  for (int n = 0; n < x.n(); ++n) {
    const auto xs = x.sample(n);
    for (int o = 0; o < out; ++o) {
      double acc = bias[o];
      for (int i = 0; i < in; ++i) acc += weight[static_cast<std::size_t>(o) * in + i] * xs[i];
      y.at(n, o, 0, 0) = acc;
    }
  }
  return y;
}

void linear_backward(const Tensor& x, const Tensor& weight, const Tensor& gy, Tensor* gx,
                     Tensor* gweight, Tensor* gbias) {
  const int in = weight.c();
  const int out = weight.n();
  if (gx != nullptr) *gx = Tensor(x.shape());
  for (int n = 0; n < x.n(); ++n) {
    const auto xs = x.sample(n);
    for (int o = 0; o < out; ++o) {
      const double go = gy.at(n, o, 0, 0);
      if (gbias != nullptr) (*gbias)[o] += go;
      for (int i = 0; i < in; ++i) {
        if (gweight != nullptr) (*gweight)[static_cast<std::size_t>(o) * in + i] += go * xs[i];
        if (gx != nullptr) gx->sample(n)[i] += go * weight[static_cast<std::size_t>(o) * in + i];
      }
    }
  }
}

}  // namespace iap::kernels::reference
