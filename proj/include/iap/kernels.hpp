#pragma once

#include <span>

#include "iap/tensor.hpp"

// Compute kernels behind the network layers and image operators.
//
// The functions in `iap::kernels` are the production paths: im2col + GEMM
// with OpenMP across the batch. Every output element is produced by exactly
// one thread in a fixed summation order, so results do not depend on the
// thread count. `iap::kernels::reference` holds serial direct-loop versions
// used as test oracles and benchmark baselines.
namespace iap::kernels {

struct ConvGeometry {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  [[nodiscard]] int out_h(int h) const { return (h + 2 * pad - kernel) / stride + 1; }
  [[nodiscard]] int out_w(int w) const { return (w + 2 * pad - kernel) / stride + 1; }
};

// weight: (out, in, k, k); bias: (1, out, 1, 1); x: (N, in, H, W).
Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const Tensor& bias,
                      const ConvGeometry& g);

// Any of gx / gweight / gbias may be null. Parameter gradients accumulate.
void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& gy,
                     const ConvGeometry& g, Tensor* gx, Tensor* gweight, Tensor* gbias);

// weight: (out, in, 1, 1); x: (N, C, H, W) with C*H*W == in; y: (N, out, 1, 1).
Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor& bias);
void linear_backward(const Tensor& x, const Tensor& weight, const Tensor& gy, Tensor* gx,
                     Tensor* gweight, Tensor* gbias);

// Bilinear resize of a (c, h, w) planar image, half-pixel centers
// (align-corners off). Identity when sizes match; constants stay exact.
void bilinear_resize(std::span<const double> in, int c, int h, int w, std::span<double> out,
                     int out_h, int out_w);

// Adjoint of bilinear_resize: scatters grad_out (c, out_h, out_w) back onto
// grad_in (c, h, w), accumulating.
void bilinear_resize_adjoint(std::span<const double> grad_out, int c, int h, int w,
                             std::span<double> grad_in, int out_h, int out_w);

namespace reference {

Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const Tensor& bias,
                      const ConvGeometry& g);
void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& gy,
                     const ConvGeometry& g, Tensor* gx, Tensor* gweight, Tensor* gbias);
Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor& bias);
void linear_backward(const Tensor& x, const Tensor& weight, const Tensor& gy, Tensor* gx,
                     Tensor* gweight, Tensor* gbias);

}  // namespace reference

}  // namespace iap::kernels
