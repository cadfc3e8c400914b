#include <Eigen/Core>
#include <algorithm>
#include <vector>

#include "iap/error.hpp"
#include "iap/kernels.hpp"

namespace iap::kernels {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

// Samples per weight-gradient partial sum. Fixed so the reduction order is
// independent of how many threads OpenMP hands us.
constexpr int kReduceChunk = 4;

void check_conv_shapes(const Tensor& x, const Tensor& weight, const ConvGeometry& g) {
  if (x.c() != g.in_channels) {
    throw ShapeError("conv2d: input has " + std::to_string(x.c()) + " channels, expected " +
                     std::to_string(g.in_channels));
  }
  const Shape ws{g.out_channels, g.in_channels, g.kernel, g.kernel};
  if (weight.shape() != ws) {
    throw ShapeError("conv2d: weight shape " + weight.shape().str() + " expected " + ws.str());
  }
  if (g.out_h(x.h()) <= 0 || g.out_w(x.w()) <= 0) {
    throw ShapeError("conv2d: input " + x.shape().str() + " too small for kernel");
  }
}

void im2col(std::span<const double> img, int c, int h, int w, const ConvGeometry& g,
            std::span<double> col) {
  const int oh = g.out_h(h);
  const int ow = g.out_w(w);
  const int k = g.kernel;
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = col.data() + ((ci * k + ky) * k + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          double* dst = row + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, 0.0);
            continue;
          }
          const double* src = img.data() + (static_cast<std::size_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(std::span<const double> col, int c, int h, int w, const ConvGeometry& g,
            std::span<double> img) {
  const int oh = g.out_h(h);
  const int ow = g.out_w(w);
  const int k = g.kernel;
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  std::fill(img.begin(), img.end(), 0.0);
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = col.data() + ((ci * k + ky) * k + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= h) continue;
          double* dst = img.data() + (static_cast<std::size_t>(ci) * h + iy) * w;
          const double* src = row + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, const Tensor& weight, const Tensor& bias,
                      const ConvGeometry& g) {
  check_conv_shapes(x, weight, g);
  const int n = x.n();
  const int oh = g.out_h(x.h());
  const int ow = g.out_w(x.w());
  const int kdim = g.in_channels * g.kernel * g.kernel;
  const int plane = oh * ow;
  Tensor y(Shape{n, g.out_channels, oh, ow});
  const ConstMap wmat(weight.data().data(), g.out_channels, kdim);

#pragma omp parallel
  {
    std::vector<double> col(static_cast<std::size_t>(kdim) * plane);
#pragma omp for schedule(static)
    for (int i = 0; i < n; ++i) {
      im2col(x.sample(i), x.c(), x.h(), x.w(), g, col);
      MutMap out(y.sample(i).data(), g.out_channels, plane);
      out.noalias() = wmat * ConstMap(col.data(), kdim, plane);
      for (int o = 0; o < g.out_channels; ++o) out.row(o).array() += bias[o];
    }
  }
  return y;
}

void conv2d_backward(const Tensor& x, const Tensor& weight, const Tensor& gy,
                     const ConvGeometry& g, Tensor* gx, Tensor* gweight, Tensor* gbias) {
  check_conv_shapes(x, weight, g);
  const int n = x.n();
  const int oh = g.out_h(x.h());
  const int ow = g.out_w(x.w());
  const int kdim = g.in_channels * g.kernel * g.kernel;
  const int plane = oh * ow;
  if (gy.shape() != Shape{n, g.out_channels, oh, ow}) {
    throw ShapeError("conv2d backward: grad shape " + gy.shape().str());
  }
  if (gx != nullptr) *gx = Tensor(x.shape());

  const ConstMap wmat(weight.data().data(), g.out_channels, kdim);
  const int chunks = (n + kReduceChunk - 1) / kReduceChunk;
  std::vector<RowMatrix> partial(gweight != nullptr ? chunks : 0);

#pragma omp parallel
  {
    std::vector<double> col(static_cast<std::size_t>(kdim) * plane);
    std::vector<double> gcol(gx != nullptr ? col.size() : 0);
#pragma omp for schedule(static)
    for (int chunk = 0; chunk < chunks; ++chunk) {
      RowMatrix acc;
      if (gweight != nullptr) acc = RowMatrix::Zero(g.out_channels, kdim);
      const int end = std::min(n, (chunk + 1) * kReduceChunk);
      for (int i = chunk * kReduceChunk; i < end; ++i) {
        const ConstMap gout(gy.sample(i).data(), g.out_channels, plane);
        if (gweight != nullptr) {
          im2col(x.sample(i), x.c(), x.h(), x.w(), g, col);
          acc.noalias() += gout * ConstMap(col.data(), kdim, plane).transpose();
        }
        if (gx != nullptr) {
          MutMap(gcol.data(), kdim, plane).noalias() = wmat.transpose() * gout;
          col2im(gcol, x.c(), x.h(), x.w(), g, gx->sample(i));
        }
      }
      if (gweight != nullptr) partial[chunk] = std::move(acc);
    }
  }

  if (gweight != nullptr) {
    MutMap gw(gweight->data().data(), g.out_channels, kdim);
    for (const auto& p : partial) gw += p;
  }
  if (gbias != nullptr) {
    for (int i = 0; i < n; ++i) {
      for (int o = 0; o < g.out_channels; ++o) {
        double s = 0.0;
        const double* src = gy.sample(i).data() + static_cast<std::size_t>(o) * plane;
        for (int p = 0; p < plane; ++p) s += src[p];
        (*gbias)[o] += s;
      }
    }
  }
}

}  // namespace iap::kernels
