#include <algorithm>
#include <cmath>
#include <vector>

#include "iap/error.hpp"
#include "iap/kernels.hpp"

namespace iap::kernels {
namespace {

struct Tap {
  int i0;
  int i1;
  double t;
};

// Half-pixel source coordinate for each destination index.
std::vector<Tap> taps(int in, int out) {
  std::vector<Tap> result(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double s = (o + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(s));
    result[o] = Tap{i0, std::min(i0 + 1, in - 1), s - i0};
  }
  return result;
}

void check(int c, int h, int w, int out_h, int out_w, std::size_t in_size, std::size_t out_size) {
  if (h <= 0 || w <= 0 || out_h <= 0 || out_w <= 0 || c <= 0) {
    throw ShapeError("bilinear resize: sizes must be positive");
  }
  if (in_size != static_cast<std::size_t>(c) * h * w ||
      out_size != static_cast<std::size_t>(c) * out_h * out_w) {
    throw ShapeError("bilinear resize: buffer size mismatch");
  }
}

}  // namespace

void bilinear_resize(std::span<const double> in, int c, int h, int w, std::span<double> out,
                     int out_h, int out_w) {
  check(c, h, w, out_h, out_w, in.size(), out.size());
  const auto ty = taps(h, out_h);
  const auto tx = taps(w, out_w);
#pragma omp parallel for schedule(static) if (c * out_h * out_w > 16384)
  for (int ch = 0; ch < c; ++ch) {
    const double* src = in.data() + static_cast<std::size_t>(ch) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(ch) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const double* r0 = src + static_cast<std::size_t>(ty[oy].i0) * w;
      const double* r1 = src + static_cast<std::size_t>(ty[oy].i1) * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const Tap& t = tx[ox];
        const double a = r0[t.i0] + t.t * (r0[t.i1] - r0[t.i0]);
        const double b = r1[t.i0] + t.t * (r1[t.i1] - r1[t.i0]);
        dst[static_cast<std::size_t>(oy) * out_w + ox] = a + ty[oy].t * (b - a);
      }
    }
  }
}

void bilinear_resize_adjoint(std::span<const double> grad_out, int c, int h, int w,
                             std::span<double> grad_in, int out_h, int out_w) {
  check(c, h, w, out_h, out_w, grad_in.size(), grad_out.size());
  const auto ty = taps(h, out_h);
  const auto tx = taps(w, out_w);
  for (int ch = 0; ch < c; ++ch) {
    const double* src = grad_out.data() + static_cast<std::size_t>(ch) * out_h * out_w;
    double* dst = grad_in.data() + static_cast<std::size_t>(ch) * h * w;
    for (int oy = 0; oy < out_h; ++oy) {
      double* r0 = dst + static_cast<std::size_t>(ty[oy].i0) * w;
      double* r1 = dst + static_cast<std::size_t>(ty[oy].i1) * w;
      const double wy1 = ty[oy].t;
      const double wy0 = 1.0 - wy1;
      for (int ox = 0; ox < out_w; ++ox) {
        const Tap& t = tx[ox];
        const double gval = src[static_cast<std::size_t>(oy) * out_w + ox];
        const double wx1 = t.t;
        const double wx0 = 1.0 - wx1;
        r0[t.i0] += gval * wy0 * wx0;
        r0[t.i1] += gval * wy0 * wx1;
        r1[t.i0] += gval * wy1 * wx0;
        r1[t.i1] += gval * wy1 * wx1;
      }
    }
  }
}

}  // namespace iap::kernels
