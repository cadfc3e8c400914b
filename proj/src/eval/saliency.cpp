#include <algorithm>
#include <array>
#include <cstdint>

#include "iap/error.hpp"
#include "iap/eval.hpp"

namespace iap {
namespace {

using Plane = std::vector<std::int64_t>;

// Intensity and opponent channels on 8-bit values.
std::array<Plane, 3> feature_planes(const ImageTensor& x) {
  if (x.channels() != 3) throw ShapeError("saliency expects an RGB image");
  const int h = x.height();
  const int w = x.width();
  std::array<Plane, 3> out;
  for (auto& p : out) p.assign(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      const std::int64_t r = to_8bit(x.at(0, y, xx));
      const std::int64_t g = to_8bit(x.at(1, y, xx));
      const std::int64_t b = to_8bit(x.at(2, y, xx));
      const std::size_t i = static_cast<std::size_t>(y) * w + xx;
      out[0][i] = r + g + b;
      out[1][i] = r - g;
      out[2][i] = 2 * b - r - g;
    }
  }
  return out;
}

// Separable [1 2 1] pass with replicated borders (scales values by 16).
Plane blur121(const Plane& in, int h, int w) {
  Plane tmp(in.size());
  Plane out(in.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto at = [&](int xx) { return in[static_cast<std::size_t>(y) * w + std::clamp(xx, 0, w - 1)]; };
      tmp[static_cast<std::size_t>(y) * w + x] = at(x - 1) + 2 * at(x) + at(x + 1);
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto at = [&](int yy) { return tmp[static_cast<std::size_t>(std::clamp(yy, 0, h - 1)) * w + x]; };
      out[static_cast<std::size_t>(y) * w + x] = at(y - 1) + 2 * at(y) + at(y + 1);
    }
  }
  return out;
}

struct OnOff {
  std::vector<double> on;
  std::vector<double> off;
};

void normalize_max(std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (m > 0.0) {
    for (double& a : v) a /= m;
  }
}

// Combines per-channel on/off maps into the final saliency map.
std::vector<double> combine(std::array<OnOff, 3>& maps, std::size_t n) {
  std::vector<double> total(n, 0.0);
  for (auto& m : maps) {
    const double mx = std::max(*std::max_element(m.on.begin(), m.on.end()),
                               *std::max_element(m.off.begin(), m.off.end()));
    if (mx > 0.0) {
      for (std::size_t i = 0; i < n; ++i) {
        m.on[i] /= mx;
        m.off[i] /= mx;
      }
    }
    for (std::size_t i = 0; i < n; ++i) total[i] += m.on[i] + m.off[i];
  }
  normalize_max(total);
  return total;
}

// center minus surround mean for one pixel, given the box sum and area.
inline void accumulate(std::int64_t center, std::int64_t sum, std::int64_t area, double& on, double& off) {
  const std::int64_t diff = center * area - sum;
  const double d = static_cast<double>(diff) / static_cast<double>(area);
  if (diff > 0) on += d;
  if (diff < 0) off -= d;
}

}  // namespace

std::vector<double> saliency_map(const ImageTensor& x) {
  const int h = x.height();
  const int w = x.width();
  const std::size_t n = static_cast<std::size_t>(h) * w;
  auto planes = feature_planes(x);
  std::array<OnOff, 3> maps;
  for (int c = 0; c < 3; ++c) {
    const Plane f = blur121(blur121(planes[c], h, w), h, w);
    const int W1 = w + 1;
    Plane ii(static_cast<std::size_t>(h + 1) * W1, 0);
    for (int y = 0; y < h; ++y) {
      std::int64_t row = 0;
      for (int xx = 0; xx < w; ++xx) {
        row += f[static_cast<std::size_t>(y) * w + xx];
        ii[static_cast<std::size_t>(y + 1) * W1 + xx + 1] = ii[static_cast<std::size_t>(y) * W1 + xx + 1] + row;
      }
    }
    maps[c].on.assign(n, 0.0);
    maps[c].off.assign(n, 0.0);
#pragma omp parallel for schedule(static)
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        const std::size_t i = static_cast<std::size_t>(y) * w + xx;
        double on = 0.0;
        double off = 0.0;
        for (int s : kSurroundSizes) {
          const int r = s / 2;
          const int y0 = std::max(0, y - r);
          const int y1 = std::min(h, y + r + 1);
          const int x0 = std::max(0, xx - r);
          const int x1 = std::min(w, xx + r + 1);
          const std::int64_t sum = ii[static_cast<std::size_t>(y1) * W1 + x1] - ii[static_cast<std::size_t>(y0) * W1 + x1] -
                                   ii[static_cast<std::size_t>(y1) * W1 + x0] + ii[static_cast<std::size_t>(y0) * W1 + x0];
          accumulate(f[i], sum, static_cast<std::int64_t>(y1 - y0) * (x1 - x0), on, off);
        }
        maps[c].on[i] = on;
        maps[c].off[i] = off;
      }
    }
  }
  return combine(maps, n);
}

namespace reference {

std::vector<double> saliency_map(const ImageTensor& x) {
  const int h = x.height();
  const int w = x.width();
  const std::size_t n = static_cast<std::size_t>(h) * w;
  auto planes = feature_planes(x);
  std::array<OnOff, 3> maps;
  for (int c = 0; c < 3; ++c) {
    const Plane f = blur121(blur121(planes[c], h, w), h, w);
    maps[c].on.assign(n, 0.0);
    maps[c].off.assign(n, 0.0);
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        double on = 0.0;
        double off = 0.0;
        for (int s : kSurroundSizes) {
          const int r = s / 2;
          std::int64_t sum = 0;
          std::int64_t area = 0;
          for (int yy = y - r; yy <= y + r; ++yy) {
            for (int x2 = xx - r; x2 <= xx + r; ++x2) {
              if (yy < 0 || yy >= h || x2 < 0 || x2 >= w) continue;
              sum += f[static_cast<std::size_t>(yy) * w + x2];
              ++area;
            }
          }
          accumulate(f[static_cast<std::size_t>(y) * w + xx], sum, area, on, off);
        }
        maps[c].on[static_cast<std::size_t>(y) * w + xx] = on;
        maps[c].off[static_cast<std::size_t>(y) * w + xx] = off;
      }
    }
  }
  return combine(maps, n);
}

}  // namespace reference

double saliency_ratio(const std::vector<double>& map, int height, int width, const PatchPlacement& loc) {
  loc.require_fits(height, width);
  if (loc.height * loc.width >= height * width) {
    throw BoundsError("detection risk: placement " + loc.str() + " leaves no outside region");
  }
  if (loc.height < 1 || loc.width < 1) throw BoundsError("detection risk: empty placement");
  double in = 0.0;
  double out = 0.0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double v = map[static_cast<std::size_t>(y) * width + x];
      (loc.contains(y, x) ? in : out) += v;
    }
  }
  const double n_in = static_cast<double>(loc.height) * loc.width;
  const double n_out = static_cast<double>(height) * width - n_in;
  return (in / n_in) / std::max(out / n_out, 1e-6);
}

DetectionRisk detection_risk(const ImageTensor& x, const ImageTensor& x_adv, const PatchPlacement& loc) {
  if (x.height() != x_adv.height() || x.width() != x_adv.width() || x.channels() != x_adv.channels()) {
    throw ShapeError("detection risk: image shapes differ");
  }
  DetectionRisk r;
  r.ratio_clean = saliency_ratio(saliency_map(x), x.height(), x.width(), loc);
  r.ratio_patched = saliency_ratio(saliency_map(x_adv), x.height(), x.width(), loc);
  r.delta = r.ratio_patched - r.ratio_clean;
  return r;
}

}  // namespace iap
