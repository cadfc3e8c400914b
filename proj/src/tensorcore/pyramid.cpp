#include "iap/pyramid.hpp"

#include <algorithm>
#include <cmath>

#include "iap/error.hpp"

namespace iap {

int scaled_extent(int size, double r, int exponent) {
  return static_cast<int>(std::floor(size * std::pow(r, exponent) + 0.5 + 1e-9));
}

ScalePyramid build_pyramid(const ImageTensor& x, const PatchPlacement& loc, double r, int levels,
                           int min_size) {
  if (!(r > 0.0 && r < 1.0)) {
    throw ConfigError("pyramid scale factor r=" + std::to_string(r) + " outside (0, 1)");
  }
  if (levels < 1) throw ConfigError("pyramid needs K >= 1");
  loc.require_fits(x.height(), x.width());
  if (loc.height <= 0 || loc.width <= 0) throw BoundsError("pyramid: empty patch " + loc.str());

  ScalePyramid pyr;
  pyr.r = r;
  pyr.finest = levels;
  pyr.levels.reserve(levels + 1);

  int prev_h = 0;
  int prev_w = 0;
  for (int i = 0; i <= levels; ++i) {
    const int e = levels - i;
    const int h = scaled_extent(x.height(), r, e);
    const int w = scaled_extent(x.width(), r, e);
    if (std::min(h, w) < min_size) {
      throw ConfigError("too many scales: level " + std::to_string(i) + " would be " +
                        std::to_string(h) + "x" + std::to_string(w) + ", below minimum " +
                        std::to_string(min_size));
    }
    if (i > 0 && (h <= prev_h || w <= prev_w)) {
      throw ConfigError("pyramid levels " + std::to_string(i - 1) + " and " + std::to_string(i) +
                        " collapse to the same size; r is too close to 1 for this image");
    }
    PatchPlacement p;
    p.height = scaled_extent(loc.height, r, e);
    p.width = scaled_extent(loc.width, r, e);
    if (p.height < 1 || p.width < 1) {
      throw ConfigError("too many scales: patch vanishes at level " + std::to_string(i));
    }
    p.height = std::min(p.height, h);
    p.width = std::min(p.width, w);
    p.top = std::clamp(scaled_extent(loc.top, r, e), 0, h - p.height);
    p.left = std::clamp(scaled_extent(loc.left, r, e), 0, w - p.width);

    ImageTensor bg = (e == 0) ? x : resample(x, h, w);
    if (e == 0) p = loc;
    ImageTensor target = crop(bg, p);
    pyr.levels.push_back(PyramidLevel{std::move(bg), std::move(target), p});
    prev_h = h;
    prev_w = w;
  }
  return pyr;
}

}  // namespace iap
