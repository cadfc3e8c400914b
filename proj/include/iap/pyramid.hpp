#pragma once

#include <vector>

#include "iap/image.hpp"

namespace iap {

struct PyramidLevel {
  ImageTensor background;
  ImageTensor patch_target;
  PatchPlacement placement;
};

// Levels 0..K, coarsest first. Level K holds the original image.
struct ScalePyramid {
  std::vector<PyramidLevel> levels;
  double r = 0.75;
  int finest = 0;

  [[nodiscard]] const PyramidLevel& level(int i) const { return levels.at(i); }
  [[nodiscard]] int num_levels() const { return static_cast<int>(levels.size()); }
};

// round-half-up(size * r^exponent); a 1e-9 guard keeps exact halves
// (e.g. 4.5) from rounding down through floating error.
int scaled_extent(int size, double r, int exponent);

// Per-level sizes follow round(size_K * r^(K-i)) on each axis. The patch
// window is scaled the same way and clamped inside its level.
ScalePyramid build_pyramid(const ImageTensor& x, const PatchPlacement& loc, double r, int levels,
                           int min_size);

}  // namespace iap
