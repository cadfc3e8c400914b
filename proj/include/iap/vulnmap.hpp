#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "iap/image.hpp"
#include "iap/victims.hpp"
#include "json.hpp"

namespace iap {

// Grad-CAM heatmap at input resolution, row-major H x W.
struct VulnerabilityMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;
  int cls = 0;
  std::string point;
  double raw_max = 0.0;     // max of the upsampled map before normalization
  bool normalized = false;  // false only when the map is identically zero

  [[nodiscard]] double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

// Last convolutional extraction point of a classifier.
std::string default_gradcam_point(const Classifier& f);

// alpha_k = mean_ij d y^c / d A^k_ij; M = ReLU(sum_k alpha_k A^k), bilinearly
// upsampled to the input size and max-normalized.
VulnerabilityMap gradcam(const Classifier& f, const ImageTensor& x, int c, const std::string& point);

// h x w window with the largest heatmap sum. Ties go to the smallest
// (top, left) in row-major order. Sums are exact: values are mapped to
// 36-bit fixed point relative to the map's binary exponent and accumulated in
// an int64 integral image.
PatchPlacement select_placement(const VulnerabilityMap& m, int h, int w);

// Jet colormap, t in [0, 1].
std::array<std::uint8_t, 3> jet(double t);

// Heatmap in jet blended 50/50 over the image.
void write_heatmap_overlay(const std::filesystem::path& path, const ImageTensor& image,
                           const VulnerabilityMap& m);
// <stem>.bin (little-endian float64, row-major) plus <stem>.json sidecar.
void write_heatmap_raw(const std::filesystem::path& stem, const VulnerabilityMap& m);
VulnerabilityMap read_heatmap_raw(const std::filesystem::path& stem);

}  // namespace iap
