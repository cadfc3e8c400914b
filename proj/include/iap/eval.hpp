#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "iap/image.hpp"
#include "iap/victims.hpp"

namespace iap {

struct AdvSample {
  ImageTensor image;
  int label = 0;
};

// Fraction with argmax != label (untargeted) or argmax == target (targeted).
double success_rate(const Classifier& f, std::span<const AdvSample> samples, bool targeted = false,
                    int target = -1);

// Entry (s, t) is the success rate on models[t] of the samples crafted
// against models[s]. Sources come first: sets may be shorter than models,
// giving a rectangular matrix.
std::vector<std::vector<double>> transfer_matrix(std::span<const Classifier* const> models,
                                                 std::span<const std::vector<AdvSample>> sets,
                                                 bool targeted = false, int target = -1);

// Static center-surround saliency on 8-bit intensity (R+G+B) and opponent
// (R-G, 2B-R-G) channels: two [1 2 1] blur passes, then on/off differences
// between each pixel and box surrounds of side 3, 7 and 15 clipped to the
// image. Per channel, on and off maps share one max normalization and are
// summed; the total is max-normalized. Row-major H x W.
std::vector<double> saliency_map(const ImageTensor& x);

namespace reference {
// Serial brute-force version of saliency_map; agrees bit-for-bit.
std::vector<double> saliency_map(const ImageTensor& x);
}  // namespace reference

inline constexpr int kSurroundSizes[] = {3, 7, 15};

struct DetectionRisk {
  double ratio_patched = 0.0;  // mean saliency inside / mean outside, on x'
  double ratio_clean = 0.0;    // same on x
  double delta = 0.0;          // ratio_patched - ratio_clean
};

// Throws BoundsError when the placement covers the whole image.
double saliency_ratio(const std::vector<double>& map, int height, int width,
                      const PatchPlacement& loc);
DetectionRisk detection_risk(const ImageTensor& x, const ImageTensor& x_adv, const PatchPlacement& loc);

// Bins -255..255 of round(127.5 * (x' - x)); index = delta + 255.
inline constexpr int kDeltaBins = 511;
using DeltaHistogram = std::vector<long long>;
DeltaHistogram pixel_delta_histogram(const ImageTensor& x, const ImageTensor& x_adv);
// Only elements inside the placement window.
DeltaHistogram pixel_delta_histogram(const ImageTensor& x, const ImageTensor& x_adv,
                                     const PatchPlacement& loc);
long long histogram_total(const DeltaHistogram& h);
// Mass strictly outside [-bound, bound].
long long histogram_mass_outside(const DeltaHistogram& h, int bound);

struct PhysicalGrid {
  std::vector<double> angles{-30.0, -15.0, 0.0, 15.0, 30.0};  // degrees
  std::vector<double> distances{1.0, 2.0, 3.0};
  double jitter = 0.1;  // brightness and contrast amplitude

  void validate() const;
};

struct PhysicalRecord {
  double angle = 0.0;
  double distance = 1.0;
  double brightness = 0.0;
  double contrast = 0.0;
  ImageTensor image;
  int prediction = 0;
  bool success = false;  // attack criterion on the transformed image
};

// Horizontal perspective view of the image plane rotated by `angle_deg`
// about its vertical axis (focal length = width), clamped borders.
ImageTensor perspective_warp(const ImageTensor& x, double angle_deg);

// For each (angle, distance): perspective warp, downscale by 1/d and back,
// brightness/contrast jitter, 8-bit quantization, classification. The
// (0 deg, 1) cell applies no transform and no jitter.
std::vector<PhysicalRecord> simulate_physical(const Classifier& f, const ImageTensor& x, int label,
                                              const PhysicalGrid& grid, std::uint64_t seed,
                                              bool targeted = false, int target = -1);

// Plots.
void write_histogram_plot(const std::filesystem::path& path, const DeltaHistogram& h);
void write_grid_plot(const std::filesystem::path& path, const std::vector<double>& rates,
                     int rows, int cols);
void write_saliency_png(const std::filesystem::path& path, const std::vector<double>& map,
                        int height, int width);

}  // namespace iap
