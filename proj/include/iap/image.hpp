#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "iap/tensor.hpp"

namespace iap {

// A C x H x W planar image in model range [-1, 1]. Pipeline images are RGB
// and come from 8-bit sources; the range invariant is checked on every
// construction path.
class ImageTensor {
 public:
  static constexpr int kSourceDepth = 8;

  ImageTensor() = default;
  ImageTensor(int channels, int height, int width, double fill = 0.0);
  ImageTensor(int channels, int height, int width, std::vector<double> values);

  // Takes sample `n` of a batch tensor. Throws if any value leaves [-1, 1].
  static ImageTensor from_tensor(const Tensor& t, int n = 0);
  // Same, but clamps into range instead of throwing.
  static ImageTensor clamped(const Tensor& t, int n = 0);

  [[nodiscard]] int channels() const { return c_; }
  [[nodiscard]] int height() const { return h_; }
  [[nodiscard]] int width() const { return w_; }
  [[nodiscard]] int source_depth() const { return kSourceDepth; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }
  [[nodiscard]] std::span<const double> data() const { return data_; }

  [[nodiscard]] double at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x];
  }
  void set(int c, int y, int x, double v);

  // (1, C, H, W) batch view for the network layers.
  [[nodiscard]] Tensor as_batch() const;

  bool operator==(const ImageTensor&) const = default;

 private:
  int c_ = 0;
  int h_ = 0;
  int w_ = 0;
  std::vector<double> data_;
};

Tensor stack_batch(std::span<const ImageTensor> images);

// Top-left anchored h x w window. Induces the binary location mask.
struct PatchPlacement {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;

  bool operator==(const PatchPlacement&) const = default;

  [[nodiscard]] bool contains(int y, int x) const {
    return y >= top && y < top + height && x >= left && x < left + width;
  }
  [[nodiscard]] bool fits(int image_h, int image_w) const;
  // Throws BoundsError when the window leaves an image_h x image_w frame.
  void require_fits(int image_h, int image_w) const;
  [[nodiscard]] std::string str() const;
};

void to_json(nlohmann::json& j, const PatchPlacement& p);
void from_json(const nlohmann::json& j, PatchPlacement& p);

// Row-major H x W mask with exactly height*width ones.
std::vector<std::uint8_t> placement_mask(int image_h, int image_w, const PatchPlacement& loc);

// x' = m * p + (1 - m) * x with p zero-padded to x's size.
ImageTensor apply_patch(const ImageTensor& x, const ImageTensor& patch, const PatchPlacement& loc);
ImageTensor crop(const ImageTensor& x, const PatchPlacement& loc);

// Bilinear, align-corners off, output clamped to [-1, 1].
ImageTensor resample(const ImageTensor& x, int target_h, int target_w);

// Batch-tensor counterparts used inside training loops. All samples share
// the placement.
void paste_patch(Tensor& images, const Tensor& patches, const PatchPlacement& loc);
Tensor crop_tensor(const Tensor& images, const PatchPlacement& loc);

// 8-bit <-> model range: v / 127.5 - 1 and its inverse with
// round-half-away-from-zero.
double from_8bit(std::uint8_t v);
std::uint8_t to_8bit(double v);
ImageTensor quantize_8bit(const ImageTensor& x);

// Interleaved HWC bytes.
std::vector<std::uint8_t> to_rgb_bytes(const ImageTensor& x);
ImageTensor from_rgb_bytes(std::span<const std::uint8_t> bytes, int height, int width,
                           int channels = 3);

ImageTensor read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageTensor& image);
// Raw interleaved 8-bit RGB (used for plots and overlays).
void write_png_rgb(const std::filesystem::path& path, std::span<const std::uint8_t> rgb, int height,
                   int width);

}  // namespace iap
