#include "iap/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "iap/error.hpp"
#include "iap/kernels.hpp"

namespace iap {
namespace {

void check_range(std::span<const double> values) {
  for (double v : values) {
    if (!(v >= -1.0 && v <= 1.0)) {
      throw BoundsError("image value " + std::to_string(v) + " outside [-1, 1]");
    }
  }
}

}  // namespace

ImageTensor::ImageTensor(int channels, int height, int width, double fill)
    : c_(channels), h_(height), w_(width) {
  if (channels <= 0 || height <= 0 || width <= 0) {
    throw ShapeError("image dimensions must be positive");
  }
  check_range(std::span<const double>(&fill, 1));
  data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
}

ImageTensor::ImageTensor(int channels, int height, int width, std::vector<double> values)
    : c_(channels), h_(height), w_(width), data_(std::move(values)) {
  if (channels <= 0 || height <= 0 || width <= 0) {
    throw ShapeError("image dimensions must be positive");
  }
  if (data_.size() != static_cast<std::size_t>(channels) * height * width) {
    throw ShapeError("image buffer size does not match dimensions");
  }
  check_range(data_);
}

ImageTensor ImageTensor::from_tensor(const Tensor& t, int n) {
  const auto s = t.sample(n);
  return ImageTensor(t.c(), t.h(), t.w(), std::vector<double>(s.begin(), s.end()));
}

ImageTensor ImageTensor::clamped(const Tensor& t, int n) {
  const auto s = t.sample(n);
  std::vector<double> v(s.begin(), s.end());
  for (double& e : v) e = std::clamp(e, -1.0, 1.0);
  return ImageTensor(t.c(), t.h(), t.w(), std::move(v));
}

void ImageTensor::set(int c, int y, int x, double v) {
  check_range(std::span<const double>(&v, 1));
  data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x] = v;
}

Tensor ImageTensor::as_batch() const { return Tensor(Shape{1, c_, h_, w_}, data_); }

Tensor stack_batch(std::span<const ImageTensor> images) {
  if (images.empty()) throw ShapeError("stack_batch: no images");
  const auto& first = images.front();
  Tensor out(Shape{static_cast<int>(images.size()), first.channels(), first.height(), first.width()});
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& im = images[i];
    if (im.channels() != first.channels() || im.height() != first.height() ||
        im.width() != first.width()) {
      throw ShapeError("stack_batch: images differ in shape");
    }
    std::copy(im.data().begin(), im.data().end(), out.sample(static_cast<int>(i)).begin());
  }
  return out;
}

bool PatchPlacement::fits(int image_h, int image_w) const {
  return top >= 0 && left >= 0 && height >= 0 && width >= 0 && top + height <= image_h &&
         left + width <= image_w;
}

void PatchPlacement::require_fits(int image_h, int image_w) const {
  if (!fits(image_h, image_w)) {
    throw BoundsError("placement " + str() + " does not fit a " + std::to_string(image_h) + "x" +
                      std::to_string(image_w) + " image");
  }
}

std::string PatchPlacement::str() const {
  return "{top=" + std::to_string(top) + ", left=" + std::to_string(left) +
         ", height=" + std::to_string(height) + ", width=" + std::to_string(width) + "}";
}

void to_json(nlohmann::json& j, const PatchPlacement& p) {
  j = nlohmann::json{{"top", p.top}, {"left", p.left}, {"height", p.height}, {"width", p.width}};
}

void from_json(const nlohmann::json& j, PatchPlacement& p) {
  j.at("top").get_to(p.top);
  j.at("left").get_to(p.left);
  j.at("height").get_to(p.height);
  j.at("width").get_to(p.width);
}

std::vector<std::uint8_t> placement_mask(int image_h, int image_w, const PatchPlacement& loc) {
  loc.require_fits(image_h, image_w);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(image_h) * image_w, 0);
  for (int y = loc.top; y < loc.top + loc.height; ++y) {
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(y) * image_w + loc.left, loc.width, 1);
  }
  return mask;
}

ImageTensor apply_patch(const ImageTensor& x, const ImageTensor& patch, const PatchPlacement& loc) {
  loc.require_fits(x.height(), x.width());
  if (patch.channels() != x.channels() || patch.height() != loc.height ||
      patch.width() != loc.width) {
    throw ShapeError("apply_patch: patch is " + std::to_string(patch.channels()) + "x" +
                     std::to_string(patch.height()) + "x" + std::to_string(patch.width()) +
                     ", placement wants " + std::to_string(x.channels()) + "x" +
                     std::to_string(loc.height) + "x" + std::to_string(loc.width));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (int c = 0; c < x.channels(); ++c) {
    for (int y = 0; y < loc.height; ++y) {
      for (int xx = 0; xx < loc.width; ++xx) {
        out[(static_cast<std::size_t>(c) * x.height() + loc.top + y) * x.width() + loc.left + xx] =
            patch.at(c, y, xx);
      }
    }
  }
  return ImageTensor(x.channels(), x.height(), x.width(), std::move(out));
}

ImageTensor crop(const ImageTensor& x, const PatchPlacement& loc) {
  loc.require_fits(x.height(), x.width());
  if (loc.height <= 0 || loc.width <= 0) throw BoundsError("crop: empty placement " + loc.str());
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(x.channels()) * loc.height * loc.width);
  for (int c = 0; c < x.channels(); ++c) {
    for (int y = 0; y < loc.height; ++y) {
      for (int xx = 0; xx < loc.width; ++xx) out.push_back(x.at(c, loc.top + y, loc.left + xx));
    }
  }
  return ImageTensor(x.channels(), loc.height, loc.width, std::move(out));
}

ImageTensor resample(const ImageTensor& x, int target_h, int target_w) {
  if (target_h <= 0 || target_w <= 0) {
    throw ShapeError("resample: target size must be positive");
  }
  std::vector<double> out(static_cast<std::size_t>(x.channels()) * target_h * target_w);
  kernels::bilinear_resize(x.data(), x.channels(), x.height(), x.width(), out, target_h, target_w);
  for (double& v : out) v = std::clamp(v, -1.0, 1.0);
  return ImageTensor(x.channels(), target_h, target_w, std::move(out));
}

void paste_patch(Tensor& images, const Tensor& patches, const PatchPlacement& loc) {
  loc.require_fits(images.h(), images.w());
  if (patches.n() != images.n() || patches.c() != images.c() || patches.h() != loc.height ||
      patches.w() != loc.width) {
    throw ShapeError("paste_patch: patch batch " + patches.shape().str() + " vs images " +
                     images.shape().str() + " at " + loc.str());
  }
  for (int n = 0; n < images.n(); ++n) {
    for (int c = 0; c < images.c(); ++c) {
      for (int y = 0; y < loc.height; ++y) {
        for (int x = 0; x < loc.width; ++x) {
          images.at(n, c, loc.top + y, loc.left + x) = patches.at(n, c, y, x);
        }
      }
    }
  }
}

Tensor crop_tensor(const Tensor& images, const PatchPlacement& loc) {
  loc.require_fits(images.h(), images.w());
  Tensor out(Shape{images.n(), images.c(), loc.height, loc.width});
  for (int n = 0; n < images.n(); ++n) {
    for (int c = 0; c < images.c(); ++c) {
      for (int y = 0; y < loc.height; ++y) {
        for (int x = 0; x < loc.width; ++x) {
          out.at(n, c, y, x) = images.at(n, c, loc.top + y, loc.left + x);
        }
      }
    }
  }
  return out;
}

double from_8bit(std::uint8_t v) { return v / 127.5 - 1.0; }

std::uint8_t to_8bit(double v) {
  const double scaled = (std::clamp(v, -1.0, 1.0) + 1.0) * 127.5;
  // std::round rounds half away from zero.
  return static_cast<std::uint8_t>(std::clamp(std::round(scaled), 0.0, 255.0));
}

ImageTensor quantize_8bit(const ImageTensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (double& v : out) v = from_8bit(to_8bit(v));
  return ImageTensor(x.channels(), x.height(), x.width(), std::move(out));
}

std::vector<std::uint8_t> to_rgb_bytes(const ImageTensor& x) {
  const int c = x.channels();
  std::vector<std::uint8_t> out(x.size());
  for (int y = 0; y < x.height(); ++y) {
    for (int xx = 0; xx < x.width(); ++xx) {
      for (int ch = 0; ch < c; ++ch) {
        out[(static_cast<std::size_t>(y) * x.width() + xx) * c + ch] = to_8bit(x.at(ch, y, xx));
      }
    }
  }
  return out;
}

ImageTensor from_rgb_bytes(std::span<const std::uint8_t> bytes, int height, int width,
                           int channels) {
  if (bytes.size() != static_cast<std::size_t>(height) * width * channels) {
    throw ShapeError("from_rgb_bytes: byte count does not match dimensions");
  }
  std::vector<double> out(bytes.size());
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < channels; ++c) {
        out[(static_cast<std::size_t>(c) * height + y) * width + x] =
            from_8bit(bytes[(static_cast<std::size_t>(y) * width + x) * channels + c]);
      }
    }
  }
  return ImageTensor(channels, height, width, std::move(out));
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

ImageTensor read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&image, path.c_str()) == 0) {
    throw IntegrityError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr) == 0) {
    png_image_free(&image);
    throw IntegrityError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  return from_rgb_bytes(buffer, static_cast<int>(image.height), static_cast<int>(image.width), 3);
}

void write_png_rgb(const std::filesystem::path& path, std::span<const std::uint8_t> rgb, int height,
                   int width) {
  if (rgb.size() != static_cast<std::size_t>(height) * width * 3) {
    throw ShapeError("write_png_rgb: byte count does not match dimensions");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw Error("cannot open " + path.string() + " for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (png == nullptr || info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_compression_level(png, 9);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, rgb.data() + static_cast<std::size_t>(y) * width * 3);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_png(const std::filesystem::path& path, const ImageTensor& image) {
  if (image.channels() != 3) throw ShapeError("write_png: only RGB images are supported");
  write_png_rgb(path, to_rgb_bytes(image), image.height(), image.width());
}

}  // namespace iap
