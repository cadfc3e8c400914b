#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "iap/error.hpp"
#include "iap/eval.hpp"

namespace iap {

double success_rate(const Classifier& f, std::span<const AdvSample> samples, bool targeted, int target) {
  if (samples.empty()) throw ConfigError("success_rate of an empty sample list");
  if (targeted && (target < 0 || target >= f.num_classes())) {
    throw BoundsError("success_rate: target class out of range");
  }
  constexpr std::size_t kChunk = 128;
  std::size_t hits = 0;
  for (std::size_t lo = 0; lo < samples.size(); lo += kChunk) {
    const std::size_t hi = std::min(samples.size(), lo + kChunk);
    std::vector<ImageTensor> imgs;
    for (std::size_t i = lo; i < hi; ++i) imgs.push_back(samples[i].image);
    const auto pred = f.predict_batch(stack_batch(imgs));
    for (std::size_t i = lo; i < hi; ++i) {
      const int p = pred[i - lo];
      if (targeted ? p == target : p != samples[i].label) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

std::vector<std::vector<double>> transfer_matrix(std::span<const Classifier* const> models,
                                                 std::span<const std::vector<AdvSample>> sets,
                                                 bool targeted, int target) {
  if (models.empty()) throw ConfigError("transfer matrix needs at least one model");
  if (sets.empty() || sets.size() > models.size()) {
    throw ConfigError("transfer matrix: need one sample set per source model, sources first");
  }
  std::vector<std::vector<double>> m(sets.size(), std::vector<double>(models.size(), 0.0));
  for (std::size_t s = 0; s < sets.size(); ++s) {
    for (std::size_t t = 0; t < models.size(); ++t) {
      m[s][t] = success_rate(*models[t], sets[s], targeted, target);
    }
  }
  return m;
}

namespace {

void check_pair(const ImageTensor& x, const ImageTensor& x_adv) {
  if (x.channels() != x_adv.channels() || x.height() != x_adv.height() || x.width() != x_adv.width()) {
    throw ShapeError("pixel delta histogram: image shapes differ");
  }
}

void add_delta(DeltaHistogram& h, double a, double b) {
  const long d = std::lround(127.5 * (b - a));
  h[static_cast<std::size_t>(std::clamp<long>(d, -255, 255) + 255)] += 1;
}

}  // namespace

DeltaHistogram pixel_delta_histogram(const ImageTensor& x, const ImageTensor& x_adv) {
  check_pair(x, x_adv);
  DeltaHistogram h(kDeltaBins, 0);
  for (std::size_t i = 0; i < x.size(); ++i) add_delta(h, x.data()[i], x_adv.data()[i]);
  return h;
}

DeltaHistogram pixel_delta_histogram(const ImageTensor& x, const ImageTensor& x_adv,
                                     const PatchPlacement& loc) {
  check_pair(x, x_adv);
  loc.require_fits(x.height(), x.width());
  DeltaHistogram h(kDeltaBins, 0);
  for (int c = 0; c < x.channels(); ++c) {
    for (int y = loc.top; y < loc.top + loc.height; ++y) {
      for (int xx = loc.left; xx < loc.left + loc.width; ++xx) add_delta(h, x.at(c, y, xx), x_adv.at(c, y, xx));
    }
  }
  return h;
}

long long histogram_total(const DeltaHistogram& h) { return std::accumulate(h.begin(), h.end(), 0LL); }

long long histogram_mass_outside(const DeltaHistogram& h, int bound) {
  long long s = 0;
  for (int d = -255; d <= 255; ++d) {
    if (std::abs(d) > bound) s += h[static_cast<std::size_t>(d + 255)];
  }
  return s;
}

void PhysicalGrid::validate() const {
  if (angles.empty() || distances.empty()) throw ConfigError("physical grid needs angles and distances");
  for (double a : angles) {
    if (!(std::abs(a) <= 45.0)) throw ConfigError(fmt::format("physical grid angle {} outside [-45, 45]", a));
  }
  for (double d : distances) {
    if (!(d >= 1.0) || !std::isfinite(d)) throw ConfigError(fmt::format("physical grid distance {} below 1", d));
  }
  if (!(jitter >= 0.0 && jitter < 1.0)) throw ConfigError("physical jitter must lie in [0, 1)");
}

ImageTensor perspective_warp(const ImageTensor& x, double angle_deg) {
  const int h = x.height();
  const int w = x.width();
  const double t = angle_deg * 3.141592653589793 / 180.0;
  const double focal = w;
  const double cx = (w - 1) / 2.0;
  const double cy = (h - 1) / 2.0;
  ImageTensor out(x.channels(), h, w);
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      const double u = xx - cx;
      const double v = y - cy;
      const double denom = focal * std::cos(t) - u * std::sin(t);
      const double px = u * focal / denom;
      const double py = v * (focal + px * std::sin(t)) / focal;
      const double sx = std::clamp(cx + px, 0.0, w - 1.0);
      const double sy = std::clamp(cy + py, 0.0, h - 1.0);
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const int x1 = std::min(x0 + 1, w - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - x0;
      const double fy = sy - y0;
      for (int c = 0; c < x.channels(); ++c) {
        const double top = x.at(c, y0, x0) + fx * (x.at(c, y0, x1) - x.at(c, y0, x0));
        const double bot = x.at(c, y1, x0) + fx * (x.at(c, y1, x1) - x.at(c, y1, x0));
        out.set(c, y, xx, std::clamp(top + fy * (bot - top), -1.0, 1.0));
      }
    }
  }
  return out;
}

std::vector<PhysicalRecord> simulate_physical(const Classifier& f, const ImageTensor& x, int label,
                                              const PhysicalGrid& grid, std::uint64_t seed,
                                              bool targeted, int target) {
  grid.validate();
  if (label < 0 || label >= f.num_classes()) throw BoundsError("simulate_physical: label out of range");
  std::vector<PhysicalRecord> out;
  std::uint64_t cell = 0;
  for (double angle : grid.angles) {
    for (double dist : grid.distances) {
      PhysicalRecord r;
      r.angle = angle;
      r.distance = dist;
      if (angle == 0.0 && dist == 1.0) {
        r.image = x;
      } else {
        Rng rng(splitmix64(seed ^ splitmix64(cell)));
        r.brightness = uniform(rng, -grid.jitter, grid.jitter);
        r.contrast = uniform(rng, -grid.jitter, grid.jitter);
        ImageTensor img = angle == 0.0 ? x : perspective_warp(x, angle);
        if (dist != 1.0) {
          const int sh = std::max(1, static_cast<int>(std::lround(x.height() / dist)));
          const int sw = std::max(1, static_cast<int>(std::lround(x.width() / dist)));
          img = resample(resample(img, sh, sw), x.height(), x.width());
        }
        double mean = 0.0;
        for (double v : img.data()) mean += (v + 1.0) / 2.0;
        mean /= static_cast<double>(img.size());
        std::vector<double> vals(img.size());
        for (std::size_t i = 0; i < vals.size(); ++i) {
          const double v01 = (img.data()[i] + 1.0) / 2.0;
          const double j = ((v01 - mean) * (1.0 + r.contrast) + mean) * (1.0 + r.brightness);
          vals[i] = std::clamp(2.0 * j - 1.0, -1.0, 1.0);
        }
        r.image = quantize_8bit(ImageTensor(img.channels(), img.height(), img.width(), std::move(vals)));
      }
      r.prediction = f.predict(r.image);
      r.success = targeted ? r.prediction == target : r.prediction != label;
      out.push_back(std::move(r));
      ++cell;
    }
  }
  return out;
}

namespace {

void fill_rect(std::vector<std::uint8_t>& rgb, int w, int x0, int y0, int x1, int y1,
               std::array<std::uint8_t, 3> c) {
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      for (int k = 0; k < 3; ++k) rgb[(static_cast<std::size_t>(y) * w + x) * 3 + k] = c[k];
    }
  }
}

}  // namespace

void write_histogram_plot(const std::filesystem::path& path, const DeltaHistogram& h) {
  if (h.size() != kDeltaBins) throw ShapeError("histogram plot expects 511 bins");
  constexpr int kW = kDeltaBins + 20;
  constexpr int kH = 220;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(kW) * kH * 3, 255);
  const long long peak = std::max<long long>(1, *std::max_element(h.begin(), h.end()));
  const double lpeak = std::log1p(static_cast<double>(peak));
  fill_rect(rgb, kW, 10, kH - 10, kW - 10, kH - 9, {0, 0, 0});
  for (int d : {-8, 8}) fill_rect(rgb, kW, 10 + d + 255, 10, 11 + d + 255, kH - 10, {200, 60, 60});
  fill_rect(rgb, kW, 10 + 255, 10, 11 + 255, kH - 10, {160, 160, 160});
  for (int b = 0; b < kDeltaBins; ++b) {
    if (h[b] == 0) continue;
    const int bar = std::max(1, static_cast<int>(std::lround((kH - 20) * std::log1p(static_cast<double>(h[b])) / lpeak)));
    fill_rect(rgb, kW, 10 + b, kH - 10 - bar, 11 + b, kH - 10, {40, 70, 160});
  }
  write_png_rgb(path, rgb, kH, kW);
}

void write_grid_plot(const std::filesystem::path& path, const std::vector<double>& rates, int rows, int cols) {
  if (rows < 1 || cols < 1 || rates.size() != static_cast<std::size_t>(rows) * cols) {
    throw ShapeError("grid plot: rates do not match the grid");
  }
  constexpr int kCell = 24;
  const int w = cols * kCell;
  const int h = rows * kCell;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(w) * h * 3, 255);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const double v = std::clamp(rates[static_cast<std::size_t>(r) * cols + c], 0.0, 1.0);
      const auto g = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - v)));
      fill_rect(rgb, w, c * kCell + 1, r * kCell + 1, (c + 1) * kCell - 1, (r + 1) * kCell - 1, {255, g, g});
    }
  }
  write_png_rgb(path, rgb, h, w);
}

void write_saliency_png(const std::filesystem::path& path, const std::vector<double>& map, int height, int width) {
  if (map.size() != static_cast<std::size_t>(height) * width) throw ShapeError("saliency png: size mismatch");
  std::vector<std::uint8_t> rgb(map.size() * 3);
  for (std::size_t i = 0; i < map.size(); ++i) {
    const auto v = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(map[i], 0.0, 1.0)));
    rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = v;
  }
  write_png_rgb(path, rgb, height, width);
}

}  // namespace iap
