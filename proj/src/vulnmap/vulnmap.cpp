#include "iap/vulnmap.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>

#include "iap/digest.hpp"
#include "iap/error.hpp"
#include "iap/kernels.hpp"

namespace iap {

std::string default_gradcam_point(const Classifier& f) {
  std::string last;
  for (const auto& p : f.network().point_names()) {
    if (p != "logits") last = p;
  }
  if (last.empty()) throw ConfigError("classifier " + f.architecture() + " has no conv point");
  return last;
}

VulnerabilityMap gradcam(const Classifier& f, const ImageTensor& x, int c, const std::string& point) {
  Tensor maps;
  Tensor grad;
  f.point_and_gradient(x, c, point, maps, grad);
  const int k = maps.c();
  const int hf = maps.h();
  const int wf = maps.w();
  if (k == 0 || hf == 0 || wf == 0) throw ShapeError("gradcam: zero-size feature map at " + point);
  const std::size_t plane = static_cast<std::size_t>(hf) * wf;

  std::vector<double> cam(plane, 0.0);
  for (int ch = 0; ch < k; ++ch) {
    const double* g = grad.data().data() + ch * plane;
    const double* a = maps.data().data() + ch * plane;
    double alpha = 0.0;
    for (std::size_t i = 0; i < plane; ++i) alpha += g[i];
    alpha /= static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) cam[i] += alpha * a[i];
  }
  for (double& v : cam) v = std::max(v, 0.0);

  VulnerabilityMap m;
  m.height = x.height();
  m.width = x.width();
  m.cls = c;
  m.point = point;
  m.values.assign(static_cast<std::size_t>(m.height) * m.width, 0.0);
  kernels::bilinear_resize(cam, 1, hf, wf, m.values, m.height, m.width);
  m.raw_max = *std::max_element(m.values.begin(), m.values.end());
  if (m.raw_max > 0.0) {
    for (double& v : m.values) v /= m.raw_max;
    m.normalized = true;
  }
  return m;
}

PatchPlacement select_placement(const VulnerabilityMap& m, int h, int w) {
  if (h < 1 || w < 1) throw ConfigError("select_placement: window must be at least 1x1");
  if (h > m.height || w > m.width) {
    throw BoundsError("select_placement: " + std::to_string(h) + "x" + std::to_string(w) +
                      " window larger than " + std::to_string(m.height) + "x" +
                      std::to_string(m.width) + " map");
  }
  if (static_cast<long long>(m.height) * m.width > (1LL << 26)) {
    throw ShapeError("select_placement: map too large for exact window sums");
  }
  double vmax = 0.0;
  for (double v : m.values) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("select_placement: map must be finite and >= 0");
    vmax = std::max(vmax, v);
  }
  int exp = 0;
  if (vmax > 0.0) std::frexp(vmax, &exp);
  const int W1 = m.width + 1;
  std::vector<std::int64_t> ii(static_cast<std::size_t>(m.height + 1) * W1, 0);
  for (int y = 0; y < m.height; ++y) {
    std::int64_t row = 0;
    for (int x = 0; x < m.width; ++x) {
      row += std::llround(std::ldexp(m.at(y, x), 36 - exp));
      ii[static_cast<std::size_t>(y + 1) * W1 + x + 1] = ii[static_cast<std::size_t>(y) * W1 + x + 1] + row;
    }
  }
  PatchPlacement best{0, 0, h, w};
  std::int64_t best_sum = -1;
  for (int t = 0; t + h <= m.height; ++t) {
    for (int l = 0; l + w <= m.width; ++l) {
      const std::int64_t s = ii[static_cast<std::size_t>(t + h) * W1 + l + w] -
                             ii[static_cast<std::size_t>(t) * W1 + l + w] -
                             ii[static_cast<std::size_t>(t + h) * W1 + l] +
                             ii[static_cast<std::size_t>(t) * W1 + l];
      if (s > best_sum) {
        best_sum = s;
        best.top = t;
        best.left = l;
      }
    }
  }
  return best;
}

std::array<std::uint8_t, 3> jet(double t) {
  t = std::clamp(t, 0.0, 1.0);
  auto ch = [&](double center) {
    const double v = std::clamp(1.5 - std::abs(4.0 * t - center), 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(v * 255.0));
  };
  return {ch(3.0), ch(2.0), ch(1.0)};
}

void write_heatmap_overlay(const std::filesystem::path& path, const ImageTensor& image,
                           const VulnerabilityMap& m) {
  if (image.height() != m.height || image.width() != m.width) {
    throw ShapeError("heatmap overlay: map and image sizes differ");
  }
  auto rgb = to_rgb_bytes(image);
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      const auto c = jet(m.at(y, x));
      for (int k = 0; k < 3; ++k) {
        auto& px = rgb[(static_cast<std::size_t>(y) * m.width + x) * 3 + k];
        px = static_cast<std::uint8_t>(std::lround(0.5 * px + 0.5 * c[k]));
      }
    }
  }
  write_png_rgb(path, rgb, m.height, m.width);
}

void write_heatmap_raw(const std::filesystem::path& stem, const VulnerabilityMap& m) {
  auto bin = stem;
  bin += ".bin";
  auto side = stem;
  side += ".json";
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  {
    std::ofstream out(bin, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(m.values.data()),
              static_cast<std::streamsize>(m.values.size() * sizeof(double)));
  }
  const nlohmann::json j = {{"height", m.height},       {"width", m.width},
                            {"dtype", "float64-le"},    {"class", m.cls},
                            {"point", m.point},         {"raw_max", m.raw_max},
                            {"normalized", m.normalized}, {"data", bin.filename().string()},
                            {"sha256", sha256_file(bin)}};
  std::ofstream out(side, std::ios::trunc);
  out << j.dump(2) << "\n";
}

VulnerabilityMap read_heatmap_raw(const std::filesystem::path& stem) {
  auto side = stem;
  side += ".json";
  std::ifstream in(side);
  if (!in) throw IntegrityError("missing heatmap sidecar " + side.string());
  const auto j = nlohmann::json::parse(in);
  const auto bin = stem.parent_path() / j.at("data").get<std::string>();
  if (sha256_file(bin) != j.at("sha256").get<std::string>()) {
    throw IntegrityError("heatmap data " + bin.string() + " does not match its sidecar digest");
  }
  VulnerabilityMap m;
  m.height = j.at("height");
  m.width = j.at("width");
  m.cls = j.at("class");
  m.point = j.at("point");
  m.raw_max = j.at("raw_max");
  m.normalized = j.at("normalized");
  m.values.resize(static_cast<std::size_t>(m.height) * m.width);
  std::ifstream data(bin, std::ios::binary);
  data.read(reinterpret_cast<char*>(m.values.data()),
            static_cast<std::streamsize>(m.values.size() * sizeof(double)));
  if (!data) throw IntegrityError("heatmap data " + bin.string() + " is truncated");
  return m;
}

}  // namespace iap
