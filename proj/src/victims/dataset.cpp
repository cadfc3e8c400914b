#include "iap/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "iap/error.hpp"

namespace iap {

void Dataset::validate() const {
  if (labels.size() < 2) throw ConfigError("dataset needs at least 2 classes");
  if (train.empty() || test.empty()) throw ConfigError("dataset has an empty split");
  const auto& ref = train.front().image;
  std::set<std::string> ids;
  for (const auto* split : {&train, &test}) {
    for (const auto& item : *split) {
      if (item.label < 0 || item.label >= num_classes()) {
        throw ConfigError(fmt::format("label {} of '{}' outside [0, {})", item.label, item.id,
                                      num_classes()));
      }
      if (item.image.channels() != ref.channels() || item.image.height() != ref.height() ||
          item.image.width() != ref.width()) {
        throw ConfigError("mixed image shapes in dataset at '" + item.id + "'");
      }
    }
  }
  for (const auto& item : train) ids.insert(item.id);
  for (const auto& item : test) {
    if (ids.count(item.id) != 0) throw ConfigError("train/test overlap at '" + item.id + "'");
  }
}

Tensor stack_images(std::span<const LabeledImage> items, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("stack_images: no indices");
  const auto& first = items[indices[0]].image;
  Tensor out(Shape{static_cast<int>(indices.size()), first.channels(), first.height(), first.width()});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& img = items[indices[k]].image;
    if (img.size() != first.size()) throw ShapeError("stack_images: mixed shapes");
    std::copy(img.data().begin(), img.data().end(), out.sample(static_cast<int>(k)).begin());
  }
  return out;
}

std::vector<std::string> desk_class_names() {
  return {"disc",  "square",   "triangle", "ring",    "cross",
          "hline", "vline",    "diagonal", "checker", "diamond"};
}

namespace {

// Shape membership in object coordinates (u, v) in [-1, 1], v pointing down.
bool inside(int cls, double u, double v) {
  const double au = std::abs(u);
  const double av = std::abs(v);
  const bool box = au <= 0.9 && av <= 0.9;
  switch (cls) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return au <= 0.8 && av <= 0.8;
    case 2: return v >= -0.85 && v <= 0.85 && au <= 0.95 * (v + 0.85) / 1.7;
    case 3: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.3;
    }
    case 4: return (au <= 0.28 && av <= 0.95) || (av <= 0.28 && au <= 0.95);
    case 5: return au <= 0.95 && av <= 0.3;
    case 6: return av <= 0.95 && au <= 0.3;
    case 7: return box && std::abs(u - v) <= 0.4;
    case 8:
      return box && (static_cast<int>(std::floor((u + 0.9) / 0.6)) +
                     static_cast<int>(std::floor((v + 0.9) / 0.6))) % 2 == 0;
    case 9: return au + av <= 1.0;
    default: throw BoundsError("desk class out of range");
  }
}

using Color = std::array<double, 3>;

double luminance(const Color& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

}  // namespace

ImageTensor render_desk_image(int cls, Rng& rng, int size) {
  if (cls < 0 || cls >= 10) throw BoundsError("desk class out of range");
  // Colors in [0, 1]; foreground differs from background in luminance.
  Color bg{};
  Color fg{};
  for (double& v : bg) v = uniform(rng, 0.1, 0.9);
  do {
    for (double& v : fg) v = uniform(rng, 0.0, 1.0);
  } while (std::abs(luminance(fg) - luminance(bg)) < 0.3);

  const double extent = uniform(rng, 10.0, 16.0);
  const double half = extent / 2.0;
  const double cy = uniform(rng, half + 1.0, size - half - 1.0);
  const double cx = uniform(rng, half + 1.0, size - half - 1.0);
  const double gy = uniform(rng, -0.15, 0.15);
  const double gx = uniform(rng, -0.15, 0.15);
  const double tex_amp = uniform(rng, 0.02, 0.08);
  const double tex_fy = uniform(rng, 0.3, 1.2);
  const double tex_fx = uniform(rng, 0.3, 1.2);
  const double tex_phase = uniform(rng, 0.0, 6.283185307179586);

  ImageTensor img(3, size, size);
  constexpr int kSuper = 4;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double py = y + (sy + 0.5) / kSuper;
          const double px = x + (sx + 0.5) / kSuper;
          if (inside(cls, (px - cx) / half, (py - cy) / half)) ++hits;
        }
      }
      const double cover = static_cast<double>(hits) / (kSuper * kSuper);
      const double shade = gy * (y - size / 2.0) / size + gx * (x - size / 2.0) / size +
                           tex_amp * std::sin(tex_fy * y + tex_phase) * std::cos(tex_fx * x);
      const double grain = normal(rng, 0.0, 0.02);
      for (int c = 0; c < 3; ++c) {
        const double b = bg[c] + shade + grain;
        const double v = std::clamp(cover * fg[c] + (1.0 - cover) * b, 0.0, 1.0);
        img.set(c, y, x, from_8bit(static_cast<std::uint8_t>(std::lround(v * 255.0))));
      }
    }
  }
  return img;
}

namespace {

std::vector<LabeledImage> render_split(const DeskDatasetSpec& spec, const char* split, int per_class) {
  const SeedSplitter seeds(spec.seed);
  const auto names = desk_class_names();
  std::vector<LabeledImage> out;
  out.reserve(static_cast<std::size_t>(per_class) * names.size());
  for (int i = 0; i < per_class; ++i) {
    for (int cls = 0; cls < static_cast<int>(names.size()); ++cls) {
      Rng rng = seeds.child(split).rng(names[cls], static_cast<std::uint64_t>(i));
      out.push_back({render_desk_image(cls, rng, spec.size), cls,
                     fmt::format("{}/{}/{:05d}.png", split, names[cls], i)});
    }
  }
  return out;
}

}  // namespace

Dataset generate_desk_dataset(const DeskDatasetSpec& spec) {
  if (spec.train_per_class < 1 || spec.test_per_class < 1 || spec.size < 16) {
    throw ConfigError("desk dataset needs >= 1 image per class and split, size >= 16");
  }
  Dataset ds;
  ds.labels = desk_class_names();
  ds.train = render_split(spec, "train", spec.train_per_class);
  ds.test = render_split(spec, "test", spec.test_per_class);
  return ds;
}

void write_desk_dataset(const std::filesystem::path& dir, const DeskDatasetSpec& spec) {
  const Dataset ds = generate_desk_dataset(spec);
  std::filesystem::create_directories(dir);
  for (const auto& [split, items] : {std::pair{"train", &ds.train}, std::pair{"test", &ds.test}}) {
    std::ofstream csv(dir / (std::string(split) + ".csv"), std::ios::trunc);
    csv << "path,label\n";
    for (const auto& item : *items) {
      write_png(dir / item.id, item.image);
      csv << item.id << "," << item.label << "\n";
    }
  }
  std::ofstream labels(dir / "labels.txt", std::ios::trunc);
  for (const auto& name : ds.labels) labels << name << "\n";
}

std::vector<LabeledImage> read_manifest(const std::filesystem::path& csv, int num_classes) {
  std::ifstream in(csv);
  if (!in) {
    throw ConfigError("dataset manifest " + csv.string() +
                      " not found; generate it with `iap make-dataset --out <dir>`");
  }
  const auto root = csv.parent_path();
  std::vector<LabeledImage> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line == "path,label")) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) {
      throw ConfigError(fmt::format("{}:{}: expected 'path,label'", csv.string(), lineno));
    }
    LabeledImage item;
    item.id = line.substr(0, comma);
    try {
      std::size_t used = 0;
      item.label = std::stoi(line.substr(comma + 1), &used);
      if (used != line.size() - comma - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw ConfigError(fmt::format("{}:{}: bad label", csv.string(), lineno));
    }
    if (item.label < 0 || item.label >= num_classes) {
      throw ConfigError(fmt::format("{}:{}: label {} outside [0, {})", csv.string(), lineno,
                                    item.label, num_classes));
    }
    item.image = read_png(root / item.id);
    out.push_back(std::move(item));
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  std::ifstream labels(dir / "labels.txt");
  if (!labels) {
    throw ConfigError("dataset label map " + (dir / "labels.txt").string() +
                      " not found; generate it with `iap make-dataset --out <dir>`");
  }
  std::string name;
  while (std::getline(labels, name)) {
    if (!name.empty()) ds.labels.push_back(name);
  }
  ds.train = read_manifest(dir / "train.csv", ds.num_classes());
  ds.test = read_manifest(dir / "test.csv", ds.num_classes());
  ds.validate();
  return ds;
}

}  // namespace iap
