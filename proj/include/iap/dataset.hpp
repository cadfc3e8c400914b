#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "iap/image.hpp"
#include "iap/rng.hpp"

namespace iap {

struct LabeledImage {
  ImageTensor image;
  int label = 0;
  std::string id;  // manifest-relative path or a generated name
};

struct Dataset {
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> test;
  std::vector<std::string> labels;

  [[nodiscard]] int num_classes() const { return static_cast<int>(labels.size()); }
  // Throws ConfigError on an empty split, fewer than 2 classes, bad labels,
  // mixed image shapes or overlapping train/test ids.
  void validate() const;
};

Tensor stack_images(std::span<const LabeledImage> items, std::span<const std::size_t> indices);

// Procedural 10-class corpus: one antialiased shape per image on a textured
// background. Every pixel is an exact 8-bit level.
std::vector<std::string> desk_class_names();
ImageTensor render_desk_image(int cls, Rng& rng, int size = 32);

struct DeskDatasetSpec {
  int train_per_class = 500;
  int test_per_class = 100;
  int size = 32;
  std::uint64_t seed = 7;
};

// Writes <dir>/{train,test}/<class>/<index>.png, train.csv, test.csv and
// labels.txt. Manifests list "path,label" with paths relative to <dir>.
void write_desk_dataset(const std::filesystem::path& dir, const DeskDatasetSpec& spec);
Dataset generate_desk_dataset(const DeskDatasetSpec& spec);

std::vector<LabeledImage> read_manifest(const std::filesystem::path& csv, int num_classes);
// Loads <dir>/train.csv, <dir>/test.csv and <dir>/labels.txt.
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace iap
