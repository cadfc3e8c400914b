#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iap/config.hpp"
#include "iap/dataset.hpp"
#include "iap/victims.hpp"

namespace iap {

inline constexpr int kReportSchemaVersion = 1;

struct Victim {
  ModelSpec spec;
  Classifier model;
};

struct Zoo {
  std::vector<Victim> victims;  // config order

  [[nodiscard]] int index(const std::string& name) const;
  [[nodiscard]] const Classifier& get(const std::string& name) const { return victims.at(index(name)).model; }
};

struct Fixture {
  std::string image_id;  // dataset id, e.g. test/disc/00004.png
  std::string key;       // directory-safe form of the id
  int label = 0;
};

// One pipeline stage at a time over a run directory. Every stage writes the
// resolved config snapshot first and refreshes run_manifest.json last.
class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, bool resume);

  [[nodiscard]] const ExperimentConfig& config() const { return cfg_; }
  [[nodiscard]] const std::filesystem::path& out() const { return cfg_.out; }

  void make_dataset();
  void train_victims();
  // Restricts vulnmap/attack/baseline to one fixture when `image_id` is set.
  void vulnmap(const std::optional<std::string>& image_id = std::nullopt);
  void attack(const std::optional<std::string>& image_id = std::nullopt);
  void baseline(const std::optional<std::string>& image_id = std::nullopt);
  void evaluate();
  // All stages in order.
  void run_all();

  // Loaders for downstream stages; errors name what is missing.
  const Dataset& dataset();
  Zoo load_zoo() const;
  std::vector<Fixture> fixtures() const;
  int resolve_target();

 private:
  void begin_stage(const char* name);
  void end_stage();
  PatchPlacement place(const Classifier& f, const ImageTensor& x, const Fixture& fx, bool write);
  const LabeledImage& test_image(const std::string& id);

  ExperimentConfig cfg_;
  bool resume_ = false;
  std::optional<Dataset> data_;
};

std::string fixture_key(const std::string& image_id);

// Lists every file under the run directory (except the manifest itself) with
// its sha256 and size, plus the seed streams.
void write_run_manifest(const ExperimentConfig& cfg);

// Consolidated markdown over completed runs.
void write_report(std::span<const std::filesystem::path> runs, const std::filesystem::path& out);

}  // namespace iap
