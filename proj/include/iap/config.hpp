#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "iap/baselines.hpp"
#include "iap/eval.hpp"
#include "iap/patchgan.hpp"
#include "iap/training.hpp"
#include "json.hpp"

namespace iap {

inline constexpr int kSchemaVersion = 1;

// Parses the TOML subset used by experiment configs: [table] and
// [table.sub] headers, bare keys, strings, integers, floats, booleans and
// (possibly multi-line) arrays. Throws ConfigError with origin:line.
nlohmann::json parse_toml(std::string_view text, const std::string& origin = "<config>");
std::string to_toml(const nlohmann::json& doc);

// The full default document; every accepted key appears in it.
const nlohmann::json& default_config_document();

struct ModelSpec {
  std::string name;          // e.g. "cnn-w-robust"
  std::string architecture;  // e.g. "cnn-w"
  bool robust = false;
};

struct ExperimentConfig {
  nlohmann::json resolved;  // defaults merged with the user document

  std::uint64_t seed = 0;
  std::filesystem::path out;

  std::filesystem::path dataset_path;
  bool dataset_generate = true;
  DeskDatasetSpec dataset_spec;

  std::vector<ModelSpec> models;
  std::string source_model;
  TrainSchedule train;
  TrainSchedule robust;  // adversarial fine-tuning of the standard counterpart
  PgdConfig adversarial_pgd;
  int robust_eval_images = 0;

  std::string placement_mode;  // gradcam | fixed
  std::string placement_point;  // "auto" or a point name
  PatchPlacement placement;     // height/width always; top/left when fixed
  std::string placement_source;  // config | cli

  IapConfig iap;
  double print_delta = 0.01;
  bool print_mode = false;
  std::string target_name;  // empty when untargeted
  int images = 10;
  int seeds = 100;

  DirectPatchConfig direct;
  PgdConfig pgd;

  PhysicalGrid grid;
  int workers = 1;
  int control_seeds = 100;
};

// Validates `user` against the schema (unknown keys, types, versions) and
// returns the resolved configuration.
ExperimentConfig resolve_config(const nlohmann::json& user);
ExperimentConfig load_config(const std::filesystem::path& path);

// CLI overrides; each one is written back into `resolved`.
void override_seed(ExperimentConfig& c, std::uint64_t seed);
void override_out(ExperimentConfig& c, const std::filesystem::path& out);
// "fixed:top,left"
void override_placement(ExperimentConfig& c, const std::string& spec);
void override_targeted(ExperimentConfig& c, const std::string& class_name);
void override_print_mode(ExperimentConfig& c);

// Digest of the resolved config with the seed and output directory removed.
std::string config_digest(const ExperimentConfig& c);

}  // namespace iap
