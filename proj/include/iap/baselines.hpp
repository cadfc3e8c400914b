#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "iap/image.hpp"
#include "iap/rng.hpp"
#include "iap/victims.hpp"
#include "json.hpp"

namespace iap {

// Radius and step size are in model-range units; 8-bit values convert as
// v / 127.5.
struct PgdConfig {
  std::string norm = "linf";  // linf | l2
  double eps = 8.0 / 127.5;
  double step_size = 0.8 / 127.5;
  int steps = 40;
  bool random_start = true;

  // eps == 0 is accepted and yields the unperturbed input.
  void validate() const;
};

void to_json(nlohmann::json& j, const PgdConfig& c);
void from_json(const nlohmann::json& j, PgdConfig& c);

// Ascends the cross-entropy training loss and projects onto the eps-ball
// around x and onto [-1, 1]. `loss_trace`, when non-null, receives the batch
// loss after each step.
Tensor pgd_batch(const Classifier& f, const Tensor& x, std::span<const int> labels,
                 const PgdConfig& cfg, Rng& rng, std::vector<double>* loss_trace = nullptr);

ImageTensor pgd_attack(const Classifier& f, const ImageTensor& x, int y, const PgdConfig& cfg,
                       std::uint64_t seed, std::vector<double>* loss_trace = nullptr);

// Norm of x_adv - x in the config's norm.
double perturbation_norm(const ImageTensor& x, const ImageTensor& x_adv, const std::string& norm);

struct DirectPatchConfig {
  int steps = 300;
  double lr = 0.05;
  double kappa = 0.0;
  bool targeted = false;
  int target = -1;
};

struct DirectPatchResult {
  ImageTensor patch;
  double final_loss = 0.0;
};

// Adam on the margin attack loss alone over the patch pixels, starting from
// the background crop and clamped to [-1, 1] after every step.
DirectPatchResult direct_patch_attack(const Classifier& f, const ImageTensor& x, int y,
                                      const PatchPlacement& loc, const DirectPatchConfig& cfg);

}  // namespace iap
