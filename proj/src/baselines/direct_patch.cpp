#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "iap/baselines.hpp"
#include "iap/error.hpp"
#include "iap/losses.hpp"

namespace iap {

DirectPatchResult direct_patch_attack(const Classifier& f, const ImageTensor& x, int y,
                                      const PatchPlacement& loc, const DirectPatchConfig& cfg) {
  loc.require_fits(x.height(), x.width());
  if (loc.height < 1 || loc.width < 1) throw ConfigError("direct patch: empty placement");
  if (cfg.steps < 0) throw ConfigError("direct patch: negative step count");
  const int cls = cfg.targeted ? cfg.target : y;
  if (cls < 0 || cls >= f.num_classes()) throw BoundsError("direct patch: class out of range");

  const Tensor base = x.as_batch();
  Tensor patch = crop_tensor(base, loc);
  nn::Adam opt({&patch}, nn::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  double loss = 0.0;
  for (int step = 0; step <= cfg.steps; ++step) {
    Tensor img = base;
    paste_patch(img, patch, loc);
    Tensor gz;
    loss = cw_loss_batch(f.logits_batch(img), cls, cfg.kappa, cfg.targeted, &gz);
    if (!std::isfinite(loss)) throw NumericError(fmt::format("direct patch: non-finite loss at step {}", step));
    if (step == cfg.steps) break;
    const Tensor g = crop_tensor(f.input_gradient(img, gz), loc);
    opt.step({g});
    for (double& v : patch.values()) v = std::clamp(v, -1.0, 1.0);
  }
  return {ImageTensor::clamped(patch), loss};
}

}  // namespace iap
