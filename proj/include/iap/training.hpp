#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "iap/baselines.hpp"
#include "iap/dataset.hpp"
#include "iap/victims.hpp"

namespace iap {

struct TrainSchedule {
  int epochs = 8;
  int batch = 32;
  double lr = 2e-3;
  std::uint64_t seed = 1;
  // Adversarial training only: eps and step size ramp linearly from 0 over
  // this many epochs.
  int eps_warmup_epochs = 0;
};

// Adam on mean cross-entropy with a cosine learning-rate decay. Records
// test_accuracy, train_accuracy and final_loss in the returned metrics.
Classifier train_classifier(const Dataset& data, std::string_view architecture,
                            const TrainSchedule& schedule);

// Same loop on PGD-perturbed minibatches. eps == 0 reproduces
// train_classifier bit-for-bit under the same schedule. With `init` the
// parameters start from that classifier (adversarial fine-tuning) instead
// of a fresh initialization.
Classifier adversarial_train(const Dataset& data, std::string_view architecture,
                             const TrainSchedule& schedule, const PgdConfig& pgd,
                             const Classifier* init = nullptr);

double accuracy(const Classifier& f, std::span<const LabeledImage> items);
// Accuracy on PGD-perturbed copies of `items`.
double robust_accuracy(const Classifier& f, std::span<const LabeledImage> items,
                       const PgdConfig& pgd, std::uint64_t seed);

}  // namespace iap
