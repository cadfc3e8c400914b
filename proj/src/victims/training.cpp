#include "iap/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "iap/error.hpp"
#include "iap/losses.hpp"

namespace iap {
namespace {

constexpr double kPi = 3.141592653589793;

Classifier train_loop(const Dataset& data, std::string_view architecture,
                      const TrainSchedule& schedule, const PgdConfig* pgd, const Classifier* init) {
  data.validate();
  if (schedule.epochs < 1 || schedule.batch < 1 || !(schedule.lr > 0.0) || schedule.eps_warmup_epochs < 0) {
    throw ConfigError("train schedule needs epochs >= 1, batch >= 1, lr > 0, warmup >= 0");
  }
  const auto& probe = data.train.front().image;
  Classifier f = make_classifier(architecture, data.num_classes(),
                                 Shape{1, probe.channels(), probe.height(), probe.width()});
  const SeedSplitter seeds(schedule.seed);
  Rng init_rng = seeds.rng("init");
  f.network().initialize(init_rng, nn::Init::kKaimingUniform);
  if (init != nullptr) {
    if (init->architecture() != f.architecture() || init->num_classes() != f.num_classes() ||
        init->input_shape() != f.input_shape()) {
      throw ConfigError(fmt::format("cannot initialize {} from a {} classifier", architecture, init->architecture()));
    }
    f.network().load_flat_parameters(init->network().flat_parameters());
  }
  f.seed = schedule.seed;

  Rng order_rng = seeds.rng("order");
  Rng pgd_rng = seeds.rng("pgd");
  nn::Adam opt(f.network().parameters(), nn::AdamConfig{schedule.lr, 0.9, 0.999, 1e-8});
  const std::size_t n = data.train.size();
  const std::size_t per_epoch = (n + schedule.batch - 1) / schedule.batch;
  const double total_steps = static_cast<double>(per_epoch) * schedule.epochs;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  nn::Gradients grads = f.network().zero_gradients();
  double epoch_loss = 0.0;
  long step = 0;
  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    epoch_loss = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t lo = b * schedule.batch;
      const std::size_t hi = std::min(n, lo + schedule.batch);
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      Tensor x = stack_images(data.train, idx);
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (std::size_t i : idx) labels.push_back(data.train[i].label);
      if (pgd != nullptr && pgd->eps > 0.0) {
        PgdConfig ramped = *pgd;
        const double warm = static_cast<double>(per_epoch) * schedule.eps_warmup_epochs;
        if (step < warm) {
          const double t = (static_cast<double>(step) + 1.0) / warm;
          ramped.eps *= t;
          ramped.step_size *= t;
        }
        x = pgd_batch(f, x, labels, ramped, pgd_rng);
      }

      nn::Trace trace;
      const Tensor z = f.network().forward(x, &trace);
      Tensor gz;
      const double loss = cross_entropy(z, labels, &gz);
      if (!std::isfinite(loss)) {
        throw NumericError(fmt::format("{}: non-finite loss at epoch {} batch {}", architecture,
                                       epoch, b));
      }
      grads.zero();
      (void)f.network().backward(trace, gz, &grads);
      if (!grads.all_finite()) {
        throw NumericError(fmt::format("{}: non-finite gradient at epoch {} batch {}",
                                       architecture, epoch, b));
      }
      opt.set_lr(schedule.lr * 0.5 * (1.0 + std::cos(kPi * step / total_steps)));
      opt.step(grads.tensors);
      ++step;
      epoch_loss += loss * static_cast<double>(idx.size());
    }
    epoch_loss /= static_cast<double>(n);
    spdlog::info("{} epoch {}/{}: loss {:.4f}", architecture, epoch + 1, schedule.epochs,
                 epoch_loss);
  }
  f.metrics["final_loss"] = epoch_loss;
  f.metrics["train_accuracy"] = accuracy(f, data.train);
  f.metrics["test_accuracy"] = accuracy(f, data.test);
  f.metrics["epochs"] = schedule.epochs;
  return f;
}

}  // namespace

Classifier train_classifier(const Dataset& data, std::string_view architecture,
                            const TrainSchedule& schedule) {
  return train_loop(data, architecture, schedule, nullptr, nullptr);
}

Classifier adversarial_train(const Dataset& data, std::string_view architecture,
                             const TrainSchedule& schedule, const PgdConfig& pgd, const Classifier* init) {
  pgd.validate();
  Classifier f = train_loop(data, architecture, schedule, &pgd, init);
  f.provenance.mode = "adversarial";
  f.provenance.norm = pgd.norm;
  f.provenance.eps = pgd.eps;
  f.provenance.pgd_steps = pgd.steps;
  f.provenance.pgd_step_size = pgd.step_size;
  return f;
}

double accuracy(const Classifier& f, std::span<const LabeledImage> items) {
  if (items.empty()) throw ConfigError("accuracy of an empty set");
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t lo = 0; lo < items.size(); lo += kChunk) {
    const std::size_t hi = std::min(items.size(), lo + kChunk);
    idx.resize(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    const auto pred = f.predict_batch(stack_images(items, idx));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (pred[k] == items[idx[k]].label) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

double robust_accuracy(const Classifier& f, std::span<const LabeledImage> items,
                       const PgdConfig& pgd, std::uint64_t seed) {
  if (items.empty()) throw ConfigError("robust accuracy of an empty set");
  Rng rng(seed);
  constexpr std::size_t kChunk = 64;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t lo = 0; lo < items.size(); lo += kChunk) {
    const std::size_t hi = std::min(items.size(), lo + kChunk);
    idx.resize(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    std::vector<int> labels;
    for (std::size_t i : idx) labels.push_back(items[i].label);
    const Tensor adv = pgd_batch(f, stack_images(items, idx), labels, pgd, rng);
    const auto pred = f.predict_batch(adv);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (pred[k] == labels[k]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

}  // namespace iap
