#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "iap/dataset.hpp"
#include "iap/image.hpp"
#include "iap/losses.hpp"
#include "iap/nn/network.hpp"
#include "iap/pyramid.hpp"
#include "iap/victims.hpp"
#include "json.hpp"

namespace iap {

// Fully convolutional critic: `blocks` conv-norm-lrelu blocks and a
// one-channel conv head emitting a spatial score map.
nn::Network make_critic(int in_channels, int channels, int blocks);

// Per-sample score: spatial mean of the critic's output map.
std::vector<double> critic_scores(const nn::Network& d, const Tensor& x);

struct GanLossResult {
  double critic_loss = 0.0;     // mean D(fake) - mean D(real) + lambda * penalty
  double generator_loss = 0.0;  // -mean D(fake)
  double penalty = 0.0;         // mean (||grad D(x_hat)|| - 1)^2, unweighted
  double real_score = 0.0;
  double fake_score = 0.0;
};

// -mean D(fake) and, when `grad` is non-null, its gradient wrt fake.
double critic_generator_loss(const nn::Network& d, const Tensor& fake, Tensor* grad);

// Gradient norms of the critic score at each sample of x.
std::vector<double> critic_gradient_norms(const nn::Network& d, const Tensor& x);

// WGAN-GP losses with interpolates x_hat = u * real + (1 - u) * fake, one
// u ~ U[0, 1] per sample drawn from `rng`. When `critic_grads` is non-null
// it accumulates d(critic_loss)/d(theta); the penalty's parameter gradient
// uses a central difference of parameter gradients along the unit input
// gradient direction. When `fake_grad` is non-null it receives
// d(generator_loss)/d(fake).
GanLossResult gan_loss(const nn::Network& d, const Tensor& real, const Tensor& fake,
                       double lambda_gp, Rng& rng, nn::Gradients* critic_grads = nullptr,
                       Tensor* fake_grad = nullptr);

// Fully convolutional patch generator. Input is noise plus the upsampled
// prior patch; the head output is added to atanh(prior) before tanh, so a
// zero head reproduces the prior. Without a prior the output is tanh(head).
class ScaleGenerator {
 public:
  ScaleGenerator() = default;
  ScaleGenerator(int channels, int blocks);

  struct Pass {
    nn::Trace trace;
    Tensor out;
  };

  [[nodiscard]] Tensor forward(const Tensor& noise, const Tensor* prior, Pass* pass = nullptr) const;
  // Accumulates parameter gradients of a loss with dL/d(out) = grad_out.
  void backward(const Pass& pass, const Tensor& grad_out, nn::Gradients& grads) const;

  [[nodiscard]] nn::Network& network() { return body_; }
  [[nodiscard]] const nn::Network& network() const { return body_; }

 private:
  nn::Network body_;
};

struct ScaleGAN {
  ScaleGenerator generator;
  nn::Network critic;
  double sigma = 1.0;  // noise amplitude
  Tensor z_star;       // fixed reconstruction noise
  Shape patch_shape{};
  bool frozen = false;
};

struct IapConfig {
  double r = 0.75;
  int scales = 2;  // K: index of the finest level
  int min_size = 8;
  LossWeights weights;
  int iterations = 2000;
  int critic_steps = 3;
  int generator_steps = 3;
  int batch = 1;  // noise samples per step
  int channels = 32;
  int blocks = 5;
  double lr = 5e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double noise_amp = 0.1;
  bool targeted = false;
  int target = -1;
  NpsDistance nps_mode = NpsDistance::kEuclidean;
  std::vector<Rgb> palette = default_palette();
  std::uint64_t seed = 0;
  int coupling_check_every = 25;  // 0 disables

  void validate() const;
};

nlohmann::json to_json(const IapConfig& c);

// One row per training iteration of one scale.
struct LossRow {
  int scale = 0;
  int iteration = 0;
  double critic = 0.0;
  double penalty = 0.0;
  double gan = 0.0;
  double adv = 0.0;
  double rec = 0.0;
  double tv = 0.0;
  double nps = 0.0;
  double total = 0.0;
};

struct GeneratorStack {
  std::vector<ScaleGAN> scales;
  std::vector<PatchPlacement> level_placements;  // per-level patch windows
  double r = 0.75;
  int finest = 0;
  PatchPlacement placement;  // full-resolution window
  int label = 0;
  bool targeted = false;
  int target = -1;
  std::string victim_digest;
  std::string image_digest;
  IapConfig config;
  std::vector<LossRow> curve;
  long coupling_checks = 0;

  [[nodiscard]] bool complete() const;
  [[nodiscard]] std::vector<std::string> generator_digests() const;
  [[nodiscard]] std::vector<std::string> critic_digests() const;
};

// Runs the frozen chain with the given per-scale noises; returns every
// level's patch (coarsest first).
std::vector<Tensor> run_chain(const GeneratorStack& stack, const std::vector<Tensor>& noises);
// Reconstruction chain with z*_i.
std::vector<Tensor> reconstruct(const GeneratorStack& stack);

// Upsamples a (N, C, h, w) patch batch to (N, C, out_h, out_w).
Tensor upsample_batch(const Tensor& p, int out_h, int out_w);

// Trains scale i on top of the frozen scales in `prior` (which must hold
// exactly i frozen scales) and returns it frozen. Loss rows are appended to
// `curve` when non-null.
ScaleGAN train_scale(int i, const ScalePyramid& pyramid, const GeneratorStack& prior,
                     const Classifier& f, const ImageTensor& x, int y, const IapConfig& cfg,
                     std::vector<LossRow>* curve = nullptr, long* coupling_checks = nullptr);

GeneratorStack train_iap(const LabeledImage& x, const Classifier& f, const PatchPlacement& loc,
                         const IapConfig& cfg);

// Coarse-to-fine sample of the finest patch; a pure function of (stack, seed).
ImageTensor generate(const GeneratorStack& stack, std::uint64_t seed);

// Per-scale critic/generator blobs, manifest.json and losses.csv.
void save_stack(const std::filesystem::path& dir, const GeneratorStack& stack);
GeneratorStack load_stack(const std::filesystem::path& dir);
void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRow>& rows);

}  // namespace iap
