#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "iap/kernels.hpp"
#include "iap/rng.hpp"
#include "iap/tensor.hpp"
#include "json.hpp"

namespace iap::nn {

enum class Init {
  kKaimingUniform,  // classifiers
  kNormal002,       // GAN generators and critics: N(0, 0.02)
};

// Per-call scratch a layer needs between forward and backward. Lives in the
// caller's Trace, never in the layer, so a trained network stays immutable
// and shareable during inference.
struct LayerCache {
  Tensor aux;
  std::vector<int> indices;
  std::vector<double> stats;
};

class Layer {
 public:
  virtual ~Layer() = default;

  [[nodiscard]] virtual std::string kind() const = 0;
  [[nodiscard]] virtual Tensor forward(const Tensor& x, LayerCache* cache) const = 0;
  // Returns dL/dx. Parameter gradients are accumulated into `param_grads`
  // (one tensor per parameter); an empty span skips them.
  [[nodiscard]] virtual Tensor backward(const Tensor& x, const Tensor& y, const Tensor& gy,
                                        const LayerCache& cache,
                                        std::span<Tensor> param_grads) const = 0;

  virtual std::span<Tensor> params() { return {}; }
  [[nodiscard]] virtual std::span<const Tensor> params() const { return {}; }
  virtual void initialize(Rng& /*rng*/, Init /*scheme*/) {}

  [[nodiscard]] virtual std::unique_ptr<Layer> clone() const = 0;
  [[nodiscard]] virtual nlohmann::json describe() const { return {{"kind", kind()}}; }
};

class Conv2d final : public Layer {
 public:
  Conv2d(int in_channels, int out_channels, int kernel = 3, int stride = 1, int pad = 1);

  [[nodiscard]] std::string kind() const override { return "conv2d"; }
  [[nodiscard]] Tensor forward(const Tensor& x, LayerCache* cache) const override;
  [[nodiscard]] Tensor backward(const Tensor& x, const Tensor& y, const Tensor& gy,
                                const LayerCache& cache,
                                std::span<Tensor> param_grads) const override;
  std::span<Tensor> params() override { return params_; }
  [[nodiscard]] std::span<const Tensor> params() const override { return params_; }
  void initialize(Rng& rng, Init scheme) override;
  [[nodiscard]] std::unique_ptr<Layer> clone() const override {
    return std::make_unique<Conv2d>(*this);
  }
  [[nodiscard]] nlohmann::json describe() const override;

  [[nodiscard]] const kernels::ConvGeometry& geometry() const { return geom_; }
  Tensor& weight() { return params_[0]; }
  Tensor& bias() { return params_[1]; }
  [[nodiscard]] const Tensor& weight() const { return params_[0]; }
  [[nodiscard]] const Tensor& bias() const { return params_[1]; }

 private:
  kernels::ConvGeometry geom_;
  std::vector<Tensor> params_;
};

class Linear final : public Layer {
 public:
  Linear(int in_features, int out_features);

  [[nodiscard]] std::string kind() const override { return "linear"; }
  [[nodiscard]] Tensor forward(const Tensor& x, LayerCache* cache) const override;
  [[nodiscard]] Tensor backward(const Tensor& x, const Tensor& y, const Tensor& gy,
                                const LayerCache& cache,
                                std::span<Tensor> param_grads) const override;
  std::span<Tensor> params() override { return params_; }
  [[nodiscard]] std::span<const Tensor> params() const override { return params_; }
  void initialize(Rng& rng, Init scheme) override;
  [[nodiscard]] std::unique_ptr<Layer> clone() const override {
    return std::make_unique<Linear>(*this);
  }
  [[nodiscard]] nlohmann::json describe() const override;

  Tensor& weight() { return params_[0]; }
  Tensor& bias() { return params_[1]; }
  [[nodiscard]] const Tensor& weight() const { return params_[0]; }
  [[nodiscard]] const Tensor& bias() const { return params_[1]; }

 private:
  int in_ = 0;
  int out_ = 0;
  std::vector<Tensor> params_;
};

class ReLU final : public Layer {
 public:
  [[nodiscard]] std::string kind() const override { return "relu"; }
  [[nodiscard]] Tensor forward(const Tensor& x, LayerCache* cache) const override;
  [[nodiscard]] Tensor backward(const Tensor& x, const Tensor& y, const Tensor& gy,
                                const LayerCache& cache,
                                std::span<Tensor> param_grads) const override;
  [[nodiscard]] std::unique_ptr<Layer> clone() const override {
    return std::make_unique<ReLU>(*this);
  }
};

class LeakyReLU final : public Layer {
 public:
  explicit LeakyReLU(double slope = 0.2) : slope_(slope) {}
  [[nodiscard]] std::string kind() const override { return "leaky_relu"; }
  [[nodiscard]] Tensor forward(const Tensor& x, LayerCache* cache) const override;
  [[nodiscard]] Tensor backward(const Tensor& x, const Tensor& y, const Tensor& gy,
                                const LayerCache& cache,
                                std::span<Tensor> param_grads) const override;
  [[nodiscard]] std::unique_ptr<Layer> clone() const override {
    return std::make_unique<LeakyReLU>(*this);
  }
  [[nodiscard]] nlohmann::json describe() const override;

 private:
  double slope_;
};

class Tanh final : public Layer {
 public:
  [[nodiscard]] std::string kind() const override { return "tanh"; }
  [[nodiscard]] Tensor forward(const Tensor& x, LayerCache* cache) const override;
  [[nodiscard]] Tensor backward(const Tensor& x, const Tensor& y, const Tensor& gy,
                                const LayerCache& cache,
                                std::span<Tensor> param_grads) const override;
  [[nodiscard]] std::unique_ptr<Layer> clone() const override {
    return std::make_unique<Tanh>(*this);
  }
};

// 2x2 window, stride 2. Odd trailing rows/columns are dropped.
class MaxPool2d final : public Layer {
 public:
  [[nodiscard]] std::string kind() const override { return "maxpool2"; }
  [[nodiscard]] Tensor forward(const Tensor& x, LayerCache* cache) const override;
  [[nodiscard]] Tensor backward(const Tensor& x, const Tensor& y, const Tensor& gy,
                                const LayerCache& cache,
                                std::span<Tensor> param_grads) const override;
  [[nodiscard]] std::unique_ptr<Layer> clone() const override {
    return std::make_unique<MaxPool2d>(*this);
  }
};

class GlobalAvgPool final : public Layer {
 public:
  [[nodiscard]] std::string kind() const override { return "global_avg_pool"; }
  [[nodiscard]] Tensor forward(const Tensor& x, LayerCache* cache) const override;
  [[nodiscard]] Tensor backward(const Tensor& x, const Tensor& y, const Tensor& gy,
                                const LayerCache& cache,
                                std::span<Tensor> param_grads) const override;
  [[nodiscard]] std::unique_ptr<Layer> clone() const override {
    return std::make_unique<GlobalAvgPool>(*this);
  }
};

// Per-sample, per-channel normalization over H x W with a learned affine.
class InstanceNorm2d final : public Layer {
 public:
  explicit InstanceNorm2d(int channels, double eps = 1e-5);

  [[nodiscard]] std::string kind() const override { return "instance_norm"; }
  [[nodiscard]] Tensor forward(const Tensor& x, LayerCache* cache) const override;
  [[nodiscard]] Tensor backward(const Tensor& x, const Tensor& y, const Tensor& gy,
                                const LayerCache& cache,
                                std::span<Tensor> param_grads) const override;
  std::span<Tensor> params() override { return params_; }
  [[nodiscard]] std::span<const Tensor> params() const override { return params_; }
  void initialize(Rng& rng, Init scheme) override;
  [[nodiscard]] std::unique_ptr<Layer> clone() const override {
    return std::make_unique<InstanceNorm2d>(*this);
  }
  [[nodiscard]] nlohmann::json describe() const override;

 private:
  int channels_;
  double eps_;
  std::vector<Tensor> params_;  // gamma, beta
};

}  // namespace iap::nn
