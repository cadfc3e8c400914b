#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "iap/nn/layers.hpp"

namespace iap::nn {

// Activations and per-layer scratch recorded by one forward pass over the
// layer range [begin, end). activations[k] is the input of layer begin+k;
// the last entry is the range output.
struct Trace {
  int begin = 0;
  int end = 0;
  std::vector<Tensor> activations;
  std::vector<LayerCache> caches;
};

// Parameter gradients, aligned with Network::parameters().
struct Gradients {
  std::vector<Tensor> tensors;

  void zero();
  void add_scaled(const Gradients& other, double s);
  void scale(double s);
  [[nodiscard]] double squared_norm() const;
  [[nodiscard]] bool all_finite() const;
};

// A sequential stack of layers with named extraction points. A point names
// the output of a layer; "input" always names the network input.
class Network {
 public:
  Network() = default;
  Network(const Network& other);
  Network& operator=(const Network& other);
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;
  ~Network() = default;

  Network& add(std::unique_ptr<Layer> layer);
  template <class L, class... Args>
  Network& emplace(Args&&... args) {
    return add(std::make_unique<L>(std::forward<Args>(args)...));
  }
  // Names the output of the most recently added layer.
  Network& mark_point(std::string name);

  [[nodiscard]] int num_layers() const { return static_cast<int>(layers_.size()); }
  [[nodiscard]] const Layer& layer(int i) const { return *layers_.at(i); }
  Layer& layer(int i) { return *layers_.at(i); }

  // Activation index of a named point (0 = input, i + 1 = output of layer i).
  // Throws ConfigError for unknown names.
  [[nodiscard]] int point_index(std::string_view name) const;
  [[nodiscard]] bool has_point(std::string_view name) const;
  [[nodiscard]] std::vector<std::string> point_names() const;

  [[nodiscard]] Tensor forward(const Tensor& x, Trace* trace = nullptr) const;
  // Runs layers [begin, end) on x.
  [[nodiscard]] Tensor forward_range(const Tensor& x, int begin, int end,
                                     Trace* trace = nullptr) const;
  // Backpropagates grad_out through the traced range down to activation
  // index `stop` (absolute, >= trace.begin) and returns the gradient there.
  // Parameter gradients accumulate into `grads` when non-null.
  [[nodiscard]] Tensor backward(const Trace& trace, const Tensor& grad_out, Gradients* grads,
                                int stop = -1) const;

  [[nodiscard]] std::vector<Tensor*> parameters();
  [[nodiscard]] std::vector<const Tensor*> parameters() const;
  [[nodiscard]] Gradients zero_gradients() const;
  [[nodiscard]] std::size_t parameter_count() const;

  void initialize(Rng& rng, Init scheme);

  [[nodiscard]] std::vector<double> flat_parameters() const;
  void load_flat_parameters(std::span<const double> values);
  [[nodiscard]] std::string digest() const;
  [[nodiscard]] nlohmann::json describe() const;

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<int> param_offset_;  // first parameter index of each layer
  std::map<std::string, int, std::less<>> points_;
};

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over an arbitrary list of parameter tensors.
class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamConfig config);
  void step(const std::vector<Tensor>& grads);
  [[nodiscard]] const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  [[nodiscard]] long steps() const { return t_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  AdamConfig config_;
  long t_ = 0;
};

// Raw little-endian double blob of a network's parameters.
void write_parameter_blob(const std::filesystem::path& path, const Network& net);
void read_parameter_blob(const std::filesystem::path& path, Network& net);

}  // namespace iap::nn
