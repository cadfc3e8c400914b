#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "iap/image.hpp"
#include "iap/nn/network.hpp"
#include "json.hpp"

namespace iap {

struct Provenance {
  std::string mode = "standard";  // standard | adversarial
  std::string norm;               // linf | l2 for adversarial models
  double eps = 0.0;
  int pgd_steps = 0;
  double pgd_step_size = 0.0;
};

void to_json(nlohmann::json& j, const Provenance& p);
void from_json(const nlohmann::json& j, Provenance& p);

// Pseudo-point naming the softmax probabilities. It sits downstream of the
// score head, so no score depends on it.
inline constexpr std::string_view kSoftmaxPoint = "softmax";

class Classifier {
 public:
  Classifier() = default;
  Classifier(std::string architecture, nn::Network net, int num_classes, Shape input);

  [[nodiscard]] const std::string& architecture() const { return arch_; }
  [[nodiscard]] int num_classes() const { return num_classes_; }
  // (1, C, H, W) of a single input.
  [[nodiscard]] const Shape& input_shape() const { return input_; }
  [[nodiscard]] const nn::Network& network() const { return net_; }
  nn::Network& network() { return net_; }

  Provenance provenance;
  nlohmann::json metrics = nlohmann::json::object();
  std::uint64_t seed = 0;

  [[nodiscard]] std::vector<double> logits(const ImageTensor& x) const;
  // (N, C, H, W) -> (N, num_classes, 1, 1).
  [[nodiscard]] Tensor logits_batch(const Tensor& x) const;
  [[nodiscard]] int predict(const ImageTensor& x) const;
  [[nodiscard]] std::vector<int> predict_batch(const Tensor& x) const;

  [[nodiscard]] std::vector<std::string> points() const;
  [[nodiscard]] int point_channels(std::string_view point) const;
  // Activations at a named point as (1, k, H_f, W_f).
  [[nodiscard]] Tensor feature_maps(const ImageTensor& x, std::string_view point) const;

  // d y^c / d(input) as (1, C, H, W) or d y^c / d(point) as (1, k, H_f, W_f).
  [[nodiscard]] Tensor score_gradient(const ImageTensor& x, int c, std::string_view wrt) const;
  // Feature maps and score gradient at a point from a single forward pass.
  void point_and_gradient(const ImageTensor& x, int c, std::string_view point, Tensor& maps,
                          Tensor& grad) const;
  // Backpropagates dL/dlogits (N, C, 1, 1) to the input batch.
  [[nodiscard]] Tensor input_gradient(const Tensor& x, const Tensor& grad_logits) const;

  [[nodiscard]] std::string digest() const { return net_.digest(); }

 private:
  void check_input(const Tensor& x) const;
  void check_class(int c) const;

  std::string arch_;
  nn::Network net_;
  int num_classes_ = 0;
  Shape input_{};
};

// Lowest index wins ties.
int argmax(std::span<const double> v);
std::vector<double> softmax(std::span<const double> z);

// Architectures: "cnn-s", "cnn-w", "cnn-d" (conv zoo with points block1..3
// and logits), "gap-cnn" (one conv block, global average pooling, linear
// head), "linear" (a single affine map).
std::vector<std::string> architecture_ids();
Classifier make_classifier(std::string_view architecture, int num_classes, Shape input);

// <dir>/<name>.bin holds the parameters, <dir>/<name>.json the manifest with
// the blob digest.
void save_classifier(const std::filesystem::path& dir, const std::string& name,
                     const Classifier& f);
Classifier load_classifier(const std::filesystem::path& dir, const std::string& name);

}  // namespace iap
