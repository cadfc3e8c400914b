#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace iap {

struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  [[nodiscard]] std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  [[nodiscard]] std::size_t sample_size() const {
    return static_cast<std::size_t>(c) * h * w;
  }
  bool operator==(const Shape&) const = default;
  [[nodiscard]] std::string str() const;
};

// Dense NCHW tensor of doubles. Every layer, loss and kernel in the
// library operates on this type.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] int n() const { return shape_.n; }
  [[nodiscard]] int c() const { return shape_.c; }
  [[nodiscard]] int h() const { return shape_.h; }
  [[nodiscard]] int w() const { return shape_.w; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] std::span<double> data() { return data_; }
  [[nodiscard]] std::span<const double> data() const { return data_; }
  [[nodiscard]] std::vector<double>& values() { return data_; }
  [[nodiscard]] const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(int n, int c, int y, int x) {
    return data_[index(n, c, y, x)];
  }
  [[nodiscard]] double at(int n, int c, int y, int x) const {
    return data_[index(n, c, y, x)];
  }

  [[nodiscard]] std::span<double> sample(int n) {
    return std::span<double>(data_).subspan(n * shape_.sample_size(), shape_.sample_size());
  }
  [[nodiscard]] std::span<const double> sample(int n) const {
    return std::span<const double>(data_).subspan(n * shape_.sample_size(),
                                                  shape_.sample_size());
  }

  // Same storage, new shape with equal element count.
  [[nodiscard]] Tensor reshaped(Shape shape) const;

  void fill(double v);
  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);
  void add_scaled(const Tensor& other, double s);

  [[nodiscard]] double sum() const;
  [[nodiscard]] double squared_norm() const;
  [[nodiscard]] bool all_finite() const;

 private:
  [[nodiscard]] std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  Shape shape_{};
  std::vector<double> data_;
};

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

}  // namespace iap
