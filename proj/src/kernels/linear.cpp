#include <Eigen/Core>

#include "iap/error.hpp"
#include "iap/kernels.hpp"

namespace iap::kernels {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

void check_linear(const Tensor& x, const Tensor& weight) {
  if (weight.h() != 1 || weight.w() != 1 ||
      x.shape().sample_size() != static_cast<std::size_t>(weight.c())) {
    throw ShapeError("linear: input " + x.shape().str() + " incompatible with weight " +
                     weight.shape().str());
  }
}

}  // namespace

Tensor linear_forward(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  check_linear(x, weight);
  const int n = x.n();
  const int in = weight.c();
  const int out = weight.n();
  Tensor y(Shape{n, out, 1, 1});
  MutMap ym(y.data().data(), n, out);
  ym.noalias() = ConstMap(x.data().data(), n, in) * ConstMap(weight.data().data(), out, in).transpose();
  for (int i = 0; i < n; ++i) {
    for (int o = 0; o < out; ++o) ym(i, o) += bias[o];
  }
  return y;
}

void linear_backward(const Tensor& x, const Tensor& weight, const Tensor& gy, Tensor* gx,
                     Tensor* gweight, Tensor* gbias) {
  check_linear(x, weight);
  const int n = x.n();
  const int in = weight.c();
  const int out = weight.n();
  if (gy.shape() != Shape{n, out, 1, 1}) throw ShapeError("linear backward: grad shape " + gy.shape().str());
  const ConstMap g(gy.data().data(), n, out);
  if (gx != nullptr) {
    *gx = Tensor(x.shape());
    MutMap(gx->data().data(), n, in).noalias() = g * ConstMap(weight.data().data(), out, in);
  }
  if (gweight != nullptr) {
    MutMap(gweight->data().data(), out, in).noalias() += g.transpose() * ConstMap(x.data().data(), n, in);
  }
  if (gbias != nullptr) {
    for (int i = 0; i < n; ++i) {
      for (int o = 0; o < out; ++o) (*gbias)[o] += g(i, o);
    }
  }
}

}  // namespace iap::kernels
