#include <benchmark/benchmark.h>

#include "iap/eval.hpp"
#include "iap/kernels.hpp"
#include "iap/rng.hpp"
#include "iap/victims.hpp"

namespace {

using namespace iap;

Tensor filled(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(s);
  for (auto& v : t.values()) v = uniform(rng, -1.0, 1.0);
  return t;
}

// Batch 32 through the widest zoo layer: 3 -> 32 channels at 32x32.
const kernels::ConvGeometry kConv{3, 32, 3, 1, 1};

template <bool Reference>
void BM_Conv2dForward(benchmark::State& state) {
  const Tensor x = filled({static_cast<int>(state.range(0)), 3, 32, 32}, 1);
  const Tensor w = filled({32, 3, 3, 3}, 2);
  const Tensor b = filled({1, 32, 1, 1}, 3);
  for (auto _ : state) {
    benchmark::DoNotOptimize(Reference ? kernels::reference::conv2d_forward(x, w, b, kConv)
                                       : kernels::conv2d_forward(x, w, b, kConv));
  }
}

template <bool Reference>
void BM_Conv2dBackward(benchmark::State& state) {
  const Tensor x = filled({static_cast<int>(state.range(0)), 3, 32, 32}, 1);
  const Tensor w = filled({32, 3, 3, 3}, 2);
  const Tensor gy = filled({x.n(), 32, 32, 32}, 4);
  for (auto _ : state) {
    Tensor gx(x.shape()), gw(w.shape()), gb({1, 32, 1, 1});
    if constexpr (Reference) {
      kernels::reference::conv2d_backward(x, w, gy, kConv, &gx, &gw, &gb);
    } else {
      kernels::conv2d_backward(x, w, gy, kConv, &gx, &gw, &gb);
    }
    benchmark::DoNotOptimize(gw.data());
  }
}

template <bool Reference>
void BM_LinearForward(benchmark::State& state) {
  const Tensor x = filled({static_cast<int>(state.range(0)), 64, 4, 4}, 1);
  const Tensor w = filled({10, 1024, 1, 1}, 2);
  const Tensor b = filled({1, 10, 1, 1}, 3);
  for (auto _ : state) {
    benchmark::DoNotOptimize(Reference ? kernels::reference::linear_forward(x, w, b)
                                       : kernels::linear_forward(x, w, b));
  }
}

template <bool Reference>
void BM_Saliency(benchmark::State& state) {
  Rng rng(5);
  const int s = static_cast<int>(state.range(0));
  ImageTensor x(3, s, s);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < s; ++y) {
      for (int i = 0; i < s; ++i) x.set(c, y, i, uniform(rng, -1.0, 1.0));
    }
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(Reference ? reference::saliency_map(x) : saliency_map(x));
  }
}

void BM_ClassifierGradient(benchmark::State& state) {
  Classifier f = make_classifier("cnn-d", 10, Shape{1, 3, 32, 32});
  Rng rng(6);
  f.network().initialize(rng, nn::Init::kKaimingUniform);
  const ImageTensor x(3, 32, 32, 0.1);
  for (auto _ : state) benchmark::DoNotOptimize(f.score_gradient(x, 3, "input"));
}

}  // namespace

BENCHMARK(BM_Conv2dForward<false>)->Name("conv2d_forward/im2col")->Arg(1)->Arg(32);
BENCHMARK(BM_Conv2dForward<true>)->Name("conv2d_forward/reference")->Arg(1)->Arg(32);
BENCHMARK(BM_Conv2dBackward<false>)->Name("conv2d_backward/im2col")->Arg(1)->Arg(32);
BENCHMARK(BM_Conv2dBackward<true>)->Name("conv2d_backward/reference")->Arg(1)->Arg(32);
BENCHMARK(BM_LinearForward<false>)->Name("linear_forward/gemm")->Arg(32);
BENCHMARK(BM_LinearForward<true>)->Name("linear_forward/reference")->Arg(32);
BENCHMARK(BM_Saliency<false>)->Name("saliency/integral")->Arg(32)->Arg(128);
BENCHMARK(BM_Saliency<true>)->Name("saliency/reference")->Arg(32)->Arg(128);
BENCHMARK(BM_ClassifierGradient)->Name("cnn_d_input_gradient");

BENCHMARK_MAIN();
