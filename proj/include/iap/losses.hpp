#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "iap/tensor.hpp"

namespace iap {

// Mean softmax cross-entropy over a (N, C, 1, 1) logit batch. When `grad` is
// non-null it receives dL/dlogits.
double cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* grad = nullptr);

// Margin loss on one logit row. Untargeted: max(Z_y - max_{c!=y} Z_c, -kappa)
// with `cls` = y. Targeted: max(max_{c!=t} Z_c - Z_t, -kappa) with `cls` = t.
// `grad` (same length as z) is overwritten with dL/dz; zero on the clamp floor.
double cw_loss(std::span<const double> z, int cls, double kappa, bool targeted,
               std::span<double> grad = {});

// Sum of cw_loss over a (N, C, 1, 1) batch, all rows sharing `cls`.
double cw_loss_batch(const Tensor& logits, int cls, double kappa, bool targeted,
                     Tensor* grad = nullptr);

// ||a - b||^2 summed over every element. grad = dL/da.
double rec_loss(const Tensor& a, const Tensor& b, Tensor* grad = nullptr);

// Anisotropic total variation, summed over samples and channels.
double tv_loss(const Tensor& p, Tensor* grad = nullptr);

using Rgb = std::array<double, 3>;

enum class NpsDistance {
  kEuclidean,   // one product per pixel over ||p - a||_2
  kPerChannel,  // one product per pixel and channel over |p_c - a_c|
};

// Sum over pixels of the product over palette colors of the color distance.
// Evaluated in log space; any exact zero factor makes that pixel's term 0.
double nps_loss(const Tensor& p, std::span<const Rgb> palette,
                NpsDistance mode = NpsDistance::kEuclidean, Tensor* grad = nullptr);

// A coarse printable palette: the 27 colors of a 3-level RGB cube.
std::vector<Rgb> default_palette();

struct LossWeights {
  double alpha = 0.1;
  double beta = 10.0;
  double gamma = 1e-4;
  double delta = 0.0;
  double kappa = 0.0;
  double lambda_gp = 10.0;

  void validate() const;
};

struct LossComponents {
  double adv = 0.0;
  double gan = 0.0;
  double rec = 0.0;
  double tv = 0.0;
  double nps = 0.0;

  [[nodiscard]] std::string str() const;
};

// adv + alpha*gan + beta*rec + gamma*tv + delta*nps. Throws NumericError
// naming the offending term if any component is not finite.
double total_loss(const LossComponents& c, const LossWeights& w);

}  // namespace iap
