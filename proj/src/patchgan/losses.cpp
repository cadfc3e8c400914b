#include "iap/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "iap/error.hpp"

namespace iap {

double cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* grad) {
  const int n = logits.n();
  const int c = static_cast<int>(logits.shape().sample_size());
  if (static_cast<int>(labels.size()) != n) throw ShapeError("cross_entropy: label count");
  if (grad != nullptr) *grad = Tensor(logits.shape());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto z = logits.sample(i);
    const int y = labels[i];
    if (y < 0 || y >= c) throw BoundsError("cross_entropy: label out of range");
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    const double lse = m + std::log(s);
    total += lse - z[y];
    if (grad != nullptr) {
      auto g = grad->sample(i);
      for (int k = 0; k < c; ++k) g[k] = std::exp(z[k] - lse) / n;
      g[y] -= 1.0 / n;
    }
  }
  return total / n;
}

double cw_loss(std::span<const double> z, int cls, double kappa, bool targeted,
               std::span<double> grad) {
  const int c = static_cast<int>(z.size());
  if (cls < 0 || cls >= c) {
    throw BoundsError("attack loss: class " + std::to_string(cls) + " outside [0, " +
                      std::to_string(c) + ")");
  }
  if (c < 2) throw ShapeError("attack loss needs at least 2 logits");
  int other = cls == 0 ? 1 : 0;
  for (int k = 0; k < c; ++k) {
    if (k != cls && z[k] > z[other]) other = k;
  }
  const double margin = targeted ? z[other] - z[cls] : z[cls] - z[other];
  if (!grad.empty()) {
    std::fill(grad.begin(), grad.end(), 0.0);
    if (margin >= -kappa) {
      grad[cls] = targeted ? -1.0 : 1.0;
      grad[other] = targeted ? 1.0 : -1.0;
    }
  }
  return std::max(margin, -kappa);
}

double cw_loss_batch(const Tensor& logits, int cls, double kappa, bool targeted, Tensor* grad) {
  if (grad != nullptr) *grad = Tensor(logits.shape());
  double total = 0.0;
  for (int i = 0; i < logits.n(); ++i) {
    total += cw_loss(logits.sample(i), cls, kappa, targeted,
                     grad != nullptr ? grad->sample(i) : std::span<double>{});
  }
  return total;
}

double rec_loss(const Tensor& a, const Tensor& b, Tensor* grad) {
  require_same_shape(a, b, "rec_loss");
  if (grad != nullptr) *grad = Tensor(a.shape());
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
    if (grad != nullptr) (*grad)[i] = 2.0 * d;
  }
  return s;
}

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

double tv_loss(const Tensor& p, Tensor* grad) {
  if (grad != nullptr) *grad = Tensor(p.shape());
  const int h = p.h();
  const int w = p.w();
  if (h < 2 && w < 2) {
    spdlog::warn("tv_loss on a degenerate {}x{} patch returns 0", h, w);
    return 0.0;
  }
  double s = 0.0;
  for (int n = 0; n < p.n(); ++n) {
    for (int c = 0; c < p.c(); ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double v = p.at(n, c, y, x);
          if (y + 1 < h) {
            const double d = p.at(n, c, y + 1, x) - v;
            s += std::abs(d);
            if (grad != nullptr) {
              grad->at(n, c, y + 1, x) += sign(d);
              grad->at(n, c, y, x) -= sign(d);
            }
          }
          if (x + 1 < w) {
            const double d = p.at(n, c, y, x + 1) - v;
            s += std::abs(d);
            if (grad != nullptr) {
              grad->at(n, c, y, x + 1) += sign(d);
              grad->at(n, c, y, x) -= sign(d);
            }
          }
        }
      }
    }
  }
  return s;
}

double nps_loss(const Tensor& p, std::span<const Rgb> palette, NpsDistance mode, Tensor* grad) {
  if (palette.empty()) throw ConfigError("nps_loss: empty palette");
  if (p.c() != 3) throw ShapeError("nps_loss expects RGB patches");
  if (grad != nullptr) *grad = Tensor(p.shape());
  const std::size_t plane = static_cast<std::size_t>(p.h()) * p.w();
  double total = 0.0;
  for (int n = 0; n < p.n(); ++n) {
    const auto s = p.sample(n);
    for (std::size_t i = 0; i < plane; ++i) {
      const Rgb v{s[i], s[plane + i], s[2 * plane + i]};
      if (mode == NpsDistance::kEuclidean) {
        double log_prod = 0.0;
        bool zero = false;
        for (const Rgb& a : palette) {
          const double d2 = (v[0] - a[0]) * (v[0] - a[0]) + (v[1] - a[1]) * (v[1] - a[1]) +
                            (v[2] - a[2]) * (v[2] - a[2]);
          if (d2 == 0.0) {
            zero = true;
            break;
          }
          log_prod += 0.5 * std::log(d2);
        }
        if (zero) continue;
        const double prod = std::exp(log_prod);
        total += prod;
        if (grad != nullptr) {
          auto g = grad->sample(n);
          for (const Rgb& a : palette) {
            const double d2 = (v[0] - a[0]) * (v[0] - a[0]) + (v[1] - a[1]) * (v[1] - a[1]) +
                              (v[2] - a[2]) * (v[2] - a[2]);
            for (int c = 0; c < 3; ++c) g[c * plane + i] += prod * (v[c] - a[c]) / d2;
          }
        }
      } else {
        for (int c = 0; c < 3; ++c) {
          double log_prod = 0.0;
          bool zero = false;
          for (const Rgb& a : palette) {
            const double d = std::abs(v[c] - a[c]);
            if (d == 0.0) {
              zero = true;
              break;
            }
            log_prod += std::log(d);
          }
          if (zero) continue;
          const double prod = std::exp(log_prod);
          total += prod;
          if (grad != nullptr) {
            auto g = grad->sample(n);
            for (const Rgb& a : palette) g[c * plane + i] += prod / (v[c] - a[c]);
          }
        }
      }
    }
  }
  return total;
}

std::vector<Rgb> default_palette() {
  std::vector<Rgb> out;
  for (double r : {-1.0, 0.0, 1.0}) {
    for (double g : {-1.0, 0.0, 1.0}) {
      for (double b : {-1.0, 0.0, 1.0}) out.push_back({r, g, b});
    }
  }
  return out;
}

void LossWeights::validate() const {
  const std::pair<const char*, double> all[] = {{"alpha", alpha}, {"beta", beta},
                                                {"gamma", gamma}, {"delta", delta},
                                                {"kappa", kappa}, {"lambda_gp", lambda_gp}};
  for (const auto& [name, v] : all) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ConfigError(fmt::format("loss weight {} must be finite and >= 0, got {}", name, v));
    }
  }
}

std::string LossComponents::str() const {
  return fmt::format("adv={:.6g} gan={:.6g} rec={:.6g} tv={:.6g} nps={:.6g}", adv, gan, rec, tv,
                     nps);
}

double total_loss(const LossComponents& c, const LossWeights& w) {
  const std::pair<const char*, double> all[] = {
      {"adv", c.adv}, {"gan", c.gan}, {"rec", c.rec}, {"tv", c.tv}, {"nps", c.nps}};
  for (const auto& [name, v] : all) {
    if (!std::isfinite(v)) {
      throw NumericError(fmt::format("non-finite {} loss component ({})", name, c.str()));
    }
  }
  return c.adv + w.alpha * c.gan + w.beta * c.rec + w.gamma * c.tv + w.delta * c.nps;
}

}  // namespace iap
