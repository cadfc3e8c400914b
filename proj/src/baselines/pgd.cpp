#include <algorithm>
#include <cmath>

#include "iap/baselines.hpp"
#include "iap/error.hpp"
#include "iap/losses.hpp"
#include "iap/nn/network.hpp"

namespace iap {

void PgdConfig::validate() const {
  if (norm != "linf" && norm != "l2") throw ConfigError("pgd: unknown norm '" + norm + "'");
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw ConfigError("pgd: eps must be >= 0");
  if (!(step_size > 0.0)) throw ConfigError("pgd: step size must be > 0");
  if (steps < 1) throw ConfigError("pgd: step count must be >= 1");
}

void to_json(nlohmann::json& j, const PgdConfig& c) {
  j = {{"norm", c.norm},
       {"eps", c.eps},
       {"step_size", c.step_size},
       {"steps", c.steps},
       {"random_start", c.random_start}};
}

void from_json(const nlohmann::json& j, PgdConfig& c) {
  c.norm = j.at("norm").get<std::string>();
  c.eps = j.at("eps").get<double>();
  c.step_size = j.at("step_size").get<double>();
  c.steps = j.at("steps").get<int>();
  c.random_start = j.at("random_start").get<bool>();
}

namespace {

double l2(std::span<const double> v) {
  double s = 0.0;
  for (double a : v) s += a * a;
  return std::sqrt(s);
}

// Projects delta (one sample) onto the ball, then clamps x + delta into range.
void project(std::span<const double> x, std::span<double> adv, const PgdConfig& cfg) {
  const std::size_t n = x.size();
  if (cfg.norm == "linf") {
    for (std::size_t i = 0; i < n; ++i) {
      const double d = std::clamp(adv[i] - x[i], -cfg.eps, cfg.eps);
      adv[i] = std::clamp(x[i] + d, -1.0, 1.0);
    }
    return;
  }
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (adv[i] - x[i]) * (adv[i] - x[i]);
  const double norm = std::sqrt(s);
  // Shrink slightly past the radius so rounding can never land outside it.
  const double scale = norm > cfg.eps ? cfg.eps / norm * (1.0 - 1e-12) : 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    adv[i] = std::clamp(x[i] + (adv[i] - x[i]) * scale, -1.0, 1.0);
  }
}

}  // namespace

Tensor pgd_batch(const Classifier& f, const Tensor& x, std::span<const int> labels,
                 const PgdConfig& cfg, Rng& rng, std::vector<double>* loss_trace) {
  cfg.validate();
  if (cfg.eps == 0.0) return x;
  Tensor adv = x;
  if (cfg.random_start) {
    for (int n = 0; n < x.n(); ++n) {
      auto a = adv.sample(n);
      if (cfg.norm == "linf") {
        for (double& v : a) v += uniform(rng, -cfg.eps, cfg.eps);
      } else {
        std::vector<double> d(a.size());
        for (double& v : d) v = normal(rng);
        const double r = cfg.eps * uniform(rng, 0.0, 1.0) / std::max(l2(d), 1e-12);
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += d[i] * r;
      }
      project(x.sample(n), a, cfg);
    }
  }
  for (int step = 0; step < cfg.steps; ++step) {
    nn::Trace trace;
    const Tensor z = f.network().forward(adv, &trace);
    Tensor gz;
    cross_entropy(z, labels, &gz);
    const Tensor g = f.network().backward(trace, gz, nullptr, 0);
    for (int n = 0; n < x.n(); ++n) {
      auto a = adv.sample(n);
      const auto gn = g.sample(n);
      if (cfg.norm == "linf") {
        for (std::size_t i = 0; i < a.size(); ++i) {
          a[i] += cfg.step_size * (gn[i] > 0.0 ? 1.0 : (gn[i] < 0.0 ? -1.0 : 0.0));
        }
      } else {
        const double gnorm = l2(gn);
        if (gnorm > 0.0) {
          for (std::size_t i = 0; i < a.size(); ++i) a[i] += cfg.step_size * gn[i] / gnorm;
        }
      }
      project(x.sample(n), a, cfg);
    }
    if (loss_trace != nullptr) loss_trace->push_back(cross_entropy(f.logits_batch(adv), labels));
  }
  return adv;
}

ImageTensor pgd_attack(const Classifier& f, const ImageTensor& x, int y, const PgdConfig& cfg,
                       std::uint64_t seed, std::vector<double>* loss_trace) {
  if (y < 0 || y >= f.num_classes()) throw BoundsError("pgd: label out of range");
  Rng rng(seed);
  const int labels[] = {y};
  const Tensor adv = pgd_batch(f, x.as_batch(), labels, cfg, rng, loss_trace);
  return ImageTensor::clamped(adv);
}

double perturbation_norm(const ImageTensor& x, const ImageTensor& x_adv, const std::string& norm) {
  if (x.size() != x_adv.size()) throw ShapeError("perturbation_norm: shape mismatch");
  const auto a = x.data();
  const auto b = x_adv.data();
  double out = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = b[i] - a[i];
    if (norm == "linf") {
      out = std::max(out, std::abs(d));
    } else if (norm == "l2") {
      out += d * d;
    } else {
      throw ConfigError("unknown norm '" + norm + "'");
    }
  }
  return norm == "l2" ? std::sqrt(out) : out;
}

}  // namespace iap
