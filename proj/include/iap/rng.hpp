#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace iap {

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x);

// Expands one global seed into independent per-purpose streams. A stream is
// addressed by a label and a counter, so adding a new consumer never shifts
// the draws of an existing one.
class SeedSplitter {
 public:
  explicit SeedSplitter(std::uint64_t seed) : seed_(seed) {}

  [[nodiscard]] std::uint64_t seed() const { return seed_; }
  [[nodiscard]] std::uint64_t stream(std::string_view label, std::uint64_t index = 0) const;
  [[nodiscard]] Rng rng(std::string_view label, std::uint64_t index = 0) const {
    return Rng(stream(label, index));
  }
  [[nodiscard]] SeedSplitter child(std::string_view label, std::uint64_t index = 0) const {
    return SeedSplitter(stream(label, index));
  }

 private:
  std::uint64_t seed_;
};

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

}  // namespace iap
