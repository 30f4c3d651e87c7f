#pragma once

#include "types.hpp"

#include <cmath>
#include <cstdint>
#include <random>

namespace offgrid {

// Stateless 64-bit mixer (splitmix64 finalizer). Used to derive independent
// seeds from (master seed, stream tag, index) so that parallel Monte Carlo
// trials are reproducible regardless of scheduling.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index = 0) {
  return mix64(mix64(master ^ mix64(stream)) + index);
}

// Deterministic generator: mt19937_64 plus a hand-rolled Box-Muller transform,
// so draws do not depend on the standard library's distribution
// implementations (those are not pinned by the standard).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u = 1.0 - uniform();  // (0, 1], keeps log finite
    const double v = uniform();
    const double r = std::sqrt(-2.0 * std::log(u));
    spare_ = r * std::sin(2.0 * pi * v);
    have_spare_ = true;
    return r * std::cos(2.0 * pi * v);
  }

  // circularly symmetric complex Gaussian, E|z|^2 = variance
  cplx cgaussian(double variance = 1.0) {
    const double s = std::sqrt(variance / 2.0);
    const double re = gaussian();
    const double im = gaussian();
    return {s * re, s * im};
  }

  CVec cgaussian_vec(Eigen::Index n, double variance = 1.0) {
    CVec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = cgaussian(variance);
    return v;
  }

  CMat cgaussian_mat(Eigen::Index rows, Eigen::Index cols, double variance = 1.0) {
    CMat m(rows, cols);
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = cgaussian(variance);
    return m;
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace offgrid
