#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "kgscat/grid.hpp"

namespace kgscat {

// Stable seed derivation: mixes a base seed with a label via FNV-1a so each
// named check draws an independent, reproducible stream.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h ^ (base + 0x9e3779b97f4a7c15ull + (base << 6) + (base >> 2));
}

// Standard complex Gaussian vector via Box-Muller on mt19937_64 draws
// (fixed algorithm, not the implementation-defined std::normal_distribution).
inline Vec gaussian_vector(int n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<Real> unif(0.0, 1.0);
  Vec v(n);
  for (int i = 0; i < n; ++i) {
    const Real u1 = std::max(unif(gen), 1e-300);
    const Real u2 = unif(gen);
    const Real r = std::sqrt(-2.0 * std::log(u1));
    v[i] = Complex(r * std::cos(2 * kPi * u2), r * std::sin(2 * kPi * u2)) /
           std::sqrt(2.0);
  }
  return v;
}

// Gaussian field smoothed by <D>^{-2}: mildly regular test data that keeps
// quadrature and Sobolev-norm checks meaningful.
inline GridFunction smooth_random_function(const SpatialGrid& grid,
                                           std::uint64_t seed) {
  Vec raw = gaussian_vector(grid.n(), seed);
  Vec hat = grid.dft() * raw;
  for (int j = 0; j < grid.n(); ++j) {
    const Real k = grid.wavenumbers()[j];
    hat[j] /= (1.0 + k * k);
  }
  return GridFunction(grid, grid.idft() * hat);
}

}  // namespace kgscat
