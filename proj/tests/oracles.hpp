#pragma once

// Test-only oracles, independent of the library's differentiable pipeline.

#include <random>

#include "sdlayer/tensor.hpp"

namespace sdlayer::test {

// Brute-force per-pixel layer classification for integer ordered surfaces:
// pixel (r, i) belongs to layer s iff y[s][i] <= r < y[s+1][i]; the last
// layer extends to the bottom of the image.
inline Tensor brute_force_layers(const Tensor& surfaces, std::int64_t height) {
  const std::int64_t S = surfaces.dim(0), W = surfaces.dim(1);
  Tensor maps({S, height, W});
  for (std::int64_t i = 0; i < W; ++i) {
    for (std::int64_t r = 0; r < height; ++r) {
      for (std::int64_t s = 0; s < S; ++s) {
        const double lo = surfaces(s, i);
        const bool below_lo = static_cast<double>(r) >= lo;
        const bool above_hi = (s + 1 < S) ? static_cast<double>(r) < surfaces(s + 1, i) : true;
        if (below_lo && above_hi) maps(s, r, i) = 1.0;
      }
    }
  }
  return maps;
}

// Random non-decreasing integer surfaces in [0, H-1] (ties allowed).
inline Tensor random_hard_surfaces(std::int64_t S, std::int64_t H, std::int64_t W,
                                   std::mt19937_64& rng) {
  Tensor y({S, W});
  std::uniform_int_distribution<std::int64_t> row(0, H - 1);
  for (std::int64_t i = 0; i < W; ++i) {
    std::vector<std::int64_t> rows(static_cast<std::size_t>(S));
    for (auto& r : rows) r = row(rng);
    std::sort(rows.begin(), rows.end());
    for (std::int64_t s = 0; s < S; ++s) y(s, i) = static_cast<double>(rows[static_cast<std::size_t>(s)]);
  }
  return y;
}

// One-hot probability map with all mass at the given integer rows.
inline Tensor one_hot_pmf(const Tensor& surfaces, std::int64_t height) {
  const std::int64_t S = surfaces.dim(0), W = surfaces.dim(1);
  Tensor p({S, height, W});
  for (std::int64_t s = 0; s < S; ++s)
    for (std::int64_t i = 0; i < W; ++i)
      p(s, static_cast<std::int64_t>(surfaces(s, i)), i) = 1.0;
  return p;
}

}  // namespace sdlayer::test
