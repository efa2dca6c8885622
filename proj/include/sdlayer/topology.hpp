#pragma once

// Differentiable topological engine: converts per-column surface position
// logits into ordered surface curves and mutually exclusive layer maps.
// Tensors are S x H x W (surfaces x rows x columns) with row 0 at the top;
// a leading batch dimension is accepted everywhere.

#include "sdlayer/autodiff.hpp"

namespace sdlayer::topo {

using ad::Var;

// Per-surface, per-column probability mass function over row positions.
struct SurfaceProbabilityMap {
  Var values;  // (... x) S x H x W
};

// Fractional row position per surface per column.
struct SurfaceCurveSet {
  Var positions;  // (... x) S x W
};

// Column-wise top-down cumulative sums of a SurfaceProbabilityMap.
struct CumulativeMaps {
  Var values;  // (... x) S x H x W
};

// Mutually exclusive spatial layer maps plus one texture channel.
struct AnatomyFactors {
  Var layer_maps;  // (... x) S x H x W
  Var texture;     // (... x) H x W (may be null when the texture head is off)
};

// Invariant checks; throw std::invalid_argument with a diagnostic on failure.
void validate_probability_map(const Tensor& values, double tol = 1e-5);
void validate_curve_ordering(const Tensor& positions, double height);
void validate_cumulative_maps(const Tensor& values, double tol = 1e-5);
void validate_layer_exclusivity(const Tensor& layer_maps, double tol = 1e-5);

SurfaceProbabilityMap columnwise_softmax(const Var& logits);
SurfaceCurveSet expected_positions(const SurfaceProbabilityMap& pmap);
// Iterative ramp update y^s = y^{s-1} + |y^s - y^{s-1}|_+ down the surfaces.
SurfaceCurveSet rectify_surfaces(const SurfaceCurveSet& curves);
CumulativeMaps cumulative_maps(const SurfaceProbabilityMap& pmap);
// M^1 = C^1, M^s = |C^s + M^{s-1} - 1|_+ ; output decreasing in s.
CumulativeMaps enforce_map_ordering(const CumulativeMaps& cmaps);
// layer s = M^s - M^{s+1}; bottom layer keeps M^S. Input must be monotone in s.
Var decompose_layers(const CumulativeMaps& ordered);
// Round-to-nearest forward (ties up), identity backward.
AnatomyFactors binarize_factors(const AnatomyFactors& factors);

// Ordering violations summed over surfaces/columns: sum_s sum_i |y^{s-1} - y^s|_+.
std::int64_t count_ordering_violations(const Tensor& positions, double tol = 0.0);

}  // namespace sdlayer::topo
