#pragma once

// Portable binary PGM/PPM writers for factor grids and surface overlays.

#include <string>

#include "sdlayer/tensor.hpp"

namespace sdlayer::img {

// gray: H x W with values in [0, 1].
void write_pgm(const std::string& path, const Tensor& gray);
// rgb: 3 x H x W with values in [0, 1].
void write_ppm(const std::string& path, const Tensor& rgb);

// Min-max scales an arbitrary image into [0, 1] (flat images map to 0.5).
Tensor normalize_for_display(const Tensor& image);

// Grayscale base with reference surfaces in green and predictions in red.
// Either curve set may be null.
Tensor overlay_surfaces(const Tensor& image, const Tensor* predicted, const Tensor* reference);

}  // namespace sdlayer::img
