#pragma once

// Synthetic layered B-scan generator with exact ground-truth surfaces, plus
// dataset directory I/O (manifest + raw float32 images + surface tables).
// Stands in for a clinical OCT corpus at desk scale: samples are grouped
// into "volumes" that share layer intensities and speckle level.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sdlayer/tensor.hpp"

namespace sdlayer::synth {

struct SynthConfig {
  std::int64_t samples = 200;
  std::int64_t volumes = 20;  // samples are spread evenly across volumes
  std::int64_t surfaces = 4;
  std::int64_t height = 64;
  std::int64_t width = 128;
  double min_gap = 3.0;  // minimum layer thickness (px)
  double amplitude_min = 0.5;
  double amplitude_max = 4.0;
  double frequency_min = 0.5;  // sinusoid cycles across the image width
  double frequency_max = 3.0;
  double bump_probability = 0.5;  // localized Gaussian (drusen-like) deformation
  double bump_amplitude_max = 6.0;
  double intensity_min = 0.1;
  double intensity_max = 0.9;
  double speckle_strength = 0.15;  // multiplicative mean-1 noise scale
  double labeled_fraction = 0.15;
  std::uint64_t seed = 1234;

  void validate() const;
};

struct Sample {
  Tensor image;                     // H x W, standardized, float32-quantized
  std::optional<Tensor> surfaces;   // S x W fractional row positions
  std::string id;                   // "vol###_b###"; volume is the id prefix
};

using Dataset = std::vector<Sample>;

// Per-volume appearance: S+1 distinct band intensities plus a speckle level.
struct VolumeStyle {
  std::vector<double> band_intensity;
  double speckle;
};
VolumeStyle draw_volume_style(const SynthConfig& cfg, std::mt19937_64& rng);

// S smooth ordered curves: base depth + bounded sinusoids + optional bump,
// post-processed so gaps >= min_gap and all positions lie in [1, H-2].
Tensor generate_surfaces(const SynthConfig& cfg, std::mt19937_64& rng);

// Piecewise-constant bands with +-0.5 px linear blending at each boundary,
// multiplicative speckle, then per-image standardization.
Tensor render_bscan(const Tensor& surfaces, const SynthConfig& cfg, const VolumeStyle& style,
                    std::mt19937_64& rng);
Tensor render_bscan(const Tensor& surfaces, const SynthConfig& cfg, std::mt19937_64& rng);

// Full corpus, deterministic in cfg.seed; labeled flags spread evenly so the
// labeled fraction is within one sample of cfg.labeled_fraction.
Dataset generate_dataset(const SynthConfig& cfg);

void write_dataset(const Dataset& samples, const std::string& dir);
Dataset read_dataset(const std::string& dir);

std::string volume_of(const std::string& sample_id);  // id prefix before last '_'
Sample hflip(const Sample& s);

}  // namespace sdlayer::synth
