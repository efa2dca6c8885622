#pragma once

// Desk-scale network components: a residual attention U-Net with separate
// surface-logit (conv-s) and texture (conv-t) heads, a convolutional style
// VAE encoder, and a FiLM-conditioned decoder that reconstructs the image
// from binarized anatomical factors plus the style code.

#include <cstdint>
#include <memory>
#include <random>

#include "sdlayer/nn.hpp"

namespace sdlayer::networks {

using ad::Var;

struct NetworkConfig {
  std::int64_t stages = 3;
  std::int64_t base_channels = 16;
  std::int64_t surfaces = 4;
  std::int64_t height = 64;
  std::int64_t width = 128;
  std::int64_t style_dim = 8;
  bool attention_gates = true;
  bool style_uses_factors = true;  // style encoder also sees the factors
  bool texture_head = true;        // conv-t branch (off in the ablation)

  void validate() const;
  std::int64_t factor_channels() const { return surfaces + (texture_head ? 1 : 0); }
};

// Variational style code; sample == mean at inference.
struct StyleCode {
  Var mean;    // N x Z
  Var logvar;  // N x Z
  Var sample;  // N x Z
};

// Channel-wise scale/offset pairs, one per FiLM layer. Shapes are N x C with
// no spatial dims, so style can only rescale factor channels, never draw.
struct FiLMParams {
  std::vector<std::pair<Var, Var>> layers;  // (gamma, beta)
};

namespace detail {

struct ResBlock {
  Var w1, b1, n1g, n1b, a1;
  Var w2, b2, n2g, n2b;
  Var wp, bp;  // 1x1 projection; null when in == out channels
  Var a2;
  Var forward(const Var& x) const;
};

struct AttentionGate {
  Var wx, bx, wg, bg, wpsi, bpsi;
  Var forward(const Var& skip, const Var& gate) const;
};

}  // namespace detail

class AnatomyEncoder {
 public:
  struct Output {
    Var surface_logits;  // N x S x H x W
    Var texture;         // N x 1 x H x W, sigmoid range; null if head disabled
  };

  AnatomyEncoder(const NetworkConfig& cfg, nn::ParamStore& params, std::mt19937_64& rng);
  Output forward(const Var& images) const;  // images: N x 1 x H x W

 private:
  NetworkConfig cfg_;
  std::vector<detail::ResBlock> enc_;
  detail::ResBlock bottleneck_;
  std::vector<detail::ResBlock> dec_;
  std::vector<detail::AttentionGate> gates_;
  Var head_s_w_, head_s_b_;
  Var head_t_w_, head_t_b_;
};

class StyleEncoder {
 public:
  StyleEncoder(const NetworkConfig& cfg, nn::ParamStore& params, std::mt19937_64& rng);
  // factors: N x F x H x W (ignored unless cfg.style_uses_factors).
  // noise: N x Z reparameterization noise; pass nullptr. at inference.
  StyleCode forward(const Var& images, const Var& factors, const Tensor* noise) const;

 private:
  NetworkConfig cfg_;
  struct ConvIN {
    Var w, b, ng, nb;
  };
  std::vector<ConvIN> convs_;
  Var mean_w_, mean_b_, logvar_w_, logvar_b_;
};

class FiLMDecoder {
 public:
  static constexpr std::int64_t kFilmLayers = 4;

  FiLMDecoder(const NetworkConfig& cfg, nn::ParamStore& params, std::mt19937_64& rng);
  FiLMParams map_style(const Var& style_sample) const;
  Var forward(const Var& factors, const FiLMParams& film) const;  // -> N x 1 x H x W

 private:
  NetworkConfig cfg_;
  Var mlp_w_, mlp_b_;
  std::vector<std::pair<Var, Var>> film_heads_;  // dense hidden -> 2C, zero-init
  std::vector<std::pair<Var, Var>> convs_;
  Var out_w_, out_b_;
};

// The full two-branch model. Parameter creation order is fixed, so a given
// (config, seed) pair always yields the same initial weights.
class Model {
 public:
  Model(const NetworkConfig& cfg, std::uint64_t init_seed);

  const NetworkConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  AnatomyEncoder::Output anatomy_encode(const Var& images) const;
  StyleCode style_encode(const Var& images, const Var& factors, const Tensor* noise) const;
  Var decode(const Var& factors, const StyleCode& style) const;
  FiLMParams map_style(const Var& style_sample) const;

 private:
  NetworkConfig cfg_;
  nn::ParamStore params_;
  std::unique_ptr<AnatomyEncoder> anatomy_;
  std::unique_ptr<StyleEncoder> style_;
  std::unique_ptr<FiLMDecoder> decoder_;
};

}  // namespace sdlayer::networks
