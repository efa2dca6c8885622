#pragma once

// Loss terms: supervised KL + MSE on surface positions, the four
// self-supervised anatomical priors, the style VAE KL, the masked
// reconstruction error, and their weighted composition. Reference curves
// enter as plain tensors; predictions as autodiff variables.

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sdlayer/topology.hpp"

namespace sdlayer::losses {

using ad::Var;

// Anatomical prior constants, normally derived from training annotations.
struct PriorConstants {
  std::vector<double> c;  // per-surface max adjacent-column jump (px)
  std::vector<double> o;  // per-surface max slope over span delta (px/column)
  std::int64_t delta = 10;
  double t = 1.0;      // max allowed PMF standard deviation (px)
  double sigma = 0.5;  // target Gaussian std for supervision (px)

  void validate(std::int64_t width) const;
  void save(const std::string& path) const;
  static PriorConstants load(const std::string& path);
};

struct LossWeights {
  // Paper defaults: lambda1=lambda2=50, lambda3..5=lambda8=1, lambda6=lambda7=0.1.
  double lambda1 = 50.0;  // L_KL
  double lambda2 = 50.0;  // L_mse
  double lambda3 = 1.0;   // L_to
  double lambda4 = 1.0;   // L_lc
  double lambda5 = 1.0;   // L_ls
  double lambda6 = 0.1;   // L_std
  double lambda7 = 0.1;   // L_zKL
  double lambda8 = 1.0;   // L_rec

  void validate() const;  // finite, >= 0, not all zero
};

// Raw (unweighted) terms of one step; null members count as zero.
struct LossTerms {
  Var kl, mse, to, lc, ls, std_dev, z_kl, rec;
};

struct LossBreakdown {
  double kl = 0, mse = 0, to = 0, lc = 0, ls = 0, std_dev = 0, z_kl = 0, rec = 0;
  double total = 0;

  static const std::vector<std::string>& field_names();
  std::vector<double> field_values() const;
};

// KL(P || T) with T the per-column discretized Gaussian N(mu, sigma),
// renormalized and floored at 1e-8; mean over all S*W columns.
Var kl_supervised(const topo::SurfaceProbabilityMap& pmap, const Tensor& mu, double sigma);
// The discretized target itself (exposed for tests and inspection).
Tensor gaussian_target(const Tensor& mu, std::int64_t height, double sigma);

Var mse_supervised(const topo::SurfaceCurveSet& curves, const Tensor& mu);
Var loss_topo(const topo::SurfaceCurveSet& curves);
Var loss_continuity(const topo::SurfaceCurveSet& curves, const PriorConstants& consts);
Var loss_slope(const topo::SurfaceCurveSet& curves, const PriorConstants& consts);
Var loss_std(const topo::SurfaceProbabilityMap& pmap, const PriorConstants& consts);
Var loss_vae_kl(const Var& mean, const Var& logvar);
// MAE over pixels between predicted ILM and BM rows. Mask bounds come from
// `positions` (values only; no gradient flows through the mask).
Var loss_reconstruction_masked(const Tensor& x, const Var& xhat, const Tensor& positions);
Tensor retina_mask(const Tensor& positions, std::int64_t height);

// total = l7*z_kl + l8*rec + (l1*kl + l2*mse + l3*to + l4*lc + l5*ls + l6*std)/2.
// Returns the scalar graph node; fills `out` with the raw term values.
Var total_loss(const LossTerms& terms, const LossWeights& w, LossBreakdown& out);

// c_s = max adjacent-column jump, o_s = max delta-span slope over all
// annotations; t and sigma are taken from the passed defaults.
PriorConstants derive_constants(const std::vector<Tensor>& annotations, std::int64_t delta,
                                double t, double sigma);

}  // namespace sdlayer::losses
