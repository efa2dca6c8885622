#pragma once

// Central finite-difference gradient checker. An op under test is wrapped as
// a scalar function of one leaf tensor (random projection of the op output);
// the autodiff gradient is compared coordinate-by-coordinate against
// (f(x+h) - f(x-h)) / 2h in double precision.

#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "sdlayer/autodiff.hpp"

namespace sdlayer::test {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::int64_t worst_index = -1;
  double analytic = 0.0, numeric = 0.0;
};

// scalar_fn must build a fresh graph from the leaf each call.
inline GradCheckResult gradcheck(const std::function<ad::Var(const ad::Var&)>& scalar_fn,
                                 const Tensor& x0, double step = 1e-5) {
  ad::Var leaf = ad::leaf(x0, true);
  ad::Var out = scalar_fn(leaf);
  ad::backward(out);
  const Tensor analytic = leaf->grad_allocated ? leaf->grad : Tensor::zeros(x0.shape());

  GradCheckResult res;
  for (std::int64_t i = 0; i < x0.numel(); ++i) {
    Tensor xp = x0, xm = x0;
    xp[i] += step;
    xm[i] -= step;
    const double fp = scalar_fn(ad::leaf(xp, false))->value[0];
    const double fm = scalar_fn(ad::leaf(xm, false))->value[0];
    const double numeric = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-4});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_index = i;
      res.analytic = analytic[i];
      res.numeric = numeric;
    }
  }
  return res;
}

// Fixed random projection so the scalar reduction exercises every output.
inline std::function<ad::Var(const ad::Var&)> project(
    const std::function<ad::Var(const ad::Var&)>& op, const Shape& out_shape,
    std::mt19937_64& rng) {
  Tensor weights = Tensor::uniform(out_shape, rng, -1.0, 1.0);
  return [op, weights](const ad::Var& x) {
    return ad::sum(ad::mul(op(x), ad::constant(weights)));
  };
}

}  // namespace sdlayer::test
