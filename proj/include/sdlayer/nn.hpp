#pragma once

// Network-level autodiff ops (NCHW) and the named-parameter store shared by
// the optimizer and checkpoint code. Convolutions run as per-sample
// im2col + GEMM; the batch loop is OpenMP-parallel with per-sample weight
// gradient partials reduced serially so results do not depend on threading.

#include <string>
#include <unordered_map>
#include <vector>

#include "sdlayer/autodiff.hpp"

namespace sdlayer::nn {

using ad::Var;

// x: N x C x H x W, w: CO x CI x kh x kw, b: CO.
Var conv2d(const Var& x, const Var& w, const Var& b, std::int64_t stride = 1, std::int64_t pad = -1);
Var maxpool2x2(const Var& x);
Var upsample_nearest2x(const Var& x);
// Per-sample, per-channel normalization with learnable affine (gamma, beta: C).
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// PReLU with one learnable slope per channel (alpha: C).
Var prelu(const Var& x, const Var& alpha);
// Channel-wise feature modulation: y = x * (1 + gamma[n,c]) + beta[n,c].
Var film(const Var& x, const Var& gamma, const Var& beta);
// Spatial gate: y[n,c,h,w] = x[n,c,h,w] * a[n,0,h,w].
Var mul_gate(const Var& x, const Var& a);
// x: N x I, w: O x I, b: O -> N x O.
Var linear(const Var& x, const Var& w, const Var& b);
Var global_avg_pool(const Var& x);  // N x C x H x W -> N x C

struct ParamStore {
  std::vector<std::string> names;
  std::vector<Var> vars;
  std::unordered_map<std::string, std::size_t> index;

  Var add(const std::string& name, Tensor init);
  const Var& at(const std::string& name) const;
  std::int64_t total_size() const;
  void zero_grads();
};

// Kaiming-normal fan-in init; `gain` adapts to the activation slope.
Tensor kaiming_conv(std::int64_t co, std::int64_t ci, std::int64_t kh, std::int64_t kw,
                    std::mt19937_64& rng, double gain = std::numbers::sqrt2);
Tensor kaiming_linear(std::int64_t out, std::int64_t in, std::mt19937_64& rng,
                      double gain = std::numbers::sqrt2);

}  // namespace sdlayer::nn
