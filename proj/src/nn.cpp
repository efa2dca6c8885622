#define EIGEN_DONT_PARALLELIZE
#include "sdlayer/nn.hpp"

#include <Eigen/Core>
#include <cmath>
#include <memory>

namespace sdlayer::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

struct ConvDims {
  std::int64_t N, C, H, W;
  std::int64_t CO, KH, KW;
  std::int64_t stride, pad;
  std::int64_t HO, WO;
  std::int64_t K() const { return C * KH * KW; }
  std::int64_t P() const { return HO * WO; }
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, std::int64_t stride, std::int64_t pad) {
  require(x.rank() == 4, "conv2d expects NCHW input, got " + x.shape_str());
  require(w.rank() == 4, "conv2d expects COxCIxKHxKW weights, got " + w.shape_str());
  ConvDims d;
  d.N = x.dim(0);
  d.C = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.CO = w.dim(0);
  d.KH = w.dim(2);
  d.KW = w.dim(3);
  require(w.dim(1) == d.C, "conv2d: input channels " + std::to_string(d.C) +
                               " do not match weight channels " + std::to_string(w.dim(1)));
  d.stride = stride;
  d.pad = (pad < 0) ? (d.KH - 1) / 2 : pad;
  d.HO = (d.H + 2 * d.pad - d.KH) / d.stride + 1;
  d.WO = (d.W + 2 * d.pad - d.KW) / d.stride + 1;
  require(d.HO > 0 && d.WO > 0, "conv2d: kernel larger than padded input");
  return d;
}

void im2col(const double* x, const ConvDims& d, double* col) {
  // col is K x P row-major; x points at one sample (C*H*W).
  for (std::int64_t c = 0; c < d.C; ++c) {
    for (std::int64_t ky = 0; ky < d.KH; ++ky) {
      for (std::int64_t kx = 0; kx < d.KW; ++kx) {
        double* row = col + ((c * d.KH + ky) * d.KW + kx) * d.P();
        for (std::int64_t oy = 0; oy < d.HO; ++oy) {
          const std::int64_t iy = oy * d.stride + ky - d.pad;
          double* out = row + oy * d.WO;
          if (iy < 0 || iy >= d.H) {
            for (std::int64_t ox = 0; ox < d.WO; ++ox) out[ox] = 0.0;
            continue;
          }
          const double* src = x + (c * d.H + iy) * d.W;
          for (std::int64_t ox = 0; ox < d.WO; ++ox) {
            const std::int64_t ix = ox * d.stride + kx - d.pad;
            out[ox] = (ix >= 0 && ix < d.W) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvDims& d, double* gx) {
  // Scatter-add of a K x P row-major gradient back onto one input sample.
  for (std::int64_t c = 0; c < d.C; ++c) {
    for (std::int64_t ky = 0; ky < d.KH; ++ky) {
      for (std::int64_t kx = 0; kx < d.KW; ++kx) {
        const double* row = col + ((c * d.KH + ky) * d.KW + kx) * d.P();
        for (std::int64_t oy = 0; oy < d.HO; ++oy) {
          const std::int64_t iy = oy * d.stride + ky - d.pad;
          if (iy < 0 || iy >= d.H) continue;
          double* dst = gx + (c * d.H + iy) * d.W;
          const double* src = row + oy * d.WO;
          for (std::int64_t ox = 0; ox < d.WO; ++ox) {
            const std::int64_t ix = ox * d.stride + kx - d.pad;
            if (ix >= 0 && ix < d.W) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, std::int64_t stride, std::int64_t pad) {
  const ConvDims d = conv_dims(x->value, w->value, stride, pad);
  require(b->value.rank() == 1 && b->value.dim(0) == d.CO, "conv2d: bias must have CO entries");

  Tensor out({d.N, d.CO, d.HO, d.WO});
  {
    ConstRowMap wmap(w->value.data(), d.CO, d.K());
#pragma omp parallel for schedule(static)
    for (std::int64_t n = 0; n < d.N; ++n) {
      RowMat col(d.K(), d.P());
      im2col(x->value.data() + n * d.C * d.H * d.W, d, col.data());
      RowMap ymap(out.data() + n * d.CO * d.P(), d.CO, d.P());
      ymap.noalias() = wmap * col;
      for (std::int64_t co = 0; co < d.CO; ++co) ymap.row(co).array() += b->value[co];
    }
  }

  return ad::make_node(std::move(out), {x, w, b}, [d](ad::Node& node) {
    ad::Node* nx = node.inputs[0].get();
    ad::Node* nw = node.inputs[1].get();
    ad::Node* nb = node.inputs[2].get();
    const bool need_x = nx->requires_grad;
    const bool need_w = nw->requires_grad;
    const bool need_b = nb->requires_grad;

    ConstRowMap wmap(nw->value.data(), d.CO, d.K());
    std::vector<double> wpart(need_w ? static_cast<std::size_t>(d.N * d.CO * d.K()) : 0);
    std::vector<double> bpart(need_b ? static_cast<std::size_t>(d.N * d.CO) : 0);

    double* gx = nullptr;
    if (need_x) gx = nx->ensure_grad().data();

#pragma omp parallel for schedule(static)
    for (std::int64_t n = 0; n < d.N; ++n) {
      ConstRowMap gy(node.grad.data() + n * d.CO * d.P(), d.CO, d.P());
      RowMat col;
      if (need_w) {
        col.resize(d.K(), d.P());
        im2col(nx->value.data() + n * d.C * d.H * d.W, d, col.data());
        RowMap wp(wpart.data() + n * d.CO * d.K(), d.CO, d.K());
        wp.noalias() = gy * col.transpose();
      }
      if (need_b) {
        for (std::int64_t co = 0; co < d.CO; ++co)
          bpart[static_cast<std::size_t>(n * d.CO + co)] = gy.row(co).sum();
      }
      if (need_x) {
        RowMat colgrad(d.K(), d.P());
        colgrad.noalias() = wmap.transpose() * gy;
        col2im_add(colgrad.data(), d, gx + n * d.C * d.H * d.W);
      }
    }

    // Serial reduction over samples keeps the sum order fixed.
    if (need_w) {
      double* gw = nw->ensure_grad().data();
      const std::int64_t sz = d.CO * d.K();
      for (std::int64_t n = 0; n < d.N; ++n) {
        const double* p = wpart.data() + n * sz;
        for (std::int64_t i = 0; i < sz; ++i) gw[i] += p[i];
      }
    }
    if (need_b) {
      double* gb = nb->ensure_grad().data();
      for (std::int64_t n = 0; n < d.N; ++n)
        for (std::int64_t co = 0; co < d.CO; ++co) gb[co] += bpart[static_cast<std::size_t>(n * d.CO + co)];
    }
  });
}

Var maxpool2x2(const Var& x) {
  const Tensor& v = x->value;
  require(v.rank() == 4, "maxpool2x2 expects NCHW input");
  const std::int64_t N = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
  require(H % 2 == 0 && W % 2 == 0, "maxpool2x2 requires even spatial dims, got " + v.shape_str());
  const std::int64_t HO = H / 2, WO = W / 2;
  Tensor out({N, C, HO, WO});
  auto argmax = std::make_shared<std::vector<std::int32_t>>(static_cast<std::size_t>(out.numel()));
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const double* xs = v.data() + nc * H * W;
    double* ys = out.data() + nc * HO * WO;
    std::int32_t* as = argmax->data() + nc * HO * WO;
    for (std::int64_t oy = 0; oy < HO; ++oy) {
      for (std::int64_t ox = 0; ox < WO; ++ox) {
        const std::int64_t base = (2 * oy) * W + 2 * ox;
        double best = xs[base];
        std::int32_t bi = 0;
        const std::int64_t cand[3] = {base + 1, base + W, base + W + 1};
        for (std::int32_t k = 0; k < 3; ++k) {
          if (xs[cand[k]] > best) {
            best = xs[cand[k]];
            bi = k + 1;
          }
        }
        ys[oy * WO + ox] = best;
        as[oy * WO + ox] = bi;
      }
    }
  }
  return ad::make_node(std::move(out), {x}, [N, C, H, W, HO, WO, argmax](ad::Node& node) {
    ad::Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    double* gx = in->ensure_grad().data();
    const double* gy = node.grad.data();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      double* gxs = gx + nc * H * W;
      const double* gys = gy + nc * HO * WO;
      const std::int32_t* as = argmax->data() + nc * HO * WO;
      for (std::int64_t oy = 0; oy < HO; ++oy) {
        for (std::int64_t ox = 0; ox < WO; ++ox) {
          const std::int32_t k = as[oy * WO + ox];
          const std::int64_t base = (2 * oy) * W + 2 * ox;
          const std::int64_t off = (k == 0) ? base : (k == 1 ? base + 1 : (k == 2 ? base + W : base + W + 1));
          gxs[off] += gys[oy * WO + ox];
        }
      }
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  const Tensor& v = x->value;
  require(v.rank() == 4, "upsample expects NCHW input");
  const std::int64_t N = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
  Tensor out({N, C, 2 * H, 2 * W});
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const double* xs = v.data() + nc * H * W;
    double* ys = out.data() + nc * 4 * H * W;
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t xcol = 0; xcol < W; ++xcol) {
        const double val = xs[y * W + xcol];
        double* o = ys + (2 * y) * (2 * W) + 2 * xcol;
        o[0] = val;
        o[1] = val;
        o[2 * W] = val;
        o[2 * W + 1] = val;
      }
    }
  }
  return ad::make_node(std::move(out), {x}, [N, C, H, W](ad::Node& node) {
    ad::Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    double* gx = in->ensure_grad().data();
    const double* gy = node.grad.data();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      double* gxs = gx + nc * H * W;
      const double* gys = gy + nc * 4 * H * W;
      for (std::int64_t y = 0; y < H; ++y) {
        for (std::int64_t xcol = 0; xcol < W; ++xcol) {
          const double* o = gys + (2 * y) * (2 * W) + 2 * xcol;
          gxs[y * W + xcol] += o[0] + o[1] + o[2 * W] + o[2 * W + 1];
        }
      }
    }
  });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& v = x->value;
  require(v.rank() == 4, "instance_norm expects NCHW input");
  const std::int64_t N = v.dim(0), C = v.dim(1), HW = v.dim(2) * v.dim(3);
  require(gamma->value.numel() == C && beta->value.numel() == C,
          "instance_norm affine params must have C entries");
  Tensor out(v.shape());
  auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(2 * N * C));  // mean, invstd
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const double* xs = v.data() + nc * HW;
    double m = 0.0;
    for (std::int64_t i = 0; i < HW; ++i) m += xs[i];
    m /= static_cast<double>(HW);
    double var = 0.0;
    for (std::int64_t i = 0; i < HW; ++i) {
      const double dlt = xs[i] - m;
      var += dlt * dlt;
    }
    var /= static_cast<double>(HW);
    const double invstd = 1.0 / std::sqrt(var + eps);
    (*stats)[static_cast<std::size_t>(2 * nc)] = m;
    (*stats)[static_cast<std::size_t>(2 * nc + 1)] = invstd;
    const double g = gamma->value[nc % C];
    const double bta = beta->value[nc % C];
    double* ys = out.data() + nc * HW;
    for (std::int64_t i = 0; i < HW; ++i) ys[i] = (xs[i] - m) * invstd * g + bta;
  }
  return ad::make_node(std::move(out), {x, gamma, beta}, [N, C, HW, stats](ad::Node& node) {
    ad::Node* nx = node.inputs[0].get();
    ad::Node* ng = node.inputs[1].get();
    ad::Node* nb = node.inputs[2].get();
    const double* gy = node.grad.data();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const double m = (*stats)[static_cast<std::size_t>(2 * nc)];
      const double invstd = (*stats)[static_cast<std::size_t>(2 * nc + 1)];
      const double g = ng->value[nc % C];
      const double* xs = nx->value.data() + nc * HW;
      const double* gys = gy + nc * HW;
      double sum_gy = 0.0, sum_gy_xhat = 0.0;
      for (std::int64_t i = 0; i < HW; ++i) {
        const double xhat = (xs[i] - m) * invstd;
        sum_gy += gys[i];
        sum_gy_xhat += gys[i] * xhat;
      }
      if (nb->requires_grad) nb->ensure_grad()[nc % C] += sum_gy;
      if (ng->requires_grad) ng->ensure_grad()[nc % C] += sum_gy_xhat;
      if (nx->requires_grad) {
        double* gxs = nx->ensure_grad().data() + nc * HW;
        const double inv_hw = 1.0 / static_cast<double>(HW);
        for (std::int64_t i = 0; i < HW; ++i) {
          const double xhat = (xs[i] - m) * invstd;
          gxs[i] += g * invstd * (gys[i] - sum_gy * inv_hw - xhat * sum_gy_xhat * inv_hw);
        }
      }
    }
  });
}

Var prelu(const Var& x, const Var& alpha) {
  const Tensor& v = x->value;
  require(v.rank() == 4, "prelu expects NCHW input");
  const std::int64_t N = v.dim(0), C = v.dim(1), HW = v.dim(2) * v.dim(3);
  require(alpha->value.numel() == C, "prelu: one slope per channel required");
  Tensor out(v.shape());
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const double a = alpha->value[nc % C];
    const double* xs = v.data() + nc * HW;
    double* ys = out.data() + nc * HW;
    for (std::int64_t i = 0; i < HW; ++i) ys[i] = xs[i] > 0.0 ? xs[i] : a * xs[i];
  }
  return ad::make_node(std::move(out), {x, alpha}, [N, C, HW](ad::Node& node) {
    ad::Node* nx = node.inputs[0].get();
    ad::Node* na = node.inputs[1].get();
    const double* gy = node.grad.data();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const double a = na->value[nc % C];
      const double* xs = nx->value.data() + nc * HW;
      const double* gys = gy + nc * HW;
      if (nx->requires_grad) {
        double* gxs = nx->ensure_grad().data() + nc * HW;
        for (std::int64_t i = 0; i < HW; ++i) gxs[i] += gys[i] * (xs[i] > 0.0 ? 1.0 : a);
      }
      if (na->requires_grad) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < HW; ++i)
          if (xs[i] <= 0.0) acc += gys[i] * xs[i];
        na->ensure_grad()[nc % C] += acc;
      }
    }
  });
}

Var film(const Var& x, const Var& gamma, const Var& beta) {
  const Tensor& v = x->value;
  require(v.rank() == 4, "film expects NCHW input");
  const std::int64_t N = v.dim(0), C = v.dim(1), HW = v.dim(2) * v.dim(3);
  require(gamma->value.rank() == 2 && gamma->value.dim(0) == N && gamma->value.dim(1) == C,
          "film: gamma must be N x C");
  require(beta->value.same_shape(gamma->value), "film: beta must match gamma");
  Tensor out(v.shape());
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const double s = 1.0 + gamma->value[nc];
    const double o = beta->value[nc];
    const double* xs = v.data() + nc * HW;
    double* ys = out.data() + nc * HW;
    for (std::int64_t i = 0; i < HW; ++i) ys[i] = xs[i] * s + o;
  }
  return ad::make_node(std::move(out), {x, gamma, beta}, [N, C, HW](ad::Node& node) {
    ad::Node* nx = node.inputs[0].get();
    ad::Node* ng = node.inputs[1].get();
    ad::Node* nb = node.inputs[2].get();
    const double* gy = node.grad.data();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const double s = 1.0 + ng->value[nc];
      const double* xs = nx->value.data() + nc * HW;
      const double* gys = gy + nc * HW;
      if (nx->requires_grad) {
        double* gxs = nx->ensure_grad().data() + nc * HW;
        for (std::int64_t i = 0; i < HW; ++i) gxs[i] += gys[i] * s;
      }
      if (ng->requires_grad || nb->requires_grad) {
        double sg = 0.0, sb = 0.0;
        for (std::int64_t i = 0; i < HW; ++i) {
          sg += gys[i] * xs[i];
          sb += gys[i];
        }
        if (ng->requires_grad) ng->ensure_grad()[nc] += sg;
        if (nb->requires_grad) nb->ensure_grad()[nc] += sb;
      }
    }
  });
}

Var mul_gate(const Var& x, const Var& a) {
  const Tensor& v = x->value;
  require(v.rank() == 4 && a->value.rank() == 4, "mul_gate expects NCHW inputs");
  const std::int64_t N = v.dim(0), C = v.dim(1), HW = v.dim(2) * v.dim(3);
  require(a->value.dim(0) == N && a->value.dim(1) == 1 && a->value.dim(2) == v.dim(2) &&
              a->value.dim(3) == v.dim(3),
          "mul_gate: gate must be N x 1 x H x W");
  Tensor out(v.shape());
  for (std::int64_t n = 0; n < N; ++n) {
    const double* as = a->value.data() + n * HW;
    for (std::int64_t c = 0; c < C; ++c) {
      const double* xs = v.data() + (n * C + c) * HW;
      double* ys = out.data() + (n * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) ys[i] = xs[i] * as[i];
    }
  }
  return ad::make_node(std::move(out), {x, a}, [N, C, HW](ad::Node& node) {
    ad::Node* nx = node.inputs[0].get();
    ad::Node* na = node.inputs[1].get();
    const double* gy = node.grad.data();
    for (std::int64_t n = 0; n < N; ++n) {
      const double* as = na->value.data() + n * HW;
      double* gas = na->requires_grad ? na->ensure_grad().data() + n * HW : nullptr;
      for (std::int64_t c = 0; c < C; ++c) {
        const double* xs = nx->value.data() + (n * C + c) * HW;
        const double* gys = gy + (n * C + c) * HW;
        if (nx->requires_grad) {
          double* gxs = nx->ensure_grad().data() + (n * C + c) * HW;
          for (std::int64_t i = 0; i < HW; ++i) gxs[i] += gys[i] * as[i];
        }
        if (gas) {
          for (std::int64_t i = 0; i < HW; ++i) gas[i] += gys[i] * xs[i];
        }
      }
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& v = x->value;
  require(v.rank() == 2, "linear expects N x I input, got " + v.shape_str());
  const std::int64_t N = v.dim(0), I = v.dim(1);
  require(w->value.rank() == 2 && w->value.dim(1) == I, "linear: weight must be O x I");
  const std::int64_t O = w->value.dim(0);
  require(b->value.numel() == O, "linear: bias must have O entries");
  Tensor out({N, O});
  {
    ConstRowMap xm(v.data(), N, I);
    ConstRowMap wm(w->value.data(), O, I);
    RowMap ym(out.data(), N, O);
    ym.noalias() = xm * wm.transpose();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t o = 0; o < O; ++o) ym(n, o) += b->value[o];
  }
  return ad::make_node(std::move(out), {x, w, b}, [N, I, O](ad::Node& node) {
    ad::Node* nx = node.inputs[0].get();
    ad::Node* nw = node.inputs[1].get();
    ad::Node* nb = node.inputs[2].get();
    ConstRowMap gy(node.grad.data(), N, O);
    if (nx->requires_grad) {
      RowMap gx(nx->ensure_grad().data(), N, I);
      ConstRowMap wm(nw->value.data(), O, I);
      gx.noalias() += gy * wm;
    }
    if (nw->requires_grad) {
      RowMap gw(nw->ensure_grad().data(), O, I);
      ConstRowMap xm(nx->value.data(), N, I);
      gw.noalias() += gy.transpose() * xm;
    }
    if (nb->requires_grad) {
      double* gb = nb->ensure_grad().data();
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t o = 0; o < O; ++o) gb[o] += gy(n, o);
    }
  });
}

Var global_avg_pool(const Var& x) {
  const Tensor& v = x->value;
  require(v.rank() == 4, "global_avg_pool expects NCHW input");
  const std::int64_t N = v.dim(0), C = v.dim(1), HW = v.dim(2) * v.dim(3);
  Tensor out({N, C});
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const double* xs = v.data() + nc * HW;
    double acc = 0.0;
    for (std::int64_t i = 0; i < HW; ++i) acc += xs[i];
    out[nc] = acc / static_cast<double>(HW);
  }
  return ad::make_node(std::move(out), {x}, [N, C, HW](ad::Node& node) {
    ad::Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    double* gx = in->ensure_grad().data();
    const double* gy = node.grad.data();
    const double inv = 1.0 / static_cast<double>(HW);
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const double g = gy[nc] * inv;
      double* gxs = gx + nc * HW;
      for (std::int64_t i = 0; i < HW; ++i) gxs[i] += g;
    }
  });
}

Var ParamStore::add(const std::string& name, Tensor init) {
  require(!index.count(name), "duplicate parameter name: " + name);
  index[name] = vars.size();
  names.push_back(name);
  vars.push_back(ad::leaf(std::move(init), true));
  return vars.back();
}

const Var& ParamStore::at(const std::string& name) const {
  auto it = index.find(name);
  require(it != index.end(), "unknown parameter: " + name);
  return vars[it->second];
}

std::int64_t ParamStore::total_size() const {
  std::int64_t n = 0;
  for (const auto& v : vars) n += v->value.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& v : vars) {
    if (v->grad_allocated) v->grad.fill(0.0);
  }
}

Tensor kaiming_conv(std::int64_t co, std::int64_t ci, std::int64_t kh, std::int64_t kw,
                    std::mt19937_64& rng, double gain) {
  const double fan_in = static_cast<double>(ci * kh * kw);
  return Tensor::randn({co, ci, kh, kw}, rng, gain / std::sqrt(fan_in));
}

Tensor kaiming_linear(std::int64_t out, std::int64_t in, std::mt19937_64& rng, double gain) {
  return Tensor::randn({out, in}, rng, gain / std::sqrt(static_cast<double>(in)));
}

}  // namespace sdlayer::nn
