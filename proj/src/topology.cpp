#include "sdlayer/topology.hpp"

#include <cmath>
#include <string>

namespace sdlayer::topo {

namespace {

// For (..., S, W) tensors: columns = product of trailing W, groups = leading dims.
struct SurfaceAxis {
  std::int64_t outer;  // batch
  std::int64_t S;
  std::int64_t inner;  // W, or H*W for map tensors
};

SurfaceAxis surface_axis(const Shape& shape, std::int64_t axis) {
  const AxisView v = axis_view(shape, axis);
  return SurfaceAxis{v.outer, v.axis_len, v.inner};
}

}  // namespace

void validate_probability_map(const Tensor& values, double tol) {
  require(values.rank() >= 3, "SurfaceProbabilityMap must be at least SxHxW, got " + values.shape_str());
  require(values.all_finite(), "SurfaceProbabilityMap contains non-finite entries");
  const AxisView v = axis_view(values.shape(), -2);
  const double* p = values.data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      double colsum = 0.0;
      for (std::int64_t r = 0; r < v.axis_len; ++r) {
        const double x = p[(o * v.axis_len + r) * v.inner + i];
        require(x >= -1e-12 && x <= 1.0 + 1e-12,
                "SurfaceProbabilityMap entry outside [0,1]: " + std::to_string(x));
        colsum += x;
      }
      require(std::abs(colsum - 1.0) <= tol,
              "SurfaceProbabilityMap column does not sum to 1: " + std::to_string(colsum));
    }
  }
}

void validate_curve_ordering(const Tensor& positions, double height) {
  require(positions.rank() >= 2, "SurfaceCurveSet must be at least SxW");
  const SurfaceAxis v = surface_axis(positions.shape(), -2);
  const double* y = positions.data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      double prev = -1.0;
      for (std::int64_t s = 0; s < v.S; ++s) {
        const double cur = y[(o * v.S + s) * v.inner + i];
        require(cur >= 0.0 && cur <= height - 1.0,
                "surface position outside [0, H-1]: " + std::to_string(cur));
        if (s > 0)
          require(cur >= prev, "surface ordering violated: " + std::to_string(prev) + " > " +
                                   std::to_string(cur));
        prev = cur;
      }
    }
  }
}

void validate_cumulative_maps(const Tensor& values, double tol) {
  require(values.rank() >= 3, "CumulativeMaps must be at least SxHxW");
  const AxisView v = axis_view(values.shape(), -2);
  const double* c = values.data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      double prev = 0.0;
      for (std::int64_t r = 0; r < v.axis_len; ++r) {
        const double x = c[(o * v.axis_len + r) * v.inner + i];
        require(x >= -1e-12 && x <= 1.0 + tol, "cumulative map entry outside [0,1]");
        require(x >= prev - 1e-12, "cumulative map not monotone down the column");
        prev = x;
      }
      require(std::abs(prev - 1.0) <= tol,
              "cumulative map bottom row is " + std::to_string(prev) + ", expected 1");
    }
  }
}

void validate_layer_exclusivity(const Tensor& layer_maps, double tol) {
  const SurfaceAxis v = surface_axis(layer_maps.shape(), -3);
  const double* m = layer_maps.data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      double total = 0.0;
      for (std::int64_t s = 0; s < v.S; ++s) {
        const double x = m[(o * v.S + s) * v.inner + i];
        require(x >= -1e-6, "layer map entry below 0: " + std::to_string(x));
        total += x;
      }
      require(total <= 1.0 + tol, "layer maps not mutually exclusive, pixel sum " + std::to_string(total));
    }
  }
}

SurfaceProbabilityMap columnwise_softmax(const Var& logits) {
  require(logits->value.rank() >= 3, "columnwise_softmax expects (...,S,H,W) logits");
  return SurfaceProbabilityMap{ad::softmax(logits, -2)};
}

SurfaceCurveSet expected_positions(const SurfaceProbabilityMap& pmap) {
  const Tensor& p = pmap.values->value;
  require(p.rank() >= 3, "expected_positions expects (...,S,H,W) probabilities");
  const AxisView v = axis_view(p.shape(), -2);
  Shape out_shape = p.shape();
  out_shape.erase(out_shape.end() - 2);
  Tensor out(out_shape);
  const double* pd = p.data();
  double* y = out.data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      double acc = 0.0;
      for (std::int64_t r = 0; r < v.axis_len; ++r)
        acc += static_cast<double>(r) * pd[(o * v.axis_len + r) * v.inner + i];
      y[o * v.inner + i] = acc;
    }
  }
  auto node = ad::make_node(std::move(out), {pmap.values}, [v](ad::Node& node) {
    ad::Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    double* gp = in->ensure_grad().data();
    const double* gy = node.grad.data();
    for (std::int64_t o = 0; o < v.outer; ++o)
      for (std::int64_t r = 0; r < v.axis_len; ++r)
        for (std::int64_t i = 0; i < v.inner; ++i)
          gp[(o * v.axis_len + r) * v.inner + i] += static_cast<double>(r) * gy[o * v.inner + i];
  });
  return SurfaceCurveSet{node};
}

SurfaceCurveSet rectify_surfaces(const SurfaceCurveSet& curves) {
  const Tensor& in = curves.positions->value;
  require(in.rank() >= 2, "rectify_surfaces expects (...,S,W) positions");
  const SurfaceAxis v = surface_axis(in.shape(), -2);
  Tensor out(in.shape());
  const double* x = in.data();
  double* y = out.data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      double prev = 0.0;
      for (std::int64_t s = 0; s < v.S; ++s) {
        const std::int64_t idx = (o * v.S + s) * v.inner + i;
        const double cur = x[idx];
        const double val = (s == 0) ? cur : prev + (cur > prev ? cur - prev : 0.0);
        y[idx] = val;
        prev = val;
      }
    }
  }
  auto node = ad::make_node(std::move(out), {curves.positions}, [v](ad::Node& node) {
    ad::Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    const double* x = in->value.data();
    const double* yv = node.value.data();
    const double* gy = node.grad.data();
    double* gx = in->ensure_grad().data();
    // Each output is a running max; walk up the chain carrying the gradient
    // of the deeper surfaces while the ramp was inactive.
    for (std::int64_t o = 0; o < v.outer; ++o) {
      for (std::int64_t i = 0; i < v.inner; ++i) {
        double carry = 0.0;
        for (std::int64_t s = v.S - 1; s >= 0; --s) {
          const std::int64_t idx = (o * v.S + s) * v.inner + i;
          const double total = gy[idx] + carry;
          const bool active = (s == 0) || (x[idx] > yv[(o * v.S + s - 1) * v.inner + i]);
          if (active) {
            gx[idx] += total;
            carry = 0.0;
          } else {
            carry = total;
          }
        }
      }
    }
  });
  return SurfaceCurveSet{node};
}

CumulativeMaps cumulative_maps(const SurfaceProbabilityMap& pmap) {
  require(pmap.values->value.rank() >= 3, "cumulative_maps expects (...,S,H,W) probabilities");
  return CumulativeMaps{ad::cumsum(pmap.values, -2)};
}

CumulativeMaps enforce_map_ordering(const CumulativeMaps& cmaps) {
  const Tensor& in = cmaps.values->value;
  require(in.rank() >= 3, "enforce_map_ordering expects (...,S,H,W) maps");
  const SurfaceAxis v = surface_axis(in.shape(), -3);
  Tensor out(in.shape());
  const double* c = in.data();
  double* m = out.data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      double prev = 0.0;
      for (std::int64_t s = 0; s < v.S; ++s) {
        const std::int64_t idx = (o * v.S + s) * v.inner + i;
        const double val = (s == 0) ? c[idx] : std::max(0.0, c[idx] + prev - 1.0);
        m[idx] = val;
        prev = val;
      }
    }
  }
  auto node = ad::make_node(std::move(out), {cmaps.values}, [v](ad::Node& node) {
    ad::Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    const double* c = in->value.data();
    const double* mv = node.value.data();
    const double* gy = node.grad.data();
    double* gc = in->ensure_grad().data();
    for (std::int64_t o = 0; o < v.outer; ++o) {
      for (std::int64_t i = 0; i < v.inner; ++i) {
        double carry = 0.0;
        for (std::int64_t s = v.S - 1; s >= 1; --s) {
          const std::int64_t idx = (o * v.S + s) * v.inner + i;
          const double total = gy[idx] + carry;
          const double prev_m = mv[(o * v.S + s - 1) * v.inner + i];
          const bool active = (c[idx] + prev_m - 1.0) > 0.0;
          if (active) {
            gc[idx] += total;
            carry = total;  // flows into M^{s-1}
          } else {
            carry = 0.0;
          }
        }
        gc[(o * v.S + 0) * v.inner + i] += gy[(o * v.S + 0) * v.inner + i] + carry;
      }
    }
  });
  return CumulativeMaps{node};
}

Var decompose_layers(const CumulativeMaps& ordered) {
  const Tensor& in = ordered.values->value;
  require(in.rank() >= 3, "decompose_layers expects (...,S,H,W) maps");
  const SurfaceAxis v = surface_axis(in.shape(), -3);
  const double* m = in.data();
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t s = 0; s + 1 < v.S; ++s)
      for (std::int64_t i = 0; i < v.inner; ++i) {
        const double a = m[(o * v.S + s) * v.inner + i];
        const double b = m[(o * v.S + s + 1) * v.inner + i];
        require(b <= a + 1e-6, "decompose_layers: cumulative maps not monotone in s (" +
                                   std::to_string(a) + " < " + std::to_string(b) + ")");
      }

  Tensor out(in.shape());
  double* y = out.data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t s = 0; s < v.S; ++s) {
      for (std::int64_t i = 0; i < v.inner; ++i) {
        const std::int64_t idx = (o * v.S + s) * v.inner + i;
        y[idx] = (s + 1 < v.S) ? m[idx] - m[idx + v.inner] : m[idx];
      }
    }
  }
  return ad::make_node(std::move(out), {ordered.values}, [v](ad::Node& node) {
    ad::Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    double* gm = in->ensure_grad().data();
    const double* gy = node.grad.data();
    for (std::int64_t o = 0; o < v.outer; ++o) {
      for (std::int64_t s = 0; s < v.S; ++s) {
        for (std::int64_t i = 0; i < v.inner; ++i) {
          const std::int64_t idx = (o * v.S + s) * v.inner + i;
          gm[idx] += gy[idx];
          if (s > 0) gm[idx] -= gy[idx - v.inner];
        }
      }
    }
  });
}

AnatomyFactors binarize_factors(const AnatomyFactors& factors) {
  AnatomyFactors out;
  out.layer_maps = ad::straight_through_round(factors.layer_maps);
  if (factors.texture) out.texture = ad::straight_through_round(factors.texture);
  return out;
}

std::int64_t count_ordering_violations(const Tensor& positions, double tol) {
  const SurfaceAxis v = surface_axis(positions.shape(), -2);
  const double* y = positions.data();
  std::int64_t violations = 0;
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t i = 0; i < v.inner; ++i)
      for (std::int64_t s = 1; s < v.S; ++s) {
        const double prev = y[(o * v.S + s - 1) * v.inner + i];
        const double cur = y[(o * v.S + s) * v.inner + i];
        if (prev > cur + tol) ++violations;
      }
  return violations;
}

}  // namespace sdlayer::topo
