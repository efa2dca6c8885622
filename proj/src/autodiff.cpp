#include "sdlayer/autodiff.hpp"

#include <cmath>
#include <unordered_set>

namespace sdlayer::ad {

Tensor& Node::ensure_grad() {
  if (!grad_allocated) {
    grad = Tensor::zeros(value.shape());
    grad_allocated = true;
  }
  return grad;
}

Var leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

Var make_node(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->inputs = std::move(inputs);
  for (const auto& p : n->inputs)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward_fn = std::move(backward_fn);
  return n;
}

void backward(const Var& root) {
  require(root != nullptr, "backward on null variable");
  require(root->value.numel() == 1, "backward root must be a scalar");
  if (!root->requires_grad) return;

  // Iterative post-order DFS; children visited in input order, so the
  // resulting reverse order (and thus accumulation order) is deterministic.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    bool descended = false;
    while (next_child < node->inputs.size()) {
      Node* child = node->inputs[next_child++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
        descended = true;
        break;
      }
    }
    if (!descended && (stack.back().second >= stack.back().first->inputs.size())) {
      order.push_back(stack.back().first);
      stack.pop_back();
    }
  }

  root->ensure_grad().fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad_allocated) n->backward_fn(*n);
  }
}

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
  require(a->value.same_shape(b->value), std::string(op) + ": shape mismatch " +
                                             a->value.shape_str() + " vs " + b->value.shape_str());
}

// Elementwise unary helper: dfdx computed from (x, y) per element.
template <typename Fwd, typename Dfdx>
Var unary_op(const Var& a, Fwd fwd, Dfdx dfdx) {
  Tensor out(a->value.shape());
  const std::int64_t n = a->value.numel();
  const double* x = a->value.data();
  double* y = out.data();
  for (std::int64_t i = 0; i < n; ++i) y[i] = fwd(x[i]);
  return make_node(std::move(out), {a}, [dfdx](Node& node) {
    Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    Tensor& g = in->ensure_grad();
    const std::int64_t n = node.value.numel();
    const double* x = in->value.data();
    const double* y = node.value.data();
    const double* gy = node.grad.data();
    double* gx = g.data();
    for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out(a->value.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a->value[i] + b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& node) {
    const std::int64_t n = node.value.numel();
    const double* gy = node.grad.data();
    for (int k = 0; k < 2; ++k) {
      Node* in = node.inputs[k].get();
      if (!in->requires_grad) continue;
      double* gx = in->ensure_grad().data();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a->value.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a->value[i] - b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& node) {
    const std::int64_t n = node.value.numel();
    const double* gy = node.grad.data();
    for (int k = 0; k < 2; ++k) {
      Node* in = node.inputs[k].get();
      if (!in->requires_grad) continue;
      double* gx = in->ensure_grad().data();
      const double sign = (k == 0) ? 1.0 : -1.0;
      for (std::int64_t i = 0; i < n; ++i) gx[i] += sign * gy[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->value.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] = a->value[i] * b->value[i];
  return make_node(std::move(out), {a, b}, [](Node& node) {
    const std::int64_t n = node.value.numel();
    const double* gy = node.grad.data();
    Node* na = node.inputs[0].get();
    Node* nb = node.inputs[1].get();
    if (na->requires_grad) {
      double* ga = na->ensure_grad().data();
      const double* xb = nb->value.data();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += gy[i] * xb[i];
    }
    if (nb->requires_grad) {
      double* gb = nb->ensure_grad().data();
      const double* xa = na->value.data();
      for (std::int64_t i = 0; i < n; ++i) gb[i] += gy[i] * xa[i];
    }
  });
}

Var add_scalar(const Var& a, double c) {
  return unary_op(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var mul_scalar(const Var& a, double c) {
  return unary_op(
      a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var relu(const Var& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& a, double slope) {
  return unary_op(
      a, [slope](double x) { return x > 0.0 ? x : slope * x; },
      [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Var sigmoid(const Var& a) {
  return unary_op(
      a,
      [](double x) {
        // Split on sign to avoid exp overflow.
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var exp(const Var& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sqrt(const Var& a) {
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

Var square(const Var& a) {
  return unary_op(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs(const Var& a) {
  return unary_op(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var max_scalar(const Var& a, double floor) {
  return unary_op(
      a, [floor](double x) { return x > floor ? x : floor; },
      [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

Var sum(const Var& a) {
  Tensor out = Tensor::scalar(a->value.sum());
  return make_node(std::move(out), {a}, [](Node& node) {
    Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    const double g = node.grad[0];
    double* gx = in->ensure_grad().data();
    const std::int64_t n = in->value.numel();
    for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
  });
}

Var mean(const Var& a) {
  require(a->value.numel() > 0, "mean of empty tensor");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a->value.numel()));
}

Var softmax(const Var& a, std::int64_t axis) {
  require(a->value.all_finite(), "softmax: non-finite input logits");
  const AxisView v = axis_view(a->value.shape(), axis);
  Tensor out(a->value.shape());
  const double* x = a->value.data();
  double* y = out.data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t in = 0; in < v.inner; ++in) {
      const std::int64_t base = o * v.axis_len * v.inner + in;
      double m = -std::numeric_limits<double>::infinity();
      for (std::int64_t k = 0; k < v.axis_len; ++k) m = std::max(m, x[base + k * v.inner]);
      double z = 0.0;
      for (std::int64_t k = 0; k < v.axis_len; ++k) {
        const double e = std::exp(x[base + k * v.inner] - m);
        y[base + k * v.inner] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (std::int64_t k = 0; k < v.axis_len; ++k) y[base + k * v.inner] *= inv;
    }
  }
  return make_node(std::move(out), {a}, [v](Node& node) {
    Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    const double* y = node.value.data();
    const double* gy = node.grad.data();
    double* gx = in->ensure_grad().data();
    for (std::int64_t o = 0; o < v.outer; ++o) {
      for (std::int64_t i = 0; i < v.inner; ++i) {
        const std::int64_t base = o * v.axis_len * v.inner + i;
        double dot = 0.0;
        for (std::int64_t k = 0; k < v.axis_len; ++k) {
          const std::int64_t idx = base + k * v.inner;
          dot += gy[idx] * y[idx];
        }
        for (std::int64_t k = 0; k < v.axis_len; ++k) {
          const std::int64_t idx = base + k * v.inner;
          gx[idx] += y[idx] * (gy[idx] - dot);
        }
      }
    }
  });
}

Var cumsum(const Var& a, std::int64_t axis) {
  const AxisView v = axis_view(a->value.shape(), axis);
  Tensor out(a->value.shape());
  const double* x = a->value.data();
  double* y = out.data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      const std::int64_t base = o * v.axis_len * v.inner + i;
      double acc = 0.0;
      for (std::int64_t k = 0; k < v.axis_len; ++k) {
        acc += x[base + k * v.inner];
        y[base + k * v.inner] = acc;
      }
    }
  }
  return make_node(std::move(out), {a}, [v](Node& node) {
    Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    const double* gy = node.grad.data();
    double* gx = in->ensure_grad().data();
    // d cumsum / dx_k touches all outputs at or below k: reverse suffix sum.
    for (std::int64_t o = 0; o < v.outer; ++o) {
      for (std::int64_t i = 0; i < v.inner; ++i) {
        const std::int64_t base = o * v.axis_len * v.inner + i;
        double acc = 0.0;
        for (std::int64_t k = v.axis_len - 1; k >= 0; --k) {
          acc += gy[base + k * v.inner];
          gx[base + k * v.inner] += acc;
        }
      }
    }
  });
}

Var concat(const std::vector<Var>& parts, std::int64_t axis) {
  require(!parts.empty(), "concat of zero tensors");
  Shape shape = parts[0]->value.shape();
  const auto r = static_cast<std::int64_t>(shape.size());
  std::int64_t ax = axis < 0 ? axis + r : axis;
  require(ax >= 0 && ax < r, "concat axis out of range");
  std::int64_t total = 0;
  for (const auto& p : parts) {
    require(p->value.rank() == r, "concat: rank mismatch");
    for (std::int64_t d = 0; d < r; ++d) {
      if (d == ax) continue;
      require(p->value.shape()[d] == shape[d], "concat: non-axis dims must match");
    }
    total += p->value.dim(ax);
  }
  shape[static_cast<std::size_t>(ax)] = total;

  const AxisView v = axis_view(shape, ax);
  Tensor out(shape);
  double* y = out.data();
  std::vector<std::int64_t> offsets;  // start of each part along the axis
  {
    std::int64_t off = 0;
    for (const auto& p : parts) {
      offsets.push_back(off);
      const std::int64_t len = p->value.dim(ax);
      const double* x = p->value.data();
      for (std::int64_t o = 0; o < v.outer; ++o)
        for (std::int64_t k = 0; k < len; ++k)
          for (std::int64_t i = 0; i < v.inner; ++i)
            y[(o * v.axis_len + off + k) * v.inner + i] = x[(o * len + k) * v.inner + i];
      off += len;
    }
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_node(std::move(out), std::move(inputs), [v, offsets, ax](Node& node) {
    const double* gy = node.grad.data();
    for (std::size_t pi = 0; pi < node.inputs.size(); ++pi) {
      Node* in = node.inputs[pi].get();
      if (!in->requires_grad) continue;
      double* gx = in->ensure_grad().data();
      const std::int64_t len = in->value.dim(ax);
      const std::int64_t off = offsets[pi];
      for (std::int64_t o = 0; o < v.outer; ++o)
        for (std::int64_t k = 0; k < len; ++k)
          for (std::int64_t i = 0; i < v.inner; ++i)
            gx[(o * len + k) * v.inner + i] += gy[(o * v.axis_len + off + k) * v.inner + i];
    }
  });
}

Var narrow(const Var& a, std::int64_t axis, std::int64_t start, std::int64_t len) {
  Shape shape = a->value.shape();
  const auto r = static_cast<std::int64_t>(shape.size());
  std::int64_t ax = axis < 0 ? axis + r : axis;
  require(ax >= 0 && ax < r, "narrow axis out of range");
  const std::int64_t full = shape[static_cast<std::size_t>(ax)];
  require(start >= 0 && len >= 0 && start + len <= full, "narrow range out of bounds");
  const AxisView v = axis_view(shape, ax);
  shape[static_cast<std::size_t>(ax)] = len;
  Tensor out(shape);
  const double* x = a->value.data();
  double* y = out.data();
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t k = 0; k < len; ++k)
      for (std::int64_t i = 0; i < v.inner; ++i)
        y[(o * len + k) * v.inner + i] = x[(o * full + start + k) * v.inner + i];
  return make_node(std::move(out), {a}, [v, start, len, full](Node& node) {
    Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    const double* gy = node.grad.data();
    double* gx = in->ensure_grad().data();
    for (std::int64_t o = 0; o < v.outer; ++o)
      for (std::int64_t k = 0; k < len; ++k)
        for (std::int64_t i = 0; i < v.inner; ++i)
          gx[(o * full + start + k) * v.inner + i] += gy[(o * len + k) * v.inner + i];
  });
}

Var reshape(const Var& a, Shape new_shape) {
  Tensor out = a->value.reshaped(std::move(new_shape));
  return make_node(std::move(out), {a}, [](Node& node) {
    Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    double* gx = in->ensure_grad().data();
    const double* gy = node.grad.data();
    const std::int64_t n = node.value.numel();
    for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i];
  });
}

Var straight_through_round(const Var& a) {
  Tensor out(a->value.shape());
  const std::int64_t n = out.numel();
  // Half-up tie break: round(0.5) == 1.
  for (std::int64_t i = 0; i < n; ++i) out[i] = std::floor(a->value[i] + 0.5);
  return make_node(std::move(out), {a}, [](Node& node) {
    Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    double* gx = in->ensure_grad().data();
    const double* gy = node.grad.data();
    const std::int64_t n = node.value.numel();
    for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i];
  });
}

Var stop_gradient(const Var& a) { return constant(a->value); }

}  // namespace sdlayer::ad
