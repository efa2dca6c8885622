#pragma once

// Reverse-mode autodiff over Tensor. Each op is one tape node with a
// hand-derived vector-Jacobian product; backward() walks the DAG once in
// reverse topological order, so gradient accumulation order is fixed and
// runs are bit-reproducible.

#include <functional>
#include <memory>
#include <vector>

#include "sdlayer/tensor.hpp"

namespace sdlayer::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first use, same shape as value
  std::vector<Var> inputs;
  std::function<void(Node&)> backward_fn;  // accumulates into inputs' grads
  bool requires_grad = false;
  bool grad_allocated = false;

  Tensor& ensure_grad();
};

Var leaf(Tensor value, bool requires_grad = true);
Var constant(Tensor value);
Var make_node(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

// Seeds root (must be scalar) with grad 1 and propagates. Clears nothing;
// call zero_grad on parameters between steps.
void backward(const Var& root);

// Elementwise, same-shape binary ops.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);

Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, double c);
Var neg(const Var& a);

Var relu(const Var& a);                      // also the ramp |x|_+
Var leaky_relu(const Var& a, double slope);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
Var abs(const Var& a);
Var max_scalar(const Var& a, double floor);  // elementwise max(x, floor)

Var sum(const Var& a);   // -> scalar
Var mean(const Var& a);  // -> scalar

// Softmax / cumulative sum along `axis` (negative axes from the back).
Var softmax(const Var& a, std::int64_t axis);
Var cumsum(const Var& a, std::int64_t axis);

Var concat(const std::vector<Var>& parts, std::int64_t axis);
Var narrow(const Var& a, std::int64_t axis, std::int64_t start, std::int64_t len);
Var reshape(const Var& a, Shape new_shape);

// Forward rounds half-up; backward passes gradients through unchanged.
Var straight_through_round(const Var& a);
// Forward identity; backward stops here.
Var stop_gradient(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(const Var& a, double c) { return mul_scalar(a, c); }
inline Var operator*(double c, const Var& a) { return mul_scalar(a, c); }
inline Var operator+(const Var& a, double c) { return add_scalar(a, c); }
inline Var operator-(const Var& a, double c) { return add_scalar(a, -c); }

}  // namespace sdlayer::ad
