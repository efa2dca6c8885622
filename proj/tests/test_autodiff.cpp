#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "gradcheck.hpp"
#include "sdlayer/nn.hpp"

using namespace sdlayer;
using test::gradcheck;
using test::project;

namespace {
std::mt19937_64 rng(20240811);

Tensor away_from_kinks(const Shape& shape, double margin = 0.05) {
  // Uniform values re-drawn until no coordinate sits within `margin` of 0.
  Tensor t = Tensor::uniform(shape, rng, -1.0, 1.0);
  for (std::int64_t i = 0; i < t.numel(); ++i)
    while (std::abs(t[i]) < margin) t[i] = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
  return t;
}
}  // namespace

TEST_CASE("elementwise forward values") {
  ad::Var x = ad::leaf(Tensor({2, 2}, {1.0, -2.0, 3.0, -4.0}), false);
  CHECK(ad::relu(x)->value[1] == 0.0);
  CHECK(ad::relu(x)->value[2] == 3.0);
  CHECK(ad::abs(x)->value[3] == 4.0);
  CHECK(ad::sigmoid(ad::leaf(Tensor::scalar(0.0), false))->value[0] == doctest::Approx(0.5));
  CHECK(ad::mean(x)->value[0] == doctest::Approx(-0.5));
}

TEST_CASE("backward accumulates over shared subexpressions") {
  // f(x) = sum(x*x + x) -> df/dx = 2x + 1
  Tensor x0({3}, {1.0, 2.0, 3.0});
  ad::Var x = ad::leaf(x0, true);
  ad::Var y = ad::sum(ad::add(ad::mul(x, x), x));
  ad::backward(y);
  for (std::int64_t i = 0; i < 3; ++i) CHECK(x->grad[i] == doctest::Approx(2.0 * x0[i] + 1.0));
}

TEST_CASE("gradcheck: elementwise and reduction ops") {
  const Shape shape{3, 4};
  auto check = [&](const std::function<ad::Var(const ad::Var&)>& op, const Tensor& x0) {
    auto res = gradcheck(project(op, op(ad::leaf(x0, false))->value.shape(), rng), x0);
    CHECK(res.max_rel_error < 1e-6);
  };
  check([](const ad::Var& x) { return ad::relu(x); }, away_from_kinks(shape));
  check([](const ad::Var& x) { return ad::leaky_relu(x, 0.2); }, away_from_kinks(shape));
  check([](const ad::Var& x) { return ad::sigmoid(x); }, Tensor::uniform(shape, rng, -2, 2));
  check([](const ad::Var& x) { return ad::exp(x); }, Tensor::uniform(shape, rng, -1, 1));
  check([](const ad::Var& x) { return ad::log(x); }, Tensor::uniform(shape, rng, 0.5, 2.0));
  check([](const ad::Var& x) { return ad::sqrt(x); }, Tensor::uniform(shape, rng, 0.5, 2.0));
  check([](const ad::Var& x) { return ad::square(x); }, Tensor::uniform(shape, rng, -2, 2));
  check([](const ad::Var& x) { return ad::abs(x); }, away_from_kinks(shape));
  check([](const ad::Var& x) { return ad::softmax(x, -2); }, Tensor::uniform(shape, rng, -2, 2));
  check([](const ad::Var& x) { return ad::cumsum(x, -1); }, Tensor::uniform(shape, rng, -2, 2));
  check([](const ad::Var& x) { return ad::narrow(x, -1, 1, 2); }, Tensor::uniform(shape, rng, -2, 2));
  check([](const ad::Var& x) { return ad::reshape(x, {4, 3}); }, Tensor::uniform(shape, rng, -2, 2));
  check([](const ad::Var& x) { return ad::max_scalar(x, 0.3); }, away_from_kinks(shape, 0.0));
}

TEST_CASE("gradcheck: binary ops and concat") {
  Tensor a0 = Tensor::uniform({2, 3}, rng, -2, 2);
  Tensor b0 = Tensor::uniform({2, 3}, rng, 0.5, 2.0);
  ad::Var b = ad::leaf(b0, false);
  auto res = gradcheck(project([&](const ad::Var& x) { return ad::mul(x, b); }, {2, 3}, rng), a0);
  CHECK(res.max_rel_error < 1e-6);
  res = gradcheck(project([&](const ad::Var& x) { return ad::concat({x, b}, 0); }, {4, 3}, rng), a0);
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("softmax columns sum to one") {
  Tensor logits = Tensor::uniform({3, 8, 5}, rng, -4, 4);
  ad::Var p = ad::softmax(ad::leaf(logits, false), -2);
  for (std::int64_t s = 0; s < 3; ++s)
    for (std::int64_t i = 0; i < 5; ++i) {
      double colsum = 0.0;
      for (std::int64_t r = 0; r < 8; ++r) colsum += p->value(s, r, i);
      CHECK(colsum == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("softmax rejects non-finite logits") {
  Tensor bad({1, 2, 1}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  CHECK_THROWS_AS(ad::softmax(ad::leaf(bad, false), -2), std::invalid_argument);
}

TEST_CASE("straight-through round: forward rounds, backward is identity") {
  Tensor x0({5}, {0.49, 0.51, 0.5, -0.2, 1.0});
  ad::Var x = ad::leaf(x0, true);
  ad::Var y = ad::straight_through_round(x);
  CHECK(y->value[0] == 0.0);
  CHECK(y->value[1] == 1.0);
  CHECK(y->value[2] == 1.0);  // ties round up
  CHECK(y->value[3] == 0.0);
  CHECK(y->value[4] == 1.0);
  ad::backward(ad::sum(y));
  for (std::int64_t i = 0; i < 5; ++i) CHECK(x->grad[i] == 1.0);
}

TEST_CASE("gradcheck: conv2d wrt input, weights, bias") {
  const std::int64_t N = 2, C = 3, H = 6, W = 8, CO = 4;
  Tensor x0 = Tensor::uniform({N, C, H, W}, rng, -1, 1);
  Tensor w0 = Tensor::uniform({CO, C, 3, 3}, rng, -0.5, 0.5);
  Tensor b0 = Tensor::uniform({CO}, rng, -0.5, 0.5);
  ad::Var w = ad::leaf(w0, false);
  ad::Var b = ad::leaf(b0, false);
  auto wrt_x = project([&](const ad::Var& x) { return nn::conv2d(x, w, b); }, {N, CO, H, W}, rng);
  CHECK(gradcheck(wrt_x, x0).max_rel_error < 1e-6);

  ad::Var x = ad::leaf(x0, false);
  auto wrt_w = project([&](const ad::Var& wv) { return nn::conv2d(x, wv, b); }, {N, CO, H, W}, rng);
  CHECK(gradcheck(wrt_w, w0).max_rel_error < 1e-6);
  auto wrt_b = project([&](const ad::Var& bv) { return nn::conv2d(x, w, bv); }, {N, CO, H, W}, rng);
  CHECK(gradcheck(wrt_b, b0).max_rel_error < 1e-6);
}

TEST_CASE("gradcheck: strided conv2d") {
  Tensor x0 = Tensor::uniform({1, 2, 8, 8}, rng, -1, 1);
  Tensor w0 = Tensor::uniform({3, 2, 3, 3}, rng, -0.5, 0.5);
  ad::Var w = ad::leaf(w0, false);
  ad::Var b = ad::leaf(Tensor::zeros({3}), false);
  auto f = project([&](const ad::Var& x) { return nn::conv2d(x, w, b, 2); }, {1, 3, 4, 4}, rng);
  CHECK(gradcheck(f, x0).max_rel_error < 1e-6);
}

TEST_CASE("gradcheck: pool, upsample, gap") {
  Tensor x0 = Tensor::uniform({2, 3, 4, 6}, rng, -1, 1);
  auto pool = project([](const ad::Var& x) { return nn::maxpool2x2(x); }, {2, 3, 2, 3}, rng);
  CHECK(gradcheck(pool, x0).max_rel_error < 1e-6);
  auto up = project([](const ad::Var& x) { return nn::upsample_nearest2x(x); }, {2, 3, 8, 12}, rng);
  CHECK(gradcheck(up, x0).max_rel_error < 1e-6);
  auto gap = project([](const ad::Var& x) { return nn::global_avg_pool(x); }, {2, 3}, rng);
  CHECK(gradcheck(gap, x0).max_rel_error < 1e-6);
}

TEST_CASE("gradcheck: instance norm, prelu, film, gate, linear") {
  const Shape xs{2, 3, 4, 5};
  Tensor x0 = Tensor::uniform(xs, rng, -1, 1);
  Tensor g0 = Tensor::uniform({3}, rng, 0.5, 1.5);
  Tensor beta0 = Tensor::uniform({3}, rng, -0.5, 0.5);
  ad::Var g = ad::leaf(g0, false);
  ad::Var be = ad::leaf(beta0, false);

  auto in_x = project([&](const ad::Var& x) { return nn::instance_norm(x, g, be); }, xs, rng);
  CHECK(gradcheck(in_x, x0).max_rel_error < 1e-5);
  ad::Var xc = ad::leaf(x0, false);
  auto in_g = project([&](const ad::Var& gv) { return nn::instance_norm(xc, gv, be); }, xs, rng);
  CHECK(gradcheck(in_g, g0).max_rel_error < 1e-6);

  Tensor a0 = Tensor::uniform({3}, rng, 0.1, 0.4);
  ad::Var a = ad::leaf(a0, false);
  auto pr_x = project([&](const ad::Var& x) { return nn::prelu(x, a); }, xs, rng);
  CHECK(gradcheck(pr_x, away_from_kinks(xs)).max_rel_error < 1e-6);
  Tensor xfixed = away_from_kinks(xs);
  ad::Var xf = ad::leaf(xfixed, false);
  auto pr_a = project([&](const ad::Var& av) { return nn::prelu(xf, av); }, xs, rng);
  CHECK(gradcheck(pr_a, a0).max_rel_error < 1e-6);

  Tensor gamma0 = Tensor::uniform({2, 3}, rng, -0.5, 0.5);
  Tensor off0 = Tensor::uniform({2, 3}, rng, -0.5, 0.5);
  ad::Var gm = ad::leaf(gamma0, false);
  ad::Var off = ad::leaf(off0, false);
  auto film_x = project([&](const ad::Var& x) { return nn::film(x, gm, off); }, xs, rng);
  CHECK(gradcheck(film_x, x0).max_rel_error < 1e-6);
  auto film_g = project([&](const ad::Var& gv) { return nn::film(xc, gv, off); }, xs, rng);
  CHECK(gradcheck(film_g, gamma0).max_rel_error < 1e-6);

  Tensor gate0 = Tensor::uniform({2, 1, 4, 5}, rng, 0.1, 0.9);
  ad::Var gate = ad::leaf(gate0, false);
  auto gate_x = project([&](const ad::Var& x) { return nn::mul_gate(x, gate); }, xs, rng);
  CHECK(gradcheck(gate_x, x0).max_rel_error < 1e-6);
  auto gate_a = project([&](const ad::Var& av) { return nn::mul_gate(xc, av); }, xs, rng);
  CHECK(gradcheck(gate_a, gate0).max_rel_error < 1e-6);

  Tensor lx0 = Tensor::uniform({3, 4}, rng, -1, 1);
  Tensor lw0 = Tensor::uniform({5, 4}, rng, -1, 1);
  Tensor lb0 = Tensor::uniform({5}, rng, -1, 1);
  ad::Var lw = ad::leaf(lw0, false);
  ad::Var lb = ad::leaf(lb0, false);
  auto lin_x = project([&](const ad::Var& x) { return nn::linear(x, lw, lb); }, {3, 5}, rng);
  CHECK(gradcheck(lin_x, lx0).max_rel_error < 1e-6);
  ad::Var lx = ad::leaf(lx0, false);
  auto lin_w = project([&](const ad::Var& wv) { return nn::linear(lx, wv, lb); }, {3, 5}, rng);
  CHECK(gradcheck(lin_w, lw0).max_rel_error < 1e-6);
}

TEST_CASE("conv2d matches a hand-computed 1x1 case") {
  // 1x1 conv is a channel mix: y[co] = sum_ci w[co][ci] * x[ci] + b[co].
  Tensor x({1, 2, 1, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor w({1, 2, 1, 1}, {10.0, 100.0});
  Tensor b({1}, {0.5});
  ad::Var y = nn::conv2d(ad::leaf(x, false), ad::leaf(w, false), ad::leaf(b, false), 1, 0);
  CHECK(y->value(0, 0, 0, 0) == doctest::Approx(10.0 * 1.0 + 100.0 * 3.0 + 0.5));
  CHECK(y->value(0, 0, 0, 1) == doctest::Approx(10.0 * 2.0 + 100.0 * 4.0 + 0.5));
}

TEST_CASE("maxpool picks the max and routes gradient to it") {
  Tensor x({1, 1, 2, 2}, {1.0, 5.0, 3.0, 2.0});
  ad::Var xv = ad::leaf(x, true);
  ad::Var y = nn::maxpool2x2(xv);
  CHECK(y->value[0] == 5.0);
  ad::backward(ad::sum(y));
  CHECK(xv->grad[0] == 0.0);
  CHECK(xv->grad[1] == 1.0);
  CHECK(xv->grad[2] == 0.0);
}
