#include "sdlayer/losses.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace sdlayer::losses {

namespace {
constexpr double kPmfFloor = 1e-8;

// Leading dims of a (...,S,W) curve tensor, i.e. the batch size.
std::int64_t batch_of(const Tensor& t, int trailing) {
  std::int64_t b = 1;
  for (std::int64_t i = 0; i + trailing < t.rank(); ++i) b *= t.dim(i);
  return b;
}
}  // namespace

void PriorConstants::validate(std::int64_t width) const {
  require(!c.empty() && c.size() == o.size(), "prior constants: c and o must be per-surface arrays");
  for (double v : c) require(std::isfinite(v) && v >= 0.0, "prior constants: c_s must be >= 0");
  for (double v : o) require(std::isfinite(v) && v >= 0.0, "prior constants: o_s must be >= 0");
  require(delta >= 1, "prior constants: delta must be a positive column span");
  require(width <= 0 || delta < width, "prior constants: delta must be smaller than the image width");
  require(t > 0.0, "prior constants: t must be strictly positive");
  require(sigma > 0.0, "prior constants: sigma must be strictly positive");
}

void PriorConstants::save(const std::string& path) const {
  std::ofstream out(path);
  require(out.good(), "cannot write prior constants to " + path);
  out.precision(17);
  out << "delta = " << delta << "\n";
  out << "t = " << t << "\n";
  out << "sigma = " << sigma << "\n";
  out << "c =";
  for (double v : c) out << " " << v;
  out << "\no =";
  for (double v : o) out << " " << v;
  out << "\n";
  require(out.good(), "write failed for " + path);
}

PriorConstants PriorConstants::load(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot read prior constants from " + path);
  PriorConstants pc;
  pc.c.clear();
  pc.o.clear();
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq);
    key.erase(key.find_last_not_of(" \t") + 1);
    std::istringstream vs(line.substr(eq + 1));
    if (key == "delta") {
      vs >> pc.delta;
    } else if (key == "t") {
      vs >> pc.t;
    } else if (key == "sigma") {
      vs >> pc.sigma;
    } else if (key == "c" || key == "o") {
      std::vector<double> vals;
      double v;
      while (vs >> v) vals.push_back(v);
      (key == "c" ? pc.c : pc.o) = vals;
    } else {
      throw std::invalid_argument("unknown key '" + key + "' in prior constants file " + path);
    }
  }
  pc.validate(0);
  return pc;
}

void LossWeights::validate() const {
  const double all[] = {lambda1, lambda2, lambda3, lambda4, lambda5, lambda6, lambda7, lambda8};
  double sum = 0.0;
  for (double v : all) {
    require(std::isfinite(v) && v >= 0.0, "loss weights must be finite and non-negative");
    sum += v;
  }
  require(sum > 0.0, "all loss weights are zero; the total loss would be degenerate");
}

const std::vector<std::string>& LossBreakdown::field_names() {
  static const std::vector<std::string> names = {"kl", "mse",    "to",  "lc",   "ls",
                                                 "std", "z_kl", "rec", "total"};
  return names;
}

std::vector<double> LossBreakdown::field_values() const {
  return {kl, mse, to, lc, ls, std_dev, z_kl, rec, total};
}

Tensor gaussian_target(const Tensor& mu, std::int64_t height, double sigma) {
  require(sigma > 0.0, "target sigma must be strictly positive, got " + std::to_string(sigma));
  require(mu.rank() >= 2, "reference positions must be (...,S,W)");
  for (std::int64_t i = 0; i < mu.numel(); ++i)
    require(mu[i] >= 0.0 && mu[i] <= static_cast<double>(height - 1),
            "reference position outside [0, H-1]: " + std::to_string(mu[i]));

  Shape shape = mu.shape();
  shape.insert(shape.end() - 1, height);  // (...,S,W) -> (...,S,H,W)
  Tensor target(shape);
  const std::int64_t cols = mu.numel();  // one Gaussian per (batch,s,i)
  const AxisView v = axis_view(shape, -2);
  const std::int64_t W = v.inner;
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  double* td = target.data();
  const double* md = mu.data();
  for (std::int64_t col = 0; col < cols; ++col) {
    const std::int64_t o = col / W;
    const std::int64_t i = col % W;
    const double m = md[col];
    double z = 0.0;
    for (std::int64_t r = 0; r < height; ++r) {
      const double d = static_cast<double>(r) - m;
      const double val = std::exp(-d * d * inv2s2);
      td[(o * height + r) * W + i] = val;
      z += val;
    }
    for (std::int64_t r = 0; r < height; ++r) {
      double& cell = td[(o * height + r) * W + i];
      cell = std::max(cell / z, kPmfFloor);
    }
  }
  return target;
}

Var kl_supervised(const topo::SurfaceProbabilityMap& pmap, const Tensor& mu, double sigma) {
  const Tensor& p = pmap.values->value;
  require(p.rank() >= 3, "kl_supervised expects (...,S,H,W) probabilities");
  const std::int64_t H = p.dim(-2);
  Shape expect = p.shape();
  expect.erase(expect.end() - 2);
  require(mu.shape() == expect, "kl_supervised: reference shape " + mu.shape_str() +
                                    " does not match probabilities " + p.shape_str());
  Tensor target = gaussian_target(mu, H, sigma);
  Tensor log_t(target.shape());
  for (std::int64_t i = 0; i < target.numel(); ++i) log_t[i] = std::log(target[i]);

  const double columns = static_cast<double>(p.numel() / H);  // B*S*W
  Var log_p = ad::log(ad::max_scalar(pmap.values, kPmfFloor));
  Var diff = ad::sub(log_p, ad::constant(std::move(log_t)));
  return ad::mul_scalar(ad::sum(ad::mul(pmap.values, diff)), 1.0 / columns);
}

Var mse_supervised(const topo::SurfaceCurveSet& curves, const Tensor& mu) {
  require(curves.positions->value.shape() == mu.shape(),
          "mse_supervised: prediction shape " + curves.positions->value.shape_str() +
              " does not match reference " + mu.shape_str());
  Var diff = ad::sub(curves.positions, ad::constant(mu));
  return ad::mean(ad::square(diff));
}

Var loss_topo(const topo::SurfaceCurveSet& curves) {
  const Tensor& y = curves.positions->value;
  require(y.rank() >= 2, "loss_topo expects (...,S,W) positions");
  const std::int64_t S = y.dim(-2);
  if (S < 2) return ad::constant(Tensor::scalar(0.0));
  const double norm = static_cast<double>(batch_of(y, 2)) * static_cast<double>(y.dim(-1));
  Var upper = ad::narrow(curves.positions, -2, 0, S - 1);
  Var lower = ad::narrow(curves.positions, -2, 1, S - 1);
  return ad::mul_scalar(ad::sum(ad::relu(ad::sub(upper, lower))), 1.0 / norm);
}

namespace {
// Per-surface constant broadcast over a (...,S,K) tensor of differences.
Tensor broadcast_per_surface(const std::vector<double>& vals, const Shape& shape) {
  Tensor out(shape);
  const AxisView v = axis_view(shape, -2);
  require(static_cast<std::int64_t>(vals.size()) == v.axis_len,
          "prior constants: expected one entry per surface (" + std::to_string(v.axis_len) +
              "), got " + std::to_string(vals.size()));
  double* d = out.data();
  for (std::int64_t o = 0; o < v.outer; ++o)
    for (std::int64_t s = 0; s < v.axis_len; ++s)
      for (std::int64_t i = 0; i < v.inner; ++i) d[(o * v.axis_len + s) * v.inner + i] = vals[static_cast<std::size_t>(s)];
  return out;
}
}  // namespace

Var loss_continuity(const topo::SurfaceCurveSet& curves, const PriorConstants& consts) {
  const Tensor& y = curves.positions->value;
  require(y.rank() >= 2, "loss_continuity expects (...,S,W) positions");
  const std::int64_t W = y.dim(-1);
  require(W >= 2, "loss_continuity requires at least two columns");
  const double norm = static_cast<double>(batch_of(y, 2)) * static_cast<double>(W);
  Var left = ad::narrow(curves.positions, -1, 0, W - 1);
  Var right = ad::narrow(curves.positions, -1, 1, W - 1);
  Var jumps = ad::abs(ad::sub(left, right));
  Tensor c = broadcast_per_surface(consts.c, jumps->value.shape());
  Var excess = ad::relu(ad::sub(jumps, ad::constant(std::move(c))));
  return ad::mul_scalar(ad::sum(excess), 1.0 / norm);
}

Var loss_slope(const topo::SurfaceCurveSet& curves, const PriorConstants& consts) {
  const Tensor& y = curves.positions->value;
  require(y.rank() >= 2, "loss_slope expects (...,S,W) positions");
  const std::int64_t W = y.dim(-1);
  const std::int64_t delta = consts.delta;
  require(W > delta, "loss_slope requires width > delta (" + std::to_string(W) + " <= " +
                         std::to_string(delta) + ")");
  const double norm = static_cast<double>(batch_of(y, 2)) * static_cast<double>(W);
  Var left = ad::narrow(curves.positions, -1, 0, W - delta);
  Var right = ad::narrow(curves.positions, -1, delta, W - delta);
  Var slopes = ad::mul_scalar(ad::abs(ad::sub(left, right)), 1.0 / static_cast<double>(delta));
  Tensor o = broadcast_per_surface(consts.o, slopes->value.shape());
  Var excess = ad::relu(ad::sub(slopes, ad::constant(std::move(o))));
  return ad::mul_scalar(ad::sum(excess), 1.0 / norm);
}

namespace {
// sigma_hat[s,i] = sqrt(sum_r (r - ybar)^2 P(r)) with ybar the PMF mean.
Var pmf_std(const Var& p) {
  const Tensor& v = p->value;
  const AxisView av = axis_view(v.shape(), -2);
  Shape out_shape = v.shape();
  out_shape.erase(out_shape.end() - 2);
  Tensor out(out_shape);
  const double* pd = v.data();
  double* sd = out.data();
  for (std::int64_t o = 0; o < av.outer; ++o) {
    for (std::int64_t i = 0; i < av.inner; ++i) {
      double mean = 0.0, mom2 = 0.0;
      for (std::int64_t r = 0; r < av.axis_len; ++r) {
        const double pr = pd[(o * av.axis_len + r) * av.inner + i];
        mean += static_cast<double>(r) * pr;
        mom2 += static_cast<double>(r) * static_cast<double>(r) * pr;
      }
      sd[o * av.inner + i] = std::sqrt(std::max(0.0, mom2 - mean * mean));
    }
  }
  return ad::make_node(std::move(out), {p}, [av](ad::Node& node) {
    ad::Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    const double* pd = in->value.data();
    const double* sig = node.value.data();
    const double* gy = node.grad.data();
    double* gp = in->ensure_grad().data();
    for (std::int64_t o = 0; o < av.outer; ++o) {
      for (std::int64_t i = 0; i < av.inner; ++i) {
        const double g = gy[o * av.inner + i];
        if (g == 0.0) continue;
        double mean = 0.0;
        for (std::int64_t r = 0; r < av.axis_len; ++r)
          mean += static_cast<double>(r) * pd[(o * av.axis_len + r) * av.inner + i];
        const double denom = 2.0 * std::max(sig[o * av.inner + i], 1e-12);
        for (std::int64_t r = 0; r < av.axis_len; ++r) {
          const double rr = static_cast<double>(r);
          gp[(o * av.axis_len + r) * av.inner + i] += g * (rr * rr - 2.0 * mean * rr) / denom;
        }
      }
    }
  });
}
}  // namespace

Var loss_std(const topo::SurfaceProbabilityMap& pmap, const PriorConstants& consts) {
  const Tensor& p = pmap.values->value;
  require(p.rank() >= 3, "loss_std expects (...,S,H,W) probabilities");
  Var sigma_hat = pmf_std(pmap.values);
  // Averaged over all S*W columns (width-independent magnitude).
  const double columns = static_cast<double>(sigma_hat->value.numel());
  Var excess = ad::relu(ad::add_scalar(sigma_hat, -consts.t));
  return ad::mul_scalar(ad::sum(excess), 1.0 / columns);
}

Var loss_vae_kl(const Var& mean, const Var& logvar) {
  require(mean->value.same_shape(logvar->value), "loss_vae_kl: mean/logvar shape mismatch");
  require(mean->value.all_finite() && logvar->value.all_finite(),
          "loss_vae_kl: non-finite inputs");
  const std::int64_t batch = mean->value.rank() >= 2 ? mean->value.dim(0) : 1;
  Var term = ad::sub(ad::add(ad::square(mean), ad::exp(logvar)), logvar);
  term = ad::add_scalar(term, -1.0);
  return ad::mul_scalar(ad::sum(term), 0.5 / static_cast<double>(batch));
}

Tensor retina_mask(const Tensor& positions, std::int64_t height) {
  require(positions.rank() >= 2, "retina_mask expects (...,S,W) positions");
  const AxisView v = axis_view(positions.shape(), -2);
  Shape shape;
  for (std::int64_t i = 0; i + 2 < positions.rank(); ++i) shape.push_back(positions.dim(i));
  shape.push_back(height);
  shape.push_back(v.inner);
  Tensor mask(shape);
  const double* y = positions.data();
  double* m = mask.data();
  for (std::int64_t o = 0; o < v.outer; ++o) {
    for (std::int64_t i = 0; i < v.inner; ++i) {
      const double top = y[(o * v.axis_len + 0) * v.inner + i];
      const double bot = y[(o * v.axis_len + v.axis_len - 1) * v.inner + i];
      const std::int64_t lo = std::max<std::int64_t>(0, std::llround(top));
      const std::int64_t hi = std::min<std::int64_t>(height - 1, std::llround(bot));
      for (std::int64_t r = lo; r <= hi; ++r) m[(o * height + r) * v.inner + i] = 1.0;
    }
  }
  return mask;
}

Var loss_reconstruction_masked(const Tensor& x, const Var& xhat, const Tensor& positions) {
  const Tensor& xh = xhat->value;
  require(xh.shape() == x.shape(), "reconstruction loss: image shape mismatch " + x.shape_str() +
                                       " vs " + xh.shape_str());
  require(xh.rank() >= 2, "reconstruction loss expects (...,H,W) images");
  const std::int64_t H = xh.dim(-2), W = xh.dim(-1);
  const std::int64_t batch = batch_of(xh, 2);
  Tensor mask = retina_mask(positions, H);
  require(mask.numel() == xh.numel(), "reconstruction loss: mask/image shape mismatch");

  // Per-sample masked MAE, then mean over the batch; empty masks give 0.
  Tensor out = Tensor::scalar(0.0);
  auto counts = std::make_shared<std::vector<double>>(static_cast<std::size_t>(batch));
  const std::int64_t hw = H * W;
  double total = 0.0;
  for (std::int64_t b = 0; b < batch; ++b) {
    double acc = 0.0, cnt = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) {
      const double mm = mask[b * hw + i];
      acc += mm * std::abs(xh[b * hw + i] - x[b * hw + i]);
      cnt += mm;
    }
    (*counts)[static_cast<std::size_t>(b)] = cnt;
    if (cnt > 0.0) total += acc / cnt;
  }
  out[0] = total / static_cast<double>(batch);

  auto mask_holder = std::make_shared<Tensor>(std::move(mask));
  auto x_holder = std::make_shared<Tensor>(x);
  return ad::make_node(std::move(out), {xhat}, [mask_holder, x_holder, counts, batch, hw](ad::Node& node) {
    ad::Node* in = node.inputs[0].get();
    if (!in->requires_grad) return;
    const double g = node.grad[0] / static_cast<double>(batch);
    double* gx = in->ensure_grad().data();
    const double* xh = in->value.data();
    const double* xd = x_holder->data();
    const double* md = mask_holder->data();
    for (std::int64_t b = 0; b < batch; ++b) {
      const double cnt = (*counts)[static_cast<std::size_t>(b)];
      if (cnt <= 0.0) continue;
      const double scale = g / cnt;
      for (std::int64_t i = 0; i < hw; ++i) {
        const double d = xh[b * hw + i] - xd[b * hw + i];
        if (md[b * hw + i] != 0.0 && d != 0.0) gx[b * hw + i] += scale * (d > 0.0 ? 1.0 : -1.0);
      }
    }
  });
}

Var total_loss(const LossTerms& terms, const LossWeights& w, LossBreakdown& out) {
  w.validate();
  auto value_of = [](const Var& v) { return v ? v->value[0] : 0.0; };
  out.kl = value_of(terms.kl);
  out.mse = value_of(terms.mse);
  out.to = value_of(terms.to);
  out.lc = value_of(terms.lc);
  out.ls = value_of(terms.ls);
  out.std_dev = value_of(terms.std_dev);
  out.z_kl = value_of(terms.z_kl);
  out.rec = value_of(terms.rec);

  Var total;
  auto accumulate = [&total](const Var& term, double weight) {
    if (!term || weight == 0.0) return;
    Var scaled = ad::mul_scalar(term, weight);
    total = total ? ad::add(total, scaled) : scaled;
  };
  accumulate(terms.z_kl, w.lambda7);
  accumulate(terms.rec, w.lambda8);
  accumulate(terms.kl, 0.5 * w.lambda1);
  accumulate(terms.mse, 0.5 * w.lambda2);
  accumulate(terms.to, 0.5 * w.lambda3);
  accumulate(terms.lc, 0.5 * w.lambda4);
  accumulate(terms.ls, 0.5 * w.lambda5);
  accumulate(terms.std_dev, 0.5 * w.lambda6);
  if (!total) total = ad::constant(Tensor::scalar(0.0));
  out.total = total->value[0];
  return total;
}

PriorConstants derive_constants(const std::vector<Tensor>& annotations, std::int64_t delta,
                                double t, double sigma) {
  require(!annotations.empty(), "derive_constants: no annotated B-scans given");
  require(delta >= 1, "derive_constants: delta must be >= 1");
  const std::int64_t S = annotations.front().dim(0);
  PriorConstants pc;
  pc.c.assign(static_cast<std::size_t>(S), 0.0);
  pc.o.assign(static_cast<std::size_t>(S), 0.0);
  pc.delta = delta;
  pc.t = t;
  pc.sigma = sigma;
  for (const Tensor& mu : annotations) {
    require(mu.rank() == 2 && mu.dim(0) == S, "derive_constants: annotations must all be SxW");
    const std::int64_t W = mu.dim(1);
    require(W > delta, "derive_constants: width must exceed delta");
    for (std::int64_t s = 0; s < S; ++s) {
      for (std::int64_t i = 0; i + 1 < W; ++i)
        pc.c[static_cast<std::size_t>(s)] =
            std::max(pc.c[static_cast<std::size_t>(s)], std::abs(mu(s, i) - mu(s, i + 1)));
      for (std::int64_t i = 0; i + delta < W; ++i)
        pc.o[static_cast<std::size_t>(s)] =
            std::max(pc.o[static_cast<std::size_t>(s)],
                     std::abs(mu(s, i) - mu(s, i + delta)) / static_cast<double>(delta));
    }
  }
  return pc;
}

}  // namespace sdlayer::losses
