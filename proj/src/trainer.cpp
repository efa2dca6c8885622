#include "sdlayer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace sdlayer::train {

namespace fs = std::filesystem;

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void rng_from_string(std::mt19937_64& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  require(static_cast<bool>(is), "corrupt RNG state in checkpoint");
}

// Disables gradient tracking on all parameters for forward-only passes.
struct NoGradGuard {
  explicit NoGradGuard(const nn::ParamStore& store) : store_(store) {
    for (const auto& v : store_.vars) v->requires_grad = false;
  }
  ~NoGradGuard() {
    for (const auto& v : store_.vars) v->requires_grad = true;
  }
  const nn::ParamStore& store_;
};

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Tensor stack_images(const std::vector<const synth::Sample*>& samples, std::int64_t H, std::int64_t W) {
  const std::int64_t N = static_cast<std::int64_t>(samples.size());
  Tensor images({N, 1, H, W});
  for (std::int64_t n = 0; n < N; ++n) {
    const Tensor& img = samples[static_cast<std::size_t>(n)]->image;
    require(img.rank() == 2 && img.dim(0) == H && img.dim(1) == W,
            "sample " + samples[static_cast<std::size_t>(n)]->id + " has dims " + img.shape_str());
    std::copy(img.data(), img.data() + H * W, images.data() + n * H * W);
  }
  return images;
}

struct PipelineOut {
  topo::SurfaceProbabilityMap P;
  topo::SurfaceCurveSet y_raw;
  topo::SurfaceCurveSet y_rect;
  ad::Var factor_stack;  // binarized, N x F x H x W (null if reconstruction skipped)
  networks::StyleCode style;
  ad::Var reconstruction;  // N x 1 x H x W
};

PipelineOut forward_pipeline(const networks::Model& model, const ad::Var& images,
                             const Tensor* style_noise, bool with_reconstruction) {
  PipelineOut out;
  auto enc = model.anatomy_encode(images);
  out.P = topo::columnwise_softmax(enc.surface_logits);
  out.y_raw = topo::expected_positions(out.P);
  out.y_rect = topo::rectify_surfaces(out.y_raw);
  if (!with_reconstruction) return out;

  topo::CumulativeMaps cum = topo::cumulative_maps(out.P);
  topo::CumulativeMaps ordered = topo::enforce_map_ordering(cum);
  topo::AnatomyFactors factors;
  factors.layer_maps = topo::decompose_layers(ordered);
  factors.texture = enc.texture;  // N x 1 x H x W
  topo::AnatomyFactors binary = topo::binarize_factors(factors);
  out.factor_stack = binary.texture ? ad::concat({binary.layer_maps, binary.texture}, 1)
                                    : binary.layer_maps;
  out.style = model.style_encode(images, out.factor_stack, style_noise);
  out.reconstruction = model.decode(out.factor_stack, out.style);
  return out;
}

void check_finite_term(const char* name, const ad::Var& term) {
  if (term && !std::isfinite(term->value[0]))
    throw std::runtime_error(std::string("non-finite loss term '") + name +
                             "'; aborting training step");
}

double sample_std(const std::vector<double>& xs, double mean) {
  if (xs.size() < 2) return 0.0;
  double acc = 0.0;
  for (double x : xs) acc += (x - mean) * (x - mean);
  return std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

}  // namespace

void TrainConfig::validate() const {
  require(batch_labeled >= 1, "train: batch_labeled must be >= 1");
  require(batch_unlabeled >= 0, "train: batch_unlabeled must be >= 0");
  require(learning_rate > 0.0, "train: learning_rate must be positive");
  require(grad_clip_norm > 0.0, "train: grad_clip_norm must be positive");
  require(iterations >= 1, "train: iterations must be >= 1");
  require(val_every >= 1, "train: val_every must be >= 1");
  require(optimizer == "madgrad" || optimizer == "adam",
          "train: optimizer must be 'madgrad' or 'adam', got '" + optimizer + "'");
  require(labeled_subset_fraction > 0.0 && labeled_subset_fraction <= 1.0,
          "train: labeled_subset_fraction must be in (0, 1]");
  require(flip_probability >= 0.0 && flip_probability <= 1.0, "train: flip_probability in [0,1]");
  weights.validate();
}

losses::LossWeights TrainConfig::effective_weights() const {
  losses::LossWeights w = weights;
  if (disable_self_losses) w.lambda3 = w.lambda4 = w.lambda5 = w.lambda6 = 0.0;
  return w;
}

void Madgrad::ensure_state(const nn::ParamStore& params) {
  if (!grad_sum_sq_.empty()) return;
  for (const auto& v : params.vars) {
    grad_sum_sq_.push_back(Tensor::zeros(v->value.shape()));
    s_.push_back(Tensor::zeros(v->value.shape()));
    x0_.push_back(v->value);  // dual averaging anchors at the initial weights
  }
}

void Madgrad::step(nn::ParamStore& params) {
  ensure_state(params);
  require(grad_sum_sq_.size() == params.vars.size(), "madgrad state does not match parameters");
  const double lamb = lr_ * std::sqrt(static_cast<double>(steps_ + 1));
  for (std::size_t p = 0; p < params.vars.size(); ++p) {
    auto& var = params.vars[p];
    const Tensor& g = var->ensure_grad();
    double* x = var->value.data();
    double* nu = grad_sum_sq_[p].data();
    double* s = s_[p].data();
    const double* x0 = x0_[p].data();
    const std::int64_t n = var->value.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      nu[i] += lamb * g[i] * g[i];
      s[i] += lamb * g[i];
      const double z = x0[i] - s[i] / (std::cbrt(nu[i]) + eps_);
      x[i] = momentum_ * x[i] + (1.0 - momentum_) * z;
    }
  }
  ++steps_;
}

std::vector<std::pair<std::string, Tensor>> Madgrad::export_slots(const nn::ParamStore& params) const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t p = 0; p < grad_sum_sq_.size(); ++p) {
    out.emplace_back("madgrad.nu/" + params.names[p], grad_sum_sq_[p]);
    out.emplace_back("madgrad.s/" + params.names[p], s_[p]);
    out.emplace_back("madgrad.x0/" + params.names[p], x0_[p]);
  }
  return out;
}

void Madgrad::import_slots(const nn::ParamStore& params,
                           const std::vector<std::pair<std::string, Tensor>>& slots) {
  grad_sum_sq_.clear();
  s_.clear();
  x0_.clear();
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : slots) by_name[name] = &t;
  for (const auto& name : params.names) {
    for (const char* kind : {"madgrad.nu/", "madgrad.s/", "madgrad.x0/"})
      require(by_name.count(kind + name) > 0,
              "checkpoint is missing optimizer slot " + std::string(kind) + name);
    grad_sum_sq_.push_back(*by_name.at("madgrad.nu/" + name));
    s_.push_back(*by_name.at("madgrad.s/" + name));
    x0_.push_back(*by_name.at("madgrad.x0/" + name));
  }
}

void Adam::ensure_state(const nn::ParamStore& params) {
  if (!m_.empty()) return;
  for (const auto& v : params.vars) {
    m_.push_back(Tensor::zeros(v->value.shape()));
    v_.push_back(Tensor::zeros(v->value.shape()));
  }
}

void Adam::step(nn::ParamStore& params) {
  ensure_state(params);
  const double t = static_cast<double>(steps_ + 1);
  const double corr1 = 1.0 - std::pow(beta1_, t);
  const double corr2 = 1.0 - std::pow(beta2_, t);
  for (std::size_t p = 0; p < params.vars.size(); ++p) {
    auto& var = params.vars[p];
    const Tensor& g = var->ensure_grad();
    double* x = var->value.data();
    double* m = m_[p].data();
    double* v = v_[p].data();
    const std::int64_t n = var->value.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      x[i] -= lr_ * (m[i] / corr1) / (std::sqrt(v[i] / corr2) + eps_);
    }
  }
  ++steps_;
}

std::vector<std::pair<std::string, Tensor>> Adam::export_slots(const nn::ParamStore& params) const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t p = 0; p < m_.size(); ++p) {
    out.emplace_back("adam.m/" + params.names[p], m_[p]);
    out.emplace_back("adam.v/" + params.names[p], v_[p]);
  }
  return out;
}

void Adam::import_slots(const nn::ParamStore& params,
                        const std::vector<std::pair<std::string, Tensor>>& slots) {
  m_.clear();
  v_.clear();
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : slots) by_name[name] = &t;
  for (const auto& name : params.names) {
    auto im = by_name.find("adam.m/" + name);
    auto iv = by_name.find("adam.v/" + name);
    require(im != by_name.end() && iv != by_name.end(),
            "checkpoint is missing optimizer slot for " + name);
    m_.push_back(*im->second);
    v_.push_back(*iv->second);
  }
}

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& cfg) {
  if (cfg.optimizer == "adam") return std::make_unique<Adam>(cfg.learning_rate);
  return std::make_unique<Madgrad>(cfg.learning_rate, cfg.madgrad_momentum);
}

StepResult train_step(networks::Model& model, Optimizer& opt,
                      const std::vector<synth::Sample>& batch, const TrainConfig& cfg,
                      const losses::PriorConstants& priors, std::mt19937_64& noise_rng) {
  require(!batch.empty(), "train_step: empty batch");
  const auto& net = model.config();
  const std::int64_t H = net.height, W = net.width, S = net.surfaces;

  // Labeled samples first, preserving order within each pool.
  std::vector<const synth::Sample*> ordered;
  for (const auto& s : batch)
    if (s.surfaces) ordered.push_back(&s);
  const std::int64_t nl = static_cast<std::int64_t>(ordered.size());
  for (const auto& s : batch)
    if (!s.surfaces) ordered.push_back(&s);
  const std::int64_t N = static_cast<std::int64_t>(ordered.size());
  const std::int64_t nu = N - nl;

  Tensor images = stack_images(ordered, H, W);
  Tensor mu_lab({nl, S, W});
  for (std::int64_t n = 0; n < nl; ++n) {
    const Tensor& mu = *ordered[static_cast<std::size_t>(n)]->surfaces;
    require(mu.dim(0) == S && mu.dim(1) == W,
            "sample " + ordered[static_cast<std::size_t>(n)]->id + " surface table is " +
                mu.shape_str() + ", expected " + std::to_string(S) + "x" + std::to_string(W));
    std::copy(mu.data(), mu.data() + S * W, mu_lab.data() + n * S * W);
  }

  model.params().zero_grads();
  Tensor noise = Tensor::randn({N, net.style_dim}, noise_rng);
  ad::Var images_var = ad::constant(images);
  PipelineOut fwd = forward_pipeline(model, images_var, &noise, true);

  losses::LossTerms terms;
  if (nl > 0) {
    topo::SurfaceProbabilityMap p_lab{ad::narrow(fwd.P.values, 0, 0, nl)};
    topo::SurfaceCurveSet y_lab{ad::narrow(fwd.y_rect.positions, 0, 0, nl)};
    terms.kl = losses::kl_supervised(p_lab, mu_lab, priors.sigma);
    terms.mse = losses::mse_supervised(y_lab, mu_lab);
  }
  const std::int64_t self_start = cfg.priors_on_all ? 0 : nl;
  const std::int64_t self_count = cfg.priors_on_all ? N : nu;
  if (self_count > 0 && !cfg.disable_self_losses) {
    topo::SurfaceCurveSet y_raw_s{ad::narrow(fwd.y_raw.positions, 0, self_start, self_count)};
    topo::SurfaceCurveSet y_rect_s{ad::narrow(fwd.y_rect.positions, 0, self_start, self_count)};
    topo::SurfaceProbabilityMap p_s{ad::narrow(fwd.P.values, 0, self_start, self_count)};
    // Ordering violations only exist before rectification; the remaining
    // priors constrain the rectified (final) surfaces.
    terms.to = losses::loss_topo(y_raw_s);
    terms.lc = losses::loss_continuity(y_rect_s, priors);
    terms.ls = losses::loss_slope(y_rect_s, priors);
    terms.std_dev = losses::loss_std(p_s, priors);
  }
  terms.z_kl = losses::loss_vae_kl(fwd.style.mean, fwd.style.logvar);
  terms.rec = losses::loss_reconstruction_masked(
      images.reshaped({N, H, W}), ad::reshape(fwd.reconstruction, {N, H, W}),
      fwd.y_rect.positions->value);

  check_finite_term("kl", terms.kl);
  check_finite_term("mse", terms.mse);
  check_finite_term("to", terms.to);
  check_finite_term("lc", terms.lc);
  check_finite_term("ls", terms.ls);
  check_finite_term("std", terms.std_dev);
  check_finite_term("z_kl", terms.z_kl);
  check_finite_term("rec", terms.rec);

  StepResult result;
  ad::Var total = losses::total_loss(terms, cfg.effective_weights(), result.breakdown);
  check_finite_term("total", total);
  ad::backward(total);

  auto global_norm = [&model]() {
    double acc = 0.0;
    for (const auto& v : model.params().vars) {
      if (!v->grad_allocated) continue;
      const double* g = v->grad.data();
      for (std::int64_t i = 0; i < v->grad.numel(); ++i) acc += g[i] * g[i];
    }
    return std::sqrt(acc);
  };
  result.grad_norm_raw = global_norm();
  if (result.grad_norm_raw > cfg.grad_clip_norm && result.grad_norm_raw > 0.0) {
    const double scale = cfg.grad_clip_norm / result.grad_norm_raw;
    for (const auto& v : model.params().vars) {
      if (!v->grad_allocated) continue;
      double* g = v->grad.data();
      for (std::int64_t i = 0; i < v->grad.numel(); ++i) g[i] *= scale;
    }
    result.grad_norm = global_norm();
  } else {
    result.grad_norm = result.grad_norm_raw;
  }

  opt.step(model.params());
  result.supervised_samples = nl;
  result.self_supervised_samples = (cfg.disable_self_losses ? 0 : self_count);
  return result;
}

std::vector<Tensor> predict_surfaces(const networks::Model& model,
                                     const std::vector<const synth::Sample*>& samples) {
  const auto& net = model.config();
  NoGradGuard guard(model.params());
  std::vector<Tensor> out;
  constexpr std::int64_t kChunk = 8;
  for (std::size_t start = 0; start < samples.size(); start += kChunk) {
    const std::size_t end = std::min(samples.size(), start + kChunk);
    std::vector<const synth::Sample*> chunk(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                            samples.begin() + static_cast<std::ptrdiff_t>(end));
    ad::Var images = ad::constant(stack_images(chunk, net.height, net.width));
    PipelineOut fwd = forward_pipeline(model, images, nullptr, false);
    const Tensor& y = fwd.y_rect.positions->value;  // N x S x W
    for (std::int64_t n = 0; n < static_cast<std::int64_t>(chunk.size()); ++n) {
      Tensor pred({net.surfaces, net.width});
      std::copy(y.data() + n * net.surfaces * net.width,
                y.data() + (n + 1) * net.surfaces * net.width, pred.data());
      out.push_back(std::move(pred));
    }
  }
  return out;
}

EvalReport evaluate(const networks::Model& model, const synth::Dataset& dataset) {
  require(!dataset.empty(), "evaluate: empty dataset");
  for (const auto& s : dataset)
    require(s.surfaces.has_value(),
            "evaluate requires a labeled dataset; sample " + s.id + " has no surfaces");
  const auto& net = model.config();
  const std::int64_t S = net.surfaces, H = net.height, W = net.width;
  NoGradGuard guard(model.params());

  EvalReport report;
  std::vector<double> scan_rmse;
  std::vector<std::vector<double>> surf_rmse(static_cast<std::size_t>(S));
  double mae_total = 0.0;

  constexpr std::int64_t kChunk = 8;
  for (std::size_t start = 0; start < dataset.size(); start += kChunk) {
    const std::size_t end = std::min(dataset.size(), start + kChunk);
    std::vector<const synth::Sample*> chunk;
    for (std::size_t i = start; i < end; ++i) chunk.push_back(&dataset[i]);
    const std::int64_t N = static_cast<std::int64_t>(chunk.size());
    Tensor images = stack_images(chunk, H, W);
    ad::Var images_var = ad::constant(images);
    PipelineOut fwd = forward_pipeline(model, images_var, nullptr, true);
    const Tensor& y = fwd.y_rect.positions->value;
    const Tensor& xhat = fwd.reconstruction->value;

    for (std::int64_t n = 0; n < N; ++n) {
      const Tensor& ref = *chunk[static_cast<std::size_t>(n)]->surfaces;
      double acc_all = 0.0;
      Tensor pred({S, W});
      for (std::int64_t s = 0; s < S; ++s) {
        double acc_s = 0.0;
        for (std::int64_t i = 0; i < W; ++i) {
          const double d = y[(n * S + s) * W + i] - ref(s, i);
          acc_s += d * d;
          pred(s, i) = y[(n * S + s) * W + i];
        }
        surf_rmse[static_cast<std::size_t>(s)].push_back(std::sqrt(acc_s / static_cast<double>(W)));
        acc_all += acc_s;
      }
      scan_rmse.push_back(std::sqrt(acc_all / static_cast<double>(S * W)));
      report.ordering_violations += topo::count_ordering_violations(pred);

      // Masked reconstruction MAE with the predicted ILM/BM bounds.
      Tensor mask = losses::retina_mask(pred, H);
      double acc = 0.0, cnt = 0.0;
      for (std::int64_t i = 0; i < H * W; ++i) {
        if (mask[i] == 0.0) continue;
        acc += std::abs(xhat[n * H * W + i] - images[n * H * W + i]);
        cnt += 1.0;
      }
      mae_total += (cnt > 0.0) ? acc / cnt : 0.0;
    }
  }

  report.scans = static_cast<std::int64_t>(scan_rmse.size());
  double mean = 0.0;
  for (double r : scan_rmse) mean += r;
  mean /= static_cast<double>(scan_rmse.size());
  report.mean_rmse = mean;
  report.std_rmse = sample_std(scan_rmse, mean);
  for (std::int64_t s = 0; s < S; ++s) {
    const auto& xs = surf_rmse[static_cast<std::size_t>(s)];
    double m = 0.0;
    for (double r : xs) m += r;
    m /= static_cast<double>(xs.size());
    report.per_surface_rmse.push_back(m);
    report.per_surface_std.push_back(sample_std(xs, m));
  }
  report.masked_recon_mae = mae_total / static_cast<double>(report.scans);
  return report;
}

synth::Dataset subset_labels(const synth::Dataset& dataset, double fraction, std::uint64_t seed) {
  require(fraction > 0.0 && fraction <= 1.0, "subset_labels: fraction must be in (0, 1]");
  synth::Dataset out = dataset;
  if (fraction >= 1.0) return out;

  std::map<std::string, std::vector<std::size_t>> groups;  // volume -> labeled indices
  std::int64_t labeled_count = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!out[i].surfaces) continue;
    groups[synth::volume_of(out[i].id)].push_back(i);
    ++labeled_count;
  }
  require(labeled_count > 0, "subset_labels: dataset has no labeled samples");
  const std::int64_t target =
      std::max<std::int64_t>(1, std::llround(fraction * static_cast<double>(labeled_count)));
  require(target >= static_cast<std::int64_t>(groups.size()),
          "subset_labels: fraction " + std::to_string(fraction) + " keeps " +
              std::to_string(target) + " samples but there are " + std::to_string(groups.size()) +
              " volumes to cover");

  std::mt19937_64 rng(seed);
  std::set<std::size_t> keep;
  std::vector<std::size_t> leftovers;
  for (auto& [vol, indices] : groups) {  // std::map: sorted, deterministic
    std::shuffle(indices.begin(), indices.end(), rng);
    keep.insert(indices.front());
    for (std::size_t k = 1; k < indices.size(); ++k) leftovers.push_back(indices[k]);
  }
  std::sort(leftovers.begin(), leftovers.end());
  std::shuffle(leftovers.begin(), leftovers.end(), rng);
  for (std::size_t k = 0; k < leftovers.size() && static_cast<std::int64_t>(keep.size()) < target; ++k)
    keep.insert(leftovers[k]);

  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].surfaces && !keep.count(i)) out[i].surfaces.reset();  // joins the unlabeled pool
  }
  return out;
}

std::pair<synth::Dataset, synth::Dataset> split_by_volume(const synth::Dataset& dataset,
                                                          double val_fraction) {
  require(val_fraction >= 0.0 && val_fraction < 1.0, "split: val_fraction must be in [0, 1)");
  std::vector<std::string> volumes;
  for (const auto& s : dataset) {
    const std::string v = synth::volume_of(s.id);
    if (volumes.empty() || volumes.back() != v) {
      if (std::find(volumes.begin(), volumes.end(), v) == volumes.end()) volumes.push_back(v);
    }
  }
  const std::int64_t n_val = static_cast<std::int64_t>(
      std::ceil(val_fraction * static_cast<double>(volumes.size()) - 1e-9));
  std::set<std::string> val_volumes(volumes.end() - n_val, volumes.end());
  synth::Dataset train_set, val_set;
  for (const auto& s : dataset)
    (val_volumes.count(synth::volume_of(s.id)) ? val_set : train_set).push_back(s);
  return {std::move(train_set), std::move(val_set)};
}

losses::PriorConstants derive_priors_from_dataset(const synth::Dataset& dataset,
                                                  const TrainConfig& cfg) {
  std::vector<Tensor> annotations;
  for (const auto& s : dataset)
    if (s.surfaces) annotations.push_back(*s.surfaces);
  return losses::derive_constants(annotations, cfg.prior_delta, cfg.prior_t, cfg.prior_sigma);
}

void load_model_params(networks::Model& model, const ckpt::Checkpoint& c) {
  auto& store = model.params();
  require(c.params.size() == store.vars.size(),
          "checkpoint has " + std::to_string(c.params.size()) + " parameters, model expects " +
              std::to_string(store.vars.size()));
  for (const auto& [name, tensor] : c.params) {
    const ad::Var& var = store.at(name);
    require(var->value.same_shape(tensor), "checkpoint parameter " + name + " has shape " +
                                               tensor.shape_str() + ", model expects " +
                                               var->value.shape_str());
    var->value = tensor;
  }
}

namespace {

ckpt::Checkpoint make_checkpoint(const networks::Model& model, const Optimizer& opt,
                                 std::int64_t step, std::uint64_t seed,
                                 const nlohmann::json& config_echo, const std::string& rng_state,
                                 double best_val_rmse, std::int64_t best_step) {
  ckpt::Checkpoint c;
  c.seed = seed;
  c.step = step;
  c.rng_state = rng_state;
  c.config = config_echo;
  c.config["trainer_state"] = {{"step", step},
                               {"best_val_rmse", best_val_rmse},
                               {"best_step", best_step}};
  c.optimizer_type = opt.type();
  c.optimizer_step = opt.steps_done();
  for (std::size_t p = 0; p < model.params().vars.size(); ++p)
    c.params.emplace_back(model.params().names[p], model.params().vars[p]->value);
  c.optimizer_slots = opt.export_slots(model.params());
  return c;
}

void write_val_row(std::ofstream& log, std::int64_t step, const EvalReport& rep) {
  log << step << "\t" << format_double(rep.mean_rmse) << "\t" << format_double(rep.std_rmse) << "\t"
      << format_double(rep.masked_recon_mae) << "\t" << rep.ordering_violations;
  for (double r : rep.per_surface_rmse) log << "\t" << format_double(r);
  log << "\n";
  log.flush();
}

}  // namespace

TrainResult run_training(networks::Model& model, synth::Dataset train_set,
                         const synth::Dataset& val_set, const TrainConfig& cfg,
                         const std::string& out_dir, const nlohmann::json& config_echo,
                         bool resume) {
  cfg.validate();
  require(!val_set.empty(), "run_training: empty validation set");
  fs::create_directories(out_dir);

  std::vector<std::size_t> labeled_idx, unlabeled_idx;
  for (std::size_t i = 0; i < train_set.size(); ++i)
    (train_set[i].surfaces ? labeled_idx : unlabeled_idx).push_back(i);
  require(!labeled_idx.empty(), "run_training: no labeled training samples");
  const std::int64_t batch_unlabeled = unlabeled_idx.empty() ? 0 : cfg.batch_unlabeled;

  const losses::PriorConstants priors = derive_priors_from_dataset(train_set, cfg);
  priors.save((fs::path(out_dir) / "priors.txt").string());

  std::mt19937_64 batch_rng(mix_seed(cfg.seed, 10));
  std::mt19937_64 aug_rng(mix_seed(cfg.seed, 11));
  std::mt19937_64 noise_rng(mix_seed(cfg.seed, 12));

  auto opt = make_optimizer(cfg);
  const std::string best_path = (fs::path(out_dir) / "best.ckpt").string();
  const std::string last_path = (fs::path(out_dir) / "last.ckpt").string();
  const std::string train_log_path = (fs::path(out_dir) / "train_log.tsv").string();
  const std::string val_log_path = (fs::path(out_dir) / "val_log.tsv").string();

  std::int64_t start_step = 0;
  double best_val = std::numeric_limits<double>::infinity();
  std::int64_t best_step = -1;

  const bool resuming = resume && fs::exists(last_path);
  if (resuming) {
    ckpt::Checkpoint c = ckpt::load(last_path);
    load_model_params(model, c);
    require(c.optimizer_type == opt->type(),
            "resume: checkpoint optimizer '" + c.optimizer_type + "' does not match config '" +
                opt->type() + "'");
    opt->import_slots(model.params(), c.optimizer_slots);
    opt->set_steps_done(c.optimizer_step);
    start_step = c.step;
    std::istringstream states(c.rng_state);
    std::string line;
    std::getline(states, line);
    rng_from_string(batch_rng, line);
    std::getline(states, line);
    rng_from_string(aug_rng, line);
    std::getline(states, line);
    rng_from_string(noise_rng, line);
    const auto& ts = c.config.at("trainer_state");
    best_val = ts.at("best_val_rmse").get<double>();
    best_step = ts.at("best_step").get<std::int64_t>();
  }

  std::ofstream train_log(train_log_path, resuming ? std::ios::app : std::ios::trunc);
  std::ofstream val_log(val_log_path, resuming ? std::ios::app : std::ios::trunc);
  require(train_log.good() && val_log.good(), "cannot open training logs under " + out_dir);
  if (!resuming) {
    train_log << "# step";
    for (const auto& f : losses::LossBreakdown::field_names()) train_log << "\t" << f;
    train_log << "\tgrad_norm\n";
    val_log << "# step\tmean_rmse\tstd_rmse\trecon_mae\tviolations\tper_surface_rmse...\n";
  }

  TrainResult result;
  result.best_checkpoint_path = best_path;
  result.last_checkpoint_path = last_path;

  if (!resuming) {
    result.initial_val_report = evaluate(model, val_set);
    write_val_row(val_log, 0, result.initial_val_report);
  }

  // Epoch-style cursors: reshuffle a pool when it is exhausted.
  std::vector<std::size_t> labeled_order = labeled_idx, unlabeled_order = unlabeled_idx;
  std::shuffle(labeled_order.begin(), labeled_order.end(), batch_rng);
  std::shuffle(unlabeled_order.begin(), unlabeled_order.end(), batch_rng);
  std::size_t labeled_cursor = 0, unlabeled_cursor = 0;
  auto draw = [&](std::vector<std::size_t>& order, std::size_t& cursor) {
    if (cursor >= order.size()) {
      std::shuffle(order.begin(), order.end(), batch_rng);
      cursor = 0;
    }
    return order[cursor++];
  };

  auto rng_snapshot = [&]() {
    return rng_to_string(batch_rng) + "\n" + rng_to_string(aug_rng) + "\n" +
           rng_to_string(noise_rng);
  };

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::int64_t step = start_step + 1; step <= cfg.iterations; ++step) {
    std::vector<synth::Sample> batch;
    for (std::int64_t b = 0; b < cfg.batch_labeled; ++b)
      batch.push_back(train_set[draw(labeled_order, labeled_cursor)]);
    for (std::int64_t b = 0; b < batch_unlabeled; ++b)
      batch.push_back(train_set[draw(unlabeled_order, unlabeled_cursor)]);
    for (auto& s : batch)
      if (unit(aug_rng) < cfg.flip_probability) s = synth::hflip(s);

    StepResult sr = train_step(model, *opt, batch, cfg, priors, noise_rng);
    train_log << step;
    for (double v : sr.breakdown.field_values()) train_log << "\t" << format_double(v);
    train_log << "\t" << format_double(sr.grad_norm) << "\n";

    if (step % cfg.val_every == 0 || step == cfg.iterations) {
      const EvalReport rep = evaluate(model, val_set);
      write_val_row(val_log, step, rep);
      const std::string rngs = rng_snapshot();
      if (rep.mean_rmse < best_val) {
        best_val = rep.mean_rmse;
        best_step = step;
        result.final_val_report = rep;
        ckpt::save(best_path,
                   make_checkpoint(model, *opt, step, cfg.seed, config_echo, rngs, best_val, best_step));
      }
      ckpt::save(last_path,
                 make_checkpoint(model, *opt, step, cfg.seed, config_echo, rngs, best_val, best_step));
    }
    result.final_step = step;
  }

  result.best_val_rmse = best_val;
  result.best_step = best_step;
  if (result.final_step == start_step) result.final_step = start_step;  // nothing ran
  return result;
}

std::size_t select_best(const std::vector<std::string>& checkpoint_paths,
                        const synth::Dataset& val_dataset) {
  require(!checkpoint_paths.empty(), "select_best: no checkpoints given");
  std::size_t best_index = 0;
  double best_rmse = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < checkpoint_paths.size(); ++i) {
    ckpt::Checkpoint c = ckpt::load(checkpoint_paths[i]);
    networks::NetworkConfig net;
    const auto& j = c.config.at("network");
    net.stages = j.at("stages").get<std::int64_t>();
    net.base_channels = j.at("base_channels").get<std::int64_t>();
    net.surfaces = j.at("surfaces").get<std::int64_t>();
    net.height = j.at("height").get<std::int64_t>();
    net.width = j.at("width").get<std::int64_t>();
    net.style_dim = j.at("style_dim").get<std::int64_t>();
    net.attention_gates = j.at("attention_gates").get<bool>();
    net.style_uses_factors = j.at("style_uses_factors").get<bool>();
    net.texture_head = j.at("texture_head").get<bool>();
    networks::Model model(net, c.seed);
    load_model_params(model, c);
    const EvalReport rep = evaluate(model, val_dataset);
    if (rep.mean_rmse < best_rmse) {  // strict: earliest checkpoint wins ties
      best_rmse = rep.mean_rmse;
      best_index = i;
    }
  }
  return best_index;
}

}  // namespace sdlayer::train
