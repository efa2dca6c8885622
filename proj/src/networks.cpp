#include "sdlayer/networks.hpp"

#include <cmath>

namespace sdlayer::networks {

namespace {

constexpr double kPreluInit = 0.25;
// Kaiming gain for PReLU with the initial slope.
const double kPreluGain = std::sqrt(2.0 / (1.0 + kPreluInit * kPreluInit));
constexpr double kLeakySlope = 0.2;
const double kLeakyGain = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope));

detail::ResBlock make_res_block(const std::string& prefix, std::int64_t cin, std::int64_t cout,
                                nn::ParamStore& params, std::mt19937_64& rng) {
  detail::ResBlock b;
  b.w1 = params.add(prefix + ".conv1.w", nn::kaiming_conv(cout, cin, 3, 3, rng, kPreluGain));
  b.b1 = params.add(prefix + ".conv1.b", Tensor::zeros({cout}));
  b.n1g = params.add(prefix + ".norm1.g", Tensor::full({cout}, 1.0));
  b.n1b = params.add(prefix + ".norm1.b", Tensor::zeros({cout}));
  b.a1 = params.add(prefix + ".prelu1.a", Tensor::full({cout}, kPreluInit));
  b.w2 = params.add(prefix + ".conv2.w", nn::kaiming_conv(cout, cout, 3, 3, rng, kPreluGain));
  b.b2 = params.add(prefix + ".conv2.b", Tensor::zeros({cout}));
  b.n2g = params.add(prefix + ".norm2.g", Tensor::full({cout}, 1.0));
  b.n2b = params.add(prefix + ".norm2.b", Tensor::zeros({cout}));
  if (cin != cout) {
    b.wp = params.add(prefix + ".proj.w", nn::kaiming_conv(cout, cin, 1, 1, rng, 1.0));
    b.bp = params.add(prefix + ".proj.b", Tensor::zeros({cout}));
  }
  b.a2 = params.add(prefix + ".prelu2.a", Tensor::full({cout}, kPreluInit));
  return b;
}

detail::AttentionGate make_gate(const std::string& prefix, std::int64_t c_skip, std::int64_t c_gate,
                                nn::ParamStore& params, std::mt19937_64& rng) {
  const std::int64_t inter = std::max<std::int64_t>(1, c_skip / 2);
  detail::AttentionGate g;
  g.wx = params.add(prefix + ".x.w", nn::kaiming_conv(inter, c_skip, 1, 1, rng, 1.0));
  g.bx = params.add(prefix + ".x.b", Tensor::zeros({inter}));
  g.wg = params.add(prefix + ".g.w", nn::kaiming_conv(inter, c_gate, 1, 1, rng, 1.0));
  g.bg = params.add(prefix + ".g.b", Tensor::zeros({inter}));
  g.wpsi = params.add(prefix + ".psi.w", nn::kaiming_conv(1, inter, 1, 1, rng, 1.0));
  g.bpsi = params.add(prefix + ".psi.b", Tensor::zeros({1}));
  return g;
}

}  // namespace

void NetworkConfig::validate() const {
  require(stages >= 1, "network: at least one encoder stage required");
  require(base_channels >= 1, "network: base_channels must be positive");
  require(surfaces >= 1, "network: at least one surface required");
  require(style_dim >= 1, "network: style_dim must be positive");
  const std::int64_t div = std::int64_t{1} << stages;
  require(height % div == 0 && width % div == 0,
          "network: spatial dims " + std::to_string(height) + "x" + std::to_string(width) +
              " must be divisible by 2^stages = " + std::to_string(div));
}

namespace detail {

Var ResBlock::forward(const Var& x) const {
  Var h = nn::conv2d(x, w1, b1);
  h = nn::instance_norm(h, n1g, n1b);
  h = nn::prelu(h, a1);
  h = nn::conv2d(h, w2, b2);
  h = nn::instance_norm(h, n2g, n2b);
  Var r = wp ? nn::conv2d(x, wp, bp, 1, 0) : x;
  return nn::prelu(ad::add(h, r), a2);
}

Var AttentionGate::forward(const Var& skip, const Var& gate) const {
  Var q = ad::add(nn::conv2d(skip, wx, bx, 1, 0), nn::conv2d(gate, wg, bg, 1, 0));
  Var att = ad::sigmoid(nn::conv2d(ad::relu(q), wpsi, bpsi, 1, 0));
  return nn::mul_gate(skip, att);
}

}  // namespace detail

AnatomyEncoder::AnatomyEncoder(const NetworkConfig& cfg, nn::ParamStore& params, std::mt19937_64& rng)
    : cfg_(cfg) {
  cfg_.validate();
  std::int64_t cin = 1;
  for (std::int64_t k = 0; k < cfg_.stages; ++k) {
    const std::int64_t cout = cfg_.base_channels << k;
    enc_.push_back(make_res_block("anat.enc" + std::to_string(k), cin, cout, params, rng));
    cin = cout;
  }
  bottleneck_ = make_res_block("anat.bottleneck", cin, cin * 2, params, rng);
  std::int64_t cup = cin * 2;
  for (std::int64_t k = cfg_.stages - 1; k >= 0; --k) {
    const std::int64_t cskip = cfg_.base_channels << k;
    if (cfg_.attention_gates)
      gates_.push_back(make_gate("anat.gate" + std::to_string(k), cskip, cup, params, rng));
    dec_.push_back(
        make_res_block("anat.dec" + std::to_string(k), cup + cskip, cskip, params, rng));
    cup = cskip;
  }
  head_s_w_ = params.add("anat.head_s.w", nn::kaiming_conv(cfg_.surfaces, cup, 1, 1, rng, 1.0));
  head_s_b_ = params.add("anat.head_s.b", Tensor::zeros({cfg_.surfaces}));
  if (cfg_.texture_head) {
    head_t_w_ = params.add("anat.head_t.w", nn::kaiming_conv(1, cup, 1, 1, rng, 1.0));
    head_t_b_ = params.add("anat.head_t.b", Tensor::zeros({1}));
  }
}

AnatomyEncoder::Output AnatomyEncoder::forward(const Var& images) const {
  const Tensor& v = images->value;
  require(v.rank() == 4 && v.dim(1) == 1, "anatomy encoder expects N x 1 x H x W images");
  require(v.dim(2) == cfg_.height && v.dim(3) == cfg_.width,
          "anatomy encoder: image dims " + v.shape_str() + " do not match the configured " +
              std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width));
  require(v.all_finite(), "anatomy encoder: non-finite input image");

  std::vector<Var> skips;
  Var h = images;
  for (std::size_t k = 0; k < enc_.size(); ++k) {
    h = enc_[k].forward(h);
    skips.push_back(h);
    h = nn::maxpool2x2(h);
  }
  h = bottleneck_.forward(h);
  for (std::size_t d = 0; d < dec_.size(); ++d) {
    const std::size_t k = dec_.size() - 1 - d;  // matching encoder stage
    h = nn::upsample_nearest2x(h);
    Var skip = skips[k];
    if (cfg_.attention_gates) skip = gates_[d].forward(skip, h);
    h = dec_[d].forward(ad::concat({h, skip}, 1));
  }
  Output out;
  out.surface_logits = nn::conv2d(h, head_s_w_, head_s_b_, 1, 0);
  if (cfg_.texture_head) out.texture = ad::sigmoid(nn::conv2d(h, head_t_w_, head_t_b_, 1, 0));
  return out;
}

StyleEncoder::StyleEncoder(const NetworkConfig& cfg, nn::ParamStore& params, std::mt19937_64& rng)
    : cfg_(cfg) {
  std::int64_t cin = 1 + (cfg_.style_uses_factors ? cfg_.factor_channels() : 0);
  const std::int64_t widths[3] = {cfg_.base_channels, cfg_.base_channels * 2, cfg_.base_channels * 4};
  for (int k = 0; k < 3; ++k) {
    ConvIN c;
    c.w = params.add("style.conv" + std::to_string(k) + ".w",
                     nn::kaiming_conv(widths[k], cin, 3, 3, rng, kLeakyGain));
    c.b = params.add("style.conv" + std::to_string(k) + ".b", Tensor::zeros({widths[k]}));
    c.ng = params.add("style.norm" + std::to_string(k) + ".g", Tensor::full({widths[k]}, 1.0));
    c.nb = params.add("style.norm" + std::to_string(k) + ".b", Tensor::zeros({widths[k]}));
    convs_.push_back(c);
    cin = widths[k];
  }
  mean_w_ = params.add("style.mean.w", nn::kaiming_linear(cfg_.style_dim, cin, rng, 1.0));
  mean_b_ = params.add("style.mean.b", Tensor::zeros({cfg_.style_dim}));
  logvar_w_ = params.add("style.logvar.w", nn::kaiming_linear(cfg_.style_dim, cin, rng, 1.0));
  logvar_b_ = params.add("style.logvar.b", Tensor::zeros({cfg_.style_dim}));
}

StyleCode StyleEncoder::forward(const Var& images, const Var& factors, const Tensor* noise) const {
  require(images->value.rank() == 4, "style encoder expects N x 1 x H x W images");
  Var h = images;
  if (cfg_.style_uses_factors) {
    require(factors != nullptr, "style encoder configured to use factors but none given");
    require(factors->value.rank() == 4 && factors->value.dim(0) == images->value.dim(0) &&
                factors->value.dim(2) == images->value.dim(2) &&
                factors->value.dim(3) == images->value.dim(3),
            "style encoder: factor stack shape " + factors->value.shape_str() +
                " does not match images " + images->value.shape_str());
    h = ad::concat({images, factors}, 1);
  }
  for (const auto& c : convs_) {
    h = nn::conv2d(h, c.w, c.b, 2);
    h = nn::instance_norm(h, c.ng, c.nb);
    h = ad::leaky_relu(h, kLeakySlope);
  }
  Var pooled = nn::global_avg_pool(h);
  StyleCode code;
  code.mean = nn::linear(pooled, mean_w_, mean_b_);
  code.logvar = nn::linear(pooled, logvar_w_, logvar_b_);
  if (noise != nullptr) {
    require(noise->same_shape(code.mean->value), "style noise must be N x Z");
    Var stddev = ad::exp(ad::mul_scalar(code.logvar, 0.5));
    code.sample = ad::add(code.mean, ad::mul(stddev, ad::constant(*noise)));
  } else {
    code.sample = code.mean;
  }
  return code;
}

FiLMDecoder::FiLMDecoder(const NetworkConfig& cfg, nn::ParamStore& params, std::mt19937_64& rng)
    : cfg_(cfg) {
  const std::int64_t C = cfg_.base_channels;
  const std::int64_t hidden = 4 * cfg_.base_channels;
  mlp_w_ = params.add("dec.mlp.w", nn::kaiming_linear(hidden, cfg_.style_dim, rng, kLeakyGain));
  mlp_b_ = params.add("dec.mlp.b", Tensor::zeros({hidden}));
  std::int64_t cin = cfg_.factor_channels();
  for (std::int64_t k = 0; k < kFilmLayers; ++k) {
    // Zero-init FiLM heads: with z = 0 the decoder reduces to plain convs.
    film_heads_.emplace_back(
        params.add("dec.film" + std::to_string(k) + ".w", Tensor::zeros({2 * C, hidden})),
        params.add("dec.film" + std::to_string(k) + ".b", Tensor::zeros({2 * C})));
    convs_.emplace_back(
        params.add("dec.conv" + std::to_string(k) + ".w", nn::kaiming_conv(C, cin, 3, 3, rng, kLeakyGain)),
        params.add("dec.conv" + std::to_string(k) + ".b", Tensor::zeros({C})));
    cin = C;
  }
  out_w_ = params.add("dec.out.w", nn::kaiming_conv(1, C, 1, 1, rng, 1.0));
  out_b_ = params.add("dec.out.b", Tensor::zeros({1}));
}

FiLMParams FiLMDecoder::map_style(const Var& style_sample) const {
  require(style_sample->value.rank() == 2 && style_sample->value.dim(1) == cfg_.style_dim,
          "decoder: style sample must be N x Z");
  const std::int64_t C = cfg_.base_channels;
  Var hidden = ad::leaky_relu(nn::linear(style_sample, mlp_w_, mlp_b_), kLeakySlope);
  FiLMParams film;
  for (const auto& [w, b] : film_heads_) {
    Var both = nn::linear(hidden, w, b);  // N x 2C
    film.layers.emplace_back(ad::narrow(both, 1, 0, C), ad::narrow(both, 1, C, C));
  }
  return film;
}

Var FiLMDecoder::forward(const Var& factors, const FiLMParams& film) const {
  require(factors->value.rank() == 4 && factors->value.dim(1) == cfg_.factor_channels(),
          "decoder: factor stack must be N x " + std::to_string(cfg_.factor_channels()) +
              " x H x W, got " + factors->value.shape_str());
  require(static_cast<std::int64_t>(film.layers.size()) == kFilmLayers,
          "decoder: expected " + std::to_string(kFilmLayers) + " FiLM layers");
  Var h = factors;
  for (std::int64_t k = 0; k < kFilmLayers; ++k) {
    h = nn::conv2d(h, convs_[static_cast<std::size_t>(k)].first,
                   convs_[static_cast<std::size_t>(k)].second);
    h = nn::film(h, film.layers[static_cast<std::size_t>(k)].first,
                 film.layers[static_cast<std::size_t>(k)].second);
    h = ad::leaky_relu(h, kLeakySlope);
  }
  return nn::conv2d(h, out_w_, out_b_, 1, 0);
}

Model::Model(const NetworkConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(init_seed);
  anatomy_ = std::make_unique<AnatomyEncoder>(cfg_, params_, rng);
  style_ = std::make_unique<StyleEncoder>(cfg_, params_, rng);
  decoder_ = std::make_unique<FiLMDecoder>(cfg_, params_, rng);
}

AnatomyEncoder::Output Model::anatomy_encode(const Var& images) const {
  return anatomy_->forward(images);
}

StyleCode Model::style_encode(const Var& images, const Var& factors, const Tensor* noise) const {
  return style_->forward(images, factors, noise);
}

Var Model::decode(const Var& factors, const StyleCode& style) const {
  return decoder_->forward(factors, decoder_->map_style(style.sample));
}

FiLMParams Model::map_style(const Var& style_sample) const { return decoder_->map_style(style_sample); }

}  // namespace sdlayer::networks
