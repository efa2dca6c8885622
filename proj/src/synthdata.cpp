#include "sdlayer/synthdata.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

namespace sdlayer::synth {

namespace fs = std::filesystem;

namespace {

constexpr std::uint32_t kDatasetFormatVersion = 1;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  // splitmix64 over (seed, stream, index); decorrelates per-sample RNGs.
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1) + 0xbf58476d1ce4e5b9ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double clamped_gauss(std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return std::clamp(dist(rng), -3.0, 3.0);
}

std::uint32_t crc32_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

std::string crc_hex(std::uint32_t crc) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08x", crc);
  return buf;
}

std::string read_file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open file: " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot write file: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), "write failed: " + path.string());
}

std::string image_to_bytes(const Tensor& img) {
  std::string bytes(static_cast<std::size_t>(img.numel()) * 4, '\0');
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    const float f = static_cast<float>(img[i]);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int b = 0; b < 4; ++b)
      bytes[static_cast<std::size_t>(4 * i + b)] = static_cast<char>(bits >> (8 * b));
  }
  return bytes;
}

Tensor image_from_bytes(const std::string& bytes, std::int64_t H, std::int64_t W,
                        const std::string& what) {
  require(static_cast<std::int64_t>(bytes.size()) == 4 * H * W,
          "image file " + what + " has " + std::to_string(bytes.size()) + " bytes, expected " +
              std::to_string(4 * H * W) + " for " + std::to_string(H) + "x" + std::to_string(W));
  Tensor img({H, W});
  for (std::int64_t i = 0; i < H * W; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[static_cast<std::size_t>(4 * i + b)]))
              << (8 * b);
    float f;
    std::memcpy(&f, &bits, 4);
    img[i] = static_cast<double>(f);
  }
  return img;
}

std::string surfaces_to_text(const Tensor& s) {
  std::ostringstream os;
  os.precision(17);
  for (std::int64_t row = 0; row < s.dim(0); ++row) {
    for (std::int64_t col = 0; col < s.dim(1); ++col) {
      if (col) os << " ";
      os << s(row, col);
    }
    os << "\n";
  }
  return os.str();
}

Tensor surfaces_from_text(const std::string& text, std::int64_t S, std::int64_t W,
                          const std::string& what) {
  Tensor s({S, W});
  std::istringstream is(text);
  std::string line;
  std::int64_t row = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    require(row < S, "surface table " + what + " has more than " + std::to_string(S) + " rows");
    std::istringstream ls(line);
    for (std::int64_t col = 0; col < W; ++col) {
      require(static_cast<bool>(ls >> s(row, col)),
              "surface table " + what + " row " + std::to_string(row) + " has fewer than " +
                  std::to_string(W) + " columns");
    }
    double extra;
    require(!(ls >> extra), "surface table " + what + " row " + std::to_string(row) + " has extra columns");
    ++row;
  }
  require(row == S, "surface table " + what + " has " + std::to_string(row) + " rows, expected " +
                        std::to_string(S));
  return s;
}

}  // namespace

void SynthConfig::validate() const {
  require(samples >= 1, "synth: need at least one sample");
  require(volumes >= 1 && volumes <= samples, "synth: volumes must be in [1, samples]");
  require(surfaces >= 1 && height >= 8 && width >= 2, "synth: degenerate dimensions");
  require(min_gap > 0.0, "synth: min_gap must be positive");
  require(static_cast<double>(surfaces) * min_gap < static_cast<double>(height),
          "synth: S*min_gap must be smaller than the image height");
  require(1.0 + static_cast<double>(surfaces - 1) * min_gap <= static_cast<double>(height) - 2.0,
          "synth: surfaces cannot fit between rows 1 and H-2 with the requested min_gap");
  require(amplitude_min >= 0.0 && amplitude_max >= amplitude_min, "synth: bad amplitude bounds");
  require(frequency_min > 0.0 && frequency_max >= frequency_min, "synth: bad frequency bounds");
  require(bump_probability >= 0.0 && bump_probability <= 1.0, "synth: bump_probability in [0,1]");
  require(intensity_max > intensity_min, "synth: intensity range must be non-empty");
  require(speckle_strength >= 0.0, "synth: speckle_strength must be >= 0");
  require(labeled_fraction >= 0.0 && labeled_fraction <= 1.0, "synth: labeled_fraction in [0,1]");
}

VolumeStyle draw_volume_style(const SynthConfig& cfg, std::mt19937_64& rng) {
  const std::int64_t bands = cfg.surfaces + 1;
  std::uniform_real_distribution<double> intensity(cfg.intensity_min, cfg.intensity_max);
  const double min_sep = 0.3 * (cfg.intensity_max - cfg.intensity_min) / static_cast<double>(bands);
  VolumeStyle style;
  for (int attempt = 0; attempt < 64; ++attempt) {
    style.band_intensity.clear();
    for (std::int64_t b = 0; b < bands; ++b) style.band_intensity.push_back(intensity(rng));
    bool distinct = true;
    for (std::int64_t a = 0; a < bands && distinct; ++a)
      for (std::int64_t b = a + 1; b < bands; ++b)
        if (std::abs(style.band_intensity[static_cast<std::size_t>(a)] -
                     style.band_intensity[static_cast<std::size_t>(b)]) < min_sep) {
          distinct = false;
          break;
        }
    if (distinct) break;
  }
  // Mild per-volume speckle variation around the configured strength.
  std::uniform_real_distribution<double> spk(0.75, 1.25);
  style.speckle = cfg.speckle_strength * spk(rng);
  return style;
}

Tensor generate_surfaces(const SynthConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::int64_t S = cfg.surfaces, H = cfg.height, W = cfg.width;
  Tensor y({S, W});

  const double top = 0.18 * static_cast<double>(H);
  const double bottom = 0.85 * static_cast<double>(H);
  const double spacing = (bottom - top) / static_cast<double>(std::max<std::int64_t>(S, 2) - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> amp_dist(cfg.amplitude_min, cfg.amplitude_max);
  std::uniform_real_distribution<double> freq_dist(cfg.frequency_min, cfg.frequency_max);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);

  for (std::int64_t s = 0; s < S; ++s) {
    const double jitter = (unit(rng) - 0.5) * 0.4 * spacing;
    const double base = (S == 1) ? 0.5 * (top + bottom) : top + spacing * static_cast<double>(s) + jitter;
    double amp[3], freq[3], phase[3];
    for (int k = 0; k < 3; ++k) {
      amp[k] = amp_dist(rng) / static_cast<double>(k + 1);
      freq[k] = freq_dist(rng) * static_cast<double>(k + 1);
      phase[k] = phase_dist(rng);
    }
    const bool has_bump = unit(rng) < cfg.bump_probability;
    double bump_center = 0, bump_width = 1, bump_amp = 0;
    if (has_bump) {
      bump_center = (0.2 + 0.6 * unit(rng)) * static_cast<double>(W);
      bump_width = (0.04 + 0.08 * unit(rng)) * static_cast<double>(W);
      bump_amp = (unit(rng) < 0.5 ? -1.0 : 1.0) * (1.0 + (cfg.bump_amplitude_max - 1.0) * unit(rng));
    }
    for (std::int64_t i = 0; i < W; ++i) {
      const double x = static_cast<double>(i) / static_cast<double>(W);
      double v = base;
      for (int k = 0; k < 3; ++k)
        v += amp[k] * std::sin(2.0 * std::numbers::pi * freq[k] * x + phase[k]);
      if (has_bump) {
        const double d = (static_cast<double>(i) - bump_center) / bump_width;
        v += bump_amp * std::exp(-0.5 * d * d);
      }
      y(s, i) = v;
    }
  }

  // Post-process: clamp, push down to respect min_gap, pull back any column
  // running past H-2, then a final top-clamped cascade.
  const double lo = 1.0, hi = static_cast<double>(H) - 2.0;
  for (std::int64_t i = 0; i < W; ++i) {
    for (std::int64_t s = 0; s < S; ++s) y(s, i) = std::clamp(y(s, i), lo, hi);
    for (std::int64_t s = 1; s < S; ++s) y(s, i) = std::max(y(s, i), y(s - 1, i) + cfg.min_gap);
    const double overflow = y(S - 1, i) - hi;
    if (overflow > 0.0)
      for (std::int64_t s = 0; s < S; ++s) y(s, i) -= overflow;
    y(0, i) = std::max(y(0, i), lo);
    for (std::int64_t s = 1; s < S; ++s) y(s, i) = std::max(y(s, i), y(s - 1, i) + cfg.min_gap);
  }
  return y;
}

Tensor render_bscan(const Tensor& surfaces, const SynthConfig& cfg, const VolumeStyle& style,
                    std::mt19937_64& rng) {
  const std::int64_t S = cfg.surfaces, H = cfg.height, W = cfg.width;
  require(surfaces.rank() == 2 && surfaces.dim(0) == S && surfaces.dim(1) == W,
          "render_bscan: surfaces must be SxW");
  require(static_cast<std::int64_t>(style.band_intensity.size()) == S + 1,
          "render_bscan: need S+1 band intensities");

  Tensor img({H, W});
  for (std::int64_t i = 0; i < W; ++i) {
    for (std::int64_t r = 0; r < H; ++r) {
      double v = style.band_intensity[0];
      for (std::int64_t s = 0; s < S; ++s) {
        // Linear blend over [y-0.5, y+0.5] between adjacent bands.
        const double tr = std::clamp(static_cast<double>(r) - surfaces(s, i) + 0.5, 0.0, 1.0);
        v += (style.band_intensity[static_cast<std::size_t>(s + 1)] -
              style.band_intensity[static_cast<std::size_t>(s)]) *
             tr;
      }
      img(r, i) = v;
    }
  }
  if (style.speckle > 0.0) {
    for (std::int64_t i = 0; i < img.numel(); ++i) img[i] *= 1.0 + style.speckle * clamped_gauss(rng);
  }

  // Standardize to zero mean / unit variance, then quantize through float32
  // so on-disk round trips are bit-exact.
  const double mean = img.sum() / static_cast<double>(img.numel());
  double var = 0.0;
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    const double d = img[i] - mean;
    var += d * d;
  }
  var /= static_cast<double>(img.numel());
  const double inv_std = 1.0 / std::max(std::sqrt(var), 1e-12);
  for (std::int64_t i = 0; i < img.numel(); ++i)
    img[i] = static_cast<double>(static_cast<float>((img[i] - mean) * inv_std));
  return img;
}

Tensor render_bscan(const Tensor& surfaces, const SynthConfig& cfg, std::mt19937_64& rng) {
  const VolumeStyle style = draw_volume_style(cfg, rng);
  return render_bscan(surfaces, cfg, style, rng);
}

Dataset generate_dataset(const SynthConfig& cfg) {
  cfg.validate();
  Dataset out;
  out.reserve(static_cast<std::size_t>(cfg.samples));
  const std::int64_t per_volume = (cfg.samples + cfg.volumes - 1) / cfg.volumes;
  std::vector<VolumeStyle> styles;
  for (std::int64_t v = 0; v < cfg.volumes; ++v) {
    std::mt19937_64 vol_rng(mix_seed(cfg.seed, 1, static_cast<std::uint64_t>(v)));
    styles.push_back(draw_volume_style(cfg, vol_rng));
  }
  std::int64_t labeled_so_far = 0;
  for (std::int64_t idx = 0; idx < cfg.samples; ++idx) {
    const std::int64_t vol = idx / per_volume;
    std::mt19937_64 rng(mix_seed(cfg.seed, 2, static_cast<std::uint64_t>(idx)));
    Sample s;
    Tensor surfaces = generate_surfaces(cfg, rng);
    s.image = render_bscan(surfaces, cfg, styles[static_cast<std::size_t>(vol)], rng);
    // Even spread of labels: sample idx is labeled when the running target
    // count increases, keeping the realized fraction within one sample.
    const double target = cfg.labeled_fraction * static_cast<double>(idx + 1);
    if (static_cast<double>(labeled_so_far) + 0.5 <= target ||
        (cfg.labeled_fraction >= 1.0)) {
      s.surfaces = std::move(surfaces);
      ++labeled_so_far;
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "vol%03lld_b%03lld", static_cast<long long>(vol),
                  static_cast<long long>(idx % per_volume));
    s.id = buf;
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(const Dataset& samples, const std::string& dir) {
  require(!samples.empty(), "write_dataset: empty dataset");
  fs::create_directories(dir);
  const std::int64_t H = samples.front().image.dim(0);
  const std::int64_t W = samples.front().image.dim(1);
  std::int64_t S = -1;
  nlohmann::json entries = nlohmann::json::array();
  for (const Sample& s : samples) {
    require(s.image.rank() == 2 && s.image.dim(0) == H && s.image.dim(1) == W,
            "write_dataset: inconsistent image dims for sample " + s.id);
    nlohmann::json e;
    e["id"] = s.id;
    e["labeled"] = s.surfaces.has_value();
    const std::string img_name = s.id + ".img";
    const std::string img_bytes = image_to_bytes(s.image);
    write_file_bytes(fs::path(dir) / img_name, img_bytes);
    e["image"] = img_name;
    e["image_crc32"] = crc_hex(crc32_of(img_bytes));
    if (s.surfaces) {
      if (S < 0) S = s.surfaces->dim(0);
      require(s.surfaces->rank() == 2 && s.surfaces->dim(0) == S && s.surfaces->dim(1) == W,
              "write_dataset: inconsistent surface dims for sample " + s.id);
      const std::string srf_name = s.id + ".srf";
      const std::string srf_bytes = surfaces_to_text(*s.surfaces);
      write_file_bytes(fs::path(dir) / srf_name, srf_bytes);
      e["surfaces"] = srf_name;
      e["surfaces_crc32"] = crc_hex(crc32_of(srf_bytes));
    }
    entries.push_back(std::move(e));
  }
  nlohmann::json manifest;
  manifest["format_version"] = kDatasetFormatVersion;
  manifest["height"] = H;
  manifest["width"] = W;
  if (S >= 0) manifest["surfaces"] = S;
  manifest["samples"] = std::move(entries);

  const fs::path tmp = fs::path(dir) / "manifest.json.tmp";
  write_file_bytes(tmp, manifest.dump(2) + "\n");
  fs::rename(tmp, fs::path(dir) / "manifest.json");
}

Dataset read_dataset(const std::string& dir) {
  const fs::path manifest_path = fs::path(dir) / "manifest.json";
  require(fs::exists(manifest_path), "dataset manifest not found: " + manifest_path.string());
  nlohmann::json manifest = nlohmann::json::parse(read_file_bytes(manifest_path));
  require(manifest.at("format_version").get<std::uint32_t>() == kDatasetFormatVersion,
          "unsupported dataset format version");
  const std::int64_t H = manifest.at("height").get<std::int64_t>();
  const std::int64_t W = manifest.at("width").get<std::int64_t>();
  const std::int64_t S = manifest.contains("surfaces") ? manifest.at("surfaces").get<std::int64_t>() : -1;

  Dataset out;
  for (const auto& e : manifest.at("samples")) {
    Sample s;
    s.id = e.at("id").get<std::string>();
    const std::string img_name = e.at("image").get<std::string>();
    const std::string img_bytes = read_file_bytes(fs::path(dir) / img_name);
    const std::string want_crc = e.at("image_crc32").get<std::string>();
    const std::string got_crc = crc_hex(crc32_of(img_bytes));
    require(got_crc == want_crc, "checksum mismatch for " + img_name + ": manifest says " +
                                     want_crc + ", file has " + got_crc);
    s.image = image_from_bytes(img_bytes, H, W, img_name);
    if (e.at("labeled").get<bool>()) {
      require(S > 0, "dataset manifest lists labeled samples but no surface count");
      const std::string srf_name = e.at("surfaces").get<std::string>();
      const std::string srf_bytes = read_file_bytes(fs::path(dir) / srf_name);
      const std::string want_s = e.at("surfaces_crc32").get<std::string>();
      const std::string got_s = crc_hex(crc32_of(srf_bytes));
      require(got_s == want_s, "checksum mismatch for " + srf_name);
      s.surfaces = surfaces_from_text(srf_bytes, S, W, srf_name);
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::string volume_of(const std::string& sample_id) {
  const auto pos = sample_id.rfind('_');
  return pos == std::string::npos ? sample_id : sample_id.substr(0, pos);
}

Sample hflip(const Sample& s) {
  Sample out;
  out.id = s.id;
  const std::int64_t H = s.image.dim(0), W = s.image.dim(1);
  out.image = Tensor({H, W});
  for (std::int64_t r = 0; r < H; ++r)
    for (std::int64_t i = 0; i < W; ++i) out.image(r, i) = s.image(r, W - 1 - i);
  if (s.surfaces) {
    const std::int64_t S = s.surfaces->dim(0);
    Tensor flipped({S, W});
    for (std::int64_t srf = 0; srf < S; ++srf)
      for (std::int64_t i = 0; i < W; ++i) flipped(srf, i) = (*s.surfaces)(srf, W - 1 - i);
    out.surfaces = std::move(flipped);
  }
  return out;
}

}  // namespace sdlayer::synth
