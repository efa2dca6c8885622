#include "sdlayer/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace sdlayer::img {

namespace {
unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}
}  // namespace

void write_pgm(const std::string& path, const Tensor& gray) {
  require(gray.rank() == 2, "write_pgm expects an H x W tensor");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot write image: " + path);
  out << "P5\n" << gray.dim(1) << " " << gray.dim(0) << "\n255\n";
  for (std::int64_t i = 0; i < gray.numel(); ++i) out.put(static_cast<char>(to_byte(gray[i])));
  require(out.good(), "image write failed: " + path);
}

void write_ppm(const std::string& path, const Tensor& rgb) {
  require(rgb.rank() == 3 && rgb.dim(0) == 3, "write_ppm expects a 3 x H x W tensor");
  const std::int64_t H = rgb.dim(1), W = rgb.dim(2);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot write image: " + path);
  out << "P6\n" << W << " " << H << "\n255\n";
  for (std::int64_t r = 0; r < H; ++r)
    for (std::int64_t c = 0; c < W; ++c)
      for (std::int64_t ch = 0; ch < 3; ++ch) out.put(static_cast<char>(to_byte(rgb(ch, r, c))));
  require(out.good(), "image write failed: " + path);
}

Tensor normalize_for_display(const Tensor& image) {
  Tensor out(image.shape());
  const double lo = image.min(), hi = image.max();
  if (hi - lo < 1e-12) {
    out.fill(0.5);
    return out;
  }
  const double inv = 1.0 / (hi - lo);
  for (std::int64_t i = 0; i < image.numel(); ++i) out[i] = (image[i] - lo) * inv;
  return out;
}

Tensor overlay_surfaces(const Tensor& image, const Tensor* predicted, const Tensor* reference) {
  require(image.rank() == 2, "overlay_surfaces expects an H x W image");
  const std::int64_t H = image.dim(0), W = image.dim(1);
  Tensor base = normalize_for_display(image);
  Tensor rgb({3, H, W});
  for (std::int64_t r = 0; r < H; ++r)
    for (std::int64_t c = 0; c < W; ++c)
      for (std::int64_t ch = 0; ch < 3; ++ch) rgb(ch, r, c) = base(r, c);

  auto draw = [&](const Tensor& curves, int channel) {
    require(curves.rank() == 2 && curves.dim(1) == W, "surface table must be S x W");
    for (std::int64_t s = 0; s < curves.dim(0); ++s) {
      for (std::int64_t c = 0; c < W; ++c) {
        const std::int64_t r = std::clamp<std::int64_t>(std::llround(curves(s, c)), 0, H - 1);
        for (std::int64_t ch = 0; ch < 3; ++ch) rgb(ch, r, c) = (ch == channel) ? 1.0 : 0.0;
      }
    }
  };
  if (reference) draw(*reference, 1);  // green
  if (predicted) draw(*predicted, 0);  // red on top
  return rgb;
}

}  // namespace sdlayer::img
