#pragma once

// Seeded augmentation pipeline: brightness/contrast/saturation jitter,
// grayscale, horizontal flip, corner-displacement perspective warp and
// random resize-crop. Output is clamped to [0,1]. A config with all
// probabilities at zero is the identity.

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "kinjoint/image.hpp"
#include "kinjoint/rng.hpp"
#include "kinjoint/tensor.hpp"

namespace kinjoint {

struct AugmentConfig {
  double jitter_prob = 1.0;      // brightness/contrast/saturation together
  double jitter_range = 0.2;     // factors drawn in [1-r, 1+r]
  double grayscale_prob = 0.1;
  double hflip_prob = 0.5;
  double perspective_prob = 0.5;
  double perspective_max_shift = 0.1;  // corner displacement, fraction of size
  double crop_prob = 0.5;
  double crop_min_scale = 0.8;

  static AugmentConfig disabled() {
    AugmentConfig c;
    c.jitter_prob = 0.0;
    c.grayscale_prob = 0.0;
    c.hflip_prob = 0.0;
    c.perspective_prob = 0.0;
    c.crop_prob = 0.0;
    return c;
  }
};

namespace detail {

inline double luminance(const double* rgb) {
  return 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
}

}  // namespace detail

inline Tensor augment(const Tensor& image, const AugmentConfig& cfg,
                      std::uint64_t seed) {
  if (image.dim() != 3 || image.shape()[2] != 3)
    throw std::runtime_error("augment: expected HWC image with 3 channels, got " +
                             shape_str(image.shape()));
  const int h = image.shape()[0], w = image.shape()[1];
  Rng rng(mix_seed(seed, 0xA06));
  Tensor img = Tensor::from_data(image.shape(), image.vec());

  if (rng.bernoulli(cfg.jitter_prob)) {
    const double fb = rng.uniform(1.0 - cfg.jitter_range, 1.0 + cfg.jitter_range);
    const double fc = rng.uniform(1.0 - cfg.jitter_range, 1.0 + cfg.jitter_range);
    const double fs = rng.uniform(1.0 - cfg.jitter_range, 1.0 + cfg.jitter_range);
    double mean = 0.0;
    for (std::int64_t i = 0; i < img.numel(); i += 3)
      mean += detail::luminance(img.data() + i);
    mean /= static_cast<double>(h) * w;
    for (std::int64_t i = 0; i < img.numel(); i += 3) {
      double* px = img.data() + i;
      for (int c = 0; c < 3; ++c) px[c] *= fb;                    // brightness
      for (int c = 0; c < 3; ++c) px[c] = mean + fc * (px[c] - mean);  // contrast
      const double gray = detail::luminance(px);
      for (int c = 0; c < 3; ++c) px[c] = gray + fs * (px[c] - gray);  // saturation
    }
  }

  if (rng.bernoulli(cfg.grayscale_prob)) {
    for (std::int64_t i = 0; i < img.numel(); i += 3) {
      double* px = img.data() + i;
      const double gray = detail::luminance(px);
      px[0] = px[1] = px[2] = gray;
    }
  }

  if (rng.bernoulli(cfg.hflip_prob)) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w / 2; ++x)
        for (int c = 0; c < 3; ++c)
          std::swap(img[(y * w + x) * 3 + c],
                    img[(y * w + (w - 1 - x)) * 3 + c]);
  }

  if (rng.bernoulli(cfg.perspective_prob)) {
    // displace the four source corners by up to max_shift of the extent and
    // sample with bilinear interpolation of the corner offsets
    double dx[4], dy[4];
    for (int k = 0; k < 4; ++k) {
      dx[k] = rng.uniform(-cfg.perspective_max_shift, cfg.perspective_max_shift);
      dy[k] = rng.uniform(-cfg.perspective_max_shift, cfg.perspective_max_shift);
    }
    Tensor warped({h, w, 3});
    double rgb[3];
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double u = w > 1 ? static_cast<double>(x) / (w - 1) : 0.0;
        const double v = h > 1 ? static_cast<double>(y) / (h - 1) : 0.0;
        // corners ordered 00, 10, 01, 11 in (u,v)
        const double ox = (1 - u) * (1 - v) * dx[0] + u * (1 - v) * dx[1] +
                          (1 - u) * v * dx[2] + u * v * dx[3];
        const double oy = (1 - u) * (1 - v) * dy[0] + u * (1 - v) * dy[1] +
                          (1 - u) * v * dy[2] + u * v * dy[3];
        bilinear_sample(img, y + oy * h, x + ox * w, rgb);
        for (int c = 0; c < 3; ++c) warped[(y * w + x) * 3 + c] = rgb[c];
      }
    img = warped;
  }

  if (rng.bernoulli(cfg.crop_prob)) {
    const double scale = rng.uniform(cfg.crop_min_scale, 1.0);
    const int ch = std::max(1, static_cast<int>(std::lround(scale * h)));
    const int cw = std::max(1, static_cast<int>(std::lround(scale * w)));
    const int y0 = ch < h ? rng.index(h - ch + 1) : 0;
    const int x0 = cw < w ? rng.index(w - cw + 1) : 0;
    Tensor crop({ch, cw, 3});
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x)
        for (int c = 0; c < 3; ++c)
          crop[(y * cw + x) * 3 + c] = img[((y + y0) * w + (x + x0)) * 3 + c];
    img = resize_bilinear(crop, h, w);
  }

  for (std::int64_t i = 0; i < img.numel(); ++i)
    img[i] = std::clamp(img[i], 0.0, 1.0);
  return img;
}

}  // namespace kinjoint
