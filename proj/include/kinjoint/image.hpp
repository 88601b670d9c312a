#pragma once

// Image I/O and resampling. Images travel as HWC tensors with values in
// [0,1]; on disk they are binary PPM (P6, 8-bit RGB).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include "kinjoint/tensor.hpp"

namespace kinjoint {

namespace detail {

inline int ppm_read_int(std::istream& is) {
  // skips whitespace and '#' comments per the netpbm grammar
  int c = is.get();
  while (c == '#' || std::isspace(c)) {
    if (c == '#')
      while (c != '\n' && c != EOF) c = is.get();
    c = is.get();
  }
  int value = 0;
  bool any = false;
  while (c >= '0' && c <= '9') {
    value = value * 10 + (c - '0');
    any = true;
    c = is.get();
  }
  if (!any) throw std::runtime_error("ppm: malformed header");
  return value;
}

}  // namespace detail

inline Tensor load_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("ppm: cannot open " + path);
  char magic[2];
  is.read(magic, 2);
  if (!is || magic[0] != 'P' || magic[1] != '6')
    throw std::runtime_error("ppm: " + path + " is not a binary PPM (P6)");
  const int w = detail::ppm_read_int(is);
  const int h = detail::ppm_read_int(is);
  const int maxval = detail::ppm_read_int(is);
  if (w < 1 || h < 1 || maxval != 255)
    throw std::runtime_error("ppm: unsupported header in " + path);
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  is.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (!is) throw std::runtime_error("ppm: truncated pixel data in " + path);
  Tensor img({h, w, 3});
  for (std::size_t i = 0; i < raw.size(); ++i)
    img[static_cast<std::int64_t>(i)] = raw[i] / 255.0;
  return img;
}

inline void save_ppm(const Tensor& img, const std::string& path) {
  if (img.dim() != 3 || img.shape()[2] != 3)
    throw std::runtime_error("ppm: expected HWC image with 3 channels, got " +
                             shape_str(img.shape()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("ppm: cannot open " + path + " for writing");
  os << "P6\n" << img.shape()[1] << ' ' << img.shape()[0] << "\n255\n";
  std::vector<unsigned char> raw(static_cast<std::size_t>(img.numel()));
  for (std::int64_t i = 0; i < img.numel(); ++i) {
    const double v = std::clamp(img[i], 0.0, 1.0);
    raw[static_cast<std::size_t>(i)] =
        static_cast<unsigned char>(std::lround(v * 255.0));
  }
  os.write(reinterpret_cast<const char*>(raw.data()),
           static_cast<std::streamsize>(raw.size()));
  if (!os) throw std::runtime_error("ppm: write failed for " + path);
}

// Bilinear sample with border clamp; y, x in pixel coordinates.
inline void bilinear_sample(const Tensor& img, double y, double x,
                            double* rgb) {
  const int h = img.shape()[0], w = img.shape()[1];
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  const double* d = img.data();
  for (int c = 0; c < 3; ++c) {
    const double v00 = d[(y0 * w + x0) * 3 + c];
    const double v01 = d[(y0 * w + x1) * 3 + c];
    const double v10 = d[(y1 * w + x0) * 3 + c];
    const double v11 = d[(y1 * w + x1) * 3 + c];
    rgb[c] = v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx +
             v10 * fy * (1 - fx) + v11 * fy * fx;
  }
}

inline Tensor resize_bilinear(const Tensor& img, int out_h, int out_w) {
  if (img.dim() != 3 || img.shape()[2] != 3)
    throw std::runtime_error("resize: expected HWC image, got " +
                             shape_str(img.shape()));
  if (out_h < 1 || out_w < 1)
    throw std::runtime_error("resize: bad target size");
  if (img.shape()[0] == out_h && img.shape()[1] == out_w) return img;
  Tensor out({out_h, out_w, 3});
  const double sy =
      static_cast<double>(img.shape()[0]) / static_cast<double>(out_h);
  const double sx =
      static_cast<double>(img.shape()[1]) / static_cast<double>(out_w);
  double rgb[3];
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      bilinear_sample(img, (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5, rgb);
      for (int c = 0; c < 3; ++c) out[(y * out_w + x) * 3 + c] = rgb[c];
    }
  return out;
}

}  // namespace kinjoint
