#pragma once

// Raster I/O and the preprocessing kernels: binary PGM/PPM read/write,
// bicubic resize (a = -0.5, edge clamp), bilinear rotation, horizontal flip,
// per-channel normalization. Geometry math runs in double and rounds to
// float once at the end.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "hybridroi/common.hpp"
#include "hybridroi/rng.hpp"

namespace hybridroi {

// 3xHxW float image, CHW layout, values in [0,1] until normalize()
struct ImageTensor {
  int64_t height{0};
  int64_t width{0};
  std::vector<float> data;  // 3 * height * width

  float at(int64_t c, int64_t y, int64_t x) const {
    return data[static_cast<size_t>((c * height + y) * width + x)];
  }
  float& at(int64_t c, int64_t y, int64_t x) {
    return data[static_cast<size_t>((c * height + y) * width + x)];
  }
};

struct RawImage {
  int64_t width{0};
  int64_t height{0};
  int channels{1};  // 1 = grayscale, 3 = RGB
  std::vector<uint8_t> pixels;  // interleaved
};

namespace detail {

inline int pnm_next_int(std::istream& in, const std::string& path) {
  // skips whitespace and '#' comments
  for (;;) {
    int c = in.peek();
    if (c == EOF) throw DataError(path + ": truncated PNM header");
    if (c == '#') {
      std::string line;
      std::getline(in, line);
      continue;
    }
    if (std::isspace(c)) {
      in.get();
      continue;
    }
    break;
  }
  int v = 0;
  in >> v;
  if (!in) throw DataError(path + ": malformed PNM header");
  return v;
}

}  // namespace detail

// Binary PGM (P5) / PPM (P6), 8-bit only.
inline RawImage read_raster(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open");
  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (m0 != 'P' || (m1 != '5' && m1 != '6'))
    throw DataError(path + ": unsupported raster format (want binary PGM/PPM)");
  RawImage img;
  img.channels = (m1 == '6') ? 3 : 1;
  img.width = detail::pnm_next_int(in, path);
  img.height = detail::pnm_next_int(in, path);
  const int maxval = detail::pnm_next_int(in, path);
  if (img.width <= 0 || img.height <= 0) throw DataError(path + ": bad dimensions");
  if (maxval != 255) throw DataError(path + ": only 8-bit rasters supported");
  in.get();  // single whitespace after maxval
  const size_t n = static_cast<size_t>(img.width * img.height * img.channels);
  img.pixels.resize(n);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n) throw DataError(path + ": truncated pixel data");
  return img;
}

inline void write_pgm(const std::string& path, const uint8_t* gray, int64_t width,
                      int64_t height) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path + ": cannot write");
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray), static_cast<std::streamsize>(width * height));
  if (!out) throw IoError(path + ": write failed");
}

inline void write_ppm(const std::string& path, const uint8_t* rgb, int64_t width,
                      int64_t height) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path + ": cannot write");
  out << "P6\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb), static_cast<std::streamsize>(width * height * 3));
  if (!out) throw IoError(path + ": write failed");
}

// Loads an 8-bit grayscale or RGB raster into a 3-channel float image in
// [0,1]. Grayscale is replicated; RGB is collapsed to Rec.601 luma first so
// the three channels are always identical.
inline ImageTensor load_image(const std::string& path) {
  RawImage raw = read_raster(path);
  ImageTensor img;
  img.height = raw.height;
  img.width = raw.width;
  const int64_t hw = raw.height * raw.width;
  img.data.resize(static_cast<size_t>(3 * hw));
  for (int64_t i = 0; i < hw; ++i) {
    float v;
    if (raw.channels == 1) {
      v = static_cast<float>(raw.pixels[static_cast<size_t>(i)]) / 255.0f;
    } else {
      const double r = raw.pixels[static_cast<size_t>(3 * i)];
      const double g = raw.pixels[static_cast<size_t>(3 * i + 1)];
      const double b = raw.pixels[static_cast<size_t>(3 * i + 2)];
      v = static_cast<float>((0.299 * r + 0.587 * g + 0.114 * b) / 255.0);
    }
    img.data[static_cast<size_t>(i)] = v;
    img.data[static_cast<size_t>(hw + i)] = v;
    img.data[static_cast<size_t>(2 * hw + i)] = v;
  }
  return img;
}

namespace detail {

// Keys cubic kernel, a = -0.5
inline double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::fabs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

struct CubicTaps {
  std::array<int64_t, 4> idx;
  std::array<double, 4> w;  // normalized to sum 1
};

inline CubicTaps cubic_taps(double src, int64_t extent) {
  CubicTaps taps;
  const int64_t base = static_cast<int64_t>(std::floor(src)) - 1;
  double sum = 0.0;
  for (int j = 0; j < 4; ++j) {
    const int64_t p = base + j;
    taps.idx[static_cast<size_t>(j)] = std::clamp<int64_t>(p, 0, extent - 1);
    taps.w[static_cast<size_t>(j)] = cubic_weight(src - static_cast<double>(p));
    sum += taps.w[static_cast<size_t>(j)];
  }
  for (auto& w : taps.w) w /= sum;  // partition of unity, keeps constants exact
  return taps;
}

}  // namespace detail

// Separable bicubic resize with center-aligned sampling and edge clamping.
// Output values are clipped to [0,1].
inline ImageTensor resize_bicubic(const ImageTensor& src, int64_t out_h, int64_t out_w) {
  check_dim(src.height >= 4 && src.width >= 4,
            "resize_bicubic: source must be at least 4x4, got " + std::to_string(src.height) +
                "x" + std::to_string(src.width));
  check_dim(out_h >= 1 && out_w >= 1, "resize_bicubic: degenerate target size");
  const double scale_y = static_cast<double>(src.height) / static_cast<double>(out_h);
  const double scale_x = static_cast<double>(src.width) / static_cast<double>(out_w);

  std::vector<detail::CubicTaps> xtaps(static_cast<size_t>(out_w));
  for (int64_t ox = 0; ox < out_w; ++ox)
    xtaps[static_cast<size_t>(ox)] =
        detail::cubic_taps((static_cast<double>(ox) + 0.5) * scale_x - 0.5, src.width);
  std::vector<detail::CubicTaps> ytaps(static_cast<size_t>(out_h));
  for (int64_t oy = 0; oy < out_h; ++oy)
    ytaps[static_cast<size_t>(oy)] =
        detail::cubic_taps((static_cast<double>(oy) + 0.5) * scale_y - 0.5, src.height);

  ImageTensor dst;
  dst.height = out_h;
  dst.width = out_w;
  dst.data.resize(static_cast<size_t>(3 * out_h * out_w));

  // horizontal pass into a temp plane, then vertical; no intermediate clipping
  std::vector<double> tmp(static_cast<size_t>(src.height * out_w));
  for (int c = 0; c < 3; ++c) {
    for (int64_t y = 0; y < src.height; ++y)
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const auto& t = xtaps[static_cast<size_t>(ox)];
        double acc = 0.0;
        for (int j = 0; j < 4; ++j)
          acc += t.w[static_cast<size_t>(j)] *
                 static_cast<double>(src.at(c, y, t.idx[static_cast<size_t>(j)]));
        tmp[static_cast<size_t>(y * out_w + ox)] = acc;
      }
    for (int64_t oy = 0; oy < out_h; ++oy)
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const auto& t = ytaps[static_cast<size_t>(oy)];
        double acc = 0.0;
        for (int j = 0; j < 4; ++j)
          acc += t.w[static_cast<size_t>(j)] *
                 tmp[static_cast<size_t>(t.idx[static_cast<size_t>(j)] * out_w + ox)];
        dst.at(c, oy, ox) = static_cast<float>(std::clamp(acc, 0.0, 1.0));
      }
  }
  return dst;
}

inline ImageTensor flip_horizontal(const ImageTensor& src) {
  ImageTensor dst = src;
  for (int c = 0; c < 3; ++c)
    for (int64_t y = 0; y < src.height; ++y)
      for (int64_t x = 0; x < src.width; ++x) dst.at(c, y, x) = src.at(c, y, src.width - 1 - x);
  return dst;
}

// Rotates image content by `degrees` about the center (positive = clockwise
// on screen), bilinear resampling, zero fill outside the source.
inline ImageTensor rotate_bilinear(const ImageTensor& src, double degrees) {
  const double theta = degrees * M_PI / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double cx = static_cast<double>(src.width - 1) / 2.0;
  const double cy = static_cast<double>(src.height - 1) / 2.0;
  ImageTensor dst;
  dst.height = src.height;
  dst.width = src.width;
  dst.data.assign(src.data.size(), 0.0f);
  for (int64_t yo = 0; yo < src.height; ++yo)
    for (int64_t xo = 0; xo < src.width; ++xo) {
      const double dx = static_cast<double>(xo) - cx;
      const double dy = static_cast<double>(yo) - cy;
      const double xi = cx + c * dx + s * dy;
      const double yi = cy - s * dx + c * dy;
      const int64_t x0 = static_cast<int64_t>(std::floor(xi));
      const int64_t y0 = static_cast<int64_t>(std::floor(yi));
      const double fx = xi - static_cast<double>(x0);
      const double fy = yi - static_cast<double>(y0);
      for (int ch = 0; ch < 3; ++ch) {
        auto sample = [&](int64_t y, int64_t x) -> double {
          if (y < 0 || y >= src.height || x < 0 || x >= src.width) return 0.0;
          return static_cast<double>(src.at(ch, y, x));
        };
        const double v = (1.0 - fy) * ((1.0 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1)) +
                         fy * ((1.0 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
        dst.at(ch, yo, xo) = static_cast<float>(v);
      }
    }
  return dst;
}

// (x - mean_c) / std_c per channel
inline void normalize(ImageTensor& img, const std::array<float, 3>& mean,
                      const std::array<float, 3>& stddev) {
  for (int c = 0; c < 3; ++c) {
    check(stddev[static_cast<size_t>(c)] > 0.0f, "normalize: std must be positive");
    const float m = mean[static_cast<size_t>(c)];
    const float inv = 1.0f / stddev[static_cast<size_t>(c)];
    const int64_t hw = img.height * img.width;
    for (int64_t i = 0; i < hw; ++i) {
      auto& v = img.data[static_cast<size_t>(c * hw + i)];
      v = (v - m) * inv;
    }
  }
}

// published ImageNet statistics
inline constexpr std::array<float, 3> kImagenetMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kImagenetStd{0.229f, 0.224f, 0.225f};

// train-split augmentation: coin-flip mirror, then a uniform rotation in
// [-10, +10] degrees
struct AugmentParams {
  bool flip{false};
  double degrees{0.0};
};

inline AugmentParams draw_augment(Rng& rng) {
  AugmentParams p;
  p.flip = rng.bernoulli(0.5);
  p.degrees = rng.uniform(-10.0, 10.0);
  return p;
}

inline ImageTensor apply_augment(const ImageTensor& img, const AugmentParams& p) {
  ImageTensor out = p.flip ? flip_horizontal(img) : img;
  if (p.degrees != 0.0) out = rotate_bilinear(out, p.degrees);
  return out;
}

inline ImageTensor augment(const ImageTensor& img, Rng& rng) {
  return apply_augment(img, draw_augment(rng));
}

}  // namespace hybridroi
