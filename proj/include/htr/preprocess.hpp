#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "htr/image.hpp"
#include "htr/tensor.hpp"

namespace htr {

struct PreprocConfig {
  int sauvola_window = 25;   // odd, >= 3
  double sauvola_k = 0.2;
  double sauvola_r = 128.0;  // dynamic-range constant
  double shear_min = -45.0;  // degrees
  double shear_max = 45.0;
  double shear_step = 3.0;
  std::size_t target_h = 128;
  std::size_t target_w = 1024;

  void validate() const {
    if (sauvola_window < 3 || sauvola_window % 2 == 0)
      throw ValidationError("sauvola window must be odd and >= 3");
    if (!(shear_min < shear_max) || shear_step <= 0)
      throw ValidationError("bad shear grid");
    if (target_h < 1 || target_w < 1) throw ValidationError("bad target dims");
  }
};

namespace detail {

// Image with borders replicated outward by `pad` on every side.
inline GrayImage replicate_pad(const GrayImage& img, int pad) {
  GrayImage out(img.height + 2 * pad, img.width + 2 * pad);
  const auto clampi = [](long v, long lo, long hi) {
    return v < lo ? lo : (v > hi ? hi : v);
  };
  for (std::size_t y = 0; y < out.height; ++y) {
    const long sy = clampi(static_cast<long>(y) - pad, 0, static_cast<long>(img.height) - 1);
    for (std::size_t x = 0; x < out.width; ++x) {
      const long sx = clampi(static_cast<long>(x) - pad, 0, static_cast<long>(img.width) - 1);
      out.at(y, x) = img.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
    }
  }
  return out;
}

// Integral image in uint64: window sums of 8-bit pixels stay exact.
struct Integral {
  std::size_t height = 0, width = 0;
  std::vector<std::uint64_t> s;  // (height+1) x (width+1)

  explicit Integral(const GrayImage& img, bool squared = false)
      : height(img.height), width(img.width), s((img.height + 1) * (img.width + 1), 0) {
    for (std::size_t y = 0; y < height; ++y) {
      std::uint64_t row = 0;
      for (std::size_t x = 0; x < width; ++x) {
        const std::uint64_t v = img.at(y, x);
        row += squared ? v * v : v;
        s[(y + 1) * (width + 1) + (x + 1)] = s[y * (width + 1) + (x + 1)] + row;
      }
    }
  }

  // Sum over [y0, y1) x [x0, x1).
  std::uint64_t sum(std::size_t y0, std::size_t x0, std::size_t y1, std::size_t x1) const {
    const std::size_t W = width + 1;
    return s[y1 * W + x1] - s[y0 * W + x1] - s[y1 * W + x0] + s[y0 * W + x0];
  }
};

inline GrayImage box_mean(const GrayImage& img, int window) {
  const int pad = window / 2;
  GrayImage padded = replicate_pad(img, pad);
  Integral integ(padded);
  GrayImage out(img.height, img.width);
  const double n = static_cast<double>(window) * window;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double m = static_cast<double>(integ.sum(y, x, y + window, x + window)) / n;
      out.at(y, x) = static_cast<std::uint8_t>(std::lround(std::clamp(m, 0.0, 255.0)));
    }
  return out;
}

// Grayscale dilation of dark ink = local minimum of intensity.
inline GrayImage local_min(const GrayImage& img, int window) {
  const int pad = window / 2;
  GrayImage padded = replicate_pad(img, pad);
  GrayImage out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      std::uint8_t m = 255;
      for (int dy = 0; dy < window; ++dy)
        for (int dx = 0; dx < window; ++dx)
          m = std::min(m, padded.at(y + dy, x + dx));
      out.at(y, x) = m;
    }
  return out;
}

inline GrayImage local_max(const GrayImage& img, int window) {
  const int pad = window / 2;
  GrayImage padded = replicate_pad(img, pad);
  GrayImage out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      std::uint8_t m = 0;
      for (int dy = 0; dy < window; ++dy)
        for (int dx = 0; dx < window; ++dx)
          m = std::max(m, padded.at(y + dy, x + dx));
      out.at(y, x) = m;
    }
  return out;
}

inline GrayImage sobel_magnitude(const GrayImage& img) {
  GrayImage padded = replicate_pad(img, 1);
  GrayImage out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const auto p = [&](int dy, int dx) {
        return static_cast<double>(padded.at(y + 1 + dy, x + 1 + dx));
      };
      const double gx = (p(-1, 1) + 2 * p(0, 1) + p(1, 1)) -
                        (p(-1, -1) + 2 * p(0, -1) + p(1, -1));
      const double gy = (p(1, -1) + 2 * p(1, 0) + p(1, 1)) -
                        (p(-1, -1) + 2 * p(-1, 0) + p(-1, 1));
      const double mag = std::sqrt(gx * gx + gy * gy) / 4.0;
      out.at(y, x) = static_cast<std::uint8_t>(std::lround(std::clamp(mag, 0.0, 255.0)));
    }
  return out;
}

}  // namespace detail

// Flattens uneven lighting: contrast stretch, Sobel edge detection,
// edge-density text localization, then a background surface estimated from
// non-text pixels is divided out. Background lands near 255.
inline GrayImage illumination_compensate(const GrayImage& img) {
  if (img.height < 3 || img.width < 3)
    throw ValidationError("illumination_compensate needs at least 3x3");

  // contrast stretch to full range
  std::uint8_t lo = 255, hi = 0;
  for (auto v : img.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  GrayImage stretched(img.height, img.width);
  if (hi > lo) {
    for (std::size_t i = 0; i < img.data.size(); ++i)
      stretched.data[i] = static_cast<std::uint8_t>(
          std::lround(255.0 * (img.data[i] - lo) / static_cast<double>(hi - lo)));
  } else {
    stretched.data = img.data;
  }

  // edge detection + edge-density text localization
  GrayImage edges = detail::sobel_magnitude(stretched);
  const int density_win = std::max(
      3, static_cast<int>(std::min(img.height, img.width) / 8) | 1);
  GrayImage density = detail::box_mean(edges, density_win);
  std::uint8_t dmax = 0;
  for (auto v : density.data) dmax = std::max(dmax, v);
  const std::uint8_t dthresh = static_cast<std::uint8_t>(dmax / 4);
  std::vector<std::uint8_t> text_mask(img.size());
  for (std::size_t i = 0; i < img.size(); ++i)
    text_mask[i] = (dmax > 0 && density.data[i] > dthresh) ? 1 : 0;

  // light-distribution estimate: window mean of stretched intensities over
  // non-text pixels; falls back to the global non-text mean
  const int bg_win = std::max(
      15, static_cast<int>(std::min(img.height, img.width) / 2) | 1);
  const int pad = bg_win / 2;
  GrayImage masked(img.height, img.width, 0);
  GrayImage counts(img.height, img.width, 0);
  for (std::size_t i = 0; i < img.size(); ++i) {
    masked.data[i] = text_mask[i] ? 0 : stretched.data[i];
    counts.data[i] = text_mask[i] ? 0 : 1;
  }
  detail::Integral sum_i(detail::replicate_pad(masked, pad));
  detail::Integral cnt_i(detail::replicate_pad(counts, pad));

  std::uint64_t gsum = 0, gcnt = 0;
  for (std::size_t i = 0; i < img.size(); ++i)
    if (!text_mask[i]) {
      gsum += stretched.data[i];
      ++gcnt;
    }
  const double global_bg = gcnt ? static_cast<double>(gsum) / gcnt : 255.0;

  GrayImage out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const std::uint64_t c = cnt_i.sum(y, x, y + bg_win, x + bg_win);
      double bg = c ? static_cast<double>(sum_i.sum(y, x, y + bg_win, x + bg_win)) / c
                    : global_bg;
      bg = std::max(bg, 1.0);
      const double v = 255.0 * stretched.at(y, x) / bg;
      out.at(y, x) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  return out;
}

// Local adaptive threshold T = m * (1 + k*(s/R - 1)); a pixel is ink iff its
// intensity is strictly below T. Window sums are exact integers, so results
// match a naive per-window recomputation bit for bit.
inline BinaryImage sauvola_binarize(const GrayImage& img, const PreprocConfig& cfg) {
  cfg.validate();
  const int win = cfg.sauvola_window;
  const int pad = win / 2;
  GrayImage padded = detail::replicate_pad(img, pad);
  detail::Integral sum_i(padded, false);
  detail::Integral sq_i(padded, true);
  const double n = static_cast<double>(win) * win;

  BinaryImage out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double sum = static_cast<double>(sum_i.sum(y, x, y + win, x + win));
      const double sq = static_cast<double>(sq_i.sum(y, x, y + win, x + win));
      const double mean = sum / n;
      const double var = std::max(0.0, sq / n - mean * mean);
      const double sd = std::sqrt(var);
      const double threshold = mean * (1.0 + cfg.sauvola_k * (sd / cfg.sauvola_r - 1.0));
      out.at(y, x) = (static_cast<double>(img.at(y, x)) < threshold) ? 1 : 0;
    }
  return out;
}

namespace detail {

// Horizontal shear with per-row integer shifts; shifts cancel exactly under
// negation, which is what makes deslant(shear(img, a)) recover img.
inline BinaryImage shear_binary(const BinaryImage& img, double degrees) {
  const double t = std::tan(degrees * std::numbers::pi / 180.0);
  const long h = static_cast<long>(img.height);
  long min_shift = 0, max_shift = 0;
  std::vector<long> shift(img.height);
  for (long y = 0; y < h; ++y) {
    shift[y] = std::lround(t * static_cast<double>(h - 1 - y));
    min_shift = std::min(min_shift, shift[y]);
    max_shift = std::max(max_shift, shift[y]);
  }
  BinaryImage out(img.height, img.width + static_cast<std::size_t>(max_shift - min_shift));
  for (std::size_t y = 0; y < img.height; ++y) {
    const long off = shift[y] - min_shift;
    for (std::size_t x = 0; x < img.width; ++x)
      if (img.at(y, x)) out.at(y, static_cast<std::size_t>(x + off)) = 1;
  }
  return out;
}

// Column-continuity score: sum over non-empty columns of
// (longest vertical run)^2 / (foreground count in column).
inline double column_continuity_score(const BinaryImage& img) {
  double score = 0.0;
  for (std::size_t x = 0; x < img.width; ++x) {
    std::size_t count = 0, run = 0, best_run = 0;
    for (std::size_t y = 0; y < img.height; ++y) {
      if (img.at(y, x)) {
        ++count;
        ++run;
        best_run = std::max(best_run, run);
      } else {
        run = 0;
      }
    }
    if (count > 0)
      score += static_cast<double>(best_run) * static_cast<double>(best_run) / count;
  }
  return score;
}

}  // namespace detail

// Removes the dominant slant: picks the grid angle maximizing the
// column-continuity score. Ties go to the smallest |angle|, negative first.
inline BinaryImage deslant(const BinaryImage& img, const PreprocConfig& cfg) {
  cfg.validate();
  if (img.foreground_count() == 0) return img;

  double best_score = -1.0;
  double best_alpha = 0.0;
  for (double a = cfg.shear_min; a <= cfg.shear_max + 1e-9; a += cfg.shear_step) {
    const BinaryImage candidate = detail::shear_binary(img, a);
    const double s = detail::column_continuity_score(candidate);
    const bool better =
        s > best_score + 1e-12 ||
        (std::abs(s - best_score) <= 1e-12 &&
         (std::abs(a) < std::abs(best_alpha) - 1e-12 ||
          (std::abs(std::abs(a) - std::abs(best_alpha)) <= 1e-12 && a < best_alpha)));
    if (best_score < 0 || better) {
      best_score = s;
      best_alpha = a;
    }
  }
  return detail::shear_binary(img, best_alpha);
}

namespace detail {

// Area-average resample of a [0,1] field. Exact for integer decimation,
// well-behaved for fractional ratios.
inline std::vector<double> resample_area(const std::vector<double>& src,
                                         std::size_t sh, std::size_t sw,
                                         std::size_t dh, std::size_t dw) {
  std::vector<double> dst(dh * dw, 0.0);
  const double ry = static_cast<double>(sh) / dh;
  const double rx = static_cast<double>(sw) / dw;
  for (std::size_t y = 0; y < dh; ++y) {
    const double y0 = y * ry, y1 = (y + 1) * ry;
    for (std::size_t x = 0; x < dw; ++x) {
      const double x0 = x * rx, x1 = (x + 1) * rx;
      double acc = 0.0, area = 0.0;
      for (std::size_t sy = static_cast<std::size_t>(y0);
           sy < sh && static_cast<double>(sy) < y1; ++sy) {
        const double wy = std::min(y1, static_cast<double>(sy + 1)) -
                          std::max(y0, static_cast<double>(sy));
        if (wy <= 0) continue;
        for (std::size_t sx = static_cast<std::size_t>(x0);
             sx < sw && static_cast<double>(sx) < x1; ++sx) {
          const double wx = std::min(x1, static_cast<double>(sx + 1)) -
                            std::max(x0, static_cast<double>(sx));
          if (wx <= 0) continue;
          acc += wy * wx * src[sy * sw + sx];
          area += wy * wx;
        }
      }
      dst[y * dw + x] = area > 0 ? acc / area : 1.0;
    }
  }
  return dst;
}

inline Tensor normalize_field(const std::vector<double>& field, std::size_t h,
                              std::size_t w, const PreprocConfig& cfg) {
  const double scale = std::min(static_cast<double>(cfg.target_h) / h,
                                static_cast<double>(cfg.target_w) / w);
  std::size_t nh = h, nw = w;
  std::vector<double> scaled = field;
  if (std::abs(scale - 1.0) > 1e-12) {
    nh = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(scale * h)), 1,
                                 cfg.target_h);
    nw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(scale * w)), 1,
                                 cfg.target_w);
    scaled = resample_area(field, h, w, nh, nw);
  }
  Tensor out({cfg.target_h, cfg.target_w, 1});
  out.fill(1.0);  // background
  for (std::size_t y = 0; y < nh; ++y)
    for (std::size_t x = 0; x < nw; ++x)
      out.at(y, x, 0) = std::clamp(scaled[y * nw + x], 0.0, 1.0);
  return out;
}

}  // namespace detail

// Aspect-preserving fit into target_h x target_w, pasted at the left of a
// background canvas. Values in [0,1], ink dark. Output shape (H, W, 1).
inline Tensor normalize_size(const GrayImage& img, const PreprocConfig& cfg) {
  cfg.validate();
  std::vector<double> field(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) field[i] = img.data[i] / 255.0;
  return detail::normalize_field(field, img.height, img.width, cfg);
}

inline Tensor normalize_size(const BinaryImage& img, const PreprocConfig& cfg) {
  cfg.validate();
  std::vector<double> field(img.data.size());
  for (std::size_t i = 0; i < field.size(); ++i) field[i] = img.data[i] ? 0.0 : 1.0;
  return detail::normalize_field(field, img.height, img.width, cfg);
}

struct PreprocStages {
  GrayImage illuminated;
  BinaryImage binarized;
  BinaryImage deslanted;
  Tensor tensor;
};

// Full pipeline: illumination compensation -> Sauvola -> deslant -> size
// normalization.
inline PreprocStages preprocess_line(const GrayImage& img, const PreprocConfig& cfg) {
  PreprocStages st;
  st.illuminated = illumination_compensate(img);
  st.binarized = sauvola_binarize(st.illuminated, cfg);
  st.deslanted = deslant(st.binarized, cfg);
  st.tensor = normalize_size(st.deslanted, cfg);
  return st;
}

}  // namespace htr
