#pragma once

// Speckle suppression (first, hard-threshold stage of block-matching 3D
// collaborative filtering) and retina row-band cropping.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "cmeseg/error.hpp"
#include "cmeseg/image.hpp"

namespace cmeseg {

struct DenoiseConfig {
  int patch_size = 8;
  int search_window = 16;  // side of the square of candidate offsets around the reference
  int max_group = 16;
  int grid_stride = 4;
  double match_threshold = 0.02;  // mean squared distance on [0, 1] intensities
  double hard_threshold = 2.7;    // multiples of the noise sigma estimate
  double prefilter_threshold = 2.0;  // multiples of sigma, applied to 2D coefficients before matching
  double sigma = -1.0;            // noise sigma; negative means estimate it
  bool log_domain = true;         // filter log(v + log_offset), rescaled to [0, 1]
  double log_offset = 0.05;

  void validate() const {
    if (patch_size < 1 || search_window < patch_size) throw BadSpec("need 1 <= patch_size <= search_window");
    if (max_group < 1) throw BadSpec("max_group must be >= 1");
    if (grid_stride < 1) throw BadSpec("grid_stride must be >= 1");
    if (match_threshold < 0.0 || hard_threshold < 0.0 || prefilter_threshold < 0.0)
      throw BadSpec("denoise thresholds must be >= 0");
    if (log_domain && !(log_offset > 0.0)) throw BadSpec("log_offset must be > 0");
  }
};

/// Robust noise sigma: median |HH| / 0.6745 over non-overlapping 2x2 blocks,
/// HH = (a - b - c + d) / 2.
inline double estimate_noise_sigma(const Plane& p) {
  std::vector<double> hh;
  for (std::size_t y = 0; y + 1 < p.height; y += 2)
    for (std::size_t x = 0; x + 1 < p.width; x += 2)
      hh.push_back(std::abs(p.at(y, x) - p.at(y, x + 1) - p.at(y + 1, x) + p.at(y + 1, x + 1)) / 2.0);
  if (hh.empty()) return 0.0;
  auto mid = hh.begin() + static_cast<std::ptrdiff_t>(hh.size() / 2);
  std::nth_element(hh.begin(), mid, hh.end());
  return *mid / 0.6745;
}

namespace detail {

/// Orthonormal DCT-II basis, row k = frequency k.
inline std::vector<double> dct_matrix(std::size_t n) {
  std::vector<double> c(n * n);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i) {
      const double s = k == 0 ? std::sqrt(1.0 / static_cast<double>(n)) : std::sqrt(2.0 / static_cast<double>(n));
      c[k * n + i] = s * std::cos(std::numbers::pi * (2.0 * static_cast<double>(i) + 1.0) * static_cast<double>(k) /
                                  (2.0 * static_cast<double>(n)));
    }
  return c;
}

/// out = C X C^T (forward) or C^T X C (inverse) for an n x n block.
inline void dct2(const std::vector<double>& c, std::size_t n, const double* in, double* out, bool inverse) {
  std::vector<double> tmp(n * n, 0.0);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += (inverse ? c[i * n + k] : c[k * n + i]) * in[i * n + j];
      tmp[k * n + j] = s;
    }
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t l = 0; l < n; ++l) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += tmp[k * n + j] * (inverse ? c[j * n + l] : c[l * n + j]);
      out[k * n + l] = s;
    }
}

/// In-place orthonormal Haar transform along a group of m = 2^k vectors of length len.
inline void haar_forward(std::vector<double>& g, std::size_t m, std::size_t len) {
  std::vector<double> tmp(g.size());
  for (std::size_t span = m; span > 1; span /= 2) {
    const std::size_t half = span / 2;
    for (std::size_t i = 0; i < half; ++i)
      for (std::size_t e = 0; e < len; ++e) {
        const double a = g[(2 * i) * len + e], b = g[(2 * i + 1) * len + e];
        tmp[i * len + e] = (a + b) / std::numbers::sqrt2;
        tmp[(half + i) * len + e] = (a - b) / std::numbers::sqrt2;
      }
    std::copy(tmp.begin(), tmp.begin() + static_cast<std::ptrdiff_t>(span * len), g.begin());
  }
}

inline void haar_inverse(std::vector<double>& g, std::size_t m, std::size_t len) {
  std::vector<double> tmp(g.size());
  for (std::size_t span = 2; span <= m; span *= 2) {
    const std::size_t half = span / 2;
    for (std::size_t i = 0; i < half; ++i)
      for (std::size_t e = 0; e < len; ++e) {
        const double s = g[i * len + e], d = g[(half + i) * len + e];
        tmp[(2 * i) * len + e] = (s + d) / std::numbers::sqrt2;
        tmp[(2 * i + 1) * len + e] = (s - d) / std::numbers::sqrt2;
      }
    std::copy(tmp.begin(), tmp.begin() + static_cast<std::ptrdiff_t>(span * len), g.begin());
  }
}

/// Reference positions along one axis: stride steps plus the last valid position.
inline std::vector<std::size_t> grid_positions(std::size_t extent, std::size_t patch, std::size_t stride) {
  std::vector<std::size_t> pos;
  const std::size_t last = extent - patch;
  for (std::size_t p = 0; p < last; p += stride) pos.push_back(p);
  pos.push_back(last);
  return pos;
}

}  // namespace detail

/// Block matching + 3D (2D DCT, 1D Haar) hard thresholding + weighted
/// aggregation, for additive noise.
inline Plane denoise_additive(const Plane& image, const DenoiseConfig& cfg) {
  cfg.validate();
  const auto P = static_cast<std::size_t>(cfg.patch_size);
  if (image.height < P || image.width < P)
    throw ImageTooSmall(std::to_string(image.height) + "x" + std::to_string(image.width) + " is smaller than the " +
                        std::to_string(P) + "-pixel patch");
  const std::size_t H = image.height, W = image.width, PP = P * P;
  const double sigma = cfg.sigma >= 0.0 ? cfg.sigma : estimate_noise_sigma(image);
  const double lambda3d = cfg.hard_threshold * sigma;
  const double lambda2d = cfg.prefilter_threshold * sigma;
  const std::vector<double> C = detail::dct_matrix(P);

  // 2D coefficients of every patch position.
  const std::size_t PH = H - P + 1, PW = W - P + 1;
  std::vector<double> coef(PH * PW * PP), block(PP);
  for (std::size_t y = 0; y < PH; ++y)
    for (std::size_t x = 0; x < PW; ++x) {
      for (std::size_t i = 0; i < P; ++i)
        for (std::size_t j = 0; j < P; ++j) block[i * P + j] = image.at(y + i, x + j);
      detail::dct2(C, P, block.data(), coef.data() + (y * PW + x) * PP, false);
    }
  auto patch_coef = [&](std::size_t y, std::size_t x) { return coef.data() + (y * PW + x) * PP; };
  auto prefilter = [&](double v, std::size_t e) { return e == 0 || std::abs(v) >= lambda2d ? v : 0.0; };

  std::vector<double> num(H * W, 0.0), den(H * W, 0.0);
  const auto half = static_cast<std::ptrdiff_t>(cfg.search_window / 2);
  std::vector<std::pair<double, std::pair<std::size_t, std::size_t>>> cands;
  std::vector<double> group, est(PP);

  for (std::size_t ry : detail::grid_positions(H, P, static_cast<std::size_t>(cfg.grid_stride)))
    for (std::size_t rx : detail::grid_positions(W, P, static_cast<std::size_t>(cfg.grid_stride))) {
      const double* ref = patch_coef(ry, rx);
      cands.clear();
      const auto y0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(ry) - half);
      const auto y1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(PH) - 1, static_cast<std::ptrdiff_t>(ry) + half);
      const auto x0 = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(rx) - half);
      const auto x1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(PW) - 1, static_cast<std::ptrdiff_t>(rx) + half);
      for (auto y = y0; y <= y1; ++y)
        for (auto x = x0; x <= x1; ++x) {
          const auto uy = static_cast<std::size_t>(y), ux = static_cast<std::size_t>(x);
          const double* c = patch_coef(uy, ux);
          double d = 0.0;
          for (std::size_t e = 0; e < PP; ++e) {
            const double diff = prefilter(ref[e], e) - prefilter(c[e], e);
            d += diff * diff;
          }
          d /= static_cast<double>(PP);
          if ((uy == ry && ux == rx) || d <= cfg.match_threshold) cands.push_back({uy == ry && ux == rx ? -1.0 : d, {uy, ux}});
        }
      std::stable_sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
      std::size_t m = 1;
      while (m * 2 <= std::min(cands.size(), static_cast<std::size_t>(cfg.max_group))) m *= 2;

      group.assign(m * PP, 0.0);
      for (std::size_t g = 0; g < m; ++g) {
        const double* c = patch_coef(cands[g].second.first, cands[g].second.second);
        std::copy(c, c + PP, group.begin() + static_cast<std::ptrdiff_t>(g * PP));
      }
      detail::haar_forward(group, m, PP);
      std::size_t kept = 0;
      for (std::size_t k = 0; k < group.size(); ++k) {
        if (k == 0) {
          ++kept;
          continue;
        }
        if (std::abs(group[k]) < lambda3d) group[k] = 0.0;
        else ++kept;
      }
      detail::haar_inverse(group, m, PP);
      const double w = 1.0 / (std::max(sigma * sigma, 1e-12) * static_cast<double>(kept));
      for (std::size_t g = 0; g < m; ++g) {
        detail::dct2(C, P, group.data() + g * PP, est.data(), true);
        const auto [py, px] = cands[g].second;
        for (std::size_t i = 0; i < P; ++i)
          for (std::size_t j = 0; j < P; ++j) {
            num[(py + i) * W + px + j] += w * est[i * P + j];
            den[(py + i) * W + px + j] += w;
          }
      }
    }

  Plane out(H, W);
  for (std::size_t k = 0; k < H * W; ++k)
    out.px[k] = std::clamp(den[k] > 0.0 ? num[k] / den[k] : image.px[k], 0.0, 1.0);
  return out;
}

/// Speckle is multiplicative, so by default the filter runs on the log image.
inline Plane denoise(const Plane& image, const DenoiseConfig& cfg = {}) {
  cfg.validate();
  if (!cfg.log_domain) return denoise_additive(image, cfg);
  const double lo = std::log(cfg.log_offset), hi = std::log(1.0 + cfg.log_offset);
  Plane l = image;
  for (double& v : l.px) v = (std::log(std::clamp(v, 0.0, 1.0) + cfg.log_offset) - lo) / (hi - lo);
  Plane out = denoise_additive(l, cfg);
  for (double& v : out.px) v = std::clamp(std::exp(v * (hi - lo) + lo) - cfg.log_offset, 0.0, 1.0);
  return out;
}

/// Inclusive row band [row_begin, row_end] of the original image.
struct RetinaCrop {
  Plane image;
  std::size_t row_begin = 0, row_end = 0;
};

struct CropConfig {
  std::size_t smoothing = 15;
  double relative_threshold = 0.5;
  std::size_t margin = 16;
  double min_peak = 0.05;
};

/// Row-mean profile, centered moving average (truncated at the borders).
inline std::vector<double> row_profile(const Plane& image, std::size_t smoothing) {
  std::vector<double> mean(image.height, 0.0);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) mean[y] += image.at(y, x);
    mean[y] /= static_cast<double>(image.width);
  }
  const std::size_t half = smoothing / 2;
  std::vector<double> out(image.height);
  for (std::size_t y = 0; y < image.height; ++y) {
    const std::size_t a = y >= half ? y - half : 0, b = std::min(image.height - 1, y + half);
    double s = 0.0;
    for (std::size_t k = a; k <= b; ++k) s += mean[k];
    out[y] = s / static_cast<double>(b - a + 1);
  }
  return out;
}

inline RetinaCrop crop_retina(const Plane& image, const CropConfig& cfg = {}) {
  if (image.height == 0 || image.width == 0) throw NoRetinaFound("empty image");
  const std::vector<double> prof = row_profile(image, cfg.smoothing);
  const double peak = *std::max_element(prof.begin(), prof.end());
  if (peak < cfg.min_peak) throw NoRetinaFound("row profile peaks at " + std::to_string(peak));
  const double thr = cfg.relative_threshold * peak;

  std::size_t best_a = 0, best_len = 0;
  for (std::size_t y = 0; y < prof.size();) {
    if (!(prof[y] > thr)) {
      ++y;
      continue;
    }
    std::size_t e = y;
    while (e + 1 < prof.size() && prof[e + 1] > thr) ++e;
    if (e - y + 1 > best_len) {
      best_a = y;
      best_len = e - y + 1;
    }
    y = e + 1;
  }
  RetinaCrop r;
  r.row_begin = best_a >= cfg.margin ? best_a - cfg.margin : 0;
  r.row_end = std::min(image.height - 1, best_a + best_len - 1 + cfg.margin);
  r.image = Plane(r.row_end - r.row_begin + 1, image.width);
  std::copy(image.px.begin() + static_cast<std::ptrdiff_t>(r.row_begin * image.width),
            image.px.begin() + static_cast<std::ptrdiff_t>((r.row_end + 1) * image.width), r.image.px.begin());
  return r;
}

inline SegMask crop_rows(const SegMask& m, std::size_t row_begin, std::size_t row_end) {
  if (row_end >= m.height || row_begin > row_end) throw ExtentMismatch("crop rows outside the mask");
  SegMask out(row_end - row_begin + 1, m.width);
  std::copy(m.labels.begin() + static_cast<std::ptrdiff_t>(row_begin * m.width),
            m.labels.begin() + static_cast<std::ptrdiff_t>((row_end + 1) * m.width), out.labels.begin());
  return out;
}

/// Places a cropped mask back into a full-height frame (zeros outside the band).
inline SegMask uncrop_rows(const SegMask& m, std::size_t row_begin, std::size_t full_height) {
  if (row_begin + m.height > full_height) throw ExtentMismatch("cropped mask does not fit the full frame");
  SegMask out(full_height, m.width);
  std::copy(m.labels.begin(), m.labels.end(), out.labels.begin() + static_cast<std::ptrdiff_t>(row_begin * m.width));
  return out;
}

}  // namespace cmeseg
