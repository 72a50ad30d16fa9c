#pragma once

// Synthetic B-scan-like phantoms: a dark vitreous, a stack of wavy retinal
// layers with distinct reflectivity, a choroid band, and elliptical
// low-intensity "edema" blobs embedded in the retina.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "cmeseg/image.hpp"

namespace cmeseg {

struct Phantom {
  Plane clean;
  SegMask edema;
};

struct PhantomSpec {
  std::size_t height = 96;
  std::size_t width = 96;
  int min_blobs = 1;
  int max_blobs = 3;
  double blob_intensity = 0.08;
};

inline Phantom make_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto H = static_cast<double>(spec.height);
  const auto W = static_cast<double>(spec.width);

  const double top = H * (0.22 + 0.08 * u(rng));
  const double thickness = H * (0.45 + 0.1 * u(rng));
  const double amp = H * 0.04 * u(rng);
  const double phase = 2.0 * std::numbers::pi * u(rng);
  const double levels[] = {0.85, 0.45, 0.7, 0.5, 0.8};
  constexpr int kLayers = 5;

  Phantom ph{Plane(spec.height, spec.width), SegMask(spec.height, spec.width)};
  for (std::size_t y = 0; y < spec.height; ++y)
    for (std::size_t x = 0; x < spec.width; ++x) {
      const double wave = amp * std::sin(2.0 * std::numbers::pi * static_cast<double>(x) / W + phase);
      const double rel = (static_cast<double>(y) - top - wave) / thickness;
      double v;
      if (rel < 0.0) {
        v = 0.05;
      } else if (rel < 1.0) {
        v = levels[std::min(kLayers - 1, static_cast<int>(rel * kLayers))];
      } else if (rel < 1.25) {
        v = 0.6;
      } else {
        v = 0.15;
      }
      ph.clean.at(y, x) = v;
    }

  std::uniform_int_distribution<int> nblobs(spec.min_blobs, spec.max_blobs);
  const int n = nblobs(rng);
  for (int b = 0; b < n; ++b) {
    const double cx = W * (0.15 + 0.7 * u(rng));
    const double wave = amp * std::sin(2.0 * std::numbers::pi * cx / W + phase);
    const double cy = top + wave + thickness * (0.3 + 0.4 * u(rng));
    const double rx = W * (0.05 + 0.07 * u(rng));
    const double ry = thickness * (0.1 + 0.12 * u(rng));
    const double angle = (u(rng) - 0.5) * 0.6;
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (std::size_t y = 0; y < spec.height; ++y)
      for (std::size_t x = 0; x < spec.width; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        const double ex = (ca * dx + sa * dy) / rx, ey = (-sa * dx + ca * dy) / ry;
        if (ex * ex + ey * ey <= 1.0) {
          ph.clean.at(y, x) = spec.blob_intensity;
          ph.edema.at(y, x) = 1;
        }
      }
  }
  return ph;
}

/// Multiplicative speckle: v * (1 + sigma * n), n ~ N(0, 1), clamped to [0, 1].
inline Plane add_speckle(const Plane& clean, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Plane out = clean;
  for (double& v : out.px) v = std::clamp(v * (1.0 + sigma * n(rng)), 0.0, 1.0);
  return out;
}

inline double psnr(const Plane& a, const Plane& b) {
  double mse = 0.0;
  for (std::size_t i = 0; i < a.px.size(); ++i) mse += (a.px[i] - b.px[i]) * (a.px[i] - b.px[i]);
  mse /= static_cast<double>(a.px.size());
  return 10.0 * std::log10(1.0 / std::max(mse, 1e-300));
}

}  // namespace cmeseg
