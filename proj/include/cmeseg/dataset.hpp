#pragma once

// Dataset tree ingestion, seeded augmentation and source-level splitting.
//
// Layout: root/<patient>/<slice>/image.png, mask_g1.png [, mask_g2.png]

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "cmeseg/error.hpp"
#include "cmeseg/image.hpp"

namespace cmeseg {

namespace fs = std::filesystem;

struct Sample {
  fs::path image;
  fs::path mask_g1;
  std::optional<fs::path> mask_g2;
  std::string patient;
  int slice = 0;
};

namespace detail {

inline std::pair<std::size_t, std::size_t> png_extent(const fs::path& p) {
  const Raster8 r = read_png(p);
  return {r.height, r.width};
}

inline std::optional<int> parse_slice(const std::string& s) {
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); }))
    return std::nullopt;
  return std::stoi(s);
}

}  // namespace detail

/// Walks the tree in (patient name, numeric slice) order. Slice directories
/// must have numeric names; anything else is ignored.
inline std::vector<Sample> load_manifest(const fs::path& root) {
  if (!fs::is_directory(root)) throw EmptyDataset("not a directory: " + root.string());
  std::vector<fs::path> patients;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) patients.push_back(e.path());
  std::sort(patients.begin(), patients.end());

  std::vector<Sample> out;
  for (const auto& pdir : patients) {
    std::vector<std::pair<int, fs::path>> slices;
    for (const auto& e : fs::directory_iterator(pdir))
      if (e.is_directory())
        if (auto idx = detail::parse_slice(e.path().filename().string())) slices.emplace_back(*idx, e.path());
    std::sort(slices.begin(), slices.end());
    for (const auto& [idx, sdir] : slices) {
      Sample s;
      s.image = sdir / "image.png";
      s.mask_g1 = sdir / "mask_g1.png";
      s.patient = pdir.filename().string();
      s.slice = idx;
      if (!fs::exists(s.image)) continue;
      if (!fs::exists(s.mask_g1)) throw MissingMask(s.mask_g1.string());
      if (fs::exists(sdir / "mask_g2.png")) s.mask_g2 = sdir / "mask_g2.png";

      const auto ext = detail::png_extent(s.image);
      auto check = [&](const fs::path& m) {
        const auto me = detail::png_extent(m);
        if (me != ext)
          throw ExtentMismatch(m.string() + " is " + std::to_string(me.first) + "x" + std::to_string(me.second) +
                               ", image is " + std::to_string(ext.first) + "x" + std::to_string(ext.second));
      };
      check(s.mask_g1);
      if (s.mask_g2) check(*s.mask_g2);
      out.push_back(std::move(s));
    }
  }
  if (out.empty()) throw EmptyDataset("no samples under " + root.string());
  return out;
}

inline void write_manifest(std::ostream& os, const std::vector<Sample>& samples) {
  for (const auto& s : samples) {
    os << "patient=" << s.patient << " slice=" << s.slice << " image=" << s.image.string()
       << " mask_g1=" << s.mask_g1.string();
    if (s.mask_g2) os << " mask_g2=" << s.mask_g2->string();
    os << "\n";
  }
}

/// An image with its annotation(s), held in memory.
struct LabeledImage {
  Plane image;
  SegMask mask;
  std::optional<SegMask> mask_g2;
  std::string patient;
  std::string source;  // id of the original image; shared by all augmented variants
};

inline LabeledImage load_sample(const Sample& s) {
  LabeledImage li;
  li.image = read_gray_png(s.image);
  li.mask = read_mask_png(s.mask_g1);
  if (s.mask_g2) li.mask_g2 = read_mask_png(*s.mask_g2);
  li.patient = s.patient;
  li.source = s.patient + "/" + std::to_string(s.slice);
  return li;
}

struct AugmentSpec {
  int target_count = 2800;
  double max_translate = 24.0;  // pixels
  double max_rotate = 10.0;     // degrees
  bool allow_hflip = true;
  double crop_fraction = 0.9;
  std::uint64_t seed = 0;
};

/// Parameters of one random transform. The output pixel (y, x) samples the
/// source at an affine map of (y, x); see source_coords.
struct AugmentTransform {
  double ty = 0, tx = 0;      // translation, pixels
  double angle = 0;           // radians, about the image center
  bool hflip = false;
  double crop_y = 0, crop_x = 0;  // top-left of the crop window
  double crop_fraction = 1.0;
};

namespace detail {

/// Output pixel -> source coordinates: undo crop-and-resize, then flip,
/// then rotation, then translation.
inline std::pair<double, double> source_coords(const AugmentTransform& t, std::size_t H, std::size_t W,
                                               double y, double x) {
  double u = t.crop_y + (y + 0.5) * t.crop_fraction - 0.5;
  double v = t.crop_x + (x + 0.5) * t.crop_fraction - 0.5;
  if (t.hflip) v = static_cast<double>(W) - 1.0 - v;
  const double cy = (static_cast<double>(H) - 1.0) / 2.0, cx = (static_cast<double>(W) - 1.0) / 2.0;
  if (t.angle != 0.0) {
    const double c = std::cos(t.angle), s = std::sin(t.angle);
    const double dy = u - cy, dx = v - cx;
    u = cy + c * dy + s * dx;
    v = cx - s * dy + c * dx;
  }
  return {u - t.ty, v - t.tx};
}

/// Zero outside the pixel footprint (-0.5, extent - 0.5), edge-clamped inside it.
inline double sample_bilinear(const Plane& p, double y, double x) {
  const auto H = static_cast<double>(p.height), W = static_cast<double>(p.width);
  if (!(y > -0.5 && x > -0.5 && y < H - 0.5 && x < W - 0.5)) return 0.0;
  y = std::clamp(y, 0.0, H - 1.0);
  x = std::clamp(x, 0.0, W - 1.0);
  const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, p.height - 1), x1 = std::min(x0 + 1, p.width - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  if (fy == 0.0 && fx == 0.0) return p.at(y0, x0);
  return (1 - fy) * ((1 - fx) * p.at(y0, x0) + fx * p.at(y0, x1)) + fy * ((1 - fx) * p.at(y1, x0) + fx * p.at(y1, x1));
}

inline std::uint8_t sample_nearest(const SegMask& m, double y, double x) {
  const double ry = std::round(y), rx = std::round(x);
  if (ry < 0.0 || rx < 0.0 || ry >= static_cast<double>(m.height) || rx >= static_cast<double>(m.width)) return 0;
  return m.at(static_cast<std::size_t>(ry), static_cast<std::size_t>(rx));
}

}  // namespace detail

inline Plane apply_transform(const Plane& p, const AugmentTransform& t) {
  Plane out(p.height, p.width);
  for (std::size_t y = 0; y < p.height; ++y)
    for (std::size_t x = 0; x < p.width; ++x) {
      const auto [u, v] = detail::source_coords(t, p.height, p.width, static_cast<double>(y), static_cast<double>(x));
      out.at(y, x) = detail::sample_bilinear(p, u, v);
    }
  return out;
}

inline SegMask apply_transform(const SegMask& m, const AugmentTransform& t) {
  SegMask out(m.height, m.width);
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) {
      const auto [u, v] = detail::source_coords(t, m.height, m.width, static_cast<double>(y), static_cast<double>(x));
      out.at(y, x) = detail::sample_nearest(m, u, v);
    }
  return out;
}

inline Plane hflip(const Plane& p) {
  Plane out(p.height, p.width);
  for (std::size_t y = 0; y < p.height; ++y)
    for (std::size_t x = 0; x < p.width; ++x) out.at(y, x) = p.at(y, p.width - 1 - x);
  return out;
}

inline SegMask hflip(const SegMask& m) {
  SegMask out(m.height, m.width);
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) out.at(y, x) = m.at(y, m.width - 1 - x);
  return out;
}

/// Transform for output index `index`; depends only on (spec, index, extents).
inline AugmentTransform draw_transform(const AugmentSpec& spec, std::uint64_t index, std::size_t H, std::size_t W) {
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(-1.0, 1.0), u01(0.0, 1.0);
  AugmentTransform t;
  t.ty = spec.max_translate * u(rng);
  t.tx = spec.max_translate * u(rng);
  t.angle = spec.max_rotate * u(rng) * std::numbers::pi / 180.0;
  const bool flip = u01(rng) < 0.5;
  t.hflip = spec.allow_hflip && flip;
  t.crop_fraction = spec.crop_fraction;
  const double ry = u01(rng), rx = u01(rng);
  t.crop_y = ry * (1.0 - spec.crop_fraction) * static_cast<double>(H);
  t.crop_x = rx * (1.0 - spec.crop_fraction) * static_cast<double>(W);
  return t;
}

/// Originals first, then target_count - n transformed copies, source
/// images taken round-robin.
inline std::vector<LabeledImage> augment(const std::vector<LabeledImage>& samples, const AugmentSpec& spec) {
  if (samples.empty()) throw BadSpec("augment: no input samples");
  if (spec.target_count < static_cast<int>(samples.size()))
    throw BadSpec("target_count " + std::to_string(spec.target_count) + " is below the source count " +
                  std::to_string(samples.size()));
  if (!(spec.crop_fraction > 0.5 && spec.crop_fraction <= 1.0)) throw BadSpec("crop_fraction must be in (0.5, 1]");
  if (spec.max_translate < 0.0 || spec.max_rotate < 0.0) throw BadSpec("negative augmentation magnitude");

  std::vector<LabeledImage> out(samples.begin(), samples.end());
  out.reserve(static_cast<std::size_t>(spec.target_count));
  for (auto idx = samples.size(); idx < static_cast<std::size_t>(spec.target_count); ++idx) {
    const LabeledImage& src = samples[(idx - samples.size()) % samples.size()];
    const AugmentTransform t = draw_transform(spec, idx, src.image.height, src.image.width);
    LabeledImage a;
    a.image = apply_transform(src.image, t);
    a.mask = apply_transform(src.mask, t);
    if (src.mask_g2) a.mask_g2 = apply_transform(*src.mask_g2, t);
    a.patient = src.patient;
    a.source = src.source;
    out.push_back(std::move(a));
  }
  return out;
}

template <typename S>
struct Split {
  std::vector<S> train, val;
};

/// Seeded shuffle of the distinct source ids; the first round(f * sources)
/// go to validation together with every sample derived from them.
template <typename S>
Split<S> split(const std::vector<S>& samples, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw BadSpec("val_fraction must be in (0, 1)");
  std::vector<std::string> sources;
  std::set<std::string> seen;
  for (const auto& s : samples)
    if (seen.insert(s.source).second) sources.push_back(s.source);
  std::mt19937_64 rng(seed);
  std::shuffle(sources.begin(), sources.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(sources.size())));
  const std::set<std::string> val_sources(sources.begin(), sources.begin() + static_cast<std::ptrdiff_t>(n_val));
  Split<S> out;
  for (const auto& s : samples) (val_sources.count(s.source) ? out.val : out.train).push_back(s);
  return out;
}

}  // namespace cmeseg
