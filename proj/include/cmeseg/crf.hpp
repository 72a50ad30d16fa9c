#pragma once

// Fully connected CRF over pixels: unary potentials from the network, Gaussian
// pairwise kernels on position and intensity, mean-field inference, and an
// exhaustive MAP search for tiny instances.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "cmeseg/error.hpp"
#include "cmeseg/image.hpp"
#include "cmeseg/tensor.hpp"

namespace cmeseg {

/// psi_u(x_i = l), stored label-major: values[l * H * W + y * W + x].
struct UnaryField {
  std::size_t labels = 0, height = 0, width = 0;
  std::vector<double> values;

  UnaryField() = default;
  UnaryField(std::size_t k, std::size_t h, std::size_t w, double fill = 0.0)
      : labels(k), height(h), width(w), values(k * h * w, fill) {}
  std::size_t pixels() const { return height * width; }
  double& at(std::size_t l, std::size_t i) { return values[l * pixels() + i]; }
  double at(std::size_t l, std::size_t i) const { return values[l * pixels() + i]; }
};

enum class KernelKind { Spatial, Bilateral };

struct PairwiseKernelSpec {
  KernelKind kind = KernelKind::Spatial;
  double weight = 1.0;
  double sigma_spatial = 2.0;    // pixels
  double sigma_intensity = 0.01; // intensity units on [0, 1]; bilateral only
};

struct CrfConfig {
  std::vector<PairwiseKernelSpec> kernels{
      {KernelKind::Spatial, 1.0, 2.0, 0.01},
      {KernelKind::Bilateral, 1.0, 2.0, 0.01},
  };
  std::vector<double> compatibility;  // K x K row-major; empty means Potts
  int iterations = 10;
  double convergence_tol = 1e-6;
  double gt_certainty = 0.6;
  std::size_t exact_pixel_limit = 4096;  // above this, neighborhoods are truncated at 3 sigma

  double mu(std::size_t a, std::size_t b, std::size_t K) const {
    if (compatibility.empty()) return a == b ? 0.0 : 1.0;
    return compatibility[a * K + b];
  }

  void validate(std::size_t K) const {
    if (iterations < 1) throw BadSpec("CRF iterations must be >= 1");
    for (const auto& k : kernels) {
      if (k.weight < 0.0) throw BadSpec("kernel weight must be >= 0");
      if (!(k.sigma_spatial > 0.0)) throw BadSpec("sigma_spatial must be > 0");
      if (k.kind == KernelKind::Bilateral && !(k.sigma_intensity > 0.0)) throw BadSpec("sigma_intensity must be > 0");
    }
    if (!compatibility.empty()) {
      if (compatibility.size() != K * K) throw BadSpec("compatibility must be K x K");
      for (std::size_t a = 0; a < K; ++a)
        for (std::size_t b = 0; b < K; ++b)
          if (compatibility[a * K + b] != compatibility[b * K + a]) throw BadSpec("compatibility must be symmetric");
    }
  }
};

/// Pixel feature: position in pixels and normalized intensity.
struct PixelFeature {
  double y = 0, x = 0, intensity = 0;
};

inline double kernel_value(const PairwiseKernelSpec& spec, const PixelFeature& a, const PixelFeature& b) {
  const double d2 = (a.y - b.y) * (a.y - b.y) + (a.x - b.x) * (a.x - b.x);
  double e = d2 / (2.0 * spec.sigma_spatial * spec.sigma_spatial);
  if (spec.kind == KernelKind::Bilateral) {
    const double di = a.intensity - b.intensity;
    e += di * di / (2.0 * spec.sigma_intensity * spec.sigma_intensity);
  }
  return std::exp(-e);
}

/// psi(assigned) = -ln c, psi(other) = -ln((1 - c) / (K - 1)).
inline UnaryField unary_from_labels(const Labeling& labels, double certainty, std::size_t K) {
  if (K < 2) throw BadSpec("need at least two labels");
  if (!(certainty > 1.0 / static_cast<double>(K) && certainty < 1.0))
    throw BadCertainty("certainty " + std::to_string(certainty) + " is outside (1/K, 1)");
  UnaryField u(K, labels.height, labels.width);
  const double on = -std::log(certainty);
  const double off = -std::log((1.0 - certainty) / static_cast<double>(K - 1));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels.labels[i] >= K) throw ShapeMismatch("label out of range");
    for (std::size_t l = 0; l < K; ++l) u.at(l, i) = labels.labels[i] == l ? on : off;
  }
  return u;
}

/// psi = -ln(max(p, floor)) from a (1, K, H, W) probability map.
template <typename T>
UnaryField unary_from_probs(const Tensor<T>& heatmap, double floor = 1e-8) {
  const Dims& d = heatmap.dims();
  if (d.n != 1 || d.c < 2) throw ShapeMismatch("unary_from_probs: heatmap " + d.str());
  UnaryField u(d.c, d.h, d.w);
  const std::size_t N = d.plane();
  for (std::size_t i = 0; i < N; ++i) {
    double s = 0.0;
    for (std::size_t l = 0; l < d.c; ++l) s += static_cast<double>(heatmap[l * N + i]);
    if (std::abs(s - 1.0) > 1e-6) throw NotNormalized("channel sum " + std::to_string(s) + " at pixel " + std::to_string(i));
    for (std::size_t l = 0; l < d.c; ++l) u.at(l, i) = -std::log(std::max(static_cast<double>(heatmap[l * N + i]), floor));
  }
  return u;
}

namespace detail {

inline void check_crf_dims(const UnaryField& u, const Plane& image, const char* what) {
  if (u.labels < 2 || u.height != image.height || u.width != image.width || u.values.size() != u.labels * u.pixels())
    throw ShapeMismatch(std::string(what) + ": unary " + std::to_string(u.labels) + "x" + std::to_string(u.height) + "x" +
                        std::to_string(u.width) + " vs image " + std::to_string(image.height) + "x" +
                        std::to_string(image.width));
}

inline PixelFeature feature(const Plane& image, std::size_t i) {
  return {static_cast<double>(i / image.width), static_cast<double>(i % image.width), image.px[i]};
}

/// Sum over kernels of weight * k(f_i, f_j).
inline double pair_weight(const CrfConfig& cfg, const PixelFeature& a, const PixelFeature& b) {
  double w = 0.0;
  for (const auto& k : cfg.kernels)
    if (k.weight != 0.0) w += k.weight * kernel_value(k, a, b);
  return w;
}

/// Dense N x N table of pair weights (zero diagonal).
inline std::vector<double> pair_table(const CrfConfig& cfg, const Plane& image) {
  const std::size_t N = image.px.size();
  std::vector<double> w(N * N, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) w[i * N + j] = w[j * N + i] = pair_weight(cfg, feature(image, i), feature(image, j));
  return w;
}

}  // namespace detail

/// Exact Gibbs energy, O(N^2).
inline double gibbs_energy(const UnaryField& u, const CrfConfig& cfg, const Plane& image, const Labeling& x) {
  detail::check_crf_dims(u, image, "gibbs_energy");
  if (x.height != u.height || x.width != u.width) throw ShapeMismatch("gibbs_energy: labeling extent");
  const std::size_t N = u.pixels(), K = u.labels;
  double e = 0.0;
  for (std::size_t i = 0; i < N; ++i) e += u.at(x.labels[i], i);
  for (std::size_t i = 0; i < N; ++i) {
    const PixelFeature fi = detail::feature(image, i);
    for (std::size_t j = i + 1; j < N; ++j) {
      const double mu = cfg.mu(x.labels[i], x.labels[j], K);
      if (mu == 0.0) continue;
      e += mu * detail::pair_weight(cfg, fi, detail::feature(image, j));
    }
  }
  return e;
}

struct MeanFieldResult {
  std::vector<double> q;  // label-major like UnaryField
  Labeling labeling;
  int iterations = 0;
  bool converged = false;
  std::vector<double> max_delta;       // max |Q_t - Q_{t-1}| per iteration
  std::vector<double> max_norm_error;  // max |sum_l Q(l) - 1| per iteration
};

namespace detail {

/// Computes M_i(l) = sum_{j != i} w_ij Q_j(l) for every pixel and label.
class MessagePasser {
 public:
  MessagePasser(const CrfConfig& cfg, const Plane& image) : cfg_(cfg), image_(image) {
    const std::size_t N = image.px.size();
    exact_ = N <= cfg.exact_pixel_limit;
    if (exact_) {
      table_ = pair_table(cfg, image);
      return;
    }
    double sigma = 0.0;
    for (const auto& k : cfg.kernels)
      if (k.weight != 0.0) sigma = std::max(sigma, k.sigma_spatial);
    radius_ = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  }

  bool exact() const { return exact_; }
  std::ptrdiff_t radius() const { return radius_; }

  void operator()(const std::vector<double>& q, std::size_t K, std::vector<double>& m) const {
    const std::size_t N = image_.px.size();
    std::fill(m.begin(), m.end(), 0.0);
    if (exact_) {
      for (std::size_t i = 0; i < N; ++i) {
        const double* wi = table_.data() + i * N;
        for (std::size_t l = 0; l < K; ++l) {
          const double* ql = q.data() + l * N;
          double s = 0.0;
          for (std::size_t j = 0; j < N; ++j) s += wi[j] * ql[j];
          m[l * N + i] = s;
        }
      }
      return;
    }
    const auto H = static_cast<std::ptrdiff_t>(image_.height), W = static_cast<std::ptrdiff_t>(image_.width);
    for (std::ptrdiff_t y = 0; y < H; ++y)
      for (std::ptrdiff_t x = 0; x < W; ++x) {
        const auto i = static_cast<std::size_t>(y * W + x);
        const PixelFeature fi = feature(image_, i);
        for (std::ptrdiff_t yy = std::max<std::ptrdiff_t>(0, y - radius_); yy <= std::min(H - 1, y + radius_); ++yy)
          for (std::ptrdiff_t xx = std::max<std::ptrdiff_t>(0, x - radius_); xx <= std::min(W - 1, x + radius_); ++xx) {
            const auto j = static_cast<std::size_t>(yy * W + xx);
            if (j == i) continue;
            const double w = pair_weight(cfg_, fi, feature(image_, j));
            if (w == 0.0) continue;
            for (std::size_t l = 0; l < K; ++l) m[l * N + i] += w * q[l * N + j];
          }
      }
  }

 private:
  const CrfConfig& cfg_;
  const Plane& image_;
  bool exact_ = true;
  std::vector<double> table_;
  std::ptrdiff_t radius_ = 0;
};

/// Per-pixel softmax of -energy into q; returns max |sum - 1|.
inline double normalize_into(const std::vector<double>& energy, std::size_t K, std::size_t N, std::vector<double>& q) {
  double worst = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    double lo = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < K; ++l) lo = std::min(lo, energy[l * N + i]);
    double s = 0.0;
    for (std::size_t l = 0; l < K; ++l) s += (q[l * N + i] = std::exp(lo - energy[l * N + i]));
    double t = 0.0;
    for (std::size_t l = 0; l < K; ++l) t += (q[l * N + i] /= s);
    worst = std::max(worst, std::abs(t - 1.0));
  }
  return worst;
}

inline Labeling argmax_q(const std::vector<double>& q, std::size_t K, std::size_t H, std::size_t W) {
  const std::size_t N = H * W;
  Labeling x(H, W);
  for (std::size_t i = 0; i < N; ++i) {
    std::size_t best = 0;
    for (std::size_t l = 1; l < K; ++l)
      if (q[l * N + i] > q[best * N + i]) best = l;
    x.labels[i] = static_cast<std::uint8_t>(best);
  }
  return x;
}

}  // namespace detail

/// Parallel (double-buffered) mean-field updates starting from Q = softmax(-psi).
/// Each iteration computes every message from the previous Q.
inline MeanFieldResult mean_field_infer(const UnaryField& u, const CrfConfig& cfg, const Plane& image) {
  detail::check_crf_dims(u, image, "mean_field_infer");
  const std::size_t K = u.labels, N = u.pixels();
  cfg.validate(K);
  MeanFieldResult r;
  std::vector<double> q(K * N), next(K * N), msg(K * N), energy(K * N);
  detail::normalize_into(u.values, K, N, q);
  const detail::MessagePasser pass(cfg, image);

  for (int it = 0; it < cfg.iterations; ++it) {
    pass(q, K, msg);
    for (std::size_t l = 0; l < K; ++l)
      for (std::size_t i = 0; i < N; ++i) {
        double e = u.at(l, i);
        for (std::size_t m = 0; m < K; ++m) {
          const double mu = cfg.mu(l, m, K);
          if (mu != 0.0) e += mu * msg[m * N + i];
        }
        energy[l * N + i] = e;
      }
    r.max_norm_error.push_back(detail::normalize_into(energy, K, N, next));
    double delta = 0.0;
    for (std::size_t k = 0; k < q.size(); ++k) delta = std::max(delta, std::abs(next[k] - q[k]));
    r.max_delta.push_back(delta);
    q.swap(next);
    r.iterations = it + 1;
    if (delta < cfg.convergence_tol) {
      r.converged = true;
      break;
    }
  }
  r.labeling = detail::argmax_q(q, K, u.height, u.width);
  r.q = std::move(q);
  return r;
}

/// Exhaustive MAP over all K^N labelings (pixel 0 most significant);
/// the lexicographically first minimizer wins ties.
inline Labeling brute_force_map(const UnaryField& u, const CrfConfig& cfg, const Plane& image) {
  detail::check_crf_dims(u, image, "brute_force_map");
  const std::size_t K = u.labels, N = u.pixels();
  const double log_states = static_cast<double>(N) * std::log2(static_cast<double>(K));
  if (log_states > 20.0 + 1e-9)
    throw TooLarge(std::to_string(K) + "^" + std::to_string(N) + " labelings exceed 2^20");
  const std::vector<double> w = detail::pair_table(cfg, image);

  std::vector<std::uint8_t> x(N, 0), best;
  double best_e = std::numeric_limits<double>::infinity();
  for (;;) {
    double e = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      e += u.at(x[i], i);
      for (std::size_t j = i + 1; j < N; ++j) {
        const double mu = cfg.mu(x[i], x[j], K);
        if (mu != 0.0) e += mu * w[i * N + j];
      }
    }
    if (e < best_e) {
      best_e = e;
      best = x;
    }
    std::size_t p = N;
    while (p > 0 && x[p - 1] == K - 1) x[--p] = 0;
    if (p == 0) break;
    ++x[p - 1];
  }
  Labeling out(u.height, u.width);
  out.labels = best;
  return out;
}

}  // namespace cmeseg
