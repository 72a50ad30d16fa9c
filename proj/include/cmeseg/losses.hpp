#pragma once

// Training losses. Each returns the scalar loss and its gradient; the
// logistic and joint losses report the gradient with respect to the
// pre-softmax scores, the Dice loss with respect to the CME probabilities.

#include <algorithm>
#include <cmath>
#include <limits>

#include "cmeseg/error.hpp"
#include "cmeseg/image.hpp"
#include "cmeseg/tensor.hpp"

namespace cmeseg {

inline constexpr double kDiceSmoothing = 1e-6;
inline constexpr std::size_t kForegroundChannel = 1;

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> grad;
};

namespace detail {

template <typename T>
void check_heatmap(const Tensor<T>& heatmap, const SegMask& truth, const char* what) {
  const Dims& d = heatmap.dims();
  if (d.n != 1 || d.c < 2 || d.h != truth.height || d.w != truth.width)
    throw ShapeMismatch(std::string(what) + ": heatmap " + d.str() + " vs mask " +
                        std::to_string(truth.height) + "x" + std::to_string(truth.width));
}

}  // namespace detail

/// Mean over pixels of -log p(true class). The gradient is the fused
/// softmax-with-loss form (p - onehot) / N with respect to the scores.
template <typename T>
LossResult<T> logistic_loss(const Tensor<T>& heatmap, const SegMask& truth) {
  detail::check_heatmap(heatmap, truth, "logistic_loss");
  const Dims& d = heatmap.dims();
  const std::size_t N = d.plane();
  LossResult<T> r{0.0, Tensor<T>(d)};
  const double inv_n = 1.0 / static_cast<double>(N);
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t label = truth.labels[i];
    if (label >= d.c) throw ShapeMismatch("label out of range in logistic_loss");
    const double p_true = static_cast<double>(heatmap[label * N + i]);
    r.loss -= std::log(std::max(p_true, std::numeric_limits<double>::min()));
    for (std::size_t c = 0; c < d.c; ++c) {
      const double p = static_cast<double>(heatmap[c * N + i]);
      r.grad[c * N + i] = static_cast<T>((p - (c == label ? 1.0 : 0.0)) * inv_n);
    }
  }
  r.loss *= inv_n;
  return r;
}

/// 1 - D with D = (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps), p the
/// foreground probability. grad has dims (1, 1, H, W): d(loss)/d(p_i).
template <typename T>
LossResult<T> dice_loss(const Tensor<T>& heatmap, const SegMask& truth) {
  detail::check_heatmap(heatmap, truth, "dice_loss");
  const Dims& d = heatmap.dims();
  const std::size_t N = d.plane();
  const T* p = heatmap.data().data() + kForegroundChannel * N;
  double inter = 0.0, pp = 0.0, gg = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const double pi = static_cast<double>(p[i]);
    const double gi = truth.labels[i] ? 1.0 : 0.0;
    inter += pi * gi;
    pp += pi * pi;
    gg += gi;
  }
  const double num = 2.0 * inter + kDiceSmoothing;
  const double den = pp + gg + kDiceSmoothing;
  LossResult<T> r{1.0 - num / den, Tensor<T>(Dims{1, 1, d.h, d.w})};
  for (std::size_t i = 0; i < N; ++i) {
    const double gi = truth.labels[i] ? 1.0 : 0.0;
    const double dD = (2.0 * gi * den - num * 2.0 * static_cast<double>(p[i])) / (den * den);
    r.grad[i] = static_cast<T>(-dD);
  }
  return r;
}

/// logistic + dice_weight * dice, with the Dice gradient pushed through the
/// softmax so the result is with respect to the scores.
template <typename T>
LossResult<T> joint_loss(const Tensor<T>& heatmap, const SegMask& truth, double dice_weight) {
  LossResult<T> r = logistic_loss(heatmap, truth);
  if (dice_weight == 0.0) return r;
  const LossResult<T> dl = dice_loss(heatmap, truth);
  r.loss += dice_weight * dl.loss;
  const Dims& d = heatmap.dims();
  const std::size_t N = d.plane();
  for (std::size_t i = 0; i < N; ++i) {
    const double g = dice_weight * static_cast<double>(dl.grad[i]);
    const double pf = static_cast<double>(heatmap[kForegroundChannel * N + i]);
    for (std::size_t c = 0; c < d.c; ++c) {
      const double pc = static_cast<double>(heatmap[c * N + i]);
      const double jac = pf * ((c == kForegroundChannel ? 1.0 : 0.0) - pc);
      r.grad[c * N + i] = static_cast<T>(static_cast<double>(r.grad[c * N + i]) + g * jac);
    }
  }
  return r;
}

}  // namespace cmeseg
