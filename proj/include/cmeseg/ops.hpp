#pragma once

// Forward and backward kernels for every layer type in the FCN-8 graph.
//
// All functions are pure: they read their inputs and return freshly allocated
// outputs. Reductions run in a fixed order in double precision, so results are
// bit-identical across runs.

#include <Eigen/Core>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "cmeseg/detail/im2col.hpp"
#include "cmeseg/error.hpp"
#include "cmeseg/tensor.hpp"

namespace cmeseg {

/// Kernel, bias and sweep geometry of a (transposed) convolution.
///
/// For conv2d the kernel is (out, in, kh, kw). For transposed_conv2d the same
/// tensor is read as (in, out, kh, kw), which makes the two ops adjoint when
/// they share a kernel. An empty bias means no bias term.
template <typename T>
struct ConvParams {
  Tensor<T> kernel;
  std::vector<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> kernel;
  std::vector<T> bias;
};

/// floor((in + 2*pad - k) / stride) + 1, or ShapeMismatch when no window fits.
inline std::size_t conv_output_extent(std::size_t in, std::size_t k, std::size_t stride,
                                      std::size_t pad) {
  if (stride == 0) throw ShapeMismatch("stride must be >= 1");
  if (k == 0) throw ShapeMismatch("kernel extent must be >= 1");
  if (in + 2 * pad < k)
    throw ShapeMismatch("kernel " + std::to_string(k) + " larger than padded extent " +
                        std::to_string(in + 2 * pad));
  return (in + 2 * pad - k) / stride + 1;
}

inline std::size_t transposed_output_extent(std::size_t in, std::size_t k, std::size_t stride,
                                            std::size_t pad) {
  if (stride == 0) throw ShapeMismatch("stride must be >= 1");
  if (in == 0 || k == 0) throw ShapeMismatch("empty transposed-convolution geometry");
  const std::size_t full = (in - 1) * stride + k;
  if (full <= 2 * pad) throw ShapeMismatch("padding consumes the whole transposed output");
  return full - 2 * pad;
}

namespace detail {

/// Widened kernel rows [row0, row1) of a (rows x cols) kernel matrix.
template <typename T>
RowMat widen_rows(const Tensor<T>& kernel, std::size_t row0, std::size_t row1, std::size_t cols) {
  RowMat m(static_cast<Eigen::Index>(row1 - row0), static_cast<Eigen::Index>(cols));
  const T* src = kernel.data().data() + row0 * cols;
  double* dst = m.data();
  for (std::size_t i = 0; i < (row1 - row0) * cols; ++i) dst[i] = static_cast<double>(src[i]);
  return m;
}

using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

inline constexpr std::size_t kWeightBudget = std::size_t{1} << 24;

template <typename T>
void check_bias(const ConvParams<T>& p, std::size_t channels) {
  if (!p.bias.empty() && p.bias.size() != channels)
    throw ShapeMismatch("bias length " + std::to_string(p.bias.size()) + " != " +
                        std::to_string(channels));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const ConvParams<T>& p) {
  const Dims& in = input.dims();
  const Dims& kd = p.kernel.dims();
  if (in.c != kd.c)
    throw ShapeMismatch("conv2d input channels " + std::to_string(in.c) + " != kernel in-channels " +
                        std::to_string(kd.c));
  detail::check_bias(p, kd.n);
  const std::size_t oh = conv_output_extent(in.h, kd.h, p.stride, p.padding);
  const std::size_t ow = conv_output_extent(in.w, kd.w, p.stride, p.padding);
  const detail::WindowGeometry g{in.c, in.h, in.w, kd.h, kd.w, p.stride, p.padding, oh, ow};
  const std::size_t K = g.rows();
  const std::size_t cout = kd.n;

  Tensor<T> out(Dims{in.n, cout, oh, ow});
  const std::size_t chunk_rows = detail::rows_per_chunk(g);
  const std::size_t block = std::max<std::size_t>(1, detail::kWeightBudget / std::max<std::size_t>(K, 1));
  detail::Scratch col;
  detail::Scratch res;
  for (std::size_t co0 = 0; co0 < cout; co0 += block) {
    const std::size_t co1 = std::min(cout, co0 + block);
    const detail::RowMat w = detail::widen_rows(p.kernel, co0, co1, K);
    for (std::size_t n = 0; n < in.n; ++n) {
      const auto in_d = detail::widen<T>(input.data().subspan(n * in.c * in.plane(), in.c * in.plane()));
      for (std::size_t y0 = 0; y0 < oh; y0 += chunk_rows) {
        const std::size_t y1 = std::min(oh, y0 + chunk_rows);
        const std::size_t S = (y1 - y0) * ow;
        col.resize(K * S);
        detail::im2col(in_d.data(), g, y0, y1, col.data());
        res.resize((co1 - co0) * S);
        detail::MatMap r(res.data(), static_cast<Eigen::Index>(co1 - co0), static_cast<Eigen::Index>(S));
        r.noalias() = w * detail::ConstMatMap(col.data(), static_cast<Eigen::Index>(K),
                                              static_cast<Eigen::Index>(S));
        for (std::size_t co = co0; co < co1; ++co) {
          const double b = p.bias.empty() ? 0.0 : static_cast<double>(p.bias[co]);
          T* dst = &out.at(n, co, y0, 0);
          const double* src = res.data() + (co - co0) * S;
          for (std::size_t i = 0; i < S; ++i) dst[i] = static_cast<T>(src[i] + b);
        }
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const ConvParams<T>& p,
                             const Tensor<T>& grad_out) {
  const Dims& in = input.dims();
  const Dims& kd = p.kernel.dims();
  if (in.c != kd.c) throw ShapeMismatch("conv2d_backward: channel mismatch");
  detail::check_bias(p, kd.n);
  const std::size_t oh = conv_output_extent(in.h, kd.h, p.stride, p.padding);
  const std::size_t ow = conv_output_extent(in.w, kd.w, p.stride, p.padding);
  if (grad_out.dims() != Dims{in.n, kd.n, oh, ow})
    throw ShapeMismatch("conv2d_backward: grad_out " + grad_out.dims().str() + " expected " +
                        Dims{in.n, kd.n, oh, ow}.str());
  const detail::WindowGeometry g{in.c, in.h, in.w, kd.h, kd.w, p.stride, p.padding, oh, ow};
  const auto K = static_cast<Eigen::Index>(g.rows());
  const auto cout = static_cast<Eigen::Index>(kd.n);

  const detail::RowMat w = detail::widen_rows(p.kernel, 0, kd.n, g.rows());
  detail::RowMat gw = detail::RowMat::Zero(cout, K);
  Eigen::VectorXd gb = Eigen::VectorXd::Zero(cout);
  detail::Scratch gin(input.size(), 0.0);
  const std::size_t chunk_rows = detail::rows_per_chunk(g);
  detail::Scratch col, dcol;
  for (std::size_t n = 0; n < in.n; ++n) {
    const auto in_d = detail::widen<T>(input.data().subspan(n * in.c * in.plane(), in.c * in.plane()));
    const auto go_d = detail::widen<T>(grad_out.data().subspan(n * kd.n * oh * ow, kd.n * oh * ow));
    for (std::size_t y0 = 0; y0 < oh; y0 += chunk_rows) {
      const std::size_t y1 = std::min(oh, y0 + chunk_rows);
      const auto S = static_cast<Eigen::Index>((y1 - y0) * ow);
      col.resize(g.rows() * S);
      detail::im2col(in_d.data(), g, y0, y1, col.data());
      detail::ConstStridedMap G(go_d.data() + y0 * ow, cout, S,
                                Eigen::OuterStride<>(static_cast<Eigen::Index>(oh * ow)));
      detail::ConstMatMap C(col.data(), K, S);
      gw.noalias() += G * C.transpose();
      gb += G.rowwise().sum();
      dcol.resize(g.rows() * S);
      detail::MatMap D(dcol.data(), K, S);
      D.noalias() = w.transpose() * G;
      detail::col2im(dcol.data(), g, y0, y1, gin.data() + n * in.c * in.plane());
    }
  }
  ConvGrads<T> out{Tensor<T>(in), Tensor<T>(kd), {}};
  detail::narrow_into<T>(gin, out.input.data());
  for (Eigen::Index i = 0; i < gw.size(); ++i) out.kernel[static_cast<std::size_t>(i)] = static_cast<T>(gw.data()[i]);
  if (!p.bias.empty()) {
    out.bias.resize(kd.n);
    for (std::size_t i = 0; i < kd.n; ++i) out.bias[i] = static_cast<T>(gb[static_cast<Eigen::Index>(i)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// transposed conv2d

template <typename T>
Tensor<T> transposed_conv2d_forward(const Tensor<T>& input, const ConvParams<T>& p) {
  const Dims& in = input.dims();
  const Dims& kd = p.kernel.dims();  // (in, out, kh, kw)
  if (in.c != kd.n)
    throw ShapeMismatch("transposed_conv2d input channels " + std::to_string(in.c) +
                        " != kernel rows " + std::to_string(kd.n));
  detail::check_bias(p, kd.c);
  const std::size_t oh = transposed_output_extent(in.h, kd.h, p.stride, p.padding);
  const std::size_t ow = transposed_output_extent(in.w, kd.w, p.stride, p.padding);
  // Window sweep over the output planes whose positions are the input pixels.
  const detail::WindowGeometry g{kd.c, oh, ow, kd.h, kd.w, p.stride, p.padding, in.h, in.w};
  if (conv_output_extent(oh, kd.h, p.stride, p.padding) != in.h ||
      conv_output_extent(ow, kd.w, p.stride, p.padding) != in.w)
    throw ShapeMismatch("transposed_conv2d geometry is not invertible");
  const auto K = static_cast<Eigen::Index>(g.rows());
  const auto A = static_cast<Eigen::Index>(kd.n);

  const detail::RowMat w = detail::widen_rows(p.kernel, 0, kd.n, g.rows());
  Tensor<T> out(Dims{in.n, kd.c, oh, ow});
  const std::size_t chunk_rows = detail::rows_per_chunk(g);
  detail::Scratch col;
  for (std::size_t n = 0; n < in.n; ++n) {
    const auto x = detail::widen<T>(input.data().subspan(n * in.c * in.plane(), in.c * in.plane()));
    detail::Scratch acc(kd.c * oh * ow, 0.0);
    for (std::size_t y0 = 0; y0 < in.h; y0 += chunk_rows) {
      const std::size_t y1 = std::min(in.h, y0 + chunk_rows);
      const auto S = static_cast<Eigen::Index>((y1 - y0) * in.w);
      col.resize(g.rows() * S);
      detail::MatMap C(col.data(), K, S);
      detail::ConstStridedMap X(x.data() + y0 * in.w, A, S,
                                Eigen::OuterStride<>(static_cast<Eigen::Index>(in.plane())));
      C.noalias() = w.transpose() * X;
      detail::col2im(col.data(), g, y0, y1, acc.data());
    }
    for (std::size_t c = 0; c < kd.c; ++c) {
      const double b = p.bias.empty() ? 0.0 : static_cast<double>(p.bias[c]);
      T* dst = &out.at(n, c, 0, 0);
      const double* src = acc.data() + c * oh * ow;
      for (std::size_t i = 0; i < oh * ow; ++i) dst[i] = static_cast<T>(src[i] + b);
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> transposed_conv2d_backward(const Tensor<T>& input, const ConvParams<T>& p,
                                        const Tensor<T>& grad_out) {
  const Dims& in = input.dims();
  const Dims& kd = p.kernel.dims();
  if (in.c != kd.n) throw ShapeMismatch("transposed_conv2d_backward: channel mismatch");
  detail::check_bias(p, kd.c);
  const std::size_t oh = transposed_output_extent(in.h, kd.h, p.stride, p.padding);
  const std::size_t ow = transposed_output_extent(in.w, kd.w, p.stride, p.padding);
  if (grad_out.dims() != Dims{in.n, kd.c, oh, ow})
    throw ShapeMismatch("transposed_conv2d_backward: grad_out " + grad_out.dims().str());
  const detail::WindowGeometry g{kd.c, oh, ow, kd.h, kd.w, p.stride, p.padding, in.h, in.w};
  const auto K = static_cast<Eigen::Index>(g.rows());
  const auto A = static_cast<Eigen::Index>(kd.n);

  const detail::RowMat w = detail::widen_rows(p.kernel, 0, kd.n, g.rows());
  detail::RowMat gw = detail::RowMat::Zero(A, K);
  std::vector<double> gb(kd.c, 0.0);
  detail::Scratch gx(input.size(), 0.0);
  const std::size_t chunk_rows = detail::rows_per_chunk(g);
  detail::Scratch col;
  for (std::size_t n = 0; n < in.n; ++n) {
    const auto x = detail::widen<T>(input.data().subspan(n * in.c * in.plane(), in.c * in.plane()));
    const auto go = detail::widen<T>(grad_out.data().subspan(n * kd.c * oh * ow, kd.c * oh * ow));
    for (std::size_t c = 0; c < kd.c; ++c)
      for (std::size_t i = 0; i < oh * ow; ++i) gb[c] += go[c * oh * ow + i];
    for (std::size_t y0 = 0; y0 < in.h; y0 += chunk_rows) {
      const std::size_t y1 = std::min(in.h, y0 + chunk_rows);
      const auto S = static_cast<Eigen::Index>((y1 - y0) * in.w);
      col.resize(g.rows() * S);
      detail::im2col(go.data(), g, y0, y1, col.data());
      detail::ConstMatMap C(col.data(), K, S);
      detail::ConstStridedMap X(x.data() + y0 * in.w, A, S,
                                Eigen::OuterStride<>(static_cast<Eigen::Index>(in.plane())));
      gw.noalias() += X * C.transpose();
      detail::StridedMap GX(gx.data() + n * in.c * in.plane() + y0 * in.w, A, S,
                            Eigen::OuterStride<>(static_cast<Eigen::Index>(in.plane())));
      GX.noalias() = w * C;
    }
  }
  ConvGrads<T> out{Tensor<T>(in), Tensor<T>(kd), {}};
  detail::narrow_into<T>(gx, out.input.data());
  for (Eigen::Index i = 0; i < gw.size(); ++i) out.kernel[static_cast<std::size_t>(i)] = static_cast<T>(gw.data()[i]);
  if (!p.bias.empty()) {
    out.bias.resize(kd.c);
    for (std::size_t i = 0; i < kd.c; ++i) out.bias[i] = static_cast<T>(gb[i]);
  }
  return out;
}

/// Channel-diagonal bilinear upsampling kernel, shape (channels, channels, k, k).
///
/// 1-D weights are w(i) = 1 - |i - c| / f with f = k/2 and c = f - 0.5; the
/// 2-D kernel is their outer product.
template <typename T>
Tensor<T> bilinear_init(std::size_t kernel_size, std::size_t stride, std::size_t channels) {
  if (kernel_size == 0 || kernel_size % 2 != 0)
    throw UnsupportedGeometry("bilinear kernel size must be even, got " + std::to_string(kernel_size));
  if (stride != kernel_size / 2)
    throw UnsupportedGeometry("bilinear stride must be kernel_size/2, got " + std::to_string(stride));
  const double f = static_cast<double>(kernel_size) / 2.0;
  const double c = f - 0.5;
  std::vector<double> w1(kernel_size);
  for (std::size_t i = 0; i < kernel_size; ++i)
    w1[i] = 1.0 - std::abs(static_cast<double>(i) - c) / f;
  Tensor<T> k(Dims{channels, channels, kernel_size, kernel_size});
  for (std::size_t ch = 0; ch < channels; ++ch)
    for (std::size_t y = 0; y < kernel_size; ++y)
      for (std::size_t x = 0; x < kernel_size; ++x) k.at(ch, ch, y, x) = static_cast<T>(w1[y] * w1[x]);
  return k;
}

// ---------------------------------------------------------------------------
// relu

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& input) {
  Tensor<T> out(input.dims());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  return out;
}

/// `activation` may be either the forward input or output; both have the same
/// positive support. Gradient at exactly zero is zero.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& activation, const Tensor<T>& grad_out) {
  require_same_dims(activation, grad_out, "relu_backward");
  Tensor<T> g(grad_out.dims());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = activation[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

// ---------------------------------------------------------------------------
// max pooling

template <typename T>
struct MaxPoolResult {
  Tensor<T> output;
  std::vector<std::size_t> argmax;  // flat input index per output element
  Dims input_dims;
};

/// Floor semantics: trailing rows/columns that do not fill a window are dropped.
template <typename T>
MaxPoolResult<T> maxpool2d_forward(const Tensor<T>& input, std::size_t window = 2, std::size_t stride = 2) {
  const Dims& d = input.dims();
  if (d.h < window || d.w < window)
    throw ShapeMismatch("maxpool extent " + d.str() + " smaller than window " + std::to_string(window));
  const std::size_t oh = (d.h - window) / stride + 1;
  const std::size_t ow = (d.w - window) / stride + 1;
  MaxPoolResult<T> r{Tensor<T>(Dims{d.n, d.c, oh, ow}), std::vector<std::size_t>(d.n * d.c * oh * ow), d};
  std::size_t o = 0;
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x, ++o) {
          std::size_t best = input.index(n, c, y * stride, x * stride);
          for (std::size_t ky = 0; ky < window; ++ky)
            for (std::size_t kx = 0; kx < window; ++kx) {
              const std::size_t idx = input.index(n, c, y * stride + ky, x * stride + kx);
              if (input[idx] > input[best]) best = idx;
            }
          r.output[o] = input[best];
          r.argmax[o] = best;
        }
  return r;
}

template <typename T>
Tensor<T> maxpool2d_backward(const MaxPoolResult<T>& fwd, const Tensor<T>& grad_out) {
  if (grad_out.dims() != fwd.output.dims()) throw ShapeMismatch("maxpool2d_backward: grad_out dims");
  detail::Scratch acc(fwd.input_dims.count(), 0.0);
  for (std::size_t o = 0; o < grad_out.size(); ++o) acc[fwd.argmax[o]] += static_cast<double>(grad_out[o]);
  Tensor<T> g(fwd.input_dims);
  detail::narrow_into<T>(acc, g.data());
  return g;
}

// ---------------------------------------------------------------------------
// crop

template <typename T>
Tensor<T> crop_forward(const Tensor<T>& input, std::size_t target_h, std::size_t target_w,
                       std::size_t offset_h, std::size_t offset_w) {
  const Dims& d = input.dims();
  if (offset_h + target_h > d.h || offset_w + target_w > d.w)
    throw ShapeMismatch("crop window " + std::to_string(target_h) + "x" + std::to_string(target_w) +
                        "@(" + std::to_string(offset_h) + "," + std::to_string(offset_w) +
                        ") exceeds " + d.str());
  Tensor<T> out(Dims{d.n, d.c, target_h, target_w});
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t y = 0; y < target_h; ++y) {
        const T* src = &input.at(n, c, y + offset_h, offset_w);
        std::copy(src, src + target_w, &out.at(n, c, y, 0));
      }
  return out;
}

template <typename T>
Tensor<T> crop_backward(const Dims& input_dims, const Tensor<T>& grad_out, std::size_t offset_h,
                        std::size_t offset_w) {
  const Dims& g = grad_out.dims();
  if (g.n != input_dims.n || g.c != input_dims.c || offset_h + g.h > input_dims.h ||
      offset_w + g.w > input_dims.w)
    throw ShapeMismatch("crop_backward: window does not fit " + input_dims.str());
  Tensor<T> out(input_dims);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t c = 0; c < g.c; ++c)
      for (std::size_t y = 0; y < g.h; ++y) {
        const T* src = &grad_out.at(n, c, y, 0);
        std::copy(src, src + g.w, &out.at(n, c, y + offset_h, offset_w));
      }
  return out;
}

// ---------------------------------------------------------------------------
// element-wise fuse

template <typename T>
Tensor<T> add_forward(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_dims(a, b, "elementwise_add");
  Tensor<T> out(a.dims());
  for (std::size_t i = 0; i < a.size(); ++i)
    out[i] = static_cast<T>(static_cast<double>(a[i]) + static_cast<double>(b[i]));
  return out;
}

/// Both addends receive the incoming gradient unchanged.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> add_backward(const Tensor<T>& grad_out) {
  return {grad_out, grad_out};
}

// ---------------------------------------------------------------------------
// softmax

/// Per-pixel softmax across channels with max subtraction.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& input) {
  const Dims& d = input.dims();
  if (d.c < 2) throw ShapeMismatch("softmax_channels needs >= 2 channels");
  Tensor<T> out(d);
  std::vector<double> e(d.c);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t i = 0; i < d.plane(); ++i) {
      const std::size_t base = n * d.c * d.plane() + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < d.c; ++c) mx = std::max(mx, static_cast<double>(input[base + c * d.plane()]));
      double sum = 0.0;
      for (std::size_t c = 0; c < d.c; ++c) {
        e[c] = std::exp(static_cast<double>(input[base + c * d.plane()]) - mx);
        sum += e[c];
      }
      for (std::size_t c = 0; c < d.c; ++c) out[base + c * d.plane()] = static_cast<T>(e[c] / sum);
    }
  return out;
}

}  // namespace cmeseg
