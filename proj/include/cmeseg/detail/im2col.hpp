#pragma once

// Lowering helpers shared by the convolution kernels. Everything here works on
// double buffers; callers convert at the boundary.

#include <Eigen/Core>
#include <algorithm>
#include <cstddef>
#include <span>
#include <type_traits>
#include <vector>

namespace cmeseg::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// Aligned scratch for the GEMM operands.
using Scratch = std::vector<double, Eigen::aligned_allocator<double>>;

/// Upper bound (in doubles) for one lowered column buffer.
inline constexpr std::size_t kColumnBudget = std::size_t{1} << 22;

/// Geometry of a strided, zero-padded window sweep over one image plane stack.
struct WindowGeometry {
  std::size_t channels, in_h, in_w;  // plane stack being windowed
  std::size_t kh, kw, stride, pad;
  std::size_t out_h, out_w;          // number of window positions

  std::size_t rows() const { return channels * kh * kw; }
};

/// Copies window contents for output rows [y0, y1) into col, laid out as
/// rows() x ((y1 - y0) * out_w), row-major.
inline void im2col(const double* in, const WindowGeometry& g, std::size_t y0, std::size_t y1,
                   double* col) {
  const std::size_t span_w = (y1 - y0) * g.out_w;
  const auto ih = static_cast<std::ptrdiff_t>(g.in_h);
  const auto iw = static_cast<std::ptrdiff_t>(g.in_w);
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const auto stride = static_cast<std::ptrdiff_t>(g.stride);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* plane = in + c * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* dst = col + ((c * g.kh + ky) * g.kw + kx) * span_w;
        for (std::size_t y = y0; y < y1; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) * stride - pad +
                                    static_cast<std::ptrdiff_t>(ky);
          double* row = dst + (y - y0) * g.out_w;
          if (sy < 0 || sy >= ih) {
            std::fill(row, row + g.out_w, 0.0);
            continue;
          }
          const double* src = plane + sy * iw;
          for (std::size_t x = 0; x < g.out_w; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) * stride - pad +
                                      static_cast<std::ptrdiff_t>(kx);
            row[x] = (sx >= 0 && sx < iw) ? src[sx] : 0.0;
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: accumulates col back into the plane stack.
inline void col2im(const double* col, const WindowGeometry& g, std::size_t y0, std::size_t y1,
                   double* out) {
  const std::size_t span_w = (y1 - y0) * g.out_w;
  const auto ih = static_cast<std::ptrdiff_t>(g.in_h);
  const auto iw = static_cast<std::ptrdiff_t>(g.in_w);
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  const auto stride = static_cast<std::ptrdiff_t>(g.stride);
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* plane = out + c * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* src = col + ((c * g.kh + ky) * g.kw + kx) * span_w;
        for (std::size_t y = y0; y < y1; ++y) {
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) * stride - pad +
                                    static_cast<std::ptrdiff_t>(ky);
          if (sy < 0 || sy >= ih) continue;
          const double* row = src + (y - y0) * g.out_w;
          double* dst = plane + sy * iw;
          for (std::size_t x = 0; x < g.out_w; ++x) {
            const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x) * stride - pad +
                                      static_cast<std::ptrdiff_t>(kx);
            if (sx >= 0 && sx < iw) dst[sx] += row[x];
          }
        }
      }
    }
  }
}

/// Rows of window positions per lowered chunk so one chunk stays within budget.
inline std::size_t rows_per_chunk(const WindowGeometry& g) {
  const std::size_t per_row = std::max<std::size_t>(1, g.rows() * g.out_w);
  return std::clamp<std::size_t>(kColumnBudget / per_row, 1, std::max<std::size_t>(1, g.out_h));
}

/// Widens a span to double. For double input this is a plain copy.
template <typename T>
Scratch widen(std::span<const T> v) {
  return Scratch(v.begin(), v.end());
}

template <typename T>
void narrow_into(const Scratch& src, std::span<T> dst) {
  std::transform(src.begin(), src.end(), dst.begin(), [](double v) { return static_cast<T>(v); });
}

}  // namespace cmeseg::detail
