#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cmeseg/error.hpp"

namespace cmeseg {

/// Extents of a 4-D tensor in (batch, channel, height, width) order.
struct Dims {
  std::size_t n = 0, c = 0, h = 0, w = 0;

  std::size_t count() const { return n * c * h * w; }
  std::size_t plane() const { return h * w; }
  bool operator==(const Dims&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }
};

/// Dense NCHW tensor with optional same-shaped gradient storage.
///
/// Storage is contiguous and row-major inside each channel plane. The scalar
/// type is a template parameter: models store float, gradient checks use
/// double. Every arithmetic kernel in this library accumulates in double
/// regardless of T.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Dims dims, T fill = T(0)) : dims_(dims), data_(dims.count(), fill) {}
  Tensor(Dims dims, std::vector<T> data) : dims_(dims), data_(std::move(data)) {
    if (data_.size() != dims_.count())
      throw ShapeMismatch("data length " + std::to_string(data_.size()) + " does not match dims " +
                          dims_.str());
  }

  const Dims& dims() const { return dims_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * dims_.c + c) * dims_.h + y) * dims_.w + x;
  }
  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) { return data_[index(n, c, y, x)]; }
  const T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[index(n, c, y, x)];
  }

  bool has_grad() const { return !grad_.empty(); }
  /// Allocates (zeroed) gradient storage if absent and returns it.
  std::span<T> grad() {
    if (grad_.size() != data_.size()) grad_.assign(data_.size(), T(0));
    return grad_;
  }
  std::span<const T> grad() const { return grad_; }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T(0)); }
  void drop_grad() { grad_ = {}; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(dims_);
    std::transform(data_.begin(), data_.end(), out.storage().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

 private:
  Dims dims_{};
  std::vector<T> data_;
  std::vector<T> grad_;
};

template <typename T>
void require_same_dims(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.dims() != b.dims())
    throw ShapeMismatch(std::string(what) + ": " + a.dims().str() + " vs " + b.dims().str());
}

}  // namespace cmeseg
