#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <sstream>
#include <vector>

#include "movia/common.hpp"

namespace movia {

// Dense row-major tensor. Video tensors use the frame-major layout
// (F, H, W, C); per-frame tensors use (H, W, C). Spatial indices are
// (y, x) with y = row.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape, T fill = T(0)) : shape_(std::move(shape)) {
    int64_t n = 1;
    for (int64_t d : shape_) {
      check(d >= 0, "Tensor: negative dimension");
      n *= d;
    }
    data_.assign(static_cast<size_t>(n), fill);
    compute_strides();
  }

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor full(std::vector<int64_t> shape, T v) { return Tensor(std::move(shape), v); }

  // Skips the zero fill; caller promises to write every element.
  static Tensor uninit(std::vector<int64_t> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    int64_t n = 1;
    for (int64_t d : t.shape_) {
      check(d >= 0, "Tensor: negative dimension");
      n *= d;
    }
    t.data_.resize(static_cast<size_t>(n));
    t.compute_strides();
    return t;
  }

  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t size(int64_t i) const { return shape_.at(static_cast<size_t>(i)); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  T& operator()(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * strides_[0] + j)]; }
  const T& operator()(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * strides_[0] + j)]; }

  T& operator()(int64_t y, int64_t x, int64_t c) {
    return data_[static_cast<size_t>(y * strides_[0] + x * strides_[1] + c)];
  }
  const T& operator()(int64_t y, int64_t x, int64_t c) const {
    return data_[static_cast<size_t>(y * strides_[0] + x * strides_[1] + c)];
  }

  T& operator()(int64_t f, int64_t y, int64_t x, int64_t c) {
    return data_[static_cast<size_t>(f * strides_[0] + y * strides_[1] + x * strides_[2] + c)];
  }
  const T& operator()(int64_t f, int64_t y, int64_t x, int64_t c) const {
    return data_[static_cast<size_t>(f * strides_[0] + y * strides_[1] + x * strides_[2] + c)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor& fill(T v) {
    std::fill(data_.begin(), data_.end(), v);
    return *this;
  }

  Tensor reshaped(std::vector<int64_t> shape) const {
    Tensor out;
    out.shape_ = std::move(shape);
    int64_t n = 1;
    for (int64_t d : out.shape_) n *= d;
    check(n == numel(), "Tensor::reshaped: element count mismatch");
    out.data_ = data_;
    out.compute_strides();
    return out;
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  T min_value() const {
    check(!data_.empty(), "Tensor::min_value on empty tensor");
    return *std::min_element(data_.begin(), data_.end());
  }
  T max_value() const {
    check(!data_.empty(), "Tensor::max_value on empty tensor");
    return *std::max_element(data_.begin(), data_.end());
  }
  T abs_max() const {
    T m = T(0);
    for (T v : data_) m = std::max(m, static_cast<T>(std::abs(static_cast<double>(v))));
    return m;
  }
  double sum() const {
    double s = 0;
    for (T v : data_) s += static_cast<double>(v);
    return s;
  }
  double mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(numel()); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
    return out;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << ")";
    return os.str();
  }

 private:
  void compute_strides() {
    strides_.assign(shape_.size(), 1);
    for (int64_t i = rank() - 2; i >= 0; --i)
      strides_[static_cast<size_t>(i)] = strides_[static_cast<size_t>(i + 1)] * shape_[static_cast<size_t>(i + 1)];
  }

  std::vector<int64_t> shape_;
  std::vector<int64_t> strides_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TensorU8 = Tensor<uint8_t>;

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.same_shape(b), "max_abs_diff: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <typename T>
double mean_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.same_shape(b), "mean_abs_diff: shape mismatch");
  if (a.numel() == 0) return 0;
  double s = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    s += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  return s / static_cast<double>(a.numel());
}

template <typename T>
double mean_sq_diff(const Tensor<T>& a, const Tensor<T>& b) {
  check(a.same_shape(b), "mean_sq_diff: shape mismatch");
  if (a.numel() == 0) return 0;
  double s = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.numel());
}

}  // namespace movia
