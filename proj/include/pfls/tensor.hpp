// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "pfls/errors.hpp"

namespace pfls {

// Allocator that pins every buffer to a fixed 64-byte alignment. SIMD
// kernels (Eigen's and the compiler's) split loops based on the address
// modulo the vector width; with a fixed alignment the split -- and therefore
// the floating-point summation order -- is identical on every run, which is
// what makes repeated runs bit-reproducible within one process.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlignment = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlignment)));
  }
  void deallocate(T* p, std::size_t n) {
    ::operator delete(p, n * sizeof(T), std::align_val_t(kAlignment));
  }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
  template <typename U>
  bool operator!=(const AlignedAllocator<U>&) const {
    return false;
  }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

// Dense row-major float tensor with dynamic rank (rank <= 4 in practice).
// Images are H x W, feature maps C x H x W, conv kernels O x I x Kh x Kw.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)), data_(checked_size(shape_), 0.0f) {}

  Tensor(std::vector<int> shape, const std::vector<float>& data)
      : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    if (data_.size() != checked_size(shape_)) {
      throw ShapeError("tensor data size does not match shape " + shape_string());
    }
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, float value) {
    Tensor t(std::move(shape));
    t.fill(value);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  FloatBuffer& raw() { return data_; }
  const FloatBuffer& raw() const { return data_; }

  // Same payload under a different shape; element counts must agree.
  Tensor reshaped(const std::vector<int>& new_shape) const {
    Tensor out(new_shape);
    if (out.size() != size()) {
      throw ShapeError("cannot reshape " + shape_string() + " to " + out.shape_string());
    }
    out.data_ = data_;
    return out;
  }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at2(int y, int x) { return data_[static_cast<std::size_t>(y) * shape_[1] + x]; }
  float at2(int y, int x) const { return data_[static_cast<std::size_t>(y) * shape_[1] + x]; }

  float& at3(int c, int y, int x) {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }
  float at3(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }

  void fill(float value) {
    for (auto& v : data_) v = value;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (float v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  // Exact bitwise equality of shape and payload.
  bool equals(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

  std::string shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  static std::size_t checked_size(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ShapeError("negative tensor dimension");
      n *= static_cast<std::size_t>(d);
    }
    return shape.empty() ? 0 : n;
  }

  std::vector<int> shape_;
  FloatBuffer data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

}  // namespace pfls
