/*
Copyright 2026 The panodr Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS-IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
*/

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace panodr {

// Storage with a fixed alignment. Eigen picks its vectorized peeling from the
// pointer address, so unaligned buffers make float results depend on where the
// allocator happened to place them.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

// Dense NCHW array. Every tensor in the library is 4-D; scalars are 1x1x1x1.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "[" << n << "," << c << "," << h << "," << w << "]";
    return os.str();
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(shape), data_(shape.numel(), fill) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      throw std::invalid_argument("negative tensor dimension " + shape.str());
    }
  }
  Tensor(Shape shape, const std::vector<T>& data)
      : shape_(shape), data_(data.begin(), data.end()) {
    if (data_.size() != shape.numel()) {
      throw std::invalid_argument("tensor data size does not match shape " +
                                  shape.str());
    }
  }

  static Tensor scalar(T v) { return Tensor({1, 1, 1, 1}, v); }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  AlignedVector<T>& vec() { return data_; }
  const AlignedVector<T>& vec() const { return data_; }

  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) *
               shape_.w +
           x;
  }
  T& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const {
    return data_[index(n, c, y, x)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Pointer to the (n, c) plane.
  T* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  T item() const {
    if (data_.size() != 1) {
      throw std::logic_error("item() on non-scalar tensor " + shape_.str());
    }
    return data_[0];
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) {
      out[i] = static_cast<U>(data_[i]);
    }
    return out;
  }

  // Copies batch entry `n` into a new 1xCxHxW tensor.
  Tensor slice_batch(int n) const {
    Tensor out({1, shape_.c, shape_.h, shape_.w});
    std::copy_n(data_.data() + index(n, 0, 0, 0), out.size(), out.data());
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

 private:
  Shape shape_;
  AlignedVector<T> data_;
};

template <typename T>
Tensor<T> stack_batch(std::span<const Tensor<T>> items) {
  if (items.empty()) throw std::invalid_argument("stack_batch: no items");
  Shape s = items[0].shape();
  int total = 0;
  for (const auto& t : items) {
    const Shape& o = t.shape();
    if (o.c != s.c || o.h != s.h || o.w != s.w) {
      throw std::invalid_argument("stack_batch: shape mismatch " + o.str() +
                                  " vs " + s.str());
    }
    total += o.n;
  }
  Tensor<T> out({total, s.c, s.h, s.w});
  T* dst = out.data();
  for (const auto& t : items) dst = std::copy(t.data(), t.data() + t.size(), dst);
  return out;
}

inline void require_same_shape(const Shape& a, const Shape& b,
                               const char* what) {
  if (!(a == b)) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                a.str() + " vs " + b.str());
  }
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

// Cyclic horizontal shift: out[..., x] = in[..., (x - k) mod W].
template <typename T>
Tensor<T> roll_horizontal(const Tensor<T>& x, long k) {
  const Shape& s = x.shape();
  Tensor<T> out(s);
  if (s.w == 0) return out;
  const long shift = ((k % s.w) + s.w) % s.w;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < s.h; ++y) {
        const T* src = x.data() + x.index(n, c, y, 0);
        T* dst = out.data() + out.index(n, c, y, 0);
        for (int i = 0; i < s.w; ++i) dst[(i + shift) % s.w] = src[i];
      }
    }
  }
  return out;
}

// Width padded by wrapping, height padded by edge replication.
template <typename T>
Tensor<T> circular_pad(const Tensor<T>& x, int pad) {
  const Shape& s = x.shape();
  if (pad < 0) throw std::invalid_argument("circular_pad: negative pad");
  if (pad > s.w) {
    throw std::invalid_argument("circular_pad: pad " + std::to_string(pad) +
                                " exceeds width " + std::to_string(s.w));
  }
  Tensor<T> out({s.n, s.c, s.h + 2 * pad, s.w + 2 * pad});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < out.h(); ++y) {
        const int sy = std::clamp(y - pad, 0, s.h - 1);
        for (int xo = 0; xo < out.w(); ++xo) {
          const int sx = ((xo - pad) % s.w + s.w) % s.w;
          out.at(n, c, y, xo) = x.at(n, c, sy, sx);
        }
      }
    }
  }
  return out;
}

}  // namespace panodr
