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
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "panodr/tensor.hpp"

namespace panodr {

namespace detail {

// Box-filter weights mapping `src` samples onto `dst` samples along one axis.
inline std::vector<std::vector<std::pair<int, double>>> area_weights(int src, int dst) {
  std::vector<std::vector<std::pair<int, double>>> w(dst);
  const double scale = static_cast<double>(src) / dst;
  for (int i = 0; i < dst; ++i) {
    const double a = i * scale, b = (i + 1) * scale;
    for (int s = static_cast<int>(std::floor(a)); s < std::min(src, static_cast<int>(std::ceil(b))); ++s) {
      const double overlap = std::min(b, s + 1.0) - std::max(a, static_cast<double>(s));
      if (overlap > 0) w[i].emplace_back(s, overlap / scale);
    }
  }
  return w;
}

}  // namespace detail

// Area-averaging resize of every plane to out_h x out_w.
template <typename T>
Tensor<T> resize_area(const Tensor<T>& in, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize_area: bad size");
  if (in.h() == out_h && in.w() == out_w) return in;
  const auto wy = detail::area_weights(in.h(), out_h);
  const auto wx = detail::area_weights(in.w(), out_w);
  Tensor<T> out({in.n(), in.c(), out_h, out_w});
  std::vector<double> tmp(static_cast<std::size_t>(in.h()) * out_w);
  for (int n = 0; n < in.n(); ++n) {
    for (int c = 0; c < in.c(); ++c) {
      const T* src = in.plane(n, c);
      for (int y = 0; y < in.h(); ++y) {
        for (int x = 0; x < out_w; ++x) {
          double acc = 0;
          for (const auto& [s, wt] : wx[x]) acc += wt * src[y * in.w() + s];
          tmp[y * out_w + x] = acc;
        }
      }
      T* dst = out.plane(n, c);
      for (int y = 0; y < out_h; ++y) {
        for (int x = 0; x < out_w; ++x) {
          double acc = 0;
          for (const auto& [s, wt] : wy[y]) acc += wt * tmp[s * out_w + x];
          dst[y * out_w + x] = static_cast<T>(acc);
        }
      }
    }
  }
  return out;
}

// Nearest-neighbour resize (pixel centers), for label and id maps.
template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& in, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize_nearest: bad size");
  if (in.h() == out_h && in.w() == out_w) return in;
  Tensor<T> out({in.n(), in.c(), out_h, out_w});
  for (int n = 0; n < in.n(); ++n) {
    for (int c = 0; c < in.c(); ++c) {
      for (int y = 0; y < out_h; ++y) {
        const int sy = std::min(in.h() - 1, static_cast<int>((y + 0.5) * in.h() / out_h));
        for (int x = 0; x < out_w; ++x) {
          const int sx = std::min(in.w() - 1, static_cast<int>((x + 0.5) * in.w() / out_w));
          out.at(n, c, y, x) = in.at(n, c, sy, sx);
        }
      }
    }
  }
  return out;
}

// Bilinear resize with horizontal wrap and vertical clamp (panorama domain).
template <typename T>
Tensor<T> resize_bilinear_pano(const Tensor<T>& in, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize_bilinear: bad size");
  if (in.h() == out_h && in.w() == out_w) return in;
  Tensor<T> out({in.n(), in.c(), out_h, out_w});
  const double sy = static_cast<double>(in.h()) / out_h;
  const double sx = static_cast<double>(in.w()) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = (y + 0.5) * sy - 0.5;
    const int y0 = static_cast<int>(std::floor(fy));
    const double ay = fy - y0;
    const int r0 = std::clamp(y0, 0, in.h() - 1), r1 = std::clamp(y0 + 1, 0, in.h() - 1);
    for (int x = 0; x < out_w; ++x) {
      const double fx = (x + 0.5) * sx - 0.5;
      const int x0 = static_cast<int>(std::floor(fx));
      const double ax = fx - x0;
      const int c0 = ((x0 % in.w()) + in.w()) % in.w();
      const int c1 = (c0 + 1) % in.w();
      for (int n = 0; n < in.n(); ++n) {
        for (int c = 0; c < in.c(); ++c) {
          const T* p = in.plane(n, c);
          const double top = (1 - ax) * p[r0 * in.w() + c0] + ax * p[r0 * in.w() + c1];
          const double bot = (1 - ax) * p[r1 * in.w() + c0] + ax * p[r1 * in.w() + c1];
          out.at(n, c, y, x) = static_cast<T>((1 - ay) * top + ay * bot);
        }
      }
    }
  }
  return out;
}

}  // namespace panodr
