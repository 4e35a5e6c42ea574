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
#include <numbers>
#include <stdexcept>
#include <string>

#include "panodr/tensor.hpp"

// Equirectangular conventions shared by every panorama operation.
//
//   lon = 2*pi*(u + 0.5)/W - pi        (u: column, lon grows to the right)
//   lat = pi/2 - pi*(v + 0.5)/H        (v: row, row 0 is next to the zenith)
//
// World directions are y-up: dir(lon, lat) = (cos(lat) sin(lon), sin(lat),
// cos(lat) cos(lon)), so lon = 0 looks down +z and lon = +pi/2 down +x.
namespace panodr::geo {

inline constexpr double kPi = std::numbers::pi;

struct SphericalCoord {
  double lon = 0.0;  // [-pi, pi)
  double lat = 0.0;  // [-pi/2, pi/2], +lat is up

  // Longitude wrapped modulo 2*pi, latitude clamped.
  SphericalCoord normalized() const {
    double l = std::fmod(lon + kPi, 2.0 * kPi);
    if (l < 0) l += 2.0 * kPi;
    l -= kPi;
    if (l >= kPi) l -= 2.0 * kPi;
    return {l, std::clamp(lat, -kPi / 2, kPi / 2)};
  }
};

struct ViewSpec {
  SphericalCoord center;
  double fov_deg = 90.0;  // horizontal
  int out_w = 256;
  int out_h = 256;

  void validate() const {
    if (!(fov_deg > 0.0 && fov_deg < 170.0)) {
      throw std::invalid_argument("fov_deg must lie in (0, 170), got " +
                                  std::to_string(fov_deg));
    }
    if (out_w < 2 || out_h < 2) {
      throw std::invalid_argument("view size must be at least 2x2, got " +
                                  std::to_string(out_w) + "x" +
                                  std::to_string(out_h));
    }
  }
};

inline void require_equirect(int width, int height) {
  if (height <= 0 || width != 2 * height) {
    throw std::invalid_argument("equirectangular image must have W = 2H, got " +
                                std::to_string(width) + "x" +
                                std::to_string(height));
  }
}

inline SphericalCoord pixel_to_spherical(double u, double v, int width, int height) {
  require_equirect(width, height);
  // Pixel centers sit at integers, so the image covers [-0.5, W-0.5] x [-0.5, H-0.5].
  if (u < -0.5 || u > width - 0.5 || v < -0.5 || v > height - 0.5) {
    throw std::out_of_range("pixel (" + std::to_string(u) + ", " +
                            std::to_string(v) + ") outside image");
  }
  return {2.0 * kPi * (u + 0.5) / width - kPi,
          kPi / 2 - kPi * (v + 0.5) / height};
}

// Fractional pixel coordinates; u is wrapped into [-0.5, W - 0.5).
inline std::array<double, 2> spherical_to_pixel(SphericalCoord c, int width,
                                                int height) {
  require_equirect(width, height);
  const SphericalCoord n = c.normalized();
  const double u = (n.lon + kPi) / (2.0 * kPi) * width - 0.5;
  const double v = (kPi / 2 - n.lat) / kPi * height - 0.5;
  return {u, v};
}

inline std::array<double, 3> direction(SphericalCoord c) {
  const double cl = std::cos(c.lat);
  return {cl * std::sin(c.lon), std::sin(c.lat), cl * std::cos(c.lon)};
}

inline SphericalCoord from_direction(const std::array<double, 3>& d) {
  return {std::atan2(d[0], d[2]), std::atan2(d[1], std::hypot(d[0], d[2]))};
}

// Bilinear sample of channel c of batch entry n; columns wrap, rows clamp.
template <typename T>
T sample_bilinear(const Tensor<T>& img, int n, int c, double u, double v) {
  const int w = img.w(), h = img.h();
  const double fu = std::floor(u), fv = std::floor(v);
  const double au = u - fu, av = v - fv;
  int u0 = static_cast<int>(fu) % w;
  if (u0 < 0) u0 += w;
  const int u1 = (u0 + 1) % w;
  const int v0 = std::clamp(static_cast<int>(fv), 0, h - 1);
  const int v1 = std::clamp(static_cast<int>(fv) + 1, 0, h - 1);
  const T* p = img.plane(n, c);
  const double top = (1 - au) * p[v0 * w + u0] + au * p[v0 * w + u1];
  const double bot = (1 - au) * p[v1 * w + u0] + au * p[v1 * w + u1];
  return static_cast<T>((1 - av) * top + av * bot);
}

// Tangent-plane (gnomonic) view of a panorama (1,C,H,W) -> (1,C,out_h,out_w).
template <typename T>
Tensor<T> gnomonic_project(const Tensor<T>& pano, const ViewSpec& view) {
  view.validate();
  require_equirect(pano.w(), pano.h());
  const SphericalCoord ctr = view.center.normalized();
  const double focal = 0.5 * view.out_w / std::tan(0.5 * view.fov_deg * kPi / 180.0);
  const auto fwd = direction(ctr);
  const std::array<double, 3> right{std::cos(ctr.lon), 0.0, -std::sin(ctr.lon)};
  const std::array<double, 3> up{-std::sin(ctr.lat) * std::sin(ctr.lon),
                                 std::cos(ctr.lat),
                                 -std::sin(ctr.lat) * std::cos(ctr.lon)};
  Tensor<T> out({1, pano.c(), view.out_h, view.out_w});
  for (int j = 0; j < view.out_h; ++j) {
    const double y = j + 0.5 - 0.5 * view.out_h;
    for (int i = 0; i < view.out_w; ++i) {
      const double x = i + 0.5 - 0.5 * view.out_w;
      std::array<double, 3> d;
      for (int a = 0; a < 3; ++a) d[a] = focal * fwd[a] + x * right[a] - y * up[a];
      const auto px = spherical_to_pixel(from_direction(d), pano.w(), pano.h());
      for (int c = 0; c < pano.c(); ++c) {
        out.at(0, c, j, i) = sample_bilinear(pano, 0, c, px[0], px[1]);
      }
    }
  }
  return out;
}

}  // namespace panodr::geo
