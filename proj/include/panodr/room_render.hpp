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
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "panodr/pano_geometry.hpp"
#include "panodr/random.hpp"
#include "panodr/tensor.hpp"

// Procedural cuboid rooms rendered as equirectangular panoramas by casting one
// ray per pixel center. Room coordinates: x in [0, width], y in [0, height]
// (y up, floor at 0), z in [0, depth]. Panorama longitude 0 looks down +z.
namespace panodr::room {

enum class Surface : std::uint8_t {
  kCeiling = 0,
  kWall = 1,
  kFloor = 2,
};

using Rgb = std::array<float, 3>;

struct Texture {
  Rgb base{0.5f, 0.5f, 0.5f};
  double checker_period = 0.5;  // meters
  double checker_amp = 0.03;    // +/- offset of alternating cells
  double gradient = 0.0;        // relative brightness change bottom->top

  Rgb shade(double a, double b, double height_frac) const {
    const long cell = static_cast<long>(std::floor(a / checker_period)) +
                      static_cast<long>(std::floor(b / checker_period));
    const double offset = (cell & 1L) ? checker_amp : -checker_amp;
    const double g = 1.0 + gradient * (height_frac - 0.5);
    Rgb out;
    for (int c = 0; c < 3; ++c) {
      out[c] = static_cast<float>(std::clamp((base[c] + offset) * g, 0.0, 1.0));
    }
    return out;
  }
};

// Axis-aligned box standing on the floor.
struct Box {
  double x0 = 0, x1 = 0, z0 = 0, z1 = 0, height = 0;
  Rgb color{0.8f, 0.2f, 0.2f};
};

struct RoomSpec {
  double width = 4.0;   // x extent
  double depth = 4.0;   // z extent
  double height = 3.0;  // y extent
  std::array<double, 3> camera{2.0, 1.5, 2.0};
  Texture ceiling{{0.9f, 0.9f, 0.88f}, 0.6, 0.02, 0.0};
  Texture floor{{0.35f, 0.27f, 0.2f}, 0.5, 0.04, 0.0};
  // -x, +x, -z, +z walls.
  std::array<Texture, 4> walls{};
  std::vector<Box> objects;

  void validate() const {
    if (!(width > 0 && depth > 0 && height > 0) || !std::isfinite(width) ||
        !std::isfinite(depth) || !std::isfinite(height)) {
      throw std::invalid_argument("degenerate room dimensions");
    }
    const auto& c = camera;
    if (!(c[0] > 0 && c[0] < width && c[1] > 0 && c[1] < height && c[2] > 0 &&
          c[2] < depth)) {
      throw std::invalid_argument("camera is not strictly inside the room");
    }
    for (const auto& b : objects) {
      if (!(b.x0 >= 0 && b.x1 <= width && b.z0 >= 0 && b.z1 <= depth &&
            b.x0 < b.x1 && b.z0 < b.z1 && b.height > 0 && b.height <= height)) {
        throw std::invalid_argument("object box is not inside the room");
      }
      if (c[0] >= b.x0 && c[0] <= b.x1 && c[2] >= b.z0 && c[2] <= b.z1 &&
          c[1] <= b.height) {
        throw std::invalid_argument("camera is inside an object");
      }
    }
  }
};

inline nlohmann::json to_json(const Texture& t) {
  return {{"base", t.base}, {"checker_period", t.checker_period},
          {"checker_amp", t.checker_amp}, {"gradient", t.gradient}};
}

inline Texture texture_from_json(const nlohmann::json& j) {
  Texture t;
  t.base = j.at("base").get<Rgb>();
  t.checker_period = j.at("checker_period").get<double>();
  t.checker_amp = j.at("checker_amp").get<double>();
  t.gradient = j.at("gradient").get<double>();
  return t;
}

inline nlohmann::json to_json(const RoomSpec& s) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& b : s.objects) {
    objs.push_back({{"x0", b.x0}, {"x1", b.x1}, {"z0", b.z0}, {"z1", b.z1},
                    {"height", b.height}, {"color", b.color}});
  }
  nlohmann::json walls = nlohmann::json::array();
  for (const auto& w : s.walls) walls.push_back(to_json(w));
  return {{"width", s.width},     {"depth", s.depth},
          {"height", s.height},   {"camera", s.camera},
          {"ceiling", to_json(s.ceiling)}, {"floor", to_json(s.floor)},
          {"walls", walls},       {"objects", objs}};
}

inline RoomSpec room_spec_from_json(const nlohmann::json& j) {
  RoomSpec s;
  s.width = j.at("width").get<double>();
  s.depth = j.at("depth").get<double>();
  s.height = j.at("height").get<double>();
  s.camera = j.at("camera").get<std::array<double, 3>>();
  s.ceiling = texture_from_json(j.at("ceiling"));
  s.floor = texture_from_json(j.at("floor"));
  for (int i = 0; i < 4; ++i) s.walls[i] = texture_from_json(j.at("walls").at(i));
  for (const auto& o : j.at("objects")) {
    s.objects.push_back({o.at("x0").get<double>(), o.at("x1").get<double>(),
                         o.at("z0").get<double>(), o.at("z1").get<double>(),
                         o.at("height").get<double>(), o.at("color").get<Rgb>()});
  }
  return s;
}

struct RoomHit {
  double t = 0;
  Surface surface = Surface::kWall;
  int face = 0;  // 0 -x, 1 +x, 2 floor, 3 ceiling, 4 -z, 5 +z
  std::array<double, 3> point{};
};

// Exit point of a ray from inside the room.
inline RoomHit intersect_room(const RoomSpec& s, const std::array<double, 3>& o,
                              const std::array<double, 3>& d) {
  const double lo[3] = {0.0, 0.0, 0.0};
  const double hi[3] = {s.width, s.height, s.depth};
  RoomHit best;
  best.t = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) continue;
    const double plane = d[a] > 0 ? hi[a] : lo[a];
    const double t = (plane - o[a]) / d[a];
    if (t < best.t) {
      best.t = t;
      best.face = 2 * a + (d[a] > 0 ? 1 : 0);
    }
  }
  for (int a = 0; a < 3; ++a) best.point[a] = o[a] + best.t * d[a];
  if (best.face == 3) {
    best.surface = Surface::kCeiling;
  } else if (best.face == 2) {
    best.surface = Surface::kFloor;
  } else {
    best.surface = Surface::kWall;
  }
  return best;
}

// Slab test; returns the entry distance and face, or t = +inf on a miss.
inline std::pair<double, int> intersect_box(const Box& b, const std::array<double, 3>& o,
                                            const std::array<double, 3>& d) {
  const double lo[3] = {b.x0, 0.0, b.z0};
  const double hi[3] = {b.x1, b.height, b.z1};
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  int face = -1;
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < lo[a] || o[a] > hi[a]) return {std::numeric_limits<double>::infinity(), -1};
      continue;
    }
    double t0 = (lo[a] - o[a]) / d[a];
    double t1 = (hi[a] - o[a]) / d[a];
    int f = 2 * a;
    if (t0 > t1) {
      std::swap(t0, t1);
      f = 2 * a + 1;
    }
    if (t0 > t_near) {
      t_near = t0;
      face = f;
    }
    t_far = std::min(t_far, t1);
  }
  if (t_near > t_far || t_far <= 0 || t_near <= 0) {
    return {std::numeric_limits<double>::infinity(), -1};
  }
  return {t_near, face};
}

struct RenderResult {
  Tensor<float> empty;      // (1,3,H,W)
  Tensor<float> furnished;  // (1,3,H,W)
  Tensor<float> object_mask;  // (1,1,H,W), 1 where an object is the nearest hit
  std::vector<std::uint8_t> layout;  // H*W surface labels of the empty room
};

inline Rgb surface_color(const RoomSpec& s, const RoomHit& h) {
  const auto& p = h.point;
  const double hf = p[1] / s.height;
  switch (h.face) {
    case 3: {
      auto c = s.ceiling.shade(p[0], p[2], hf);
      for (auto& v : c) v *= 0.97f;
      return c;
    }
    case 2: {
      auto c = s.floor.shade(p[0], p[2], hf);
      for (auto& v : c) v *= 0.9f;
      return c;
    }
    case 0:
    case 1: {
      auto c = s.walls[h.face].shade(p[2], p[1], hf);
      for (auto& v : c) v *= 0.92f;
      return c;
    }
    default: {
      auto c = s.walls[h.face - 2].shade(p[0], p[1], hf);
      for (auto& v : c) v *= 0.84f;
      return c;
    }
  }
}

inline RenderResult render(const RoomSpec& spec, int height) {
  spec.validate();
  if (height < 2) throw std::invalid_argument("render height must be >= 2");
  const int width = 2 * height;
  RenderResult r{Tensor<float>({1, 3, height, width}),
                 Tensor<float>({1, 3, height, width}),
                 Tensor<float>({1, 1, height, width}),
                 std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width)};
  static constexpr float kObjectShade[6] = {0.78f, 0.86f, 0.6f, 1.0f, 0.7f, 0.92f};
  for (int v = 0; v < height; ++v) {
    for (int u = 0; u < width; ++u) {
      const auto sc = geo::pixel_to_spherical(u, v, width, height);
      const auto d = geo::direction(sc);
      const RoomHit hit = intersect_room(spec, spec.camera, d);
      const Rgb wall = surface_color(spec, hit);
      r.layout[static_cast<std::size_t>(v) * width + u] = static_cast<std::uint8_t>(hit.surface);
      double t_obj = std::numeric_limits<double>::infinity();
      Rgb obj{};
      for (const auto& b : spec.objects) {
        const auto [t, face] = intersect_box(b, spec.camera, d);
        if (t < t_obj) {
          t_obj = t;
          for (int c = 0; c < 3; ++c) obj[c] = b.color[c] * kObjectShade[face];
        }
      }
      const bool object = t_obj < hit.t;
      for (int c = 0; c < 3; ++c) {
        r.empty.at(0, c, v, u) = wall[c];
        r.furnished.at(0, c, v, u) = object ? obj[c] : wall[c];
      }
      r.object_mask.at(0, 0, v, u) = object ? 1.0f : 0.0f;
    }
  }
  return r;
}

// Random but plausible room: bright ceiling, mid-tone walls, darker floor,
// one to three boxes placed away from the camera.
inline RoomSpec random_room_spec(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x524f4f4dULL));
  RoomSpec s;
  s.width = rng.uniform(3.5, 8.0);
  s.depth = rng.uniform(3.5, 8.0);
  s.height = rng.uniform(2.5, 3.2);
  s.camera = {rng.uniform(0.35, 0.65) * s.width, rng.uniform(1.2, 1.7),
              rng.uniform(0.35, 0.65) * s.depth};
  const auto tint = [&](double level, double spread) {
    Rgb c;
    for (auto& v : c) v = static_cast<float>(std::clamp(level + rng.uniform(-spread, spread), 0.0, 1.0));
    return c;
  };
  s.ceiling = {tint(rng.uniform(0.84, 0.94), 0.03), rng.uniform(0.5, 1.0),
               rng.uniform(0.01, 0.025), 0.0};
  const Rgb wall_base = tint(rng.uniform(0.52, 0.7), 0.08);
  const double wall_period = rng.uniform(0.4, 0.9);
  const double wall_amp = rng.uniform(0.015, 0.04);
  const double wall_grad = rng.uniform(0.0, 0.12);
  for (auto& w : s.walls) {
    Rgb b = wall_base;
    const float jitter = static_cast<float>(rng.uniform(-0.03, 0.03));
    for (auto& v : b) v = std::clamp(v + jitter, 0.0f, 1.0f);
    w = {b, wall_period, wall_amp, wall_grad};
  }
  const double floor_level = rng.uniform(0.22, 0.4);
  s.floor = {{static_cast<float>(floor_level + 0.06), static_cast<float>(floor_level),
              static_cast<float>(floor_level - 0.06)},
             rng.uniform(0.3, 0.8), rng.uniform(0.02, 0.05), 0.0};
  const int count = static_cast<int>(rng.integer(1, 3));
  for (int i = 0; i < count; ++i) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      Box b;
      const double sx = rng.uniform(0.4, 1.4), sz = rng.uniform(0.4, 1.4);
      b.x0 = rng.uniform(0.1, s.width - 0.1 - sx);
      b.z0 = rng.uniform(0.1, s.depth - 0.1 - sz);
      b.x1 = b.x0 + sx;
      b.z1 = b.z0 + sz;
      b.height = rng.uniform(0.4, 1.5);
      b.color = {static_cast<float>(rng.uniform(0.05, 0.95)),
                 static_cast<float>(rng.uniform(0.05, 0.95)),
                 static_cast<float>(rng.uniform(0.05, 0.95))};
      const double dx = std::max({b.x0 - s.camera[0], 0.0, s.camera[0] - b.x1});
      const double dz = std::max({b.z0 - s.camera[2], 0.0, s.camera[2] - b.z1});
      if (std::hypot(dx, dz) >= 0.9) {
        s.objects.push_back(b);
        break;
      }
    }
  }
  return s;
}

}  // namespace panodr::room
