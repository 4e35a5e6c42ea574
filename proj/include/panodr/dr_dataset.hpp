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
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "panodr/image_io.hpp"
#include "panodr/pano_geometry.hpp"
#include "panodr/random.hpp"
#include "panodr/resample.hpp"
#include "panodr/room_render.hpp"
#include "panodr/tensor.hpp"

namespace panodr::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kNumLayoutClasses = 3;  // ceiling = 0, wall = 1, floor = 2

struct LayoutMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  LayoutMap() = default;
  LayoutMap(int h, int w, std::uint8_t fill = 1)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  bool operator==(const LayoutMap&) const = default;

  // One-hot (1,3,H,W).
  template <typename T>
  Tensor<T> one_hot() const {
    Tensor<T> t({1, kNumLayoutClasses, height, width});
    for (std::size_t i = 0; i < labels.size(); ++i) {
      t.plane(0, labels[i])[i] = T(1);
    }
    return t;
  }
};

struct DRSample {
  Tensor<float> furnished;  // (1,3,H,W)
  Tensor<float> empty;      // (1,3,H,W)
  Tensor<float> mask;       // (1,1,H,W), exactly {0,1}; 1 = diminish
  LayoutMap layout;
  std::string scene_id;
  // Undilated object support the mask was derived from; may be empty.
  Tensor<float> object_mask;
  json meta = json::object();

  int height() const { return furnished.h(); }
  int width() const { return furnished.w(); }
};

// Returns the list of violated DRSample invariants (empty when valid).
inline std::vector<std::string> validate_sample(const DRSample& s) {
  std::vector<std::string> problems;
  const int h = s.furnished.h(), w = s.furnished.w();
  if (s.furnished.c() != 3 || s.furnished.n() != 1) problems.push_back("furnished is not a single RGB image");
  if (h <= 0 || w != 2 * h) problems.push_back("furnished is not 2:1");
  if (!(s.empty.shape() == s.furnished.shape())) problems.push_back("empty size differs from furnished");
  if (!(s.mask.shape() == Shape{1, 1, h, w})) problems.push_back("mask size differs from furnished");
  if (s.layout.height != h || s.layout.width != w) problems.push_back("layout size differs from furnished");
  if (!problems.empty()) return problems;
  for (float v : s.mask.span()) {
    if (v != 0.0f && v != 1.0f) {
      problems.push_back("mask is not binary");
      break;
    }
  }
  for (auto l : s.layout.labels) {
    if (l >= kNumLayoutClasses) {
      problems.push_back("layout label outside {0,1,2}");
      break;
    }
  }
  const auto in_range = [](const Tensor<float>& t) {
    return std::all_of(t.span().begin(), t.span().end(),
                       [](float v) { return std::isfinite(v) && v >= 0.0f && v <= 1.0f; });
  };
  if (!in_range(s.furnished) || !in_range(s.empty)) problems.push_back("RGB values outside [0,1]");
  if (!s.object_mask.empty()) {
    // Only toy renders guarantee that objects are the sole difference; real
    // renders also differ at every other removed instance.
    const bool toy = s.meta.contains("spec");
    if (!(s.object_mask.shape() == s.mask.shape())) {
      problems.push_back("object mask size differs");
    } else if (toy) {
      // Outside the object support, furnished and empty agree.
      for (int y = 0; y < h && problems.empty(); ++y) {
        for (int x = 0; x < w; ++x) {
          if (s.object_mask.at(0, 0, y, x) != 0.0f) continue;
          bool same = true;
          for (int c = 0; c < 3; ++c) same = same && s.furnished.at(0, c, y, x) == s.empty.at(0, c, y, x);
          if (!same) {
            problems.push_back("furnished differs from empty outside the object support");
            break;
          }
        }
      }
    }
  }
  if (s.scene_id.empty()) problems.push_back("empty scene_id");
  return problems;
}

// ---------------------------------------------------------------------------
// Masks.

enum class MaskKind { kObjectDilate, kFreeformStrokes };

struct MaskPolicy {
  MaskKind kind = MaskKind::kObjectDilate;
  int dilate_px = 1;
  std::array<int, 2> stroke_count{1, 4};
  std::array<double, 2> stroke_width_frac{0.04, 0.12};  // of image height
  std::array<double, 2> area_bounds{0.01, 0.4};         // fraction of image area

  void validate() const {
    if (dilate_px < 0) throw std::invalid_argument("dilate_px must be >= 0");
    if (!(area_bounds[0] > 0 && area_bounds[0] < area_bounds[1] && area_bounds[1] <= 0.4)) {
      throw std::invalid_argument("area_bounds must satisfy 0 < min < max <= 0.4");
    }
    if (stroke_count[0] < 1 || stroke_count[1] < stroke_count[0]) {
      throw std::invalid_argument("bad stroke_count range");
    }
    if (!(stroke_width_frac[0] > 0 && stroke_width_frac[1] >= stroke_width_frac[0])) {
      throw std::invalid_argument("bad stroke width range");
    }
  }
};

inline json to_json(const MaskPolicy& p) {
  return {{"kind", p.kind == MaskKind::kObjectDilate ? "object_dilate" : "freeform_strokes"},
          {"dilate_px", p.dilate_px},
          {"stroke_count", p.stroke_count},
          {"stroke_width_frac", p.stroke_width_frac},
          {"area_bounds", p.area_bounds}};
}

inline MaskPolicy mask_policy_from_json(const json& j) {
  MaskPolicy p;
  const std::string kind = j.value("kind", "object_dilate");
  if (kind == "object_dilate") {
    p.kind = MaskKind::kObjectDilate;
  } else if (kind == "freeform_strokes") {
    p.kind = MaskKind::kFreeformStrokes;
  } else {
    throw std::invalid_argument("unknown mask kind " + kind);
  }
  p.dilate_px = j.value("dilate_px", p.dilate_px);
  p.stroke_count = j.value("stroke_count", p.stroke_count);
  p.stroke_width_frac = j.value("stroke_width_frac", p.stroke_width_frac);
  p.area_bounds = j.value("area_bounds", p.area_bounds);
  p.validate();
  return p;
}

// 3x3 dilation repeated `iterations` times; wraps horizontally, clamps
// vertically.
inline Tensor<float> dilate_mask(const Tensor<float>& mask, int iterations) {
  Tensor<float> cur = mask;
  const int h = mask.h(), w = mask.w();
  for (int it = 0; it < iterations; ++it) {
    Tensor<float> next(cur.shape());
    for (int n = 0; n < cur.n(); ++n) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          float v = 0.0f;
          for (int dy = -1; dy <= 1 && v == 0.0f; ++dy) {
            const int yy = y + dy;
            if (yy < 0 || yy >= h) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              if (cur.at(n, 0, yy, (x + dx + w) % w) != 0.0f) {
                v = 1.0f;
                break;
              }
            }
          }
          next.at(n, 0, y, x) = v;
        }
      }
    }
    cur = std::move(next);
  }
  return cur;
}

inline double mask_area_fraction(const Tensor<float>& mask) {
  double s = 0;
  for (float v : mask.span()) s += v;
  return mask.empty() ? 0.0 : s / static_cast<double>(mask.size());
}

namespace detail {

inline void stamp_disk(Tensor<float>& m, double cx, double cy, double r) {
  const int h = m.h(), w = m.w();
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + r)));
  const int xr = static_cast<int>(std::ceil(r));
  const int xc = static_cast<int>(std::floor(cx));
  for (int y = y0; y <= y1; ++y) {
    for (int dx = -xr - 1; dx <= xr + 1; ++dx) {
      const double px = xc + dx + 0.5, py = y + 0.5;
      if ((px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r) {
        m.at(0, 0, y, ((xc + dx) % w + w) % w) = 1.0f;
      }
    }
  }
}

inline Tensor<float> freeform_mask(int h, int w, const MaskPolicy& p, Rng& rng) {
  Tensor<float> m({1, 1, h, w});
  const int strokes = static_cast<int>(rng.integer(p.stroke_count[0], p.stroke_count[1]));
  for (int s = 0; s < strokes; ++s) {
    const double radius = 0.5 * h * rng.uniform(p.stroke_width_frac[0], p.stroke_width_frac[1]);
    double x = rng.uniform(0, w), y = rng.uniform(0.2 * h, 0.8 * h);
    const int vertices = static_cast<int>(rng.integer(3, 8));
    for (int v = 0; v < vertices; ++v) {
      const double angle = rng.uniform(0, 2 * geo::kPi);
      const double len = rng.uniform(0.05, 0.2) * w;
      const double nx = x + len * std::cos(angle);
      const double ny = std::clamp(y + len * std::sin(angle), 0.0, h - 1.0);
      const int steps = std::max(1, static_cast<int>(std::ceil(std::hypot(nx - x, ny - y) / std::max(radius * 0.5, 0.5))));
      for (int k = 0; k <= steps; ++k) {
        const double t = static_cast<double>(k) / steps;
        stamp_disk(m, x + t * (nx - x), y + t * (ny - y), radius);
      }
      x = nx;
      y = ny;
    }
  }
  return m;
}

}  // namespace detail

// Draws a diminish mask for `sample` under `policy`.
inline Tensor<float> sample_mask(const DRSample& sample, const MaskPolicy& policy,
                                 std::uint64_t seed) {
  policy.validate();
  const int h = sample.height(), w = sample.width();
  const auto [lo, hi] = policy.area_bounds;
  const auto check = [&](const Tensor<float>& m) {
    const double a = mask_area_fraction(m);
    return a >= lo && a <= hi;
  };
  if (policy.kind == MaskKind::kObjectDilate) {
    const Tensor<float>& base = sample.object_mask.empty() ? sample.mask : sample.object_mask;
    Tensor<float> m = dilate_mask(base, policy.dilate_px);
    const double a = mask_area_fraction(m);
    if (a < lo) {
      throw std::runtime_error("mask area " + std::to_string(a) +
                               " below area_bounds min " + std::to_string(lo));
    }
    if (a > hi) {
      throw std::runtime_error("mask area " + std::to_string(a) +
                               " above area_bounds max " + std::to_string(hi));
    }
    return m;
  }
  Rng rng(mix_seed(seed, 0x4d41534bULL));
  double last = 0;
  for (int attempt = 0; attempt < 50; ++attempt) {
    Tensor<float> m = detail::freeform_mask(h, w, policy, rng);
    if (check(m)) return m;
    last = mask_area_fraction(m);
  }
  throw std::runtime_error(std::string("no freeform mask within area_bounds after 50 attempts; ") +
                           (last < lo ? "min " + std::to_string(lo) : "max " + std::to_string(hi)) +
                           " violated");
}

// ---------------------------------------------------------------------------
// Toy rooms.

// Renders a furnished/empty pair. The mask is the object support dilated per
// `policy` (object_dilate) or a freeform stroke mask.
inline DRSample synth_room(std::uint64_t seed, const room::RoomSpec& spec, int height,
                           const MaskPolicy& policy = {}) {
  if (height < 16) throw std::invalid_argument("synth_room: height must be >= 16");
  auto r = room::render(spec, height);
  DRSample s;
  s.furnished = std::move(r.furnished);
  s.empty = std::move(r.empty);
  s.object_mask = std::move(r.object_mask);
  s.layout.height = height;
  s.layout.width = 2 * height;
  s.layout.labels = std::move(r.layout);
  s.scene_id = "toy_" + std::to_string(seed);
  s.mask = s.object_mask;
  if (policy.kind == MaskKind::kObjectDilate) {
    s.mask = dilate_mask(s.object_mask, policy.dilate_px);
  } else {
    s.mask = sample_mask(s, policy, seed);
  }
  s.meta = {{"scene_id", s.scene_id}, {"seed", seed}, {"height", height},
            {"spec", room::to_json(spec)}, {"mask_policy", to_json(policy)}};
  return s;
}

// Toy sample whose mask area respects policy.area_bounds; rerolls the room
// deterministically until it does.
inline DRSample synth_toy_sample(std::uint64_t seed, int height, const MaskPolicy& policy = {}) {
  for (std::uint64_t attempt = 0; attempt < 1000; ++attempt) {
    const std::uint64_t room_seed = attempt == 0 ? seed : mix_seed(seed, attempt);
    const auto spec = room::random_room_spec(room_seed);
    DRSample s = synth_room(seed, spec, height, policy);
    const double a = mask_area_fraction(s.mask);
    if (a >= policy.area_bounds[0] && a <= policy.area_bounds[1]) {
      s.meta["room_seed"] = room_seed;
      return s;
    }
  }
  throw std::runtime_error("could not synthesize a toy room within mask area bounds");
}

inline std::vector<DRSample> synth_dataset(int count, int height, std::uint64_t seed,
                                           const MaskPolicy& policy = {}) {
  std::vector<DRSample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    out.push_back(synth_toy_sample(mix_seed(seed, static_cast<std::uint64_t>(i)), height, policy));
    char id[32];
    std::snprintf(id, sizeof(id), "toy_%05d", i);
    out.back().scene_id = id;
    out.back().meta["scene_id"] = id;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model input.

struct ModelInput {
  Tensor<float> input;   // (1,4,H,W): furnished*(1-mask) ++ mask
  Tensor<float> target;  // (1,3,H,W): empty panorama
};

inline Tensor<float> masked_input(const Tensor<float>& rgb, const Tensor<float>& mask) {
  const int h = rgb.h(), w = rgb.w();
  Tensor<float> in({1, 4, h, w});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        in.at(0, c, y, x) = rgb.at(0, c, y, x) * (1.0f - mask.at(0, 0, y, x));
      }
    }
  }
  std::copy_n(mask.data(), mask.size(), in.plane(0, 3));
  return in;
}

inline ModelInput make_model_input(const DRSample& s) {
  return {masked_input(s.furnished, s.mask), s.empty};
}

// ---------------------------------------------------------------------------
// Splits.

struct Split {
  std::vector<DRSample> train, val, test;
};

// Scene-level split: scenes are ranked by a stable hash of scene_id and cut at
// the cumulative ratios, so every sample of a scene lands in one split and
// split sizes track the ratios exactly at scene granularity.
inline Split split_dataset(std::vector<DRSample> samples, std::array<double, 3> ratios) {
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9 ||
      std::any_of(ratios.begin(), ratios.end(), [](double r) { return r < 0; })) {
    throw std::invalid_argument("split ratios must be nonnegative and sum to 1");
  }
  Split out;
  if (samples.empty()) return out;
  std::stable_sort(samples.begin(), samples.end(),
                   [](const DRSample& a, const DRSample& b) { return a.scene_id < b.scene_id; });
  std::vector<std::string> scenes;
  for (const auto& s : samples) {
    if (scenes.empty() || scenes.back() != s.scene_id) scenes.push_back(s.scene_id);
  }
  std::sort(scenes.begin(), scenes.end(), [](const std::string& a, const std::string& b) {
    const auto ha = fnv1a64(a), hb = fnv1a64(b);
    return ha != hb ? ha < hb : a < b;
  });
  const auto n = static_cast<double>(scenes.size());
  const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * n));
  const auto n_val = static_cast<std::size_t>(std::llround((ratios[0] + ratios[1]) * n)) - n_train;
  std::map<std::string, int> which;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    which[scenes[i]] = i < n_train ? 0 : (i < n_train + n_val ? 1 : 2);
  }
  for (auto& s : samples) {
    const int k = which[s.scene_id];
    (k == 0 ? out.train : k == 1 ? out.val : out.test).push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-disk format: one directory per sample holding furnished.png, empty.png,
// mask.png (0/255), layout.png (0/1/2), meta.json and, when known,
// object_mask.png (0/255).

inline std::vector<std::uint8_t> mask_bytes(const Tensor<float>& m) {
  std::vector<std::uint8_t> b(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) b[i] = m[i] != 0.0f ? 255 : 0;
  return b;
}

inline void save_sample(const DRSample& s, const fs::path& dir) {
  fs::create_directories(dir);
  io::write_tensor_png(dir / "furnished.png", s.furnished);
  io::write_tensor_png(dir / "empty.png", s.empty);
  io::write_gray_png(dir / "mask.png", s.width(), s.height(), mask_bytes(s.mask));
  io::write_gray_png(dir / "layout.png", s.width(), s.height(), s.layout.labels);
  if (!s.object_mask.empty()) {
    io::write_gray_png(dir / "object_mask.png", s.width(), s.height(), mask_bytes(s.object_mask));
  }
  json meta = s.meta;
  meta["scene_id"] = s.scene_id;
  std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";
}

inline Tensor<float> binary_mask_from_raster(const io::Raster& r, double threshold = 128) {
  Tensor<float> m({1, 1, r.height, r.width});
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) {
      m.at(0, 0, y, x) = r.at(x, y, 0) >= threshold * (r.max_value() / 255.0) ? 1.0f : 0.0f;
    }
  }
  return m;
}

inline DRSample load_sample(const fs::path& dir) {
  DRSample s;
  s.furnished = io::to_rgb_tensor(io::read_png(dir / "furnished.png"));
  s.empty = io::to_rgb_tensor(io::read_png(dir / "empty.png"));
  s.mask = binary_mask_from_raster(io::read_png(dir / "mask.png"));
  const auto layout = io::read_png(dir / "layout.png");
  s.layout = LayoutMap(layout.height, layout.width);
  for (int y = 0; y < layout.height; ++y) {
    for (int x = 0; x < layout.width; ++x) {
      s.layout.at(y, x) = static_cast<std::uint8_t>(layout.at(x, y, 0));
    }
  }
  if (fs::exists(dir / "object_mask.png")) {
    s.object_mask = binary_mask_from_raster(io::read_png(dir / "object_mask.png"));
  }
  std::ifstream mf(dir / "meta.json");
  if (!mf) throw std::runtime_error("missing meta.json in " + dir.string());
  s.meta = json::parse(mf);
  s.scene_id = s.meta.at("scene_id").get<std::string>();
  return s;
}

// Sample directories under `root`, sorted by name.
inline std::vector<fs::path> list_sample_dirs(const fs::path& root) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset directory not found: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && fs::exists(e.path() / "meta.json")) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

inline std::vector<DRSample> load_dataset(const fs::path& root) {
  std::vector<DRSample> out;
  for (const auto& d : list_sample_dirs(root)) out.push_back(load_sample(d));
  return out;
}

struct ValidationReport {
  std::size_t checked = 0;
  std::vector<std::pair<std::string, std::string>> failures;  // sample dir, problem
  bool ok() const { return failures.empty(); }
};

inline ValidationReport validate_dir(const fs::path& root) {
  ValidationReport rep;
  for (const auto& d : list_sample_dirs(root)) {
    ++rep.checked;
    try {
      for (auto& p : validate_sample(load_sample(d))) rep.failures.emplace_back(d.filename().string(), p);
    } catch (const std::exception& e) {
      rep.failures.emplace_back(d.filename().string(), e.what());
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Structured3D-style ingestion.
//
// A scene directory holds:
//   full/rgb_rawlight.png    furnished render
//   empty/rgb_rawlight.png   empty render of the same viewpoint
//   full/instance.png        single-channel instance ids (0 = none)
//   full/semantic.png        optional single-channel NYU40 labels; pixels
//                            labelled wall (1), floor (2) or ceiling (22) are
//                            never treated as removable objects
//   layout.txt               corner pixel coordinates "x y", one per line, as
//                            (ceiling, floor) pairs per room corner

struct IngestConfig {
  int height = 64;
  double min_area_frac = 0.005;  // of the image, at source resolution
  int dilate_px = 1;
};

class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Rasterizes corner annotations into a 3-class map. Boundaries between
// consecutive corners follow the projected 3-D edge (a great circle), not a
// straight pixel line.
inline LayoutMap rasterize_layout(const std::vector<std::array<double, 2>>& corners,
                                  int src_w, int src_h, int height) {
  if (corners.size() < 4 || corners.size() % 2 != 0) {
    throw IngestError("layout needs an even number (>= 4) of corner points");
  }
  const int width = 2 * height;
  const double sx = static_cast<double>(width) / src_w;
  const double sy = static_cast<double>(height) / src_h;
  // Ceiling/floor corners as points on the planes y = +1 / y = -1.
  const auto lift = [&](const std::array<double, 2>& c, double plane) {
    const double u = (c[0] + 0.5) * sx - 0.5, v = (c[1] + 0.5) * sy - 0.5;
    const geo::SphericalCoord sc{2.0 * geo::kPi * (u + 0.5) / width - geo::kPi,
                                 geo::kPi / 2 - geo::kPi * (v + 0.5) / height};
    const auto d = geo::direction(sc);
    if (d[1] * plane <= 0) throw IngestError("layout corner on the wrong side of the horizon");
    const double t = plane / d[1];
    return std::array<double, 3>{d[0] * t, plane, d[2] * t};
  };
  const std::size_t k = corners.size() / 2;
  std::vector<std::array<double, 3>> ceil_pts, floor_pts;
  for (std::size_t i = 0; i < k; ++i) {
    const auto& a = corners[2 * i];
    const auto& b = corners[2 * i + 1];
    const bool a_is_ceiling = a[1] < b[1];
    ceil_pts.push_back(lift(a_is_ceiling ? a : b, 1.0));
    floor_pts.push_back(lift(a_is_ceiling ? b : a, -1.0));
  }
  // Boundary latitude for the column at longitude `lon` from a closed polygon.
  const auto boundary = [&](const std::vector<std::array<double, 3>>& pts, double lon) {
    const std::array<double, 2> ray{std::sin(lon), std::cos(lon)};
    double best_t = std::numeric_limits<double>::infinity();
    double lat = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto& p = pts[i];
      const auto& q = pts[(i + 1) % pts.size()];
      // Solve t*ray = p + s*(q - p) in the horizontal (x, z) plane.
      const double ex = q[0] - p[0], ez = q[2] - p[2];
      const double det = ray[0] * (-ez) - ray[1] * (-ex);
      if (std::abs(det) < 1e-12) continue;
      const double t = (p[0] * (-ez) - p[2] * (-ex)) / det;
      const double s = (ray[0] * p[2] - ray[1] * p[0]) / det;
      if (t > 0 && s >= -1e-9 && s <= 1 + 1e-9 && t < best_t) {
        best_t = t;
        lat = std::atan2(p[1], t);
      }
    }
    if (!std::isfinite(best_t)) throw IngestError("layout polygon does not enclose the camera");
    return lat;
  };
  LayoutMap map(height, width, 1);
  for (int u = 0; u < width; ++u) {
    const double lon = 2.0 * geo::kPi * (u + 0.5) / width - geo::kPi;
    const double lat_c = boundary(ceil_pts, lon);
    const double lat_f = boundary(floor_pts, lon);
    for (int v = 0; v < height; ++v) {
      const double lat = geo::kPi / 2 - geo::kPi * (v + 0.5) / height;
      map.at(v, u) = lat > lat_c ? 0 : (lat < lat_f ? 2 : 1);
    }
  }
  return map;
}

inline std::vector<std::array<double, 2>> read_layout_corners(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IngestError("missing layout annotation " + path.string());
  std::vector<std::array<double, 2>> pts;
  double x, y;
  while (f >> x >> y) pts.push_back({x, y});
  return pts;
}

using WarningSink = std::function<void(const std::string&)>;

inline void default_warning(const std::string& msg) { std::clog << "warning: " << msg << "\n"; }

inline std::vector<DRSample> load_structured3d_pair(const fs::path& scene_dir,
                                                    const IngestConfig& cfg = {},
                                                    const WarningSink& warn = default_warning) {
  const auto require = [&](const fs::path& p) {
    if (!fs::exists(p)) throw IngestError(scene_dir.filename().string() + ": missing " + p.string());
    return io::read_png(p);
  };
  const auto full = require(scene_dir / "full" / "rgb_rawlight.png");
  const auto empty = require(scene_dir / "empty" / "rgb_rawlight.png");
  const auto inst = require(scene_dir / "full" / "instance.png");
  std::optional<io::Raster> sem;
  if (fs::exists(scene_dir / "full" / "semantic.png")) sem = io::read_png(scene_dir / "full" / "semantic.png");
  const auto same_size = [&](const io::Raster& r, const char* what) {
    if (r.width != full.width || r.height != full.height) {
      throw IngestError(scene_dir.filename().string() + ": " + what + " is " +
                        std::to_string(r.width) + "x" + std::to_string(r.height) +
                        " but the full render is " + std::to_string(full.width) + "x" +
                        std::to_string(full.height));
    }
  };
  same_size(empty, "empty render");
  same_size(inst, "instance map");
  if (sem) same_size(*sem, "semantic map");
  if (full.width != 2 * full.height) throw IngestError(scene_dir.filename().string() + ": render is not 2:1");

  const auto corners = read_layout_corners(scene_dir / "layout.txt");
  const LayoutMap layout = rasterize_layout(corners, full.width, full.height, cfg.height);

  std::map<int, std::size_t> area;
  for (int y = 0; y < inst.height; ++y) {
    for (int x = 0; x < inst.width; ++x) {
      const int id = inst.at(x, y, 0);
      if (id == 0) continue;
      if (sem) {
        const int label = sem->at(x, y, 0);
        if (label == 1 || label == 2 || label == 22) continue;
      }
      ++area[id];
    }
  }
  const double min_pixels = cfg.min_area_frac * full.width * full.height;
  std::vector<int> ids;
  for (const auto& [id, a] : area) {
    if (static_cast<double>(a) >= min_pixels) ids.push_back(id);
  }
  const std::string scene_id = scene_dir.filename().string();
  if (ids.empty()) {
    warn(scene_id + ": no object instances above the area threshold; no samples emitted");
    return {};
  }
  const int h = cfg.height, w = 2 * cfg.height;
  const Tensor<float> furnished = resize_area(io::to_rgb_tensor(full), h, w);
  const Tensor<float> empty_rgb = resize_area(io::to_rgb_tensor(empty), h, w);
  const Tensor<float> ids_small = resize_nearest(io::to_value_tensor(inst), h, w);
  Tensor<float> sem_small;
  if (sem) sem_small = resize_nearest(io::to_value_tensor(*sem), h, w);

  std::vector<DRSample> out;
  for (int id : ids) {
    DRSample s;
    s.furnished = furnished;
    s.empty = empty_rgb;
    s.layout = layout;
    s.scene_id = scene_id;
    s.object_mask = Tensor<float>({1, 1, h, w});
    for (std::size_t i = 0; i < ids_small.size(); ++i) {
      bool structural = false;
      if (sem) {
        const int label = static_cast<int>(sem_small[i]);
        structural = label == 1 || label == 2 || label == 22;
      }
      s.object_mask[i] = (!structural && static_cast<int>(ids_small[i]) == id) ? 1.0f : 0.0f;
    }
    s.mask = dilate_mask(s.object_mask, cfg.dilate_px);
    s.meta = {{"scene_id", scene_id}, {"instance_id", id}, {"source", scene_dir.string()},
              {"height", h}, {"dilate_px", cfg.dilate_px}};
    out.push_back(std::move(s));
  }
  return out;
}

struct IngestReport {
  std::vector<DRSample> samples;
  std::vector<std::pair<std::string, std::string>> errors;  // scene, message
};

// Ingests every scene directory under `root` (any directory that contains a
// `full/` subdirectory); per-scene failures are recorded and skipped.
inline IngestReport ingest_structured3d(const fs::path& root, const IngestConfig& cfg = {},
                                        const WarningSink& warn = default_warning) {
  IngestReport rep;
  std::vector<fs::path> scenes;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_directory() && fs::is_directory(e.path() / "full")) scenes.push_back(e.path());
  }
  std::sort(scenes.begin(), scenes.end());
  for (const auto& d : scenes) {
    try {
      auto s = load_structured3d_pair(d, cfg, warn);
      for (auto& x : s) rep.samples.push_back(std::move(x));
    } catch (const std::exception& e) {
      rep.errors.emplace_back(d.filename().string(), e.what());
    }
  }
  std::stable_sort(rep.samples.begin(), rep.samples.end(),
                   [](const DRSample& a, const DRSample& b) { return a.scene_id < b.scene_id; });
  return rep;
}

}  // namespace panodr::data
