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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "panodr/dr_dataset.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace panodr::data {
namespace {

using testing::oracle_label;

void expect_layout_matches_oracle(const room::RoomSpec& spec, int h) {
  const auto s = synth_room(1, spec, h);
  int mismatches = 0;
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < 2 * h; ++u) {
      const auto d = geo::direction(geo::pixel_to_spherical(u, v, 2 * h, h));
      mismatches += s.layout.at(v, u) != oracle_label(spec, d);
    }
  }
  EXPECT_EQ(mismatches, 0);
}

TEST(SynthRoomTest, CenteredCameraMatchesOracle) {
  room::RoomSpec spec;
  spec.width = 4;
  spec.depth = 4;
  spec.height = 3;
  spec.camera = {2, 1.5, 2};
  expect_layout_matches_oracle(spec, 32);
}

TEST(SynthRoomTest, RandomRoomsMatchOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    expect_layout_matches_oracle(room::random_room_spec(seed), 32);
  }
}

TEST(SynthRoomTest, PolesAndHorizon) {
  const auto s = synth_toy_sample(3, 32);
  for (int u = 0; u < 64; ++u) {
    EXPECT_EQ(s.layout.at(0, u), 0);
    EXPECT_EQ(s.layout.at(31, u), 2);
  }
  // Row 15/16 straddle the horizon; the camera sits between floor and
  // ceiling so the horizontal ray always meets a wall.
  const auto spec = room::room_spec_from_json(s.meta.at("spec"));
  for (int u = 0; u < 64; ++u) {
    const double lon = geo::pixel_to_spherical(u, 0, 64, 32).lon;
    EXPECT_EQ(oracle_label(spec, geo::direction({lon, 0.0})), 1);
  }
}

TEST(SynthRoomTest, ObjectsAreTheOnlyDifference) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = synth_toy_sample(seed, 32);
    EXPECT_TRUE(validate_sample(s).empty()) << seed;
    double diff_inside = 0;
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 64; ++x) {
          const float m = s.object_mask.at(0, 0, y, x);
          EXPECT_EQ(s.furnished.at(0, c, y, x) * (1 - m), s.empty.at(0, c, y, x) * (1 - m));
          diff_inside += m * std::abs(s.furnished.at(0, c, y, x) - s.empty.at(0, c, y, x));
        }
      }
    }
    EXPECT_GT(diff_inside, 0.0) << seed;
  }
}

TEST(SynthRoomTest, DeterministicAndRejectsBadInput) {
  const auto a = synth_toy_sample(42, 16);
  const auto b = synth_toy_sample(42, 16);
  EXPECT_EQ(a.furnished.vec(), b.furnished.vec());
  EXPECT_EQ(a.mask.vec(), b.mask.vec());
  room::RoomSpec spec;
  EXPECT_THROW(synth_room(0, spec, 8), std::invalid_argument);
  spec.camera = {5, 1, 1};
  EXPECT_THROW(synth_room(0, spec, 16), std::invalid_argument);
  spec = {};
  spec.depth = 0;
  EXPECT_THROW(synth_room(0, spec, 16), std::invalid_argument);
}

TEST(MaskTest, ZeroDilationIsIdentity) {
  Rng rng(1);
  const auto m = testing::random_mask({1, 1, 8, 16}, rng);
  EXPECT_EQ(dilate_mask(m, 0).vec(), m.vec());
}

TEST(MaskTest, DilationWrapsHorizontallyAndClampsVertically) {
  Tensor<float> m({1, 1, 4, 8});
  m.at(0, 0, 0, 7) = 1;
  const auto d = dilate_mask(m, 1);
  EXPECT_EQ(d.at(0, 0, 0, 0), 1.0f);
  EXPECT_EQ(d.at(0, 0, 1, 0), 1.0f);
  EXPECT_EQ(d.at(0, 0, 1, 6), 1.0f);
  EXPECT_EQ(d.at(0, 0, 3, 7), 0.0f);
  EXPECT_DOUBLE_EQ(mask_area_fraction(d), 6.0 / 32.0);
}

TEST(MaskTest, ObjectDilateUsesInstanceSupport) {
  auto s = synth_toy_sample(7, 32);
  MaskPolicy p;
  p.dilate_px = 0;
  p.area_bounds = {0.001, 0.4};
  EXPECT_EQ(sample_mask(s, p, 0).vec(), s.object_mask.vec());
  p.area_bounds = {0.39, 0.4};
  EXPECT_THROW(
      {
        try {
          sample_mask(s, p, 0);
        } catch (const std::runtime_error& e) {
          EXPECT_NE(std::string(e.what()).find("min"), std::string::npos);
          throw;
        }
      },
      std::runtime_error);
}

TEST(MaskTest, FreeformAreaWithinBounds) {
  auto s = synth_toy_sample(1, 32);
  MaskPolicy p;
  p.kind = MaskKind::kFreeformStrokes;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto m = sample_mask(s, p, seed);
    const double a = mask_area_fraction(m);
    ASSERT_GE(a, 0.01) << seed;
    ASSERT_LE(a, 0.40) << seed;
    for (float v : m.span()) ASSERT_TRUE(v == 0.0f || v == 1.0f);
  }
  EXPECT_EQ(sample_mask(s, p, 5).vec(), sample_mask(s, p, 5).vec());
  EXPECT_NE(sample_mask(s, p, 5).vec(), sample_mask(s, p, 6).vec());
}

TEST(MaskTest, FreeformGivesUpNamingTheBound) {
  auto s = synth_toy_sample(1, 32);
  MaskPolicy p;
  p.kind = MaskKind::kFreeformStrokes;
  p.stroke_width_frac = {0.001, 0.001};
  p.stroke_count = {1, 1};
  p.area_bounds = {0.3, 0.4};
  try {
    sample_mask(s, p, 0);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("min 0.3"), std::string::npos) << e.what();
  }
}

TEST(MaskTest, PolicyValidation) {
  MaskPolicy p;
  p.area_bounds = {0.0, 0.3};
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p.area_bounds = {0.1, 0.5};
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p.area_bounds = {0.2, 0.1};
  EXPECT_THROW(p.validate(), std::invalid_argument);
  MaskPolicy q;
  q.kind = MaskKind::kFreeformStrokes;
  q.dilate_px = 3;
  const auto r = mask_policy_from_json(to_json(q));
  EXPECT_EQ(r.kind, q.kind);
  EXPECT_EQ(r.dilate_px, 3);
}

TEST(ModelInputTest, MaskingProperties) {
  auto s = synth_toy_sample(2, 16);
  s.mask.fill(0.0f);
  auto in = make_model_input(s);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 16 * 32; ++i) EXPECT_EQ(in.input.plane(0, c)[i], s.furnished.plane(0, c)[i]);
  }
  s.mask.fill(1.0f);
  in = make_model_input(s);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 16 * 32; ++i) EXPECT_EQ(in.input.plane(0, c)[i], 0.0f);
  }
  Rng rng(3);
  s.mask = testing::random_mask({1, 1, 16, 32}, rng);
  in = make_model_input(s);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 16 * 32; ++i) EXPECT_EQ(in.input.plane(0, c)[i] * s.mask[i], 0.0f);
  }
  EXPECT_EQ(AlignedVector<float>(in.input.plane(0, 3), in.input.plane(0, 3) + 512), s.mask.vec());
  EXPECT_EQ(in.target.vec(), s.empty.vec());
}

std::vector<DRSample> fake_scenes(int scenes, int per_scene) {
  std::vector<DRSample> out;
  for (int i = 0; i < scenes; ++i) {
    for (int j = 0; j < per_scene; ++j) {
      DRSample s;
      s.scene_id = "scene_" + std::to_string(i);
      s.meta["k"] = j;
      out.push_back(s);
    }
  }
  return out;
}

TEST(SplitTest, SingleSceneLandsInOneSplit) {
  const auto sp = split_dataset(fake_scenes(1, 5), {0.5, 0.25, 0.25});
  const int nonempty = !sp.train.empty() + !sp.val.empty() + !sp.test.empty();
  EXPECT_EQ(nonempty, 1);
  EXPECT_EQ(sp.train.size() + sp.val.size() + sp.test.size(), 5u);
}

TEST(SplitTest, AllTrain) {
  const auto sp = split_dataset(fake_scenes(10, 2), {1, 0, 0});
  EXPECT_EQ(sp.train.size(), 20u);
  EXPECT_TRUE(sp.val.empty());
  EXPECT_TRUE(sp.test.empty());
}

TEST(SplitTest, SizesTrackRatiosAndPartition) {
  const auto sp = split_dataset(fake_scenes(100, 1), {0.8, 0.1, 0.1});
  EXPECT_NEAR(static_cast<double>(sp.train.size()), 80, 5);
  EXPECT_NEAR(static_cast<double>(sp.val.size()), 10, 5);
  EXPECT_NEAR(static_cast<double>(sp.test.size()), 10, 5);
  std::map<std::string, int> owner;
  int idx = 0;
  for (const auto* part : {&sp.train, &sp.val, &sp.test}) {
    for (const auto& s : *part) {
      auto [it, inserted] = owner.emplace(s.scene_id, idx);
      EXPECT_TRUE(inserted || it->second == idx) << s.scene_id;
    }
    ++idx;
  }
  EXPECT_EQ(owner.size(), 100u);
}

TEST(SplitTest, MultiSampleScenesStayTogetherAndOrderIndependent) {
  auto samples = fake_scenes(30, 3);
  const auto a = split_dataset(samples, {0.6, 0.2, 0.2});
  std::reverse(samples.begin(), samples.end());
  const auto b = split_dataset(samples, {0.6, 0.2, 0.2});
  const auto ids = [](const std::vector<DRSample>& v) {
    std::multiset<std::string> s;
    for (const auto& x : v) s.insert(x.scene_id);
    return s;
  };
  EXPECT_EQ(ids(a.train), ids(b.train));
  EXPECT_EQ(ids(a.val), ids(b.val));
  EXPECT_EQ(ids(a.test), ids(b.test));
  for (const auto& s : ids(a.train)) EXPECT_EQ(ids(a.train).count(s), 3u);
}

TEST(SplitTest, EmptyAndBadRatios) {
  const auto sp = split_dataset({}, {0.8, 0.1, 0.1});
  EXPECT_TRUE(sp.train.empty() && sp.val.empty() && sp.test.empty());
  EXPECT_THROW(split_dataset({}, {0.8, 0.1, 0.2}), std::invalid_argument);
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("panodr_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

TEST(DiskFormatTest, SaveLoadRoundTripAndValidate) {
  TempDir tmp;
  const auto samples = synth_dataset(3, 16, 9);
  for (const auto& s : samples) save_sample(s, tmp.path() / s.scene_id);
  const auto loaded = load_dataset(tmp.path());
  ASSERT_EQ(loaded.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(loaded[i].scene_id, samples[i].scene_id);
    EXPECT_EQ(loaded[i].mask.vec(), samples[i].mask.vec());
    EXPECT_EQ(loaded[i].layout, samples[i].layout);
    EXPECT_LE(max_abs_diff(loaded[i].furnished, samples[i].furnished), 0.5f / 255 + 1e-6f);
  }
  EXPECT_TRUE(validate_dir(tmp.path()).ok());

  // Corrupt one sample's layout.
  std::vector<std::uint8_t> bad(16 * 32, 7);
  io::write_gray_png(tmp.path() / samples[1].scene_id / "layout.png", 32, 16, bad);
  const auto rep = validate_dir(tmp.path());
  EXPECT_EQ(rep.checked, 3u);
  ASSERT_EQ(rep.failures.size(), 1u);
  EXPECT_EQ(rep.failures[0].first, samples[1].scene_id);
}

TEST(ValidatorTest, FlagsBrokenInvariants) {
  auto s = synth_toy_sample(4, 16);
  EXPECT_TRUE(validate_sample(s).empty());
  auto t = s;
  t.mask[3] = 0.5f;
  EXPECT_FALSE(validate_sample(t).empty());
  t = s;
  t.furnished[0] = 1.5f;
  EXPECT_FALSE(validate_sample(t).empty());
  t = s;
  t.empty = Tensor<float>({1, 3, 8, 16});
  EXPECT_FALSE(validate_sample(t).empty());
  t = s;
  for (std::size_t i = 0; i < t.object_mask.size(); ++i) {
    if (t.object_mask[i] == 0.0f) {
      t.furnished[i] = t.furnished[i] > 0.5f ? 0.0f : 1.0f;
      break;
    }
  }
  EXPECT_FALSE(validate_sample(t).empty());
  t = s;
  t.scene_id.clear();
  EXPECT_FALSE(validate_sample(t).empty());
}

// ---------------------------------------------------------------------------
// Structured3D-style fixtures.

constexpr int kSrcH = 32, kSrcW = 64;

// Cuboid room with walls at x, z = +-1 and floor/ceiling at y = -+1 around the
// camera; corners given in source pixels.
std::vector<std::array<double, 2>> square_room_corners() {
  std::vector<std::array<double, 2>> pts;
  for (auto [x, z] : std::vector<std::pair<double, double>>{{1, 1}, {1, -1}, {-1, -1}, {-1, 1}}) {
    for (double y : {1.0, -1.0}) {
      const auto px = geo::spherical_to_pixel(geo::from_direction({x, y, z}), kSrcW, kSrcH);
      pts.push_back({px[0], px[1]});
    }
  }
  return pts;
}

void write_fixture(const fs::path& dir, const std::vector<std::array<int, 4>>& boxes,
                   int src_w = kSrcW, int src_h = kSrcH, bool with_layout = true) {
  fs::create_directories(dir / "full");
  fs::create_directories(dir / "empty");
  Tensor<float> full({1, 3, src_h, src_w}, 0.5f), empty({1, 3, src_h, src_w}, 0.5f);
  std::vector<std::uint8_t> inst(static_cast<std::size_t>(src_w) * src_h, 0);
  int id = 1;
  for (const auto& b : boxes) {  // x0, y0, x1, y1 exclusive
    for (int y = b[1]; y < b[3]; ++y) {
      for (int x = b[0]; x < b[2]; ++x) {
        inst[static_cast<std::size_t>(y) * src_w + x] = static_cast<std::uint8_t>(id);
        full.at(0, 0, y, x) = 0.1f * id;
      }
    }
    ++id;
  }
  io::write_tensor_png(dir / "full" / "rgb_rawlight.png", full);
  io::write_tensor_png(dir / "empty" / "rgb_rawlight.png", empty);
  io::write_gray_png(dir / "full" / "instance.png", src_w, src_h, inst);
  if (with_layout) {
    std::ofstream f(dir / "layout.txt");
    for (const auto& p : square_room_corners()) f << p[0] << " " << p[1] << "\n";
  }
}

TEST(Structured3DTest, ZeroInstancesWarnsAndEmitsNothing) {
  TempDir tmp;
  write_fixture(tmp.path() / "scene_a", {});
  std::vector<std::string> warnings;
  const auto out = load_structured3d_pair(tmp.path() / "scene_a", {16, 0.005, 1},
                                          [&](const std::string& w) { warnings.push_back(w); });
  EXPECT_TRUE(out.empty());
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("scene_a"), std::string::npos);
}

TEST(Structured3DTest, ThreeInstancesGiveThreeDisjointMasks) {
  TempDir tmp;
  // Three 8x8 boxes plus one 2x2 box below the area threshold.
  write_fixture(tmp.path() / "scene_b",
                {{2, 12, 10, 20}, {24, 12, 32, 20}, {46, 12, 54, 20}, {60, 2, 62, 4}});
  const auto out = load_structured3d_pair(tmp.path() / "scene_b", {16, 0.005, 1}, [](auto&) {});
  ASSERT_EQ(out.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(validate_sample(out[i]).empty());
    EXPECT_EQ(out[i].height(), 16);
    EXPECT_GT(mask_area_fraction(out[i].object_mask), 0.0);
    for (std::size_t j = i + 1; j < 3; ++j) {
      for (std::size_t p = 0; p < out[i].mask.size(); ++p) {
        EXPECT_FALSE(out[i].mask[p] == 1.0f && out[j].mask[p] == 1.0f);
      }
    }
  }
}

TEST(Structured3DTest, LayoutMatchesAnalyticBoundaries) {
  TempDir tmp;
  write_fixture(tmp.path() / "scene_c", {{2, 12, 10, 20}});
  const int h = 16, w = 32;
  const auto out = load_structured3d_pair(tmp.path() / "scene_c", {h, 0.005, 1}, [](auto&) {});
  ASSERT_EQ(out.size(), 1u);
  const auto& layout = out[0].layout;
  for (int u = 0; u < w; ++u) {
    const double lon = geo::pixel_to_spherical(u, 0, w, h).lon;
    // Horizontal distance to the square's wall along this azimuth.
    const double t = 1.0 / std::max(std::abs(std::sin(lon)), std::abs(std::cos(lon)));
    const double boundary = std::atan(1.0 / t);
    for (int v = 0; v < h; ++v) {
      const double lat = geo::pixel_to_spherical(u, v, w, h).lat;
      const int expect = lat > boundary ? 0 : (lat < -boundary ? 2 : 1);
      EXPECT_EQ(layout.at(v, u), expect) << u << "," << v;
    }
  }
  // Facing the +z wall, the wall/floor boundary falls between rows 11 and 12.
  EXPECT_EQ(layout.at(11, 15), 1);
  EXPECT_EQ(layout.at(12, 15), 2);
  EXPECT_EQ(layout.at(3, 15), 0);
  EXPECT_EQ(layout.at(4, 15), 1);
}

TEST(Structured3DTest, MissingFileAndResolutionMismatch) {
  TempDir tmp;
  write_fixture(tmp.path() / "good", {{2, 12, 10, 20}});
  write_fixture(tmp.path() / "no_layout", {{2, 12, 10, 20}}, kSrcW, kSrcH, false);
  write_fixture(tmp.path() / "mismatch", {{2, 12, 10, 20}});
  io::write_tensor_png(tmp.path() / "mismatch" / "empty" / "rgb_rawlight.png", Tensor<float>({1, 3, 16, 32}));
  EXPECT_THROW(load_structured3d_pair(tmp.path() / "no_layout", {16, 0.005, 1}), IngestError);
  try {
    load_structured3d_pair(tmp.path() / "mismatch", {16, 0.005, 1});
    FAIL();
  } catch (const IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("32x16"), std::string::npos) << e.what();
  }
  const auto rep = ingest_structured3d(tmp.path(), {16, 0.005, 1}, [](auto&) {});
  EXPECT_EQ(rep.samples.size(), 1u);
  ASSERT_EQ(rep.errors.size(), 2u);
  std::set<std::string> failed;
  for (const auto& e : rep.errors) failed.insert(e.first);
  EXPECT_EQ(failed, (std::set<std::string>{"mismatch", "no_layout"}));
}

}  // namespace
}  // namespace panodr::data
