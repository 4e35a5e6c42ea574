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

#include <chrono>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "panodr/dr_dataset.hpp"
#include "panodr/service.hpp"
#include "test_util.hpp"

namespace panodr::service {
namespace {

namespace fs = std::filesystem;

struct Checkpoints {
  fs::path g, s;
};

// Untrained checkpoint pair written to a per-test temp directory.
Checkpoints write_checkpoints(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("panodr_service_test_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  StructureNet<float> s({8, 3}, 1);
  Generator<float> g({}, 2);
  Checkpoints c{dir / "g.ckpt", dir / "s.ckpt"};
  ckpt::save(c.s, "structure_net", s.config().to_json(), s.params(), 10);
  ckpt::save(c.g, "generator", g.config().to_json(), g.params(), 20, json::array({{{"step", 20}}}));
  return c;
}

std::string png_b64(const Tensor<float>& t) { return base64_encode(io::encode_tensor_png(t)); }

std::string mask_b64(const Tensor<float>& m) {
  return base64_encode(io::encode_png(m.w(), m.h(), 1, data::mask_bytes(m)));
}

// 8-bit panorama so decode(encode(x)) == x exactly.
Tensor<float> quantized_pano(int h, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t({1, 3, h, 2 * h});
  for (auto& v : t.span()) v = static_cast<float>(rng.integer(0, 255)) / 255.0f;
  return t;
}

class ServiceTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ckpts_ = new Checkpoints(write_checkpoints("suite"));
    svc_ = new DiminishService(ServiceConfig{ckpts_->g.string(), ckpts_->s.string()});
    svc_->load_async();
    svc_->wait_loaded();
  }
  static void TearDownTestSuite() {
    delete svc_;
    delete ckpts_;
  }

  static json request(const Tensor<float>& pano, const Tensor<float>& mask, json options = json::object()) {
    return {{"panorama", png_b64(pano)}, {"mask", mask_b64(mask)}, {"options", options}};
  }

  static Checkpoints* ckpts_;
  static DiminishService* svc_;
};

Checkpoints* ServiceTest::ckpts_ = nullptr;
DiminishService* ServiceTest::svc_ = nullptr;

TEST(Base64Test, RoundTripAndRejects) {
  for (std::size_t n = 0; n < 10; ++n) {
    std::vector<std::uint8_t> bytes(n);
    for (std::size_t i = 0; i < n; ++i) bytes[i] = static_cast<std::uint8_t>(37 * i + 5);
    const auto enc = base64_encode(bytes);
    if (n == 0) {
      EXPECT_EQ(enc, "");
      continue;
    }
    const auto dec = base64_decode(enc);
    ASSERT_TRUE(dec.has_value());
    EXPECT_EQ(*dec, bytes);
  }
  EXPECT_EQ(base64_encode(std::vector<std::uint8_t>{'M', 'a', 'n'}), "TWFu");
  EXPECT_FALSE(base64_decode("abc").has_value());
  EXPECT_FALSE(base64_decode("ab!d").has_value());
}

TEST(HealthTest, Returns503UntilLoadedThen200) {
  const auto c = write_checkpoints("health");
  DiminishService svc(ServiceConfig{c.g.string(), c.s.string()});
  EXPECT_EQ(svc.health().status, 503);
  EXPECT_EQ(svc.model().status, 503);
  Rng rng(1);
  const auto pano = quantized_pano(64, 1);
  const Tensor<float> mask({1, 1, 64, 128});
  EXPECT_EQ(svc.diminish(json({{"panorama", png_b64(pano)}, {"mask", mask_b64(mask)}}).dump()).status, 503);
  svc.load_async();
  svc.wait_loaded();
  const auto h = svc.health();
  EXPECT_EQ(h.status, 200);
  EXPECT_EQ(h.body.at("status"), "ok");
  EXPECT_FALSE(h.body.at("model_id").get<std::string>().empty());
}

TEST(HealthTest, BadCheckpointStays503WithError) {
  DiminishService svc(ServiceConfig{"/nonexistent/g.ckpt", "/nonexistent/s.ckpt"});
  svc.load_async();
  svc.wait_loaded();
  const auto h = svc.health();
  EXPECT_EQ(h.status, 503);
  EXPECT_EQ(h.body.at("status"), "error");
}

TEST_F(ServiceTest, ModelMetadataMatchesSidecar) {
  const auto r = svc_->model();
  ASSERT_EQ(r.status, 200);
  std::ifstream in(ckpt::sidecar_path(ckpts_->g));
  const json side = json::parse(in);
  EXPECT_EQ(r.body.at("generator").at("fingerprint"), side.at("fingerprint"));
  EXPECT_EQ(r.body.at("generator").at("step"), 20);
  EXPECT_EQ(r.body.at("generator").at("metric_history"), side.at("metric_history"));
  EXPECT_EQ(r.body.at("structure_net").at("step"), 10);
  EXPECT_TRUE(r.body.at("geometry").contains("lon"));
}

TEST_F(ServiceTest, ZeroMaskReturnsInputExactly) {
  const auto pano = quantized_pano(64, 2);
  const Tensor<float> mask({1, 1, 64, 128});
  const auto r = svc_->diminish(request(pano, mask).dump());
  ASSERT_EQ(r.status, 200) << r.body.dump();
  const auto bytes = base64_decode(r.body.at("result").get<std::string>());
  ASSERT_TRUE(bytes.has_value());
  EXPECT_EQ(*bytes, io::encode_tensor_png(pano));
  EXPECT_FALSE(r.body.contains("layout"));
}

TEST_F(ServiceTest, OutsideMaskPixelsAreBitExactAndRequestsAreStateless) {
  const auto pano = quantized_pano(64, 3);
  Rng rng(3);
  const auto mask = testing::random_mask({1, 1, 64, 128}, rng, 0.3);
  const auto body = request(pano, mask, {{"return_layout", true}}).dump();
  const auto a = svc_->diminish(body), b = svc_->diminish(body);
  ASSERT_EQ(a.status, 200);
  EXPECT_EQ(a.body.at("result"), b.body.at("result"));
  const auto out = io::decode_png(*base64_decode(a.body.at("result").get<std::string>()));
  const auto in = io::to_bytes(pano);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 128; ++x) {
      if (mask.at(0, 0, y, x) != 0) continue;
      for (int c = 0; c < 3; ++c) {
        ASSERT_EQ(out.at(x, y, c), in[(static_cast<std::size_t>(y) * 128 + x) * 3 + c]);
      }
    }
  }
  const auto layout = io::decode_png(*base64_decode(a.body.at("layout").get<std::string>()));
  EXPECT_EQ(layout.width, 128);
  EXPECT_EQ(layout.channels, 1);
  for (auto v : layout.samples) EXPECT_LE(v, 2);
}

TEST_F(ServiceTest, AspectViolationIs422WithField) {
  Tensor<float> pano({1, 3, 64, 100});
  const Tensor<float> mask({1, 1, 64, 100});
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = svc_->diminish(request(pano, mask).dump());
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(r.status, 422);
  EXPECT_EQ(r.body.at("error").at("field"), "panorama");
  EXPECT_EQ(r.body.at("error").at("code"), "bad_aspect");
  EXPECT_LT(ms, 50.0);
}

TEST_F(ServiceTest, ValidationErrors) {
  const auto pano = quantized_pano(64, 4);
  EXPECT_EQ(svc_->diminish("{not json").status, 400);
  EXPECT_EQ(svc_->diminish(json({{"panorama", "AAAA"}, {"mask", "AAAA"}}).dump()).status, 400);
  EXPECT_EQ(svc_->diminish(json({{"panorama", "%%%"}}).dump()).status, 400);
  EXPECT_EQ(svc_->diminish(json({{"mask", png_b64(pano)}}).dump()).status, 400);
  // Mask of the wrong size.
  const auto r = svc_->diminish(request(pano, Tensor<float>({1, 1, 32, 64})).dump());
  EXPECT_EQ(r.status, 422);
  EXPECT_EQ(r.body.at("error").at("field"), "mask");
  // Too small.
  EXPECT_EQ(svc_->diminish(request(quantized_pano(32, 1), Tensor<float>({1, 1, 32, 64})).dump()).status, 422);
  // RGB mask.
  json bad = request(pano, Tensor<float>({1, 1, 64, 128}));
  bad["mask"] = png_b64(pano);
  EXPECT_EQ(svc_->diminish(bad.dump()).status, 422);
  // Bad view.
  const auto v = svc_->diminish(
      request(pano, Tensor<float>({1, 1, 64, 128}), {{"perspective_views", {{{"fov_deg", 200}}}}}).dump());
  EXPECT_EQ(v.status, 422);
  EXPECT_EQ(v.body.at("error").at("field"), "options.perspective_views[0]");
}

TEST_F(ServiceTest, QueueFullIs429) {
  const auto pano = quantized_pano(64, 5);
  const auto body = request(pano, Tensor<float>({1, 1, 64, 128})).dump();
  auto& gate = svc_->admission();
  std::vector<bool> held;
  for (int i = 0; i < gate.depth(); ++i) held.push_back(gate.try_acquire());
  EXPECT_EQ(svc_->diminish(body).status, 429);
  for (bool h : held) {
    if (h) gate.release();
  }
  EXPECT_EQ(svc_->diminish(body).status, 200);
}

TEST_F(ServiceTest, ViewsAndNonMultipleSizes) {
  // 68 is not a multiple of 8: the model runs at a working size, the result
  // comes back at the request size.
  const auto pano = quantized_pano(68, 6);
  Rng rng(6);
  const auto mask = testing::random_mask({1, 1, 68, 136}, rng, 0.2);
  const auto r = svc_->diminish(
      request(pano, mask, {{"perspective_views", {{{"lon_deg", 30}, {"fov_deg", 90}, {"width", 40}, {"height", 30}}}}})
          .dump());
  ASSERT_EQ(r.status, 200) << r.body.dump();
  const auto out = io::decode_png(*base64_decode(r.body.at("result").get<std::string>()));
  EXPECT_EQ(out.width, 136);
  EXPECT_EQ(out.height, 68);
  const auto in = io::to_bytes(pano);
  for (int y = 0; y < 68; ++y) {
    for (int x = 0; x < 136; ++x) {
      if (mask.at(0, 0, y, x) == 0) ASSERT_EQ(out.at(x, y, 1), in[(static_cast<std::size_t>(y) * 136 + x) * 3 + 1]);
    }
  }
  ASSERT_EQ(r.body.at("views").size(), 1u);
  const auto view = io::decode_png(*base64_decode(r.body.at("views")[0].get<std::string>()));
  EXPECT_EQ(view.width, 40);
  EXPECT_EQ(view.height, 30);
}

TEST_F(ServiceTest, LatencyAt64x128) {
  const auto pano = quantized_pano(64, 7);
  Rng rng(7);
  const auto body = request(pano, testing::random_mask({1, 1, 64, 128}, rng, 0.2)).dump();
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_EQ(svc_->diminish(body).status, 200);
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 2.0);
}

TEST_F(ServiceTest, HttpRoutesAndCors) {
  httplib::Server server;
  svc_->mount(server);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);
  const auto h = client.Get("/v1/health");
  ASSERT_TRUE(h);
  EXPECT_EQ(h->status, 200);
  EXPECT_EQ(h->get_header_value("Access-Control-Allow-Origin"), "*");
  const auto opt = client.Options("/v1/diminish");
  ASSERT_TRUE(opt);
  EXPECT_EQ(opt->status, 204);
  EXPECT_NE(opt->get_header_value("Access-Control-Allow-Methods").find("POST"), std::string::npos);
  const auto pano = quantized_pano(64, 8);
  const auto post = client.Post("/v1/diminish", request(pano, Tensor<float>({1, 1, 64, 128})).dump(),
                                "application/json");
  ASSERT_TRUE(post);
  EXPECT_EQ(post->status, 200);
  EXPECT_EQ(json::parse(post->body).at("model_id"), svc_->health().body.at("model_id"));
  const auto bad = client.Post("/v1/diminish", "nope", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  server.stop();
  t.join();
}

TEST(ServiceConfigTest, ReadsEnvironment) {
  setenv("PANODR_PORT", "9091", 1);
  setenv("PANODR_QUEUE_DEPTH", "2", 1);
  setenv("PANODR_CKPT_G", "/a/g.ckpt", 1);
  const auto c = ServiceConfig::from_env();
  EXPECT_EQ(c.port, 9091);
  EXPECT_EQ(c.queue_depth, 2);
  EXPECT_EQ(c.ckpt_g, "/a/g.ckpt");
  setenv("PANODR_PORT", "80x", 1);
  EXPECT_THROW(ServiceConfig::from_env(), std::invalid_argument);
  unsetenv("PANODR_PORT");
  unsetenv("PANODR_QUEUE_DEPTH");
  unsetenv("PANODR_CKPT_G");
  EXPECT_EQ(ServiceConfig::from_env().port, 8080);
}

}  // namespace
}  // namespace panodr::service
