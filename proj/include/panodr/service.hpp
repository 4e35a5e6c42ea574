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

#include <openssl/evp.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "panodr/image_io.hpp"
#include "panodr/pano_geometry.hpp"
#include "panodr/pipeline.hpp"
#include "panodr/resample.hpp"
#include "panodr/structure_net.hpp"

// After the Eigen-based headers: <resolv.h>, pulled in by httplib, defines a
// `_res` macro that collides with Eigen parameter names.
#include "httplib.h"

namespace panodr::service {

using json = nlohmann::json;
using geo::ViewSpec;
using geo::kPi;

// ---------------------------------------------------------------------------
// Base64 (standard alphabet, padded).

inline std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

// Returns nullopt for anything that is not well-formed padded base64.
inline std::optional<std::vector<std::uint8_t>> base64_decode(const std::string& text) {
  if (text.empty() || text.size() % 4 != 0) return std::nullopt;
  for (char ch : text) {
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '+' || ch == '/' || ch == '=')) return std::nullopt;
  }
  std::vector<std::uint8_t> out(text.size() / 4 * 3);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) return std::nullopt;
  std::size_t pad = 0;
  if (text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

// ---------------------------------------------------------------------------
// Configuration.

struct ServiceConfig {
  std::string ckpt_g;
  std::string ckpt_s;
  std::string host = "0.0.0.0";
  int port = 8080;
  int queue_depth = 4;
  std::string cors_origin = "*";
  int min_height = 64;
  int max_height = 1024;

  // PANODR_CKPT_G, PANODR_CKPT_S, PANODR_PORT, PANODR_QUEUE_DEPTH,
  // PANODR_CORS_ORIGIN and PANODR_HOST override the defaults.
  static ServiceConfig from_env() {
    ServiceConfig c;
    const auto get = [](const char* name) -> std::optional<std::string> {
      const char* v = std::getenv(name);
      if (v == nullptr || *v == '\0') return std::nullopt;
      return std::string(v);
    };
    const auto to_int = [](const std::string& name, const std::string& v) {
      try {
        std::size_t used = 0;
        const int x = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
      } catch (const std::exception&) {
        throw std::invalid_argument(name + " must be an integer, got '" + v + "'");
      }
    };
    if (auto v = get("PANODR_CKPT_G")) c.ckpt_g = *v;
    if (auto v = get("PANODR_CKPT_S")) c.ckpt_s = *v;
    if (auto v = get("PANODR_HOST")) c.host = *v;
    if (auto v = get("PANODR_PORT")) c.port = to_int("PANODR_PORT", *v);
    if (auto v = get("PANODR_QUEUE_DEPTH")) c.queue_depth = to_int("PANODR_QUEUE_DEPTH", *v);
    if (auto v = get("PANODR_CORS_ORIGIN")) c.cors_origin = *v;
    if (c.queue_depth < 1) throw std::invalid_argument("PANODR_QUEUE_DEPTH must be >= 1");
    return c;
  }
};

// ---------------------------------------------------------------------------
// Request handling, independent of the HTTP transport.

struct Reply {
  int status = 200;
  json body;
};

inline Reply error_reply(int status, const std::string& code, const std::string& message,
                         const std::string& field = "") {
  json e = {{"code", code}, {"message", message}};
  if (!field.empty()) e["field"] = field;
  return {status, {{"error", e}}};
}

// Shared constants the UI needs to render views consistent with the server.
inline json geometry_conventions() {
  return {{"lon", "2*pi*(u+0.5)/W - pi"},
          {"lat", "pi/2 - pi*(v+0.5)/H"},
          {"direction", "x = cos(lat)*sin(lon), y = sin(lat), z = cos(lat)*cos(lon)"},
          {"view_fov", "horizontal, degrees"},
          {"sampling", "bilinear, wrap in u, clamp in v"},
          {"layout_classes", {{"0", "ceiling"}, {"1", "wall"}, {"2", "floor"}}}};
}

// Counts admitted requests; refuses once `depth` are in flight.
class AdmissionGate {
 public:
  explicit AdmissionGate(int depth) : depth_(depth) {}
  bool try_acquire() {
    if (n_.fetch_add(1) >= depth_) {
      n_.fetch_sub(1);
      return false;
    }
    return true;
  }
  void release() { n_.fetch_sub(1); }
  int in_flight() const { return n_.load(); }
  int depth() const { return depth_; }

 private:
  int depth_;
  std::atomic<int> n_{0};
};

class DiminishService {
 public:
  explicit DiminishService(ServiceConfig cfg)
      : cfg_(std::move(cfg)), start_(std::chrono::steady_clock::now()), gate_(cfg_.queue_depth) {}

  ~DiminishService() {
    if (loader_.joinable()) loader_.join();
  }

  DiminishService(const DiminishService&) = delete;
  DiminishService& operator=(const DiminishService&) = delete;

  const ServiceConfig& config() const { return cfg_; }
  AdmissionGate& admission() { return gate_; }

  // Installs an already-built pipeline (tests, embedding).
  void set_pipeline(std::shared_ptr<const Pipeline> p) {
    std::lock_guard<std::mutex> lock(mu_);
    pipeline_ = std::move(p);
    load_error_.clear();
  }

  // Loads the checkpoint pair on a background thread; health reports 503
  // until it finishes.
  void load_async() {
    loader_ = std::thread([this] {
      try {
        auto p = std::make_shared<const Pipeline>(Pipeline::load(cfg_.ckpt_g, cfg_.ckpt_s));
        set_pipeline(std::move(p));
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(mu_);
        load_error_ = e.what();
      }
    });
  }

  void wait_loaded() {
    if (loader_.joinable()) loader_.join();
  }

  std::shared_ptr<const Pipeline> pipeline() const {
    std::lock_guard<std::mutex> lock(mu_);
    return pipeline_;
  }

  Reply health() const {
    const double uptime =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::lock_guard<std::mutex> lock(mu_);
    if (!pipeline_) {
      json b = {{"status", load_error_.empty() ? "loading" : "error"}, {"model_id", ""}, {"uptime_s", uptime}};
      if (!load_error_.empty()) b["error"] = load_error_;
      return {503, b};
    }
    return {200, {{"status", "ok"}, {"model_id", pipeline_->model_id()}, {"uptime_s", uptime}}};
  }

  Reply model() const {
    const auto p = pipeline();
    if (!p) return error_reply(503, "model_not_loaded", "model is not loaded yet");
    const auto describe = [](const ckpt::CheckpointMeta& m) {
      return json{{"kind", m.kind},
                  {"fingerprint", m.fingerprint},
                  {"weights_hash", m.weights_hash},
                  {"model_id", m.model_id},
                  {"step", m.step},
                  {"config", m.config},
                  {"metric_history", m.metric_history}};
    };
    return {200,
            {{"model_id", p->model_id()},
             {"generator", describe(p->generator_meta())},
             {"structure_net", describe(p->structure_meta())},
             {"size_multiple", p->size_multiple()},
             {"limits", {{"min_height", cfg_.min_height}, {"max_height", cfg_.max_height}, {"aspect", "W = 2H"}}},
             {"geometry", geometry_conventions()}}};
  }

  Reply diminish(const std::string& body) {
    const auto t0 = std::chrono::steady_clock::now();
    json req;
    try {
      req = json::parse(body);
    } catch (const json::exception& e) {
      return error_reply(400, "malformed_json", std::string("request body is not JSON: ") + e.what());
    }
    if (!req.is_object()) return error_reply(400, "malformed_json", "request body must be a JSON object");

    // Validation (no model work).
    Tensor<float> rgb, mask;
    std::vector<ViewSpec> views;
    bool return_layout = false;
    if (auto r = decode_panorama(req, rgb)) return *r;
    if (auto r = decode_mask(req, rgb, mask)) return *r;
    if (auto r = parse_options(req, return_layout, views)) return *r;

    const auto p = pipeline();
    if (!p) return error_reply(503, "model_not_loaded", "model is not loaded yet");

    // Bounded admission: requests beyond queue_depth are turned away.
    if (!gate_.try_acquire()) return error_reply(429, "queue_full", "too many concurrent requests; retry later");
    struct Release {
      AdmissionGate& g;
      ~Release() { g.release(); }
    } release{gate_};

    const auto t1 = std::chrono::steady_clock::now();
    const auto [result, layout] = run_any_size(*p, rgb, mask);
    const auto t2 = std::chrono::steady_clock::now();

    json resp = {{"model_id", p->model_id()}, {"result", base64_encode(io::encode_tensor_png(result))}};
    if (return_layout) {
      resp["layout"] = base64_encode(io::encode_png(layout.width, layout.height, 1, layout.labels));
    }
    json out_views = json::array();
    for (const auto& v : views) out_views.push_back(base64_encode(io::encode_tensor_png(geo::gnomonic_project(result, v))));
    if (!views.empty()) resp["views"] = out_views;
    const auto ms = [](auto a, auto b) { return std::chrono::duration<double, std::milli>(b - a).count(); };
    resp["timing_ms"] = {{"validate", ms(t0, t1)},
                         {"model", ms(t1, t2)},
                         {"total", ms(t0, std::chrono::steady_clock::now())}};
    return {200, resp};
  }

  // Registers routes and CORS handling on `server`.
  void mount(httplib::Server& server) {
    const auto send = [this](httplib::Response& res, const Reply& r) {
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    server.set_post_routing_handler([this](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", cfg_.cors_origin);
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
    });
    server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server.Get("/v1/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
    server.Get("/v1/model", [this, send](const httplib::Request&, httplib::Response& res) { send(res, model()); });
    server.Post("/v1/diminish", [this, send](const httplib::Request& req, httplib::Response& res) {
      try {
        send(res, diminish(req.body));
      } catch (const std::exception& e) {
        send(res, error_reply(500, "internal", e.what()));
      }
    });
  }

 private:
  std::optional<Reply> decode_png_field(const json& req, const std::string& field, io::Raster& out) const {
    if (!req.contains(field)) return error_reply(400, "missing_field", field + " is required", field);
    if (!req.at(field).is_string()) return error_reply(400, "bad_field", field + " must be a base64 string", field);
    const auto bytes = base64_decode(req.at(field).get<std::string>());
    if (!bytes) return error_reply(400, "bad_base64", field + " is not valid base64", field);
    try {
      out = io::decode_png(*bytes);
    } catch (const std::exception& e) {
      return error_reply(400, "malformed_png", field + " is not a readable PNG: " + e.what(), field);
    }
    if (out.bit_depth != 8) {
      return error_reply(422, "bad_bit_depth", field + " must be 8-bit, got " + std::to_string(out.bit_depth) + "-bit",
                         field);
    }
    return std::nullopt;
  }

  std::optional<Reply> decode_panorama(const json& req, Tensor<float>& rgb) const {
    io::Raster r;
    if (auto e = decode_png_field(req, "panorama", r)) return e;
    if (r.channels != 3) {
      return error_reply(422, "bad_channels", "panorama must be RGB, got " + std::to_string(r.channels) + " channels",
                         "panorama");
    }
    if (r.width != 2 * r.height) {
      return error_reply(422, "bad_aspect",
                         "panorama must be 2:1 (W = 2H), got " + std::to_string(r.width) + "x" +
                             std::to_string(r.height),
                         "panorama");
    }
    if (r.height < cfg_.min_height || r.height > cfg_.max_height) {
      return error_reply(422, "bad_size",
                         "panorama height must lie in [" + std::to_string(cfg_.min_height) + ", " +
                             std::to_string(cfg_.max_height) + "], got " + std::to_string(r.height),
                         "panorama");
    }
    rgb = io::to_rgb_tensor(r);
    return std::nullopt;
  }

  std::optional<Reply> decode_mask(const json& req, const Tensor<float>& rgb, Tensor<float>& mask) const {
    io::Raster r;
    if (auto e = decode_png_field(req, "mask", r)) return e;
    if (r.channels != 1) {
      return error_reply(422, "bad_channels", "mask must be grayscale, got " + std::to_string(r.channels) +
                                                  " channels", "mask");
    }
    if (r.width != rgb.w() || r.height != rgb.h()) {
      return error_reply(422, "size_mismatch",
                         "mask is " + std::to_string(r.width) + "x" + std::to_string(r.height) + ", panorama is " +
                             std::to_string(rgb.w()) + "x" + std::to_string(rgb.h()),
                         "mask");
    }
    mask = data::binary_mask_from_raster(r, 128);
    return std::nullopt;
  }

  static std::optional<Reply> parse_options(const json& req, bool& return_layout, std::vector<ViewSpec>& views) {
    if (!req.contains("options")) return std::nullopt;
    const json& o = req.at("options");
    if (!o.is_object()) return error_reply(400, "bad_field", "options must be an object", "options");
    try {
      return_layout = o.value("return_layout", false);
      if (o.contains("perspective_views")) {
        const json& list = o.at("perspective_views");
        if (!list.is_array()) {
          return error_reply(400, "bad_field", "perspective_views must be a list", "options.perspective_views");
        }
        if (list.size() > 16) {
          return error_reply(422, "too_many_views", "at most 16 perspective views", "options.perspective_views");
        }
        for (std::size_t i = 0; i < list.size(); ++i) {
          const json& v = list[i];
          ViewSpec s;
          s.center.lon = v.value("lon_deg", 0.0) * kPi / 180.0;
          s.center.lat = v.value("lat_deg", 0.0) * kPi / 180.0;
          s.fov_deg = v.value("fov_deg", s.fov_deg);
          s.out_w = v.value("width", s.out_w);
          s.out_h = v.value("height", s.out_h);
          const std::string field = "options.perspective_views[" + std::to_string(i) + "]";
          try {
            s.validate();
          } catch (const std::invalid_argument& e) {
            return error_reply(422, "bad_view", e.what(), field);
          }
          if (s.out_w > 1024 || s.out_h > 1024) return error_reply(422, "bad_view", "view larger than 1024", field);
          views.push_back(s);
        }
      }
    } catch (const json::exception& e) {
      return error_reply(400, "bad_field", std::string("malformed options: ") + e.what(), "options");
    }
    return std::nullopt;
  }

  ServiceConfig cfg_;
  std::chrono::steady_clock::time_point start_;
  mutable std::mutex mu_;
  std::shared_ptr<const Pipeline> pipeline_;
  std::string load_error_;
  std::thread loader_;
  AdmissionGate gate_;
};

}  // namespace panodr::service
