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

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "panodr/nn.hpp"
#include "panodr/random.hpp"

namespace panodr::ckpt {

namespace fs = std::filesystem;
using json = nlohmann::json;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Stable fingerprint of a configuration document.
inline std::string config_fingerprint(const json& config) { return hex64(fnv1a64(config.dump())); }

// Contents of the JSON sidecar written next to every blob (path + ".json").
struct CheckpointMeta {
  std::string kind;  // "structure_net", "generator" or "discriminator"
  json config;
  std::int64_t step = 0;
  json metric_history = json::array();
  std::string fingerprint;  // of `config`
  std::string weights_hash;
  std::string model_id;
  std::size_t scalar_count = 0;

  json to_json() const {
    return {{"kind", kind},          {"config", config},
            {"step", step},          {"metric_history", metric_history},
            {"fingerprint", fingerprint}, {"weights_hash", weights_hash},
            {"model_id", model_id},  {"scalar_count", scalar_count},
            {"format", "panodr-ckpt-1"}};
  }
  static CheckpointMeta from_json(const json& j) {
    CheckpointMeta m;
    m.kind = j.at("kind").get<std::string>();
    m.config = j.at("config");
    m.step = j.at("step").get<std::int64_t>();
    m.metric_history = j.value("metric_history", json::array());
    m.fingerprint = j.at("fingerprint").get<std::string>();
    m.weights_hash = j.value("weights_hash", "");
    m.model_id = j.value("model_id", "");
    m.scalar_count = j.value("scalar_count", std::size_t{0});
    return m;
  }
};

inline fs::path sidecar_path(const fs::path& blob) { return fs::path(blob.string() + ".json"); }

namespace detail {

inline constexpr char kMagic[8] = {'P', 'D', 'R', 'C', 'K', 'P', 'T', '1'};

template <typename V>
void put(std::string& out, const V& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V take(const std::string& in, std::size_t& pos, const fs::path& path) {
  if (pos + sizeof(V) > in.size()) throw CheckpointError("truncated checkpoint " + path.string());
  V v;
  std::memcpy(&v, in.data() + pos, sizeof(V));
  pos += sizeof(V);
  return v;
}

// Blob layout (little-endian host order): magic, u64 tensor count, then per
// tensor: u32 name length, name bytes, 4 x i32 shape, float32 values.
inline std::string encode_blob(const nn::ParamSet<float>& params) {
  std::string out(kMagic, sizeof(kMagic));
  put(out, static_cast<std::uint64_t>(params.size()));
  for (const auto& [name, v] : params.items()) {
    put(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    const Shape s = v.shape();
    for (int d : {s.n, s.c, s.h, s.w}) put(out, static_cast<std::int32_t>(d));
    out.append(reinterpret_cast<const char*>(v.value().data()), v.value().size() * sizeof(float));
  }
  return out;
}

inline std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_all(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  // Write-then-rename so readers never see a half-written file.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace detail

inline CheckpointMeta save(const fs::path& path, const std::string& kind, const json& config,
                           const nn::ParamSet<float>& params, std::int64_t step,
                           const json& metric_history = json::array()) {
  const std::string blob = detail::encode_blob(params);
  CheckpointMeta meta;
  meta.kind = kind;
  meta.config = config;
  meta.step = step;
  meta.metric_history = metric_history;
  meta.fingerprint = config_fingerprint(config);
  meta.weights_hash = hex64(fnv1a64(blob.data(), blob.size()));
  meta.model_id = kind + "-" + meta.fingerprint.substr(0, 8) + "-" + meta.weights_hash.substr(0, 8);
  meta.scalar_count = params.scalar_count();
  detail::write_all(path, blob);
  detail::write_all(sidecar_path(path), meta.to_json().dump(2) + "\n");
  return meta;
}

inline CheckpointMeta read_meta(const fs::path& path) {
  const fs::path side = sidecar_path(path);
  if (!fs::exists(side)) throw CheckpointError("missing checkpoint sidecar " + side.string());
  try {
    return CheckpointMeta::from_json(json::parse(detail::read_all(side)));
  } catch (const json::exception& e) {
    throw CheckpointError("malformed checkpoint sidecar " + side.string() + ": " + e.what());
  }
}

// Loads blob values into `params`, whose names and shapes must match exactly.
inline void load_params(const fs::path& path, nn::ParamSet<float>& params) {
  const std::string in = detail::read_all(path);
  if (in.size() < sizeof(detail::kMagic) || in.compare(0, sizeof(detail::kMagic), detail::kMagic, 8) != 0) {
    throw CheckpointError("not a panodr checkpoint: " + path.string());
  }
  std::size_t pos = sizeof(detail::kMagic);
  const auto count = detail::take<std::uint64_t>(in, pos, path);
  if (count != params.size()) {
    throw CheckpointError("checkpoint " + path.string() + " has " + std::to_string(count) + " tensors, model has " +
                          std::to_string(params.size()));
  }
  for (const auto& [name, v] : params.items()) {
    const auto len = detail::take<std::uint32_t>(in, pos, path);
    if (pos + len > in.size()) throw CheckpointError("truncated checkpoint " + path.string());
    const std::string stored = in.substr(pos, len);
    pos += len;
    if (stored != name) throw CheckpointError("checkpoint tensor " + stored + " where model expects " + name);
    Shape s;
    s.n = detail::take<std::int32_t>(in, pos, path);
    s.c = detail::take<std::int32_t>(in, pos, path);
    s.h = detail::take<std::int32_t>(in, pos, path);
    s.w = detail::take<std::int32_t>(in, pos, path);
    if (!(s == v.shape())) {
      throw CheckpointError("checkpoint tensor " + name + " has shape " + s.str() + ", model expects " +
                            v.shape().str());
    }
    const std::size_t bytes = s.numel() * sizeof(float);
    if (pos + bytes > in.size()) throw CheckpointError("truncated checkpoint " + path.string());
    ag::Var<float> p = v;
    std::memcpy(p.mutable_value().data(), in.data() + pos, bytes);
    pos += bytes;
  }
  if (pos != in.size()) throw CheckpointError("trailing bytes in checkpoint " + path.string());
}

// Reads the sidecar and checks it describes a `kind` checkpoint.
inline CheckpointMeta expect_kind(const fs::path& path, const std::string& kind) {
  CheckpointMeta meta = read_meta(path);
  if (meta.kind != kind) {
    throw CheckpointError("checkpoint " + path.string() + " is a " + meta.kind + " checkpoint, expected " + kind);
  }
  if (meta.fingerprint != config_fingerprint(meta.config)) {
    throw CheckpointError("checkpoint " + path.string() + " fingerprint does not match its config");
  }
  return meta;
}

}  // namespace panodr::ckpt
