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

#include <filesystem>
#include <memory>
#include <string>

#include "panodr/checkpoint.hpp"
#include "panodr/dr_generator.hpp"
#include "panodr/resample.hpp"
#include "panodr/structure_net.hpp"

namespace panodr {

// (N,4,H,W) model input from an (N,3,H,W) image and (N,1,H,W) mask: the RGB
// is zeroed inside the mask and the mask is appended.
inline Tensor<float> model_input(const Tensor<float>& rgb, const Tensor<float>& mask) {
  const Shape s = rgb.shape();
  if (s.c != 3 || !(mask.shape() == Shape{s.n, 1, s.h, s.w})) {
    throw std::invalid_argument("model_input: image " + s.str() + " and mask " + mask.shape().str() +
                                " do not match");
  }
  Tensor<float> in({s.n, 4, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    const float* m = mask.plane(n, 0);
    for (int c = 0; c < 3; ++c) {
      const float* src = rgb.plane(n, c);
      float* dst = in.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i) dst[i] = src[i] * (1.0f - m[i]);
    }
    std::copy_n(m, s.plane(), in.plane(n, 3));
  }
  return in;
}

inline std::unique_ptr<StructureNet<float>> load_structure_net(const std::filesystem::path& path,
                                                               ckpt::CheckpointMeta* meta_out = nullptr) {
  const auto meta = ckpt::expect_kind(path, "structure_net");
  StructureNetConfig cfg;
  try {
    cfg = StructureNetConfig::from_json(meta.config);
  } catch (const std::exception& e) {
    throw ckpt::CheckpointError("incompatible structure_net config in " + path.string() + ": " + e.what());
  }
  auto net = std::make_unique<StructureNet<float>>(cfg);
  ckpt::load_params(path, net->params());
  if (meta_out) *meta_out = meta;
  return net;
}

inline std::unique_ptr<Generator<float>> load_generator(const std::filesystem::path& path,
                                                        ckpt::CheckpointMeta* meta_out = nullptr) {
  const auto meta = ckpt::expect_kind(path, "generator");
  GeneratorConfig cfg;
  try {
    cfg = GeneratorConfig::from_json(meta.config);
  } catch (const std::exception& e) {
    throw ckpt::CheckpointError("incompatible generator config in " + path.string() + ": " + e.what());
  }
  auto gen = std::make_unique<Generator<float>>(cfg);
  ckpt::load_params(path, gen->params());
  if (meta_out) *meta_out = meta;
  return gen;
}

// structure_forward -> generate -> composite on immutable parameters. run()
// is const and allocates per call, so one Pipeline may serve many threads.
class Pipeline {
 public:
  struct Output {
    Tensor<float> layout_probs;  // (N,3,H,W)
    Tensor<float> raw;           // (N,3,H,W)
    Tensor<float> result;        // (N,3,H,W), equal to the input where mask = 0
  };

  Pipeline(std::unique_ptr<StructureNet<float>> structure, std::unique_ptr<Generator<float>> generator)
      : structure_(std::move(structure)), generator_(std::move(generator)) {
    structure_->params().set_trainable(false);
    generator_->params().set_trainable(false);
  }

  static Pipeline load(const std::filesystem::path& ckpt_g, const std::filesystem::path& ckpt_s) {
    ckpt::CheckpointMeta gm, sm;
    auto s = load_structure_net(ckpt_s, &sm);
    auto g = load_generator(ckpt_g, &gm);
    Pipeline p(std::move(s), std::move(g));
    p.structure_meta_ = sm;
    p.generator_meta_ = gm;
    return p;
  }

  const StructureNet<float>& structure() const { return *structure_; }
  const Generator<float>& generator() const { return *generator_; }
  const ckpt::CheckpointMeta& structure_meta() const { return structure_meta_; }
  const ckpt::CheckpointMeta& generator_meta() const { return generator_meta_; }

  // Spatial sizes must be divisible by this.
  int size_multiple() const {
    return 1 << std::max(structure_->config().depth, generator_->config().depth);
  }

  std::string model_id() const {
    return generator_meta_.model_id.empty() ? "untrained"
                                            : generator_meta_.model_id + "+" + structure_meta_.model_id;
  }

  Output run(const Tensor<float>& rgb, const Tensor<float>& mask) const {
    ag::NoGradGuard no_grad;
    const ag::Var<float> input(model_input(rgb, mask));
    const auto probs = structure_->forward(input);
    const auto raw = generator_->generate(input, probs);
    const auto result = ag::composite(ag::Var<float>(rgb), raw, mask);
    return {probs.value(), raw.value(), result.value()};
  }

 private:
  std::unique_ptr<StructureNet<float>> structure_;
  std::unique_ptr<Generator<float>> generator_;
  ckpt::CheckpointMeta structure_meta_, generator_meta_;
};

struct Diminished {
  Tensor<float> result;     // (1,3,H,W)
  data::LayoutMap layout;   // argmax of the layout probabilities
};

// Runs a single panorama of any 2:1 size. When H is not a multiple of
// size_multiple() the networks run at the next multiple up and their outputs
// are resampled back; compositing always happens at the input size, so
// observed pixels are copied through untouched.
inline Diminished run_any_size(const Pipeline& p, const Tensor<float>& rgb, const Tensor<float>& mask) {
  const int m = p.size_multiple();
  const int h = rgb.h(), w = rgb.w();
  const int wh = std::max(m, (h + m - 1) / m * m);
  Tensor<float> raw, probs;
  if (wh == h) {
    auto out = p.run(rgb, mask);
    raw = std::move(out.raw);
    probs = std::move(out.layout_probs);
  } else {
    // Any partially covered working pixel counts as masked.
    Tensor<float> small_mask = resize_area(mask, wh, 2 * wh);
    for (auto& v : small_mask.span()) v = v > 0 ? 1.0f : 0.0f;
    auto out = p.run(resize_bilinear_pano(rgb, wh, 2 * wh), small_mask);
    raw = resize_bilinear_pano(out.raw, h, w);
    probs = resize_bilinear_pano(out.layout_probs, h, w);
  }
  Tensor<float> result = ag::composite(ag::Var<float>(rgb), ag::Var<float>(raw), mask).value();
  return {std::move(result), argmax_layout(probs)};
}

}  // namespace panodr
