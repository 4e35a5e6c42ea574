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
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "panodr/autograd.hpp"
#include "panodr/dr_dataset.hpp"
#include "panodr/nn.hpp"
#include "panodr/ops.hpp"
#include "panodr/random.hpp"
#include "panodr/structure_net.hpp"

namespace panodr {

struct GeneratorConfig {
  int base_channels = 16;
  int depth = 2;
  int max_channels = 32;
  int style_dim = 8;
  int style_hidden = 16;
  double norm_eps = 1e-5;
  bool disable_structure_guidance = false;

  void validate() const {
    if (base_channels < 1 || depth < 1 || depth > 6 || max_channels < base_channels) {
      throw std::invalid_argument("invalid GeneratorConfig channel/depth settings");
    }
    if (style_dim < 1 || style_hidden < 1) throw std::invalid_argument("style_dim must be >= 1");
    if (!(norm_eps > 0)) throw std::invalid_argument("norm_eps must be > 0");
  }
  int channels(int level) const { return std::min(max_channels, base_channels << level); }

  nlohmann::json to_json() const {
    return {{"base_channels", base_channels},
            {"depth", depth},
            {"max_channels", max_channels},
            {"style_dim", style_dim},
            {"style_hidden", style_hidden},
            {"norm_eps", norm_eps},
            {"gate", "elu*sigmoid"},
            {"disable_structure_guidance", disable_structure_guidance}};
  }
  static GeneratorConfig from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    c.base_channels = j.value("base_channels", c.base_channels);
    c.depth = j.value("depth", c.depth);
    c.max_channels = j.value("max_channels", c.max_channels);
    c.style_dim = j.value("style_dim", c.style_dim);
    c.style_hidden = j.value("style_hidden", c.style_hidden);
    c.norm_eps = j.value("norm_eps", c.norm_eps);
    c.disable_structure_guidance = j.value("disable_structure_guidance", c.disable_structure_guidance);
    c.validate();
    return c;
  }
};

// One style vector per layout class, (N,K,D,1), with per-(sample, class)
// presence flags. Absent classes carry the learned default code.
template <typename T>
struct StyleBank {
  ag::Var<T> styles;
  std::vector<bool> present;
};

template <typename T>
StyleBank<T> extract_style_bank(const ag::Var<T>& features, const ag::Var<T>& layout,
                                const Tensor<T>& mask, const ag::Var<T>& defaults) {
  auto [styles, present] = ag::region_style(features, layout, mask, defaults);
  return {std::move(styles), std::move(present)};
}

// Regional normalization: instance-normalize x, then modulate each pixel with
//   gamma(p) = sum_k layout_k(p) MLP^gamma_k(style_k),
//   beta(p)  = sum_k layout_k(p) MLP^beta_k(style_k).
// The MLPs share a hidden layer per class.
template <typename T>
struct StructureNorm {
  ag::Var<T> w1, b1;  // (K,Hd,D,1), (1,K,Hd,1)
  ag::Var<T> wg, bg;  // (K,C,Hd,1), (1,K,C,1)
  ag::Var<T> wb, bb;
  T eps = T(1e-5);

  StructureNorm() = default;
  StructureNorm(nn::ParamSet<T>& ps, const std::string& name, int channels, int style_dim,
                int hidden, double eps_, Rng& rng)
      : eps(static_cast<T>(eps_)) {
    constexpr int K = data::kNumLayoutClasses;
    w1 = ps.add(name + ".mlp.weight", nn::kaiming_uniform<T>({K, hidden, style_dim, 1}, style_dim, rng));
    b1 = ps.add(name + ".mlp.bias", Tensor<T>({1, K, hidden, 1}));
    // Small output weights and gamma bias 1: starts close to plain instance
    // normalization.
    wg = ps.add(name + ".gamma.weight", nn::kaiming_uniform<T>({K, channels, hidden, 1}, hidden, rng, 0.1));
    bg = ps.add(name + ".gamma.bias", Tensor<T>({1, K, channels, 1}, T(1)));
    wb = ps.add(name + ".beta.weight", nn::kaiming_uniform<T>({K, channels, hidden, 1}, hidden, rng, 0.1));
    bb = ps.add(name + ".beta.bias", Tensor<T>({1, K, channels, 1}));
  }

  // Per-class (gamma, beta), each (N,K,C,1).
  std::pair<ag::Var<T>, ag::Var<T>> modulation(const StyleBank<T>& bank) const {
    const auto h = ag::leaky_relu(ag::class_linear(bank.styles, w1, b1));
    return {ag::class_linear(h, wg, bg), ag::class_linear(h, wb, bb)};
  }

  ag::Var<T> operator()(const ag::Var<T>& x, const ag::Var<T>& layout, const StyleBank<T>& bank) const {
    const auto [gamma, beta] = modulation(bank);
    return ag::regional_affine(ag::instance_norm(x, eps), layout, gamma, beta);
  }
};

// Uniform 1/3 layout used by the guidance ablation.
template <typename T>
Tensor<T> uniform_layout(int n, int h, int w) {
  return Tensor<T>({n, data::kNumLayoutClasses, h, w}, T(1) / T(data::kNumLayoutClasses));
}

// Mask channel (N,1,H,W) of a 4-channel model input.
template <typename T>
Tensor<T> mask_channel(const Tensor<T>& input) {
  const Shape s = input.shape();
  Tensor<T> m({s.n, 1, s.h, s.w});
  for (int n = 0; n < s.n; ++n) std::copy_n(input.plane(n, 3), s.plane(), m.plane(n, 0));
  return m;
}

// Masked-RGB channels (N,3,H,W) of a 4-channel model input.
template <typename T>
Tensor<T> rgb_channels(const Tensor<T>& input) {
  const Shape s = input.shape();
  Tensor<T> m({s.n, 3, s.h, s.w});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < 3; ++c) std::copy_n(input.plane(n, c), s.plane(), m.plane(n, c));
  }
  return m;
}

// Gated-convolution encoder/decoder whose decoder features are modulated by
// StructureNorm driven by the layout and per-class context styles.
template <typename T>
class Generator {
 public:
  explicit Generator(const GeneratorConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x47454e4552ULL));
    const int c0 = cfg_.channels(0), D = cfg_.style_dim;
    constexpr int K = data::kNumLayoutClasses;
    enc_.push_back(nn::GatedConv2d<T>(params_, "enc0", 4, c0, 3, rng));
    style_src_ = nn::Conv2d<T>(params_, "style_src", c0, D, 1, rng);
    default_style_ = params_.add("style_default", Tensor<T>({1, K, D, 1}));
    for (int l = 1; l <= cfg_.depth; ++l) {
      enc_.push_back(nn::GatedConv2d<T>(params_, "enc" + std::to_string(l), cfg_.channels(l - 1),
                                        cfg_.channels(l), 3, rng));
    }
    const int cb = cfg_.channels(cfg_.depth);
    bottleneck_.push_back(nn::GatedConv2d<T>(params_, "mid0", cb, cb, 3, rng, 2));
    bottleneck_.push_back(nn::GatedConv2d<T>(params_, "mid1", cb, cb, 3, rng, 4));
    mid_norm_ = StructureNorm<T>(params_, "mid_norm", cb, D, cfg_.style_hidden, cfg_.norm_eps, rng);
    for (int l = cfg_.depth; l >= 1; --l) {
      const int cin = cfg_.channels(l) + cfg_.channels(l - 1), co = cfg_.channels(l - 1);
      const auto name = "dec" + std::to_string(l);
      dec_.push_back(nn::GatedConv2d<T>(params_, name, cin, co, 3, rng));
      dec_norm_.push_back(StructureNorm<T>(params_, name + "_norm", co, D, cfg_.style_hidden, cfg_.norm_eps, rng));
    }
    out_ = nn::Conv2d<T>(params_, "out", c0, 3, 3, rng);
  }

  Generator(const Generator&) = delete;
  Generator& operator=(const Generator&) = delete;

  const GeneratorConfig& config() const { return cfg_; }
  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }

  // input: (N,4,H,W) masked RGB + mask; layout: (N,3,H,W) probabilities.
  // Returns the raw full-frame prediction in [0,1].
  ag::Var<T> generate(const ag::Var<T>& input, const ag::Var<T>& layout_in) const {
    const Shape s = input.shape();
    if (s.c != 4) {
      throw std::invalid_argument("generator: expected 4 input channels, got " + std::to_string(s.c));
    }
    require_divisible(s, cfg_.depth, "generator");
    const Shape ls = layout_in.shape();
    if (!(ls == Shape{s.n, data::kNumLayoutClasses, s.h, s.w})) {
      throw std::invalid_argument("generator: layout shape " + ls.str() + " does not match input " + s.str());
    }
    const ag::Var<T> layout = cfg_.disable_structure_guidance
                                  ? ag::Var<T>(uniform_layout<T>(s.n, s.h, s.w))
                                  : layout_in;
    const Tensor<T> mask = mask_channel(input.value());

    std::vector<ag::Var<T>> skips;
    std::vector<ag::Phases> phases;
    ag::Var<T> h = enc_[0](input);
    const StyleBank<T> bank = extract_style_bank(style_src_(h), layout, mask, default_style_);
    std::vector<ag::Var<T>> layouts{layout};
    for (int l = 1; l <= cfg_.depth; ++l) {
      skips.push_back(h);
      auto [pooled, ph] = ag::adaptive_pool2(h);
      layouts.push_back(ag::pool2_phase(layouts.back(), ph));
      phases.push_back(std::move(ph));
      h = enc_[l](pooled);
    }
    for (const auto& g : bottleneck_) h = g(h);
    h = mid_norm_(h, layouts.back(), bank);
    for (int i = 0; i < cfg_.depth; ++i) {
      const int level = cfg_.depth - 1 - i;
      h = ag::upsample2_phase(h, phases[level]);
      h = dec_[i](ag::concat_channels<T>({h, skips[level]}));
      h = dec_norm_[i](h, layouts[level], bank);
    }
    return ag::sigmoid(out_(h));
  }

  // Style bank as seen by generate(); exposed for inspection and tests.
  StyleBank<T> style_bank(const ag::Var<T>& input, const ag::Var<T>& layout) const {
    const Shape s = input.shape();
    const ag::Var<T> lay = cfg_.disable_structure_guidance ? ag::Var<T>(uniform_layout<T>(s.n, s.h, s.w)) : layout;
    return extract_style_bank(style_src_(enc_[0](input)), lay, mask_channel(input.value()), default_style_);
  }

 private:
  GeneratorConfig cfg_;
  nn::ParamSet<T> params_;
  std::vector<nn::GatedConv2d<T>> enc_;
  nn::Conv2d<T> style_src_;
  ag::Var<T> default_style_;
  std::vector<nn::GatedConv2d<T>> bottleneck_;
  StructureNorm<T> mid_norm_;
  std::vector<nn::GatedConv2d<T>> dec_;
  std::vector<StructureNorm<T>> dec_norm_;
  nn::Conv2d<T> out_;
};

// out = input * (1 - mask) + raw * mask.
using ag::composite;

}  // namespace panodr
