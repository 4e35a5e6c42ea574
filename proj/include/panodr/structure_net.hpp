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
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "panodr/autograd.hpp"
#include "panodr/dr_dataset.hpp"
#include "panodr/nn.hpp"
#include "panodr/ops.hpp"
#include "panodr/random.hpp"

namespace panodr {

struct StructureNetConfig {
  int base_channels = 8;
  int depth = 3;
  int max_channels = 64;
  int input_channels = 4;  // masked RGB + mask
  int classes = data::kNumLayoutClasses;

  void validate() const {
    if (base_channels < 1 || depth < 0 || depth > 8 || max_channels < base_channels) {
      throw std::invalid_argument("invalid StructureNetConfig");
    }
    if (input_channels != 4 || classes != data::kNumLayoutClasses) {
      throw std::invalid_argument("structure net expects 4 input channels and 3 classes");
    }
  }
  int channels(int level) const { return std::min(max_channels, base_channels << level); }

  nlohmann::json to_json() const {
    return {{"base_channels", base_channels}, {"depth", depth}, {"max_channels", max_channels},
            {"input_channels", input_channels}, {"classes", classes}};
  }
  static StructureNetConfig from_json(const nlohmann::json& j) {
    StructureNetConfig c;
    c.base_channels = j.value("base_channels", c.base_channels);
    c.depth = j.value("depth", c.depth);
    c.max_channels = j.value("max_channels", c.max_channels);
    c.input_channels = j.value("input_channels", c.input_channels);
    c.classes = j.value("classes", c.classes);
    c.validate();
    return c;
  }
};

// Spatial sizes must survive `depth` halvings; the message names the
// offending dimension.
inline void require_divisible(const Shape& s, int depth, const char* who) {
  const int f = 1 << depth;
  if (s.h % f != 0) {
    throw std::invalid_argument(std::string(who) + ": height " + std::to_string(s.h) +
                                " is not divisible by 2^depth = " + std::to_string(f));
  }
  if (s.w % f != 0) {
    throw std::invalid_argument(std::string(who) + ": width " + std::to_string(s.w) +
                                " is not divisible by 2^depth = " + std::to_string(f));
  }
}

// U-Net layout segmenter. Every convolution pads circularly in width and
// downsampling picks its phase from the input, so the whole network commutes
// with horizontal rolls.
template <typename T>
class StructureNet {
 public:
  explicit StructureNet(const StructureNetConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x5354525543ULL));
    const int c0 = cfg_.channels(0);
    stem_ = {nn::Conv2d<T>(params_, "stem0", cfg_.input_channels, c0, 3, rng),
             nn::Conv2d<T>(params_, "stem1", c0, c0, 3, rng)};
    for (int l = 1; l <= cfg_.depth; ++l) {
      const int ci = cfg_.channels(l - 1), co = cfg_.channels(l);
      const auto p = "enc" + std::to_string(l);
      enc_.push_back({nn::Conv2d<T>(params_, p + ".0", ci, co, 3, rng),
                      nn::Conv2d<T>(params_, p + ".1", co, co, 3, rng)});
    }
    for (int l = cfg_.depth; l >= 1; --l) {
      const int cin = cfg_.channels(l) + cfg_.channels(l - 1), co = cfg_.channels(l - 1);
      dec_.push_back(nn::Conv2d<T>(params_, "dec" + std::to_string(l), cin, co, 3, rng));
    }
    head_ = nn::Conv2d<T>(params_, "head", c0, cfg_.classes, 1, rng);
  }

  StructureNet(const StructureNet&) = delete;
  StructureNet& operator=(const StructureNet&) = delete;

  const StructureNetConfig& config() const { return cfg_; }
  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }

  // (N,4,H,W) masked input -> (N,3,H,W) class logits.
  ag::Var<T> logits(const ag::Var<T>& x) const {
    const Shape s = x.shape();
    if (s.c != cfg_.input_channels) {
      throw std::invalid_argument("structure net: expected " + std::to_string(cfg_.input_channels) +
                                  " input channels, got " + std::to_string(s.c));
    }
    require_divisible(s, cfg_.depth, "structure net");
    std::vector<ag::Var<T>> skips;
    std::vector<ag::Phases> phases;
    ag::Var<T> h = ag::elu(stem_[1](ag::elu(stem_[0](x))));
    for (const auto& level : enc_) {
      skips.push_back(h);
      auto [pooled, ph] = ag::adaptive_pool2(h);
      phases.push_back(std::move(ph));
      h = ag::elu(level[1](ag::elu(level[0](pooled))));
    }
    for (const auto& conv : dec_) {
      h = ag::upsample2_phase(h, phases.back());
      h = ag::elu(conv(ag::concat_channels<T>({h, skips.back()})));
      phases.pop_back();
      skips.pop_back();
    }
    return head_(h);
  }

  // Class probabilities; each pixel lies on the simplex.
  ag::Var<T> forward(const ag::Var<T>& x) const { return ag::softmax_channels(logits(x)); }

 private:
  StructureNetConfig cfg_;
  nn::ParamSet<T> params_;
  std::array<nn::Conv2d<T>, 2> stem_;
  std::vector<std::array<nn::Conv2d<T>, 2>> enc_;
  std::vector<nn::Conv2d<T>> dec_;
  nn::Conv2d<T> head_;
};

// Concatenated per-sample labels matching an (N,3,H,W) probability tensor.
inline std::vector<std::uint8_t> stack_labels(const std::vector<const data::LayoutMap*>& maps) {
  std::vector<std::uint8_t> out;
  for (const auto* m : maps) out.insert(out.end(), m->labels.begin(), m->labels.end());
  return out;
}

// Weighted per-pixel cross-entropy with probabilities clipped to [1e-7, 1]:
//   sum_p w(p) * -log(clip(probs[label(p)](p))) / sum_p w(p).
// `weights` is (N,1,H,W) or empty for uniform weights. Returns 0 when every
// weight is zero.
template <typename T>
ag::Var<T> layout_cross_entropy(const ag::Var<T>& probs, const std::vector<std::uint8_t>& labels,
                                const Tensor<T>& weights = {}) {
  const Shape s = probs.shape();
  const std::size_t plane = s.plane();
  if (labels.size() != static_cast<std::size_t>(s.n) * plane) {
    throw std::invalid_argument("layout loss: " + std::to_string(labels.size()) +
                                " labels for probabilities of shape " + s.str());
  }
  if (!weights.empty() && !(weights.shape() == Shape{s.n, 1, s.h, s.w})) {
    throw std::invalid_argument("layout loss: weight shape " + weights.shape().str() +
                                " does not match " + s.str());
  }
  constexpr double kClip = 1e-7;
  const auto weight = [&](std::size_t i) { return weights.empty() ? 1.0 : static_cast<double>(weights[i]); };
  double total_w = 0, acc = 0;
  const T* p = probs.value().data();
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t li = n * plane + i;
      const int k = labels[li];
      if (k >= s.c) throw std::invalid_argument("layout loss: label out of range");
      const double w = weight(li);
      if (w == 0.0) continue;
      const double q = std::clamp(static_cast<double>(p[(static_cast<std::size_t>(n) * s.c + k) * plane + i]),
                                  kClip, 1.0);
      acc -= w * std::log(q);
      total_w += w;
    }
  }
  if (total_w == 0.0) return ag::make_op(Tensor<T>::scalar(T(0)), {probs}, [](const Tensor<T>&, auto) {});
  const double inv = 1.0 / total_w;
  return ag::make_op(
      Tensor<T>::scalar(static_cast<T>(acc * inv)), {probs},
      [labels, weights, inv, s, plane](const Tensor<T>& g, std::span<const ag::NodePtr<T>> ps) {
        ag::accumulate(ps[0], [&](Tensor<T>& gx) {
          const Tensor<T>& pv = ps[0]->value;
          const double go = static_cast<double>(g.item()) * inv;
          for (int n = 0; n < s.n; ++n) {
            for (std::size_t i = 0; i < plane; ++i) {
              const std::size_t li = n * plane + i;
              const double w = weights.empty() ? 1.0 : static_cast<double>(weights[li]);
              if (w == 0.0) continue;
              const std::size_t idx = (static_cast<std::size_t>(n) * s.c + labels[li]) * plane + i;
              const double q = static_cast<double>(pv[idx]);
              if (q < kClip || q > 1.0) continue;  // clipped: flat
              gx[idx] += static_cast<T>(-go * w / q);
            }
          }
        });
      });
}

// Mean per-pixel cross-entropy against a single ground-truth map per sample.
template <typename T>
ag::Var<T> layout_loss(const ag::Var<T>& probs, const std::vector<const data::LayoutMap*>& gt) {
  return layout_cross_entropy(probs, stack_labels(gt));
}

template <typename T>
ag::Var<T> layout_loss(const ag::Var<T>& probs, const data::LayoutMap& gt) {
  return layout_loss(probs, std::vector<const data::LayoutMap*>{&gt});
}

// Most probable class of sample n; ties go to the lower class index.
template <typename T>
data::LayoutMap argmax_layout(const Tensor<T>& probs, int n = 0) {
  data::LayoutMap m(probs.h(), probs.w(), 0);
  const std::size_t plane = probs.shape().plane();
  for (std::size_t i = 0; i < plane; ++i) {
    int best = 0;
    for (int k = 1; k < probs.c(); ++k) {
      if (probs.plane(n, k)[i] > probs.plane(n, best)[i]) best = k;
    }
    m.labels[i] = static_cast<std::uint8_t>(best);
  }
  return m;
}

// Mean IoU over classes present in pred or gt inside `region` (all pixels
// when null). Throws on an empty region.
inline double layout_miou(const data::LayoutMap& pred, const data::LayoutMap& gt,
                          const Tensor<float>* region = nullptr) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw std::invalid_argument("layout_miou: size mismatch");
  }
  if (region && region->size() != gt.labels.size()) {
    throw std::invalid_argument("layout_miou: region size mismatch");
  }
  std::array<std::size_t, data::kNumLayoutClasses> inter{}, uni{};
  std::size_t scored = 0;
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    if (region && (*region)[i] == 0.0f) continue;
    ++scored;
    const int a = pred.labels[i], b = gt.labels[i];
    if (a == b) {
      ++inter[a];
      ++uni[a];
    } else {
      ++uni[a];
      ++uni[b];
    }
  }
  if (scored == 0) throw std::invalid_argument("layout_miou: empty region");
  double sum = 0;
  int present = 0;
  for (int k = 0; k < data::kNumLayoutClasses; ++k) {
    if (uni[k] == 0) continue;
    sum += static_cast<double>(inter[k]) / static_cast<double>(uni[k]);
    ++present;
  }
  return sum / present;
}

}  // namespace panodr
