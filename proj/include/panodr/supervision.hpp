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
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "panodr/autograd.hpp"
#include "panodr/dr_dataset.hpp"
#include "panodr/nn.hpp"
#include "panodr/ops.hpp"
#include "panodr/structure_net.hpp"

namespace panodr {

// ---------------------------------------------------------------------------
// Patch discriminator.

struct DiscriminatorConfig {
  std::vector<int> channels{16, 32, 64};  // one stride-2 conv per entry

  int total_stride() const { return 1 << static_cast<int>(channels.size()); }
  nlohmann::json to_json() const { return {{"channels", channels}}; }
  static DiscriminatorConfig from_json(const nlohmann::json& j) {
    DiscriminatorConfig c;
    c.channels = j.value("channels", c.channels);
    if (c.channels.empty()) throw std::invalid_argument("discriminator needs at least one layer");
    return c;
  }
};

// Stride-2 circular convolutions with leaky ReLU and no normalization,
// ending in a 1-channel logit map at 1/total_stride resolution.
template <typename T>
class Discriminator {
 public:
  explicit Discriminator(const DiscriminatorConfig& cfg = {}, std::uint64_t seed = 0) : cfg_(cfg) {
    Rng rng(mix_seed(seed, 0x44495343ULL));
    int cin = 3;
    for (std::size_t i = 0; i < cfg_.channels.size(); ++i) {
      layers_.push_back(nn::Conv2d<T>(params_, "d" + std::to_string(i), cin, cfg_.channels[i], 3, rng, 2));
      cin = cfg_.channels[i];
    }
    head_ = nn::Conv2d<T>(params_, "logit", cin, 1, 3, rng);
  }

  Discriminator(const Discriminator&) = delete;
  Discriminator& operator=(const Discriminator&) = delete;

  const DiscriminatorConfig& config() const { return cfg_; }
  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }

  ag::Var<T> forward(const ag::Var<T>& image) const {
    const Shape s = image.shape();
    if (s.c != 3) {
      throw std::invalid_argument("discriminator: expected 3 channels, got " + std::to_string(s.c));
    }
    require_divisible(s, static_cast<int>(cfg_.channels.size()), "discriminator");
    ag::Var<T> h = image;
    for (const auto& l : layers_) h = ag::leaky_relu(l(h));
    return head_(h);
  }

 private:
  DiscriminatorConfig cfg_;
  nn::ParamSet<T> params_;
  std::vector<nn::Conv2d<T>> layers_;
  nn::Conv2d<T> head_;
};

// ---------------------------------------------------------------------------
// Losses.

struct LossWeights {
  double w_adv = 0.1;
  double w_rec_hole = 6.0;
  double w_rec_valid = 1.0;
  double w_perc = 0.05;
  double w_struct = 1.0;

  void validate() const {
    const double w[] = {w_adv, w_rec_hole, w_rec_valid, w_perc, w_struct};
    bool any = false;
    for (double v : w) {
      if (!(v >= 0) || !std::isfinite(v)) throw std::invalid_argument("loss weights must be finite and >= 0");
      any = any || v > 0;
    }
    if (!any) throw std::invalid_argument("at least one loss weight must be > 0");
  }
  nlohmann::json to_json() const {
    return {{"w_adv", w_adv}, {"w_rec_hole", w_rec_hole}, {"w_rec_valid", w_rec_valid},
            {"w_perc", w_perc}, {"w_struct", w_struct}};
  }
  static LossWeights from_json(const nlohmann::json& j) {
    LossWeights w;
    w.w_adv = j.value("w_adv", w.w_adv);
    w.w_rec_hole = j.value("w_rec_hole", w.w_rec_hole);
    w.w_rec_valid = j.value("w_rec_valid", w.w_rec_valid);
    w.w_perc = j.value("w_perc", w.w_perc);
    w.w_struct = j.value("w_struct", w.w_struct);
    w.validate();
    return w;
  }
};

// mean(relu(1 - real)) + mean(relu(1 + fake)).
template <typename T>
ag::Var<T> hinge_d_loss(const ag::Var<T>& real_logits, const ag::Var<T>& fake_logits) {
  return ag::add(ag::mean(ag::relu(ag::add_scalar(ag::scale(real_logits, T(-1)), T(1)))),
                 ag::mean(ag::relu(ag::add_scalar(fake_logits, T(1)))));
}

// -mean(fake).
template <typename T>
ag::Var<T> hinge_g_loss(const ag::Var<T>& fake_logits) {
  return ag::scale(ag::mean(fake_logits), T(-1));
}

// (1/N) sum_p [w_hole m(p) + w_valid (1 - m(p))] |pred(p) - target(p)|,
// N counting every channel of every pixel.
template <typename T>
ag::Var<T> recon_loss(const ag::Var<T>& pred, const ag::Var<T>& target, const Tensor<T>& mask,
                      double w_hole, double w_valid) {
  require_same_shape(pred.shape(), target.shape(), "recon_loss");
  const Shape s = pred.shape();
  if (!(mask.shape() == Shape{s.n, 1, s.h, s.w})) {
    throw std::invalid_argument("recon_loss: mask shape " + mask.shape().str() + " does not match " + s.str());
  }
  Tensor<T> w(mask.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = static_cast<T>(w_hole * mask[i] + w_valid * (1.0 - mask[i]));
  }
  return ag::mean(ag::mul_channels(ag::abs(ag::sub(pred, target)), ag::Var<T>(std::move(w))));
}

template <typename T>
using FeatureExtractor = std::function<std::vector<ag::Var<T>>(const ag::Var<T>&)>;

// Identity plus `levels - 1` successive 2x average poolings.
template <typename T>
FeatureExtractor<T> pyramid_extractor(int levels = 3) {
  if (levels < 1) throw std::invalid_argument("pyramid needs at least one level");
  return [levels](const ag::Var<T>& x) {
    std::vector<ag::Var<T>> out{x};
    for (int l = 1; l < levels; ++l) out.push_back(ag::avg_pool2(out.back()));
    return out;
  };
}

template <typename T>
FeatureExtractor<T> identity_extractor() {
  return [](const ag::Var<T>& x) { return std::vector<ag::Var<T>>{x}; };
}

// sum_l mean |F_l(pred) - F_l(target)|.
template <typename T>
ag::Var<T> perceptual_loss(const ag::Var<T>& pred, const ag::Var<T>& target,
                           const FeatureExtractor<T>& extractor = pyramid_extractor<T>()) {
  require_same_shape(pred.shape(), target.shape(), "perceptual_loss");
  const auto fp = extractor(pred);
  const auto ft = extractor(target);
  if (fp.size() != ft.size() || fp.empty()) throw std::invalid_argument("perceptual_loss: extractor mismatch");
  std::vector<std::pair<T, ag::Var<T>>> terms;
  for (std::size_t l = 0; l < fp.size(); ++l) {
    if (!fp[l].value().all_finite() || !ft[l].value().all_finite()) {
      throw std::runtime_error("perceptual_loss: extractor produced non-finite features at level " +
                               std::to_string(l));
    }
    terms.emplace_back(T(1), ag::mean(ag::abs(ag::sub(fp[l], ft[l]))));
  }
  return ag::weighted_sum(terms);
}

// Cross-entropy between the frozen critic's layout of `image` and the ground
// truth, averaged over mask = 1 pixels; 0 for an empty mask. The critic sees
// the image as fully observed (mask channel zero). Its parameters must be
// frozen so no gradient can reach them.
template <typename T>
ag::Var<T> structure_consistency_loss(const ag::Var<T>& image, const StructureNet<T>& frozen,
                                      const std::vector<std::uint8_t>& gt_labels, const Tensor<T>& mask) {
  for (const auto& [name, p] : frozen.params().items()) {
    if (p.requires_grad()) {
      throw std::logic_error("structure_consistency_loss: critic parameter " + name + " is not frozen");
    }
  }
  const Shape s = image.shape();
  const ag::Var<T> in = ag::concat_channels<T>({image, ag::Var<T>(Tensor<T>({s.n, 1, s.h, s.w}))});
  return layout_cross_entropy(frozen.forward(in), gt_labels, mask);
}

// ---------------------------------------------------------------------------
// Metrics, computed inside the mask only.

inline constexpr double kPsnrCap = 100.0;

namespace detail {
inline void require_metric_inputs(const Tensor<float>& pred, const Tensor<float>& target,
                                  const Tensor<float>& mask, const char* who) {
  require_same_shape(pred.shape(), target.shape(), who);
  const Shape s = pred.shape();
  if (!(mask.shape() == Shape{s.n, 1, s.h, s.w})) {
    throw std::invalid_argument(std::string(who) + ": mask shape mismatch");
  }
  if (std::none_of(mask.span().begin(), mask.span().end(), [](float v) { return v != 0.0f; })) {
    throw std::invalid_argument(std::string(who) + ": empty mask");
  }
}
}  // namespace detail

inline double mse_hole(const Tensor<float>& pred, const Tensor<float>& target, const Tensor<float>& mask) {
  detail::require_metric_inputs(pred, target, mask, "mse_hole");
  const Shape s = pred.shape();
  double se = 0, count = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (std::size_t i = 0; i < s.plane(); ++i) {
        const double m = mask.plane(n, 0)[i];
        if (m == 0) continue;
        const double d = static_cast<double>(pred.plane(n, c)[i]) - target.plane(n, c)[i];
        se += m * d * d;
        count += m;
      }
    }
  }
  return se / count;
}

inline double psnr_from_mse(double mse) {
  if (mse <= 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

// 10 log10(1 / MSE) over masked pixels, capped at 100 dB.
inline double psnr_hole(const Tensor<float>& pred, const Tensor<float>& target, const Tensor<float>& mask) {
  return psnr_from_mse(mse_hole(pred, target, mask));
}

inline double l1_hole(const Tensor<float>& pred, const Tensor<float>& target, const Tensor<float>& mask) {
  detail::require_metric_inputs(pred, target, mask, "l1_hole");
  const Shape s = pred.shape();
  double acc = 0, count = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      for (std::size_t i = 0; i < s.plane(); ++i) {
        const double m = mask.plane(n, 0)[i];
        acc += m * std::abs(static_cast<double>(pred.plane(n, c)[i]) - target.plane(n, c)[i]);
        count += m;
      }
    }
  }
  return acc / count;
}

// Mean SSIM (uniform window, C1 = 0.01^2, C2 = 0.03^2) over the windows lying
// inside the image whose mask coverage is at least 50%. Holes too small to
// cover half a window fall back to one window per masked pixel, centered on
// it and clamped into the image.
inline double ssim_hole(const Tensor<float>& pred, const Tensor<float>& target, const Tensor<float>& mask,
                        int window = 7) {
  detail::require_metric_inputs(pred, target, mask, "ssim_hole");
  const Shape s = pred.shape();
  if (window < 1 || window > s.h || window > s.w) throw std::invalid_argument("ssim_hole: bad window");
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const int r = window / 2;
  const double area = static_cast<double>(window) * window;
  const auto window_ssim = [&](int n, int c, int y0, int x0) {
    double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
    for (int y = y0; y < y0 + window; ++y) {
      for (int x = x0; x < x0 + window; ++x) {
        const double a = pred.at(n, c, y, x), b = target.at(n, c, y, x);
        mx += a;
        my += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
      }
    }
    mx /= area;
    my /= area;
    const double vx = sxx / area - mx * mx, vy = syy / area - my * my, cxy = sxy / area - mx * my;
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  };
  const auto coverage = [&](int n, int y0, int x0) {
    double m = 0;
    for (int y = y0; y < y0 + window; ++y) {
      for (int x = x0; x < x0 + window; ++x) m += mask.at(n, 0, y, x);
    }
    return m / area;
  };
  double total = 0;
  std::size_t count = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int y0 = 0; y0 + window <= s.h; ++y0) {
      for (int x0 = 0; x0 + window <= s.w; ++x0) {
        if (coverage(n, y0, x0) < 0.5) continue;
        for (int c = 0; c < s.c; ++c) total += window_ssim(n, c, y0, x0);
        count += s.c;
      }
    }
  }
  if (count == 0) {
    // One window per masked pixel, centered on it and clamped into the image.
    for (int n = 0; n < s.n; ++n) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          if (mask.at(n, 0, y, x) == 0.0f) continue;
          const int y0 = std::clamp(y - r, 0, s.h - window), x0 = std::clamp(x - r, 0, s.w - window);
          for (int c = 0; c < s.c; ++c) total += window_ssim(n, c, y0, x0);
          count += s.c;
        }
      }
    }
  }
  return total / static_cast<double>(count);
}

struct MetricsReport {
  std::string scene_id;
  double psnr_hole = 0;
  double ssim_hole = 0;
  double layout_iou_hole = 0;
  double l1_hole = 0;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"psnr_hole", psnr_hole}, {"ssim_hole", ssim_hole},
                        {"layout_iou_hole", layout_iou_hole}, {"l1_hole", l1_hole}};
    if (!scene_id.empty()) j["scene_id"] = scene_id;
    return j;
  }
  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.scene_id = j.value("scene_id", "");
    r.psnr_hole = j.at("psnr_hole").get<double>();
    r.ssim_hole = j.at("ssim_hole").get<double>();
    r.layout_iou_hole = j.at("layout_iou_hole").get<double>();
    r.l1_hole = j.at("l1_hole").get<double>();
    return r;
  }
};

// Per-metric arithmetic mean.
inline MetricsReport aggregate(const std::vector<MetricsReport>& per_sample) {
  if (per_sample.empty()) throw std::invalid_argument("aggregate: no samples");
  MetricsReport out;
  out.scene_id = "aggregate";
  for (const auto& r : per_sample) {
    out.psnr_hole += r.psnr_hole;
    out.ssim_hole += r.ssim_hole;
    out.layout_iou_hole += r.layout_iou_hole;
    out.l1_hole += r.l1_hole;
  }
  const double n = static_cast<double>(per_sample.size());
  out.psnr_hole /= n;
  out.ssim_hole /= n;
  out.layout_iou_hole /= n;
  out.l1_hole /= n;
  return out;
}

// One JSON object per sample, then {"aggregate": {...}}.
inline void write_metrics_jsonl(std::ostream& os, const std::vector<MetricsReport>& per_sample) {
  for (const auto& r : per_sample) os << r.to_json().dump() << "\n";
  os << nlohmann::json{{"aggregate", aggregate(per_sample).to_json()}}.dump() << "\n";
}

}  // namespace panodr
