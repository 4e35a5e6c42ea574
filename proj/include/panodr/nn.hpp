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

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "panodr/autograd.hpp"
#include "panodr/ops.hpp"
#include "panodr/random.hpp"

namespace panodr::nn {

using ag::Var;

// Ordered, named collection of trainable leaves. Order is registration order
// and defines the checkpoint layout.
template <typename T>
class ParamSet {
 public:
  Var<T> add(std::string name, Tensor<T> init) {
    for (const auto& [n, _] : items_) {
      if (n == name) throw std::logic_error("duplicate parameter " + name);
    }
    Var<T> v(std::move(init), true);
    items_.emplace_back(std::move(name), v);
    return v;
  }

  const std::vector<std::pair<std::string, Var<T>>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : items_) n += v.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : items_) {
      Var<T> copy = v;
      copy.zero_grad();
    }
  }

  // Frozen parameters are plain constants to the graph: no gradient is ever
  // accumulated into them.
  void set_trainable(bool trainable) {
    for (auto& [_, v] : items_) {
      Var<T> copy = v;
      copy.set_requires_grad(trainable);
    }
  }

  // Flat copy of all parameter values, in registration order.
  std::vector<T> flatten() const {
    std::vector<T> out;
    out.reserve(scalar_count());
    for (const auto& [_, v] : items_) {
      out.insert(out.end(), v.value().vec().begin(), v.value().vec().end());
    }
    return out;
  }

  void unflatten(const std::vector<T>& flat) {
    if (flat.size() != scalar_count()) {
      throw std::invalid_argument("parameter count mismatch: expected " +
                                  std::to_string(scalar_count()) + ", got " +
                                  std::to_string(flat.size()));
    }
    std::size_t off = 0;
    for (auto& [_, v] : items_) {
      Var<T> copy = v;
      auto& dst = copy.mutable_value().vec();
      std::copy_n(flat.begin() + off, dst.size(), dst.begin());
      off += dst.size();
    }
  }

  template <typename U>
  void copy_from(const ParamSet<U>& other) {
    if (other.size() != size()) throw std::invalid_argument("param set mismatch");
    for (std::size_t i = 0; i < items_.size(); ++i) {
      Var<T> dst = items_[i].second;
      const auto& src = other.items()[i].second.value();
      require_same_shape(dst.shape(), src.shape(), "copy_from");
      for (std::size_t j = 0; j < src.size(); ++j) {
        dst.mutable_value()[j] = static_cast<T>(src[j]);
      }
    }
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> items_;
};

// Uniform(-bound, bound) with bound = gain * sqrt(3 / fan_in).
template <typename T>
Tensor<T> kaiming_uniform(Shape shape, int fan_in, Rng& rng, double gain = 1.0) {
  Tensor<T> t(shape);
  const double bound = gain * std::sqrt(3.0 / fan_in);
  for (auto& v : t.span()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
struct Conv2d {
  Var<T> weight;
  Var<T> bias;
  int stride = 1;
  int dilation = 1;

  Conv2d() = default;
  Conv2d(ParamSet<T>& ps, const std::string& name, int cin, int cout, int k,
         Rng& rng, int stride_ = 1, int dilation_ = 1, double gain = 1.0)
      : stride(stride_), dilation(dilation_) {
    weight = ps.add(name + ".weight",
                    kaiming_uniform<T>({cout, cin, k, k}, cin * k * k, rng, gain));
    bias = ps.add(name + ".bias", Tensor<T>({1, cout, 1, 1}));
  }

  Var<T> operator()(const Var<T>& x) const {
    return ag::conv2d(x, weight, bias, stride, dilation);
  }
  int out_channels() const { return weight.shape().n; }
};

// phi(conv_f(x)) * sigmoid(conv_g(x)) with phi = ELU.
template <typename T>
struct GatedConv2d {
  Conv2d<T> feature;
  Conv2d<T> gate;

  GatedConv2d() = default;
  GatedConv2d(ParamSet<T>& ps, const std::string& name, int cin, int cout, int k,
              Rng& rng, int dilation = 1)
      : feature(ps, name + ".f", cin, cout, k, rng, 1, dilation),
        gate(ps, name + ".g", cin, cout, k, rng, 1, dilation) {}

  Var<T> operator()(const Var<T>& x) const {
    return ag::mul(ag::elu(feature(x)), ag::sigmoid(gate(x)));
  }
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(ParamSet<T>& params, AdamConfig cfg) : params_(&params), cfg_(cfg) {
    for (const auto& [_, v] : params.items()) {
      m_.emplace_back(v.shape());
      v_.emplace_back(v.shape());
    }
  }

  // Applies one update from the accumulated gradients, then clears them.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T step = static_cast<T>(cfg_.lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(cfg_.eps);
    for (std::size_t i = 0; i < params_->size(); ++i) {
      Var<T> p = params_->items()[i].second;
      if (!p.has_grad()) continue;
      const Tensor<T> g = p.grad();
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      Tensor<T>& w = p.mutable_value();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        w[j] -= step * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
      }
    }
    params_->zero_grad();
  }

  std::int64_t steps() const { return t_; }

 private:
  ParamSet<T>* params_;
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::int64_t t_ = 0;
};

}  // namespace panodr::nn
