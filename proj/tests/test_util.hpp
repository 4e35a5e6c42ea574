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
#include <functional>
#include <vector>

#include "panodr/autograd.hpp"
#include "panodr/random.hpp"
#include "panodr/tensor.hpp"

namespace panodr::testing {

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(s);
  for (auto& v : t.span()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

inline Tensor<float> random_mask(Shape s, Rng& rng, double p = 0.3) {
  Tensor<float> t(s);
  for (auto& v : t.span()) v = rng.uniform() < p ? 1.0f : 0.0f;
  return t;
}

// Central finite-difference check of d loss / d leaf for every leaf.
// Returns the worst relative error ||analytic - numeric|| / max(||analytic||,
// ||numeric||) over the leaves. `loss` must rebuild the graph from the leaves
// on every call.
inline double grad_check(std::vector<ag::Var<double>> leaves,
                         const std::function<ag::Var<double>()>& loss, double h = 1e-6,
                         std::size_t max_coords = 400) {
  for (auto& l : leaves) l.zero_grad();
  ag::backward(loss());
  double worst = 0.0;
  for (auto& leaf : leaves) {
    const Tensor<double> analytic = leaf.grad();
    auto& values = leaf.mutable_value();
    const std::size_t n = values.size();
    const std::size_t stride = std::max<std::size_t>(1, n / max_coords);
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = loss().value().item();
      values[i] = orig - h;
      const double down = loss().value().item();
      values[i] = orig;
      const double numeric = (up - down) / (2 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double denom = std::sqrt(std::max(a2, n2));
    if (denom > 1e-12) worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  return worst;
}

// Scalar probe: sum(x * fixed random weights), so every output element gets a
// distinct upstream gradient.
inline ag::Var<double> probe(const ag::Var<double>& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  ag::Var<double> w(random_tensor<double>(x.shape(), rng));
  return ag::sum(ag::mul(x, w));
}

}  // namespace panodr::testing
