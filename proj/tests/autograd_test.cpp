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

#include "panodr/autograd.hpp"
#include "panodr/nn.hpp"
#include "panodr/ops.hpp"
#include "test_util.hpp"

namespace panodr {
namespace {

using ag::Var;
using testing::grad_check;
using testing::probe;
using testing::random_tensor;

constexpr double kGradTol = 1e-3;

TEST(AutogradTest, ElementwiseGradients) {
  Rng rng(1);
  Var<double> a(random_tensor<double>({2, 3, 4, 5}, rng), true);
  Var<double> b(random_tensor<double>({2, 3, 4, 5}, rng), true);
  EXPECT_LT(grad_check({a, b}, [&] { return probe(ag::mul(ag::elu(a), ag::sigmoid(b))); }), kGradTol);
  EXPECT_LT(grad_check({a, b}, [&] { return probe(ag::sub(ag::leaky_relu(a), ag::scale(b, 3.0))); }),
            kGradTol);
  EXPECT_LT(grad_check({a}, [&] { return ag::mean(ag::mul(a, a)); }), kGradTol);
}

TEST(AutogradTest, ChannelPlumbingGradients) {
  Rng rng(2);
  Var<double> a(random_tensor<double>({2, 3, 4, 6}, rng), true);
  Var<double> b(random_tensor<double>({2, 2, 4, 6}, rng), true);
  Var<double> m(random_tensor<double>({2, 1, 4, 6}, rng), true);
  EXPECT_LT(grad_check({a, b}, [&] { return probe(ag::concat_channels<double>({a, b, a})); }), kGradTol);
  EXPECT_LT(grad_check({a}, [&] { return probe(ag::slice_channels(a, 1, 3)); }), kGradTol);
  EXPECT_LT(grad_check({a, m}, [&] { return probe(ag::mul_channels(a, m)); }), kGradTol);
}

TEST(AutogradTest, WeightedSumDropsZeroWeightTerms) {
  Var<double> a(Tensor<double>::scalar(2.0), true);
  Var<double> b(Tensor<double>::scalar(5.0), true);
  auto total = ag::weighted_sum<double>({{0.5, ag::mul(a, a)}, {0.0, ag::mul(b, b)}});
  EXPECT_DOUBLE_EQ(total.value().item(), 2.0);
  ag::backward(total);
  EXPECT_DOUBLE_EQ(a.grad().item(), 2.0);
  EXPECT_FALSE(b.has_grad());
}

TEST(AutogradTest, NoGradGuardSkipsRecording) {
  Var<double> a(Tensor<double>::scalar(2.0), true);
  {
    ag::NoGradGuard guard;
    auto y = ag::mul(a, a);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(ag::mul(a, a).requires_grad());
}

struct ConvCase {
  int k, stride, dilation;
};

class ConvGradTest : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvGradTest, MatchesFiniteDifferences) {
  const auto c = GetParam();
  Rng rng(3);
  Var<double> x(random_tensor<double>({2, 3, 8, 16}, rng), true);
  Var<double> w(random_tensor<double>({4, 3, c.k, c.k}, rng), true);
  Var<double> b(random_tensor<double>({1, 4, 1, 1}, rng), true);
  EXPECT_LT(grad_check({x, w, b}, [&] { return probe(ag::conv2d(x, w, b, c.stride, c.dilation)); }),
            kGradTol);
}

INSTANTIATE_TEST_SUITE_P(Shapes, ConvGradTest,
                         ::testing::Values(ConvCase{3, 1, 1}, ConvCase{3, 2, 1}, ConvCase{1, 1, 1},
                                           ConvCase{3, 1, 2}, ConvCase{5, 1, 1}));

TEST(ConvTest, MatchesExplicitPaddedLoop) {
  Rng rng(4);
  const auto x = random_tensor<double>({1, 2, 5, 8}, rng);
  const auto w = random_tensor<double>({3, 2, 3, 3}, rng);
  const auto y = ag::conv2d(Var<double>(x), Var<double>(w), Var<double>(), 1, 1).value();
  const auto xp = circular_pad(x, 1);
  for (int co = 0; co < 3; ++co) {
    for (int i = 0; i < 5; ++i) {
      for (int j = 0; j < 8; ++j) {
        double acc = 0;
        for (int ci = 0; ci < 2; ++ci) {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) acc += w.at(co, ci, ky, kx) * xp.at(0, ci, i + ky, j + kx);
          }
        }
        EXPECT_NEAR(y.at(0, co, i, j), acc, 1e-12);
      }
    }
  }
}

TEST(ConvTest, RollEquivariantWithCircularPadding) {
  Rng rng(5);
  const auto x = random_tensor<float>({1, 3, 8, 16}, rng);
  Var<float> w(random_tensor<float>({4, 3, 3, 3}, rng));
  Var<float> b(random_tensor<float>({1, 4, 1, 1}, rng));
  Var<float> w2(random_tensor<float>({2, 4, 3, 3}, rng));
  const auto net = [&](const Tensor<float>& in) {
    return ag::conv2d(ag::elu(ag::conv2d(Var<float>(in), w, b, 1, 2)), w2, Var<float>()).value();
  };
  for (int k : {0, 1, 3, 7, 16, -5}) {
    EXPECT_LT(max_abs_diff(net(roll_horizontal(x, k)), roll_horizontal(net(x), k)), 1e-4f) << k;
  }
}

TEST(ConvTest, RejectsChannelMismatch) {
  Var<float> x(Tensor<float>({1, 3, 4, 8}));
  Var<float> w(Tensor<float>({2, 4, 3, 3}));
  EXPECT_THROW(ag::conv2d(x, w, Var<float>()), std::invalid_argument);
}

TEST(PoolTest, GradientsAndPhaseHandling) {
  Rng rng(6);
  Var<double> x(random_tensor<double>({2, 3, 4, 8}, rng), true);
  ag::Phases ph{{1, 0}};
  EXPECT_LT(grad_check({x}, [&] { return probe(ag::pool2_phase(x, ph)); }), kGradTol);
  Var<double> y(random_tensor<double>({2, 3, 2, 4}, rng), true);
  EXPECT_LT(grad_check({y}, [&] { return probe(ag::upsample2_phase(y, ph)); }), kGradTol);
}

TEST(PoolTest, AdaptivePoolIsRollEquivariantForOddShifts) {
  Rng rng(7);
  const auto x = random_tensor<float>({1, 2, 4, 16}, rng);
  const auto [y, ph] = ag::adaptive_pool2(Var<float>(x));
  for (int k : {1, 2, 3, 5, 8, 13}) {
    const auto [yr, phr] = ag::adaptive_pool2(Var<float>(roll_horizontal(x, k)));
    // Rolling the pooled-then-upsampled map reproduces the rolled pipeline.
    const auto up = ag::upsample2_phase(y, ph).value();
    const auto up_r = ag::upsample2_phase(yr, phr).value();
    EXPECT_EQ(max_abs_diff(up_r, roll_horizontal(up, k)), 0.0f) << k;
    EXPECT_EQ(phr.phase[0], (ph.phase[0] + k) % 2) << k;
  }
}

TEST(NormTest, SoftmaxAndInstanceNorm) {
  Rng rng(8);
  Var<double> x(random_tensor<double>({2, 3, 4, 4}, rng, -3, 3), true);
  EXPECT_LT(grad_check({x}, [&] { return probe(ag::softmax_channels(x)); }), kGradTol);
  EXPECT_LT(grad_check({x}, [&] { return probe(ag::instance_norm(x, 1e-5)); }), kGradTol);
  const auto s = ag::softmax_channels(x).value();
  for (int i = 0; i < 16; ++i) {
    EXPECT_NEAR(s.plane(0, 0)[i] + s.plane(0, 1)[i] + s.plane(0, 2)[i], 1.0, 1e-12);
  }
}

TEST(RegionalTest, AffineStyleAndClassLinearGradients) {
  Rng rng(9);
  Var<double> x(random_tensor<double>({2, 4, 4, 8}, rng), true);
  Var<double> logits(random_tensor<double>({2, 3, 4, 8}, rng), true);
  Var<double> gamma(random_tensor<double>({2, 3, 4, 1}, rng), true);
  Var<double> beta(random_tensor<double>({2, 3, 4, 1}, rng), true);
  EXPECT_LT(grad_check({x, logits, gamma, beta},
                       [&] { return probe(ag::regional_affine(x, ag::softmax_channels(logits), gamma, beta)); }),
            kGradTol);

  auto mask = testing::random_mask({2, 1, 4, 8}, rng).cast<double>();
  Var<double> defaults(random_tensor<double>({1, 3, 4, 1}, rng), true);
  EXPECT_LT(grad_check({x, logits, defaults},
                       [&] {
                         return probe(ag::region_style(x, ag::softmax_channels(logits), mask, defaults).first);
                       }),
            kGradTol);

  Var<double> in(random_tensor<double>({2, 3, 5, 1}, rng), true);
  Var<double> w(random_tensor<double>({3, 6, 5, 1}, rng), true);
  Var<double> b(random_tensor<double>({1, 3, 6, 1}, rng), true);
  EXPECT_LT(grad_check({in, w, b}, [&] { return probe(ag::class_linear(in, w, b)); }), kGradTol);
}

TEST(RegionalTest, StyleFallsBackToDefaultsWhenFullyMasked) {
  Rng rng(10);
  Var<double> f(random_tensor<double>({1, 2, 2, 4}, rng), true);
  Tensor<double> layout({1, 3, 2, 4}, 1.0 / 3.0);
  Tensor<double> mask({1, 1, 2, 4}, 1.0);
  Var<double> defaults(random_tensor<double>({1, 3, 2, 1}, rng), true);
  const auto [styles, present] = ag::region_style(f, Var<double>(layout), mask, defaults);
  for (int k = 0; k < 3; ++k) {
    EXPECT_FALSE(present[k]);
    for (int d = 0; d < 2; ++d) EXPECT_EQ(styles.value().at(0, k, d, 0), defaults.value().at(0, k, d, 0));
  }
}

TEST(CompositeTest, GradientRoutesByMask) {
  Rng rng(11);
  Var<double> in(random_tensor<double>({1, 3, 4, 8}, rng), true);
  Var<double> raw(random_tensor<double>({1, 3, 4, 8}, rng), true);
  const auto mask = testing::random_mask({1, 1, 4, 8}, rng).cast<double>();
  EXPECT_LT(grad_check({in, raw}, [&] { return probe(ag::composite(in, raw, mask)); }), kGradTol);
}

TEST(AdamTest, MinimizesQuadratic) {
  nn::ParamSet<double> ps;
  auto p = ps.add("p", Tensor<double>({1, 1, 1, 3}, 5.0));
  nn::Adam<double> opt(ps, {0.1, 0.9, 0.999, 1e-8});
  for (int i = 0; i < 500; ++i) {
    ag::backward(ag::sum(ag::mul(p, p)));
    opt.step();
  }
  for (double v : p.value().span()) EXPECT_NEAR(v, 0.0, 1e-2);
}

}  // namespace
}  // namespace panodr
