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

#include <cmath>

#include "panodr/dr_generator.hpp"
#include "test_util.hpp"

namespace panodr {
namespace {

using ag::Var;
using testing::random_tensor;

TEST(GatedConvTest, GateSaturation) {
  Rng rng(1);
  nn::ParamSet<double> ps;
  nn::GatedConv2d<double> g(ps, "g", 3, 4, 3, rng);
  const Var<double> x(random_tensor<double>({1, 3, 4, 8}, rng));
  g.gate.weight.mutable_value().fill(0.0);
  g.gate.bias.mutable_value().fill(20.0);
  const auto open = g(x).value();
  const auto phi = ag::elu(g.feature(x)).value();
  EXPECT_LT(max_abs_diff(open, phi), 1e-8);
  g.gate.bias.mutable_value().fill(-20.0);
  for (double v : g(x).value().span()) EXPECT_LT(std::abs(v), 1e-7);
}

TEST(GatedConvTest, ZeroInputZeroBiasGivesZero) {
  Rng rng(2);
  nn::ParamSet<double> ps;
  nn::GatedConv2d<double> g(ps, "g", 3, 4, 3, rng, 2);
  const auto y = g(Var<double>(Tensor<double>({1, 3, 4, 8}))).value();
  for (double v : y.span()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(g(Var<double>(Tensor<double>({1, 2, 4, 8}))), std::invalid_argument);
}

Tensor<double> hard_layout(const std::vector<int>& labels, int h, int w) {
  Tensor<double> t({1, 3, h, w});
  for (int i = 0; i < h * w; ++i) t.plane(0, labels[i])[i] = 1.0;
  return t;
}

TEST(StyleBankTest, ConstantFeaturesGiveConstantStyle) {
  const int h = 4, w = 8, d = 2;
  Tensor<double> f({1, d, h, w});
  std::vector<int> labels(h * w);
  for (int i = 0; i < h * w; ++i) {
    labels[i] = i < 16 ? 0 : 2;
    f.plane(0, 0)[i] = labels[i] == 0 ? 0.3 : -1.5;
    f.plane(0, 1)[i] = labels[i] == 0 ? 2.0 : 0.25;
  }
  Tensor<double> mask({1, 1, h, w});
  mask[3] = 1;
  mask[20] = 1;
  mask[20 + 1] = 1;
  Var<double> defaults(Tensor<double>({1, 3, d, 1}, 7.0));
  const auto bank = extract_style_bank(Var<double>(f), Var<double>(hard_layout(labels, h, w)), mask, defaults);
  EXPECT_EQ(bank.present, (std::vector<bool>{true, false, true}));
  EXPECT_NEAR(bank.styles.value().at(0, 0, 0, 0), 0.3, 1e-12);
  EXPECT_NEAR(bank.styles.value().at(0, 0, 1, 0), 2.0, 1e-12);
  EXPECT_NEAR(bank.styles.value().at(0, 2, 0, 0), -1.5, 1e-12);
  EXPECT_NEAR(bank.styles.value().at(0, 2, 1, 0), 0.25, 1e-12);
  EXPECT_EQ(bank.styles.value().at(0, 1, 0, 0), 7.0);
}

TEST(StyleBankTest, FullMaskUsesDefaults) {
  Rng rng(3);
  const Var<double> f(random_tensor<double>({2, 3, 4, 8}, rng));
  const Var<double> lay = ag::softmax_channels(Var<double>(random_tensor<double>({2, 3, 4, 8}, rng)));
  Var<double> defaults(random_tensor<double>({1, 3, 3, 1}, rng));
  const auto bank = extract_style_bank(f, lay, Tensor<double>({2, 1, 4, 8}, 1.0), defaults);
  for (bool p : bank.present) EXPECT_FALSE(p);
  for (int n = 0; n < 2; ++n) {
    for (int k = 0; k < 3; ++k) {
      for (int d = 0; d < 3; ++d) EXPECT_EQ(bank.styles.value().at(n, k, d, 0), defaults.value().at(0, k, d, 0));
    }
  }
}

TEST(StyleBankTest, MatchesAccumulationOracleAndIsPermutationInvariant) {
  Rng rng(4);
  const int h = 8, w = 16, d = 5;
  const auto f = random_tensor<double>({1, d, h, w}, rng);
  const auto lay = ag::softmax_channels(Var<double>(random_tensor<double>({1, 3, h, w}, rng, -2, 2))).value();
  const auto mask = testing::random_mask({1, 1, h, w}, rng).cast<double>();
  Var<double> defaults(Tensor<double>({1, 3, d, 1}));
  const auto bank = extract_style_bank(Var<double>(f), Var<double>(lay), mask, defaults);
  for (int k = 0; k < 3; ++k) {
    for (int c = 0; c < d; ++c) {
      double num = 0, den = 0;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double wt = lay.at(0, k, y, x) * (1 - mask.at(0, 0, y, x));
          num += wt * f.at(0, c, y, x);
          den += wt;
        }
      }
      EXPECT_NEAR(bank.styles.value().at(0, k, c, 0), num / den, 1e-12);
    }
  }
  // Same multiset of (feature, layout, mask) pixels in a shuffled order.
  std::vector<std::size_t> perm(h * w);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(perm);
  Tensor<double> f2(f.shape()), l2(lay.shape()), m2(mask.shape());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (int c = 0; c < d; ++c) f2.plane(0, c)[i] = f.plane(0, c)[perm[i]];
    for (int k = 0; k < 3; ++k) l2.plane(0, k)[i] = lay.plane(0, k)[perm[i]];
    m2[i] = mask[perm[i]];
  }
  const auto bank2 = extract_style_bank(Var<double>(f2), Var<double>(l2), m2, defaults);
  EXPECT_LT(max_abs_diff(bank.styles.value(), bank2.styles.value()), 1e-12);
}

struct NormFixture {
  Rng rng{5};
  nn::ParamSet<double> ps;
  StructureNorm<double> norm;
  StyleBank<double> bank;
  NormFixture(int c = 4, int d = 3) : norm(ps, "n", c, d, 6, 1e-5, rng) {
    // Non-trivial output scales so the classes differ noticeably.
    for (auto* v : {&norm.wg, &norm.wb, &norm.bg, &norm.bb}) {
      for (auto& x : v->mutable_value().span()) x = rng.uniform(-1, 1);
    }
    bank.styles = Var<double>(random_tensor<double>({1, 3, d, 1}, rng));
    bank.present = {true, true, true};
  }
};

TEST(StructureNormTest, SingleClassCollapsesToConditionalInstanceNorm) {
  NormFixture fx;
  const auto x = random_tensor<double>({1, 4, 4, 8}, fx.rng);
  const auto xhat = ag::instance_norm(Var<double>(x), 1e-5).value();
  const auto [gamma, beta] = fx.norm.modulation(fx.bank);
  for (int k = 0; k < 3; ++k) {
    const auto y = fx.norm(Var<double>(x), Var<double>(hard_layout(std::vector<int>(32, k), 4, 8)), fx.bank).value();
    for (int c = 0; c < 4; ++c) {
      for (int i = 0; i < 32; ++i) {
        EXPECT_NEAR(y.plane(0, c)[i],
                    gamma.value().at(0, k, c, 0) * xhat.plane(0, c)[i] + beta.value().at(0, k, c, 0), 1e-12);
      }
    }
  }
}

TEST(StructureNormTest, EqualClassMlpsIgnoreLayout) {
  NormFixture fx;
  // Copy class 0's MLP into classes 1 and 2 and give all classes one style.
  for (auto* v : {&fx.norm.w1, &fx.norm.wg, &fx.norm.wb}) {
    auto& t = v->mutable_value();
    const std::size_t per = t.size() / 3;
    for (std::size_t i = 0; i < per; ++i) t[per + i] = t[2 * per + i] = t[i];
  }
  for (auto* v : {&fx.norm.b1, &fx.norm.bg, &fx.norm.bb}) {
    auto& t = v->mutable_value();
    const std::size_t per = t.size() / 3;
    for (std::size_t i = 0; i < per; ++i) t[per + i] = t[2 * per + i] = t[i];
  }
  auto& st = fx.bank.styles.mutable_value();
  for (int c = 0; c < 3; ++c) st.at(0, 1, c, 0) = st.at(0, 2, c, 0) = st.at(0, 0, c, 0);
  const auto x = random_tensor<double>({1, 4, 4, 8}, fx.rng);
  const auto a = fx.norm(Var<double>(x), ag::softmax_channels(Var<double>(random_tensor<double>({1, 3, 4, 8}, fx.rng))),
                         fx.bank);
  const auto b = fx.norm(Var<double>(x), Var<double>(hard_layout(std::vector<int>(32, 1), 4, 8)), fx.bank);
  EXPECT_LT(max_abs_diff(a.value(), b.value()), 1e-12);
}

TEST(StructureNormTest, MatchesPerPixelReference) {
  NormFixture fx(5, 3);
  const int h = 6, w = 12;
  const auto x = random_tensor<double>({1, 5, h, w}, fx.rng, -3, 3);
  const auto lay = ag::softmax_channels(Var<double>(random_tensor<double>({1, 3, h, w}, fx.rng))).value();
  const auto y = fx.norm(Var<double>(x), Var<double>(lay), fx.bank).value();
  // Naive reference: statistics, MLPs, and mixing written out per pixel.
  const auto mlp = [&](int k, const Var<double>& wout, const Var<double>& bout, int c) {
    double out = bout.value().at(0, k, c, 0);
    for (int j = 0; j < 6; ++j) {
      double hid = fx.norm.b1.value().at(0, k, j, 0);
      for (int dd = 0; dd < 3; ++dd) hid += fx.norm.w1.value().at(k, j, dd, 0) * fx.bank.styles.value().at(0, k, dd, 0);
      hid = hid > 0 ? hid : 0.2 * hid;
      out += wout.value().at(k, c, j, 0) * hid;
    }
    return out;
  };
  double worst = 0;
  for (int c = 0; c < 5; ++c) {
    double mu = 0, var = 0;
    for (int i = 0; i < h * w; ++i) mu += x.plane(0, c)[i];
    mu /= h * w;
    for (int i = 0; i < h * w; ++i) var += (x.plane(0, c)[i] - mu) * (x.plane(0, c)[i] - mu);
    var /= h * w;
    for (int i = 0; i < h * w; ++i) {
      double g = 0, b = 0;
      for (int k = 0; k < 3; ++k) {
        g += lay.plane(0, k)[i] * mlp(k, fx.norm.wg, fx.norm.bg, c);
        b += lay.plane(0, k)[i] * mlp(k, fx.norm.wb, fx.norm.bb, c);
      }
      const double ref = g * (x.plane(0, c)[i] - mu) / std::sqrt(var + 1e-5) + b;
      worst = std::max(worst, std::abs(ref - y.plane(0, c)[i]));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

TEST(StructureNormTest, UnitModulationGivesStandardizedChannels) {
  NormFixture fx;
  fx.norm.wg.mutable_value().fill(0);
  fx.norm.wb.mutable_value().fill(0);
  fx.norm.bg.mutable_value().fill(1);
  fx.norm.bb.mutable_value().fill(0);
  const auto x = random_tensor<double>({2, 4, 8, 16}, fx.rng, 2, 5);
  StyleBank<double> bank{Var<double>(random_tensor<double>({2, 3, 3, 1}, fx.rng)), std::vector<bool>(6, true)};
  const auto y = fx.norm(Var<double>(x), ag::softmax_channels(Var<double>(random_tensor<double>({2, 3, 8, 16}, fx.rng))),
                         bank)
                     .value();
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 4; ++c) {
      double mu = 0, m2 = 0;
      for (int i = 0; i < 128; ++i) mu += y.plane(n, c)[i];
      mu /= 128;
      for (int i = 0; i < 128; ++i) m2 += (y.plane(n, c)[i] - mu) * (y.plane(n, c)[i] - mu);
      EXPECT_NEAR(mu, 0.0, 1e-10);
      EXPECT_NEAR(m2 / 128, 1.0, 1e-3);  // eps shifts the variance slightly
    }
  }
}

struct GenInputs {
  Tensor<float> input;
  Tensor<float> layout;
  Tensor<float> mask;
};

GenInputs random_inputs(int h, Rng& rng) {
  GenInputs g;
  const int w = 2 * h;
  g.mask = testing::random_mask({1, 1, h, w}, rng, 0.2);
  g.input = data::masked_input(random_tensor<float>({1, 3, h, w}, rng, 0, 1), g.mask);
  g.layout = ag::softmax_channels(Var<float>(random_tensor<float>({1, 3, h, w}, rng, -3, 3))).value();
  return g;
}

TEST(GeneratorTest, OutputRangeAndShape) {
  Generator<float> gen(GeneratorConfig{}, 1);
  Rng rng(6);
  const auto in = random_inputs(16, rng);
  const auto raw = gen.generate(Var<float>(in.input), Var<float>(in.layout)).value();
  EXPECT_EQ(raw.shape(), (Shape{1, 3, 16, 32}));
  for (float v : raw.span()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(GeneratorTest, FiniteForManySeeds) {
  GeneratorConfig cfg;
  cfg.base_channels = 8;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Generator<float> gen(cfg, seed);
    Rng rng(seed);
    const auto in = random_inputs(8, rng);
    ASSERT_TRUE(gen.generate(Var<float>(in.input), Var<float>(in.layout)).value().all_finite()) << seed;
  }
}

TEST(GeneratorTest, JointRollEquivariance) {
  Generator<float> gen(GeneratorConfig{}, 2);
  Rng rng(7);
  const auto in = random_inputs(64, rng);
  const auto raw = gen.generate(Var<float>(in.input), Var<float>(in.layout)).value();
  for (int t = 0; t < 5; ++t) {
    const long k = rng.integer(1, 127);
    const auto rolled = gen.generate(Var<float>(roll_horizontal(in.input, k)),
                                     Var<float>(roll_horizontal(in.layout, k)))
                            .value();
    EXPECT_LT(max_abs_diff(rolled, roll_horizontal(raw, k)), 1e-4f) << k;
  }
}

TEST(GeneratorTest, RejectsBadShapes) {
  Generator<float> gen(GeneratorConfig{}, 3);
  EXPECT_THROW(gen.generate(Var<float>(Tensor<float>({1, 3, 16, 32})), Var<float>(Tensor<float>({1, 3, 16, 32}))),
               std::invalid_argument);
  EXPECT_THROW(gen.generate(Var<float>(Tensor<float>({1, 4, 14, 28})), Var<float>(Tensor<float>({1, 3, 14, 28}))),
               std::invalid_argument);
  EXPECT_THROW(gen.generate(Var<float>(Tensor<float>({1, 4, 16, 32})), Var<float>(Tensor<float>({1, 3, 8, 16}))),
               std::invalid_argument);
}

TEST(GeneratorTest, EndToEndGradientMatchesFiniteDifferences) {
  GeneratorConfig cfg;
  cfg.base_channels = 4;
  cfg.max_channels = 4;
  cfg.depth = 2;
  cfg.style_dim = 3;
  cfg.style_hidden = 4;
  Generator<double> gen(cfg, 4);
  Rng rng(8);
  const auto mask = testing::random_mask({1, 1, 8, 16}, rng, 0.3).cast<double>();
  Tensor<double> keep(mask.shape());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = 1.0 - mask[i];
  Var<double> rgb(random_tensor<double>({1, 3, 8, 16}, rng, 0, 1), true);
  Var<double> logits(random_tensor<double>({1, 3, 8, 16}, rng), true);
  const Var<double> target(random_tensor<double>({1, 3, 8, 16}, rng, 0, 1));
  const auto loss = [&] {
    const auto masked = ag::mul_channels(rgb, Var<double>(keep));
    const auto in = ag::concat_channels<double>({masked, Var<double>(mask)});
    const auto out = ag::composite(masked, gen.generate(in, ag::softmax_channels(logits)), mask);
    const auto diff = ag::sub(out, target);
    return ag::mean(ag::mul(diff, diff));
  };
  std::vector<Var<double>> leaves{rgb, logits};
  for (const auto& [_, v] : gen.params().items()) leaves.push_back(v);
  EXPECT_LT(testing::grad_check(leaves, loss, 1e-6, 40), 1e-3);
}

TEST(GeneratorTest, AblationIgnoresLayoutWithSameParameterCount) {
  GeneratorConfig cfg;
  cfg.base_channels = 8;
  Generator<float> guided(cfg, 5);
  cfg.disable_structure_guidance = true;
  Generator<float> ablated(cfg, 5);
  EXPECT_EQ(guided.params().scalar_count(), ablated.params().scalar_count());
  EXPECT_EQ(guided.params().flatten(), ablated.params().flatten());
  Rng rng(9);
  const auto in = random_inputs(16, rng);
  const auto other = random_inputs(16, rng);
  const auto a = ablated.generate(Var<float>(in.input), Var<float>(in.layout)).value();
  const auto b = ablated.generate(Var<float>(in.input), Var<float>(other.layout)).value();
  EXPECT_EQ(a.vec(), b.vec());
  const auto c = guided.generate(Var<float>(in.input), Var<float>(in.layout)).value();
  const auto d = guided.generate(Var<float>(in.input), Var<float>(other.layout)).value();
  EXPECT_GT(max_abs_diff(c, d), 0.0f);
}

TEST(CompositeTest, ExactSelection) {
  Rng rng(10);
  const auto in = random_tensor<float>({1, 3, 8, 16}, rng, 0, 1);
  const auto raw = random_tensor<float>({1, 3, 8, 16}, rng, 0, 1);
  const Tensor<float> zeros({1, 1, 8, 16}), ones({1, 1, 8, 16}, 1.0f);
  EXPECT_EQ(composite(Var<float>(in), Var<float>(raw), zeros).value().vec(), in.vec());
  EXPECT_EQ(composite(Var<float>(in), Var<float>(raw), ones).value().vec(), raw.vec());
  const auto m = testing::random_mask({1, 1, 8, 16}, rng, 0.5);
  const auto out = composite(Var<float>(in), Var<float>(raw), m).value();
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 16; ++x) {
        const float expect = m.at(0, 0, y, x) != 0 ? raw.at(0, c, y, x) : in.at(0, c, y, x);
        EXPECT_EQ(out.at(0, c, y, x), expect);
      }
    }
  }
}

}  // namespace
}  // namespace panodr
