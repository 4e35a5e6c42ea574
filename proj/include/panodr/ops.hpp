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

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "panodr/autograd.hpp"

// Differentiable layers over panorama feature maps. All spatial filtering
// pads the width circularly (360 degree continuity) and the height by edge
// replication, matching circular_pad().
namespace panodr::ag {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Source offset inside an HxW plane for every (kernel tap, output pixel).
struct ConvTable {
  int out_h = 0;
  int out_w = 0;
  int taps = 0;
  std::vector<int> offsets;  // taps x (out_h*out_w)

  ConvTable(int h, int w, int k, int stride, int dilation) {
    const int pad = dilation * (k - 1) / 2;
    out_h = (h - 1) / stride + 1;
    out_w = (w - 1) / stride + 1;
    taps = k * k;
    const std::size_t p = static_cast<std::size_t>(out_h) * out_w;
    offsets.resize(taps * p);
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        int* dst = offsets.data() + (ky * k + kx) * p;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = std::clamp(oy * stride - pad + ky * dilation, 0, h - 1);
          for (int ox = 0; ox < out_w; ++ox) {
            int ix = (ox * stride - pad + kx * dilation) % w;
            if (ix < 0) ix += w;
            dst[oy * out_w + ox] = iy * w + ix;
          }
        }
      }
    }
  }
  std::size_t pixels() const { return static_cast<std::size_t>(out_h) * out_w; }
};

template <typename T>
void im2col(const T* x, int channels, std::size_t in_plane, const ConvTable& t,
            T* cols) {
  const std::size_t p = t.pixels();
  for (int c = 0; c < channels; ++c) {
    const T* src = x + c * in_plane;
    for (int tap = 0; tap < t.taps; ++tap) {
      const int* off = t.offsets.data() + tap * p;
      T* dst = cols + (static_cast<std::size_t>(c) * t.taps + tap) * p;
      for (std::size_t j = 0; j < p; ++j) dst[j] = src[off[j]];
    }
  }
}

template <typename T>
void col2im_add(const T* cols, int channels, std::size_t in_plane,
                const ConvTable& t, T* dx) {
  const std::size_t p = t.pixels();
  for (int c = 0; c < channels; ++c) {
    T* dst = dx + c * in_plane;
    for (int tap = 0; tap < t.taps; ++tap) {
      const int* off = t.offsets.data() + tap * p;
      const T* src = cols + (static_cast<std::size_t>(c) * t.taps + tap) * p;
      for (std::size_t j = 0; j < p; ++j) dst[off[j]] += src[j];
    }
  }
}

}  // namespace detail

// 2-D convolution with panorama padding. weight: (Cout, Cin, k, k), odd k;
// bias: (1, Cout, 1, 1) or undefined. Output size is ceil(H/stride) x
// ceil(W/stride).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
              int stride = 1, int dilation = 1) {
  const Shape s = x.shape();
  const Shape ws = weight.shape();
  if (ws.c != s.c) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(s.c) +
                                " channels, weight expects " +
                                std::to_string(ws.c));
  }
  if (ws.h != ws.w || ws.h % 2 == 0) {
    throw std::invalid_argument("conv2d: kernel must be square and odd " +
                                ws.str());
  }
  if (bias.defined() && bias.value().size() != static_cast<std::size_t>(ws.n)) {
    throw std::invalid_argument("conv2d: bias size mismatch");
  }
  const int k = ws.h;
  if (dilation * (k - 1) / 2 > s.w) {
    throw std::invalid_argument("conv2d: receptive field wider than input");
  }
  auto table = std::make_shared<detail::ConvTable>(s.h, s.w, k, stride, dilation);
  const int cout = ws.n;
  const int ck = s.c * k * k;
  const std::size_t p = table->pixels();
  const std::size_t in_plane = s.plane();
  const bool identity_cols = (k == 1 && stride == 1);

  Tensor<T> out({s.n, cout, table->out_h, table->out_w});
  AlignedVector<T> cols(identity_cols ? 0 : ck * p);
  Eigen::Map<const detail::RowMat<T>> wm(weight.value().data(), cout, ck);
  for (int n = 0; n < s.n; ++n) {
    const T* colp = x.value().plane(n, 0);
    if (!identity_cols) {
      detail::im2col(x.value().plane(n, 0), s.c, in_plane, *table, cols.data());
      colp = cols.data();
    }
    Eigen::Map<const detail::RowMat<T>> cm(colp, ck, p);
    Eigen::Map<detail::RowMat<T>> om(out.plane(n, 0), cout, p);
    om.noalias() = wm * cm;
    if (bias.defined()) {
      for (int co = 0; co < cout; ++co) om.row(co).array() += bias.value()[co];
    }
  }

  std::vector<Var<T>> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_op<T>(
      std::move(out), parents,
      [table, cout, ck, p, in_plane, identity_cols](
          const Tensor<T>& g, std::span<const NodePtr<T>> par) {
        const Tensor<T>& xv = par[0]->value;
        const Tensor<T>& wv = par[1]->value;
        const bool need_x = par[0]->requires_grad;
        const bool need_w = par[1]->requires_grad;
        const bool need_b = par.size() > 2 && par[2]->requires_grad;
        Eigen::Map<const detail::RowMat<T>> wm(wv.data(), cout, ck);
        AlignedVector<T> cols(identity_cols ? 0 : ck * p);
        detail::RowMat<T> dcols;
        for (int n = 0; n < xv.n(); ++n) {
          Eigen::Map<const detail::RowMat<T>> gm(g.plane(n, 0), cout, p);
          if (need_w) {
            const T* colp = xv.plane(n, 0);
            if (!identity_cols) {
              detail::im2col(xv.plane(n, 0), xv.c(), in_plane, *table, cols.data());
              colp = cols.data();
            }
            Eigen::Map<const detail::RowMat<T>> cm(colp, ck, p);
            Eigen::Map<detail::RowMat<T>> dw(par[1]->grad_buffer().data(), cout, ck);
            dw.noalias() += gm * cm.transpose();
          }
          if (need_b) {
            T* db = par[2]->grad_buffer().data();
            for (int co = 0; co < cout; ++co) db[co] += gm.row(co).sum();
          }
          if (need_x) {
            T* dx = par[0]->grad_buffer().plane(n, 0);
            if (identity_cols) {
              Eigen::Map<detail::RowMat<T>> dxm(dx, ck, p);
              dxm.noalias() += wm.transpose() * gm;
            } else {
              dcols.noalias() = wm.transpose() * gm;
              detail::col2im_add(dcols.data(), xv.c(), in_plane, *table, dx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// 2x2 average pooling whose horizontal window phase is chosen per sample.
//
// Plain strided pooling is only equivariant to horizontal rolls by even
// offsets. Picking, per sample, the phase (0 or 1) whose pooled output has
// the larger L2 norm makes the pooled grid follow the content, so a roll of
// the input by any k is a roll of the output plus a phase flip. The chosen
// phases are returned so upsampling and auxiliary maps can use the same grid.

struct Phases {
  std::vector<int> phase;  // one per batch entry, 0 or 1
};

namespace detail {

template <typename T>
void pool2_plane(const T* src, int h, int w, int phase, T* dst) {
  const int ow = w / 2;
  for (int i = 0; i < h / 2; ++i) {
    const T* r0 = src + (2 * i) * w;
    const T* r1 = r0 + w;
    for (int j = 0; j < ow; ++j) {
      const int a = 2 * j + phase;
      const int b = (a + 1) % w;
      const int a0 = a % w;
      dst[i * ow + j] = T(0.25) * (r0[a0] + r0[b] + r1[a0] + r1[b]);
    }
  }
}

inline void require_even(const Shape& s, const char* op) {
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw std::invalid_argument(std::string(op) +
                                ": spatial size must be even, got " + s.str());
  }
}

}  // namespace detail

// Pools with the given per-sample phases.
template <typename T>
Var<T> pool2_phase(const Var<T>& x, const Phases& phases) {
  const Shape s = x.shape();
  detail::require_even(s, "pool2_phase");
  if (phases.phase.size() != static_cast<std::size_t>(s.n)) {
    throw std::invalid_argument("pool2_phase: phase count != batch");
  }
  Tensor<T> out({s.n, s.c, s.h / 2, s.w / 2});
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      detail::pool2_plane(x.value().plane(n, c), s.h, s.w, phases.phase[n],
                          out.plane(n, c));
    }
  }
  return make_op<T>(
      std::move(out), {x},
      [phases](const Tensor<T>& g, std::span<const NodePtr<T>> p) {
        accumulate<T>(p[0], [&](Tensor<T>& d) {
          const int h = d.h(), w = d.w(), ow = w / 2;
          for (int n = 0; n < d.n(); ++n) {
            const int ph = phases.phase[n];
            for (int c = 0; c < d.c(); ++c) {
              const T* gp = g.plane(n, c);
              T* dp = d.plane(n, c);
              for (int i = 0; i < h / 2; ++i) {
                for (int j = 0; j < ow; ++j) {
                  const T v = T(0.25) * gp[i * ow + j];
                  const int a = (2 * j + ph) % w;
                  const int b = (2 * j + ph + 1) % w;
                  dp[2 * i * w + a] += v;
                  dp[2 * i * w + b] += v;
                  dp[(2 * i + 1) * w + a] += v;
                  dp[(2 * i + 1) * w + b] += v;
                }
              }
            }
          }
        });
      });
}

template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  return pool2_phase(x, Phases{std::vector<int>(x.shape().n, 0)});
}

// Chooses the max-norm phase per sample and pools with it.
template <typename T>
std::pair<Var<T>, Phases> adaptive_pool2(const Var<T>& x) {
  const Shape s = x.shape();
  detail::require_even(s, "adaptive_pool2");
  Phases phases{std::vector<int>(s.n, 0)};
  std::vector<T> buf(static_cast<std::size_t>(s.h / 2) * (s.w / 2));
  for (int n = 0; n < s.n; ++n) {
    double norms[2] = {0.0, 0.0};
    for (int ph = 0; ph < 2; ++ph) {
      for (int c = 0; c < s.c; ++c) {
        detail::pool2_plane(x.value().plane(n, c), s.h, s.w, ph, buf.data());
        for (T v : buf) norms[ph] += static_cast<double>(v) * static_cast<double>(v);
      }
    }
    phases.phase[n] = norms[1] > norms[0] ? 1 : 0;
  }
  return {pool2_phase(x, phases), phases};
}

// Nearest 2x upsampling onto the grid a pool2_phase with `phases` produced.
template <typename T>
Var<T> upsample2_phase(const Var<T>& x, const Phases& phases) {
  const Shape s = x.shape();
  if (phases.phase.size() != static_cast<std::size_t>(s.n)) {
    throw std::invalid_argument("upsample2_phase: phase count != batch");
  }
  const int h = 2 * s.h, w = 2 * s.w;
  Tensor<T> out({s.n, s.c, h, w});
  for (int n = 0; n < s.n; ++n) {
    const int ph = phases.phase[n];
    for (int c = 0; c < s.c; ++c) {
      const T* src = x.value().plane(n, c);
      T* dst = out.plane(n, c);
      for (int i = 0; i < s.h; ++i) {
        for (int j = 0; j < s.w; ++j) {
          const T v = src[i * s.w + j];
          const int a = (2 * j + ph) % w;
          const int b = (2 * j + ph + 1) % w;
          dst[2 * i * w + a] = v;
          dst[2 * i * w + b] = v;
          dst[(2 * i + 1) * w + a] = v;
          dst[(2 * i + 1) * w + b] = v;
        }
      }
    }
  }
  return make_op<T>(
      std::move(out), {x},
      [phases, w](const Tensor<T>& g, std::span<const NodePtr<T>> p) {
        accumulate<T>(p[0], [&](Tensor<T>& d) {
          const int sw = d.w();
          for (int n = 0; n < d.n(); ++n) {
            const int ph = phases.phase[n];
            for (int c = 0; c < d.c(); ++c) {
              const T* gp = g.plane(n, c);
              T* dp = d.plane(n, c);
              for (int i = 0; i < d.h(); ++i) {
                for (int j = 0; j < sw; ++j) {
                  const int a = (2 * j + ph) % w;
                  const int b = (2 * j + ph + 1) % w;
                  dp[i * sw + j] += gp[2 * i * w + a] + gp[2 * i * w + b] +
                                    gp[(2 * i + 1) * w + a] +
                                    gp[(2 * i + 1) * w + b];
                }
              }
            }
          }
        });
      });
}

// ---------------------------------------------------------------------------

// Per-pixel softmax over channels.
template <typename T>
Var<T> softmax_channels(const Var<T>& x) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      T mx = x.value().plane(n, 0)[i];
      for (int c = 1; c < s.c; ++c) mx = std::max(mx, x.value().plane(n, c)[i]);
      T z = 0;
      for (int c = 0; c < s.c; ++c) {
        const T e = std::exp(x.value().plane(n, c)[i] - mx);
        out.plane(n, c)[i] = e;
        z += e;
      }
      for (int c = 0; c < s.c; ++c) out.plane(n, c)[i] /= z;
    }
  }
  Tensor<T> y = out;
  return make_op<T>(
      std::move(out), {x},
      [y = std::move(y), plane](const Tensor<T>& g, std::span<const NodePtr<T>> p) {
        accumulate<T>(p[0], [&](Tensor<T>& d) {
          for (int n = 0; n < d.n(); ++n) {
            for (std::size_t i = 0; i < plane; ++i) {
              T dot = 0;
              for (int c = 0; c < d.c(); ++c) dot += g.plane(n, c)[i] * y.plane(n, c)[i];
              for (int c = 0; c < d.c(); ++c) {
                d.plane(n, c)[i] += y.plane(n, c)[i] * (g.plane(n, c)[i] - dot);
              }
            }
          }
        });
      });
}

// Instance normalization without affine parameters.
template <typename T>
Var<T> instance_norm(const Var<T>& x, T eps) {
  const Shape s = x.shape();
  const std::size_t plane = s.plane();
  Tensor<T> out(s);
  std::vector<T> inv_std(static_cast<std::size_t>(s.n) * s.c);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const T* xp = x.value().plane(n, c);
      T mu = 0;
      for (std::size_t i = 0; i < plane; ++i) mu += xp[i];
      mu /= static_cast<T>(plane);
      T var = 0;
      for (std::size_t i = 0; i < plane; ++i) var += (xp[i] - mu) * (xp[i] - mu);
      var /= static_cast<T>(plane);
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[n * s.c + c] = is;
      T* op = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) op[i] = (xp[i] - mu) * is;
    }
  }
  Tensor<T> xhat = out;
  return make_op<T>(
      std::move(out), {x},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), plane](
          const Tensor<T>& g, std::span<const NodePtr<T>> p) {
        accumulate<T>(p[0], [&](Tensor<T>& d) {
          const T inv_n = T(1) / static_cast<T>(plane);
          for (int n = 0; n < d.n(); ++n) {
            for (int c = 0; c < d.c(); ++c) {
              const T* gp = g.plane(n, c);
              const T* hp = xhat.plane(n, c);
              T mg = 0, mgh = 0;
              for (std::size_t i = 0; i < plane; ++i) {
                mg += gp[i];
                mgh += gp[i] * hp[i];
              }
              mg *= inv_n;
              mgh *= inv_n;
              const T is = inv_std[n * d.c() + c];
              T* dp = d.plane(n, c);
              for (std::size_t i = 0; i < plane; ++i) {
                dp[i] += is * (gp[i] - mg - hp[i] * mgh);
              }
            }
          }
        });
      });
}

// Per-pixel affine modulation mixed from per-class codes:
//   gamma(p) = sum_k layout_k(p) gamma[k], beta(p) likewise,
//   out = gamma(p) * x + beta(p).
// x: (N,C,H,W); layout: (N,K,H,W); gamma, beta: (N,K,C,1).
template <typename T>
Var<T> regional_affine(const Var<T>& x, const Var<T>& layout,
                       const Var<T>& gamma, const Var<T>& beta) {
  const Shape s = x.shape();
  const Shape ls = layout.shape();
  const int k_classes = ls.c;
  if (ls.n != s.n || ls.h != s.h || ls.w != s.w) {
    throw std::invalid_argument("regional_affine: layout shape " + ls.str() +
                                " does not match features " + s.str());
  }
  const Shape cs{s.n, k_classes, s.c, 1};
  require_same_shape(gamma.shape(), cs, "regional_affine gamma");
  require_same_shape(beta.shape(), cs, "regional_affine beta");
  const std::size_t plane = s.plane();
  Tensor<T> out(s);
  std::vector<T> gmap(plane), bmap(plane);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      std::fill(gmap.begin(), gmap.end(), T(0));
      std::fill(bmap.begin(), bmap.end(), T(0));
      for (int k = 0; k < k_classes; ++k) {
        const T gk = gamma.value().at(n, k, c, 0);
        const T bk = beta.value().at(n, k, c, 0);
        const T* lp = layout.value().plane(n, k);
        for (std::size_t i = 0; i < plane; ++i) {
          gmap[i] += lp[i] * gk;
          bmap[i] += lp[i] * bk;
        }
      }
      const T* xp = x.value().plane(n, c);
      T* op = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) op[i] = gmap[i] * xp[i] + bmap[i];
    }
  }
  return make_op<T>(
      std::move(out), {x, layout, gamma, beta},
      [plane, k_classes](const Tensor<T>& g, std::span<const NodePtr<T>> p) {
        const Tensor<T>& xv = p[0]->value;
        const Tensor<T>& lv = p[1]->value;
        const Tensor<T>& gv = p[2]->value;
        const Tensor<T>& bv = p[3]->value;
        const int N = xv.n(), C = xv.c();
        if (p[0]->requires_grad) {
          Tensor<T>& d = p[0]->grad_buffer();
          for (int n = 0; n < N; ++n) {
            for (int c = 0; c < C; ++c) {
              const T* gp = g.plane(n, c);
              T* dp = d.plane(n, c);
              for (int k = 0; k < k_classes; ++k) {
                const T gk = gv.at(n, k, c, 0);
                const T* lp = lv.plane(n, k);
                for (std::size_t i = 0; i < plane; ++i) dp[i] += gp[i] * lp[i] * gk;
              }
            }
          }
        }
        if (p[1]->requires_grad) {
          Tensor<T>& d = p[1]->grad_buffer();
          for (int n = 0; n < N; ++n) {
            for (int k = 0; k < k_classes; ++k) {
              T* dp = d.plane(n, k);
              for (int c = 0; c < C; ++c) {
                const T gk = gv.at(n, k, c, 0);
                const T bk = bv.at(n, k, c, 0);
                const T* gp = g.plane(n, c);
                const T* xp = xv.plane(n, c);
                for (std::size_t i = 0; i < plane; ++i) dp[i] += gp[i] * (xp[i] * gk + bk);
              }
            }
          }
        }
        const bool need_g = p[2]->requires_grad, need_b = p[3]->requires_grad;
        if (need_g || need_b) {
          for (int n = 0; n < N; ++n) {
            for (int k = 0; k < k_classes; ++k) {
              const T* lp = lv.plane(n, k);
              for (int c = 0; c < C; ++c) {
                const T* gp = g.plane(n, c);
                const T* xp = xv.plane(n, c);
                T sg = 0, sb = 0;
                for (std::size_t i = 0; i < plane; ++i) {
                  sg += gp[i] * xp[i] * lp[i];
                  sb += gp[i] * lp[i];
                }
                if (need_g) p[2]->grad_buffer().at(n, k, c, 0) += sg;
                if (need_b) p[3]->grad_buffer().at(n, k, c, 0) += sb;
              }
            }
          }
        }
      });
}

// Per-class weighted feature means:
//   w_k(p) = layout_k(p) * (1 - mask(p)),
//   style[k] = sum_p w_k(p) f(p) / sum_p w_k(p),
// falling back to defaults[k] when sum_p w_k(p) < min_weight.
// features: (N,D,H,W); layout: (N,K,H,W); mask: (N,1,H,W) constant;
// defaults: (1,K,D,1). Returns styles (N,K,D,1) and presence flags (N*K).
template <typename T>
std::pair<Var<T>, std::vector<bool>> region_style(const Var<T>& features,
                                                  const Var<T>& layout,
                                                  const Tensor<T>& mask,
                                                  const Var<T>& defaults,
                                                  T min_weight = T(1e-6)) {
  const Shape fs = features.shape();
  const Shape ls = layout.shape();
  const int K = ls.c, D = fs.c;
  if (ls.n != fs.n || ls.h != fs.h || ls.w != fs.w) {
    throw std::invalid_argument("region_style: layout shape " + ls.str() +
                                " does not match features " + fs.str());
  }
  const Shape ms = mask.shape();
  if (ms.n != fs.n || ms.c != 1 || ms.h != fs.h || ms.w != fs.w) {
    throw std::invalid_argument("region_style: mask shape " + ms.str() +
                                " does not match features " + fs.str());
  }
  require_same_shape(defaults.shape(), Shape{1, K, D, 1}, "region_style defaults");
  const std::size_t plane = fs.plane();
  Tensor<T> out({fs.n, K, D, 1});
  std::vector<bool> present(static_cast<std::size_t>(fs.n) * K, false);
  std::vector<T> weight_sum(static_cast<std::size_t>(fs.n) * K, T(0));
  for (int n = 0; n < fs.n; ++n) {
    const T* mp = mask.plane(n, 0);
    for (int k = 0; k < K; ++k) {
      const T* lp = layout.value().plane(n, k);
      T sw = 0;
      for (std::size_t i = 0; i < plane; ++i) sw += lp[i] * (T(1) - mp[i]);
      weight_sum[n * K + k] = sw;
      if (sw >= min_weight) {
        present[n * K + k] = true;
        for (int d = 0; d < D; ++d) {
          const T* fp = features.value().plane(n, d);
          T acc = 0;
          for (std::size_t i = 0; i < plane; ++i) acc += lp[i] * (T(1) - mp[i]) * fp[i];
          out.at(n, k, d, 0) = acc / sw;
        }
      } else {
        for (int d = 0; d < D; ++d) out.at(n, k, d, 0) = defaults.value().at(0, k, d, 0);
      }
    }
  }
  Tensor<T> styles = out;
  auto var = make_op<T>(
      std::move(out), {features, layout, defaults},
      [mask, present, weight_sum, styles = std::move(styles), plane, K, D](
          const Tensor<T>& g, std::span<const NodePtr<T>> p) {
        const Tensor<T>& fv = p[0]->value;
        const Tensor<T>& lv = p[1]->value;
        for (int n = 0; n < fv.n(); ++n) {
          const T* mp = mask.plane(n, 0);
          for (int k = 0; k < K; ++k) {
            if (!present[n * K + k]) {
              accumulate<T>(p[2], [&](Tensor<T>& d) {
                for (int dd = 0; dd < D; ++dd) d.at(0, k, dd, 0) += g.at(n, k, dd, 0);
              });
              continue;
            }
            const T inv = T(1) / weight_sum[n * K + k];
            const T* lp = lv.plane(n, k);
            accumulate<T>(p[0], [&](Tensor<T>& d) {
              for (int dd = 0; dd < D; ++dd) {
                const T gk = g.at(n, k, dd, 0) * inv;
                T* dp = d.plane(n, dd);
                for (std::size_t i = 0; i < plane; ++i) dp[i] += gk * lp[i] * (T(1) - mp[i]);
              }
            });
            accumulate<T>(p[1], [&](Tensor<T>& d) {
              T* dp = d.plane(n, k);
              for (int dd = 0; dd < D; ++dd) {
                const T gk = g.at(n, k, dd, 0) * inv;
                const T sk = styles.at(n, k, dd, 0);
                const T* fp = fv.plane(n, dd);
                for (std::size_t i = 0; i < plane; ++i) {
                  dp[i] += gk * (T(1) - mp[i]) * (fp[i] - sk);
                }
              }
            });
          }
        }
      });
  return {var, present};
}

// Independent linear map per class: out[n,k] = W[k] in[n,k] + b[k].
// in: (N,K,Din,1); weight: (K,Dout,Din,1); bias: (1,K,Dout,1).
template <typename T>
Var<T> class_linear(const Var<T>& in, const Var<T>& weight, const Var<T>& bias) {
  const Shape is = in.shape();
  const Shape ws = weight.shape();
  const int N = is.n, K = is.c, Din = is.h;
  if (is.w != 1 || ws.n != K || ws.h != Din || ws.w != 1) {
    throw std::invalid_argument("class_linear: shape mismatch in=" + is.str() +
                                " weight=" + ws.str());
  }
  const int Dout = ws.c;
  require_same_shape(bias.shape(), Shape{1, K, Dout, 1}, "class_linear bias");
  Tensor<T> out({N, K, Dout, 1});
  for (int n = 0; n < N; ++n) {
    for (int k = 0; k < K; ++k) {
      for (int o = 0; o < Dout; ++o) {
        T acc = bias.value().at(0, k, o, 0);
        for (int i = 0; i < Din; ++i) {
          acc += weight.value().at(k, o, i, 0) * in.value().at(n, k, i, 0);
        }
        out.at(n, k, o, 0) = acc;
      }
    }
  }
  return make_op<T>(
      std::move(out), {in, weight, bias},
      [N, K, Din, Dout](const Tensor<T>& g, std::span<const NodePtr<T>> p) {
        const Tensor<T>& iv = p[0]->value;
        const Tensor<T>& wv = p[1]->value;
        for (int n = 0; n < N; ++n) {
          for (int k = 0; k < K; ++k) {
            for (int o = 0; o < Dout; ++o) {
              const T go = g.at(n, k, o, 0);
              accumulate<T>(p[2], [&](Tensor<T>& d) { d.at(0, k, o, 0) += go; });
              accumulate<T>(p[1], [&](Tensor<T>& d) {
                for (int i = 0; i < Din; ++i) d.at(k, o, i, 0) += go * iv.at(n, k, i, 0);
              });
              accumulate<T>(p[0], [&](Tensor<T>& d) {
                for (int i = 0; i < Din; ++i) d.at(n, k, i, 0) += go * wv.at(k, o, i, 0);
              });
            }
          }
        }
      });
}

// Composite of a prediction into an image: in*(1-m) + raw*m with the mask
// broadcast over channels. Only `raw` (and `in`) carry gradients.
template <typename T>
Var<T> composite(const Var<T>& in, const Var<T>& raw, const Tensor<T>& mask) {
  require_same_shape(in.shape(), raw.shape(), "composite");
  const Shape s = in.shape();
  const Shape ms = mask.shape();
  if (ms.n != s.n || ms.c != 1 || ms.h != s.h || ms.w != s.w) {
    throw std::invalid_argument("composite: mask shape " + ms.str() +
                                " does not broadcast to " + s.str());
  }
  const std::size_t plane = s.plane();
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    const T* mp = mask.plane(n, 0);
    for (int c = 0; c < s.c; ++c) {
      const T* ip = in.value().plane(n, c);
      const T* rp = raw.value().plane(n, c);
      T* op = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        op[i] = ip[i] * (T(1) - mp[i]) + rp[i] * mp[i];
      }
    }
  }
  return make_op<T>(
      std::move(out), {in, raw},
      [mask, plane](const Tensor<T>& g, std::span<const NodePtr<T>> p) {
        for (int which = 0; which < 2; ++which) {
          accumulate<T>(p[which], [&](Tensor<T>& d) {
            for (int n = 0; n < d.n(); ++n) {
              const T* mp = mask.plane(n, 0);
              for (int c = 0; c < d.c(); ++c) {
                const T* gp = g.plane(n, c);
                T* dp = d.plane(n, c);
                for (std::size_t i = 0; i < plane; ++i) {
                  dp[i] += gp[i] * (which == 0 ? T(1) - mp[i] : mp[i]);
                }
              }
            }
          });
        }
      });
}

}  // namespace panodr::ag
