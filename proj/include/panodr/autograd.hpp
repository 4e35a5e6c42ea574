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
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "panodr/tensor.hpp"

// Minimal tape-free reverse-mode differentiation. Each op allocates a node
// holding its value and a closure that pushes the output gradient into the
// node's parents. Nodes are reference counted, so a graph lives exactly as
// long as some Var still points at its root.
namespace panodr::ag {

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<NodePtr<T>> parents;
  std::function<void(const Tensor<T>& grad_out, std::span<const NodePtr<T>>)>
      backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

namespace detail {
inline thread_local bool grad_enabled = true;
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled; }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) {
    detail::grad_enabled = false;
  }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr<T> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  // Gradient accumulated by backward(); zeros if nothing flowed here.
  Tensor<T> grad() const {
    return node_->grad.empty() ? Tensor<T>(shape()) : node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad = Tensor<T>(); }
  const NodePtr<T>& node() const { return node_; }

 private:
  NodePtr<T> node_;
};

// Builds an op result. `backward` is recorded only when grad mode is on and
// some parent requires a gradient.
template <typename T, typename F>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, F&& backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  bool req = false;
  if (grad_enabled()) {
    for (const auto& p : parents) req = req || p.requires_grad();
  }
  if (req) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward_fn = std::forward<F>(backward);
  }
  return Var<T>(std::move(node));
}

// Accumulates `fn(dst_grad)` into a parent if that parent needs a gradient.
template <typename T, typename F>
void accumulate(const NodePtr<T>& parent, F&& fn) {
  if (parent->requires_grad) fn(parent->grad_buffer());
}

// Reverse sweep from `root`, seeded with ones (root is usually a scalar).
template <typename T>
void backward(const Var<T>& root) {
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->backward_fn || node->grad.empty()) continue;
    node->backward_fn(node->grad, node->parents);
    // Interior gradients are not needed once propagated.
    node->grad = Tensor<T>();
  }
}

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

template <typename T>
Var<T> detach(const Var<T>& x) {
  return Var<T>(x.value(), false);
}

// ---------------------------------------------------------------------------
// Elementwise ops.

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_op<T>(std::move(out), {a, b},
                    [](const Tensor<T>& g, std::span<const NodePtr<T>> p) {
                      for (int k = 0; k < 2; ++k) {
                        accumulate<T>(p[k], [&](Tensor<T>& d) {
                          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
                        });
                      }
                    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op<T>(std::move(out), {a, b},
                    [](const Tensor<T>& g, std::span<const NodePtr<T>> p) {
                      accumulate<T>(p[0], [&](Tensor<T>& d) {
                        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
                      });
                      accumulate<T>(p[1], [&](Tensor<T>& d) {
                        for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
                      });
                    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op<T>(std::move(out), {a, b},
                    [](const Tensor<T>& g, std::span<const NodePtr<T>> p) {
                      accumulate<T>(p[0], [&](Tensor<T>& d) {
                        const Tensor<T>& bv = p[1]->value;
                        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
                      });
                      accumulate<T>(p[1], [&](Tensor<T>& d) {
                        const Tensor<T>& av = p[0]->value;
                        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
                      });
                    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * s;
  return make_op<T>(std::move(out), {a},
                    [s](const Tensor<T>& g, std::span<const NodePtr<T>> p) {
                      accumulate<T>(p[0], [&](Tensor<T>& d) {
                        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * s;
                      });
                    });
}

namespace detail {

// Pointwise op from a value function and its derivative in terms of x.
template <typename T, typename F, typename DF>
Var<T> pointwise(const Var<T>& a, F f, DF df) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.value()[i]);
  return make_op<T>(std::move(out), {a},
                    [df](const Tensor<T>& g, std::span<const NodePtr<T>> p) {
                      accumulate<T>(p[0], [&](Tensor<T>& d) {
                        const Tensor<T>& x = p[0]->value;
                        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * df(x[i]);
                      });
                    });
}

}  // namespace detail

template <typename T>
Var<T> elu(const Var<T>& a) {
  return detail::pointwise(
      a, [](T x) { return x > 0 ? x : std::expm1(x); },
      [](T x) { return x > 0 ? T(1) : std::exp(x); });
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::pointwise(
      a, [](T x) { return sigmoid_scalar(x); },
      [](T x) {
        const T y = sigmoid_scalar(x);
        return y * (T(1) - y);
      });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope = T(0.2)) {
  return detail::pointwise(
      a, [slope](T x) { return x > 0 ? x : slope * x; },
      [slope](T x) { return x > 0 ? T(1) : slope; });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return detail::pointwise(
      a, [](T x) { return x > 0 ? x : T(0); },
      [](T x) { return x > 0 ? T(1) : T(0); });
}

// Subgradient 0 at x = 0.
template <typename T>
Var<T> abs(const Var<T>& a) {
  return detail::pointwise(
      a, [](T x) { return x < 0 ? -x : x; },
      [](T x) { return x > 0 ? T(1) : (x < 0 ? T(-1) : T(0)); });
}

// x + c elementwise.
template <typename T>
Var<T> add_scalar(const Var<T>& a, T c) {
  return detail::pointwise(
      a, [c](T x) { return x + c; }, [](T) { return T(1); });
}

// Sum of all elements as a scalar.
template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().span()) s += v;
  return make_op<T>(Tensor<T>::scalar(s), {a},
                    [](const Tensor<T>& g, std::span<const NodePtr<T>> p) {
                      accumulate<T>(p[0], [&](Tensor<T>& d) {
                        for (auto& v : d.span()) v += g[0];
                      });
                    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

// Nonnegative weighted sum of scalar terms. Terms with zero weight are left
// out of the graph entirely so they contribute exactly zero gradient.
template <typename T>
Var<T> weighted_sum(const std::vector<std::pair<T, Var<T>>>& terms) {
  std::vector<Var<T>> parents;
  std::vector<T> weights;
  T total = 0;
  for (const auto& [w, v] : terms) {
    if (w == T(0)) continue;
    if (v.value().size() != 1) {
      throw std::invalid_argument("weighted_sum: terms must be scalars");
    }
    total += w * v.value()[0];
    parents.push_back(v);
    weights.push_back(w);
  }
  return make_op<T>(Tensor<T>::scalar(total), parents,
                    [weights](const Tensor<T>& g, std::span<const NodePtr<T>> p) {
                      for (std::size_t k = 0; k < p.size(); ++k) {
                        accumulate<T>(p[k], [&](Tensor<T>& d) { d[0] += weights[k] * g[0]; });
                      }
                    });
}

// ---------------------------------------------------------------------------
// Channel plumbing.

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Shape s0 = xs[0].shape();
  int c_total = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw std::invalid_argument("concat_channels: spatial/batch mismatch " +
                                  s.str() + " vs " + s0.str());
    }
    c_total += s.c;
  }
  Tensor<T> out({s0.n, c_total, s0.h, s0.w});
  const std::size_t plane = s0.plane();
  for (int n = 0; n < s0.n; ++n) {
    int c_off = 0;
    for (const auto& x : xs) {
      const std::size_t count = static_cast<std::size_t>(x.shape().c) * plane;
      std::copy_n(x.value().plane(n, 0), count, out.plane(n, c_off));
      c_off += x.shape().c;
    }
  }
  return make_op<T>(std::move(out), xs,
                    [plane](const Tensor<T>& g, std::span<const NodePtr<T>> p) {
                      int c_off = 0;
                      for (const auto& parent : p) {
                        const int c = parent->value.c();
                        accumulate<T>(parent, [&](Tensor<T>& d) {
                          for (int n = 0; n < d.n(); ++n) {
                            const T* src = g.plane(n, c_off);
                            T* dst = d.plane(n, 0);
                            for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                          }
                        });
                        c_off += c;
                      }
                    });
}

// Channels [begin, end).
template <typename T>
Var<T> slice_channels(const Var<T>& x, int begin, int end) {
  const Shape s = x.shape();
  if (begin < 0 || end > s.c || begin >= end) {
    throw std::invalid_argument("slice_channels: bad range for " + s.str());
  }
  const int c = end - begin;
  Tensor<T> out({s.n, c, s.h, s.w});
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    std::copy_n(x.value().plane(n, begin), c * plane, out.plane(n, 0));
  }
  return make_op<T>(std::move(out), {x},
                    [begin, c, plane](const Tensor<T>& g,
                                      std::span<const NodePtr<T>> p) {
                      accumulate<T>(p[0], [&](Tensor<T>& d) {
                        for (int n = 0; n < d.n(); ++n) {
                          const T* src = g.plane(n, 0);
                          T* dst = d.plane(n, begin);
                          for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                        }
                      });
                    });
}

// x (N,C,H,W) times m (N,1,H,W), broadcast over channels.
template <typename T>
Var<T> mul_channels(const Var<T>& x, const Var<T>& m) {
  const Shape s = x.shape();
  const Shape sm = m.shape();
  if (sm.n != s.n || sm.c != 1 || sm.h != s.h || sm.w != s.w) {
    throw std::invalid_argument("mul_channels: mask shape " + sm.str() +
                                " does not broadcast to " + s.str());
  }
  const std::size_t plane = s.plane();
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n) {
    const T* mp = m.value().plane(n, 0);
    for (int c = 0; c < s.c; ++c) {
      const T* xp = x.value().plane(n, c);
      T* op = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) op[i] = xp[i] * mp[i];
    }
  }
  return make_op<T>(std::move(out), {x, m},
                    [plane](const Tensor<T>& g, std::span<const NodePtr<T>> p) {
                      const Tensor<T>& xv = p[0]->value;
                      const Tensor<T>& mv = p[1]->value;
                      accumulate<T>(p[0], [&](Tensor<T>& d) {
                        for (int n = 0; n < d.n(); ++n) {
                          const T* mp = mv.plane(n, 0);
                          for (int c = 0; c < d.c(); ++c) {
                            const T* gp = g.plane(n, c);
                            T* dp = d.plane(n, c);
                            for (std::size_t i = 0; i < plane; ++i) dp[i] += gp[i] * mp[i];
                          }
                        }
                      });
                      accumulate<T>(p[1], [&](Tensor<T>& d) {
                        for (int n = 0; n < xv.n(); ++n) {
                          T* dp = d.plane(n, 0);
                          for (int c = 0; c < xv.c(); ++c) {
                            const T* gp = g.plane(n, c);
                            const T* xp = xv.plane(n, c);
                            for (std::size_t i = 0; i < plane; ++i) dp[i] += gp[i] * xp[i];
                          }
                        }
                      });
                    });
}

}  // namespace panodr::ag
