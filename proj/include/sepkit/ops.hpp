// Copyright 2026 The Sepkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "sepkit/graph.hpp"
#include "sepkit/tensor.hpp"

// Differentiable operations. Feature maps are [channels, frames]; waveforms
// are rank-1 [samples]. Scalars are rank-1 tensors of one element, so the
// elementwise ops double as scalar arithmetic when assembling losses.
namespace sepkit::ops {

namespace detail {

template <typename S>
inline void require(bool cond, const char* msg) {
  if (!cond) throw ShapeError(msg);
}

inline void require(bool cond, const char* msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (shape-agnostic).
// ---------------------------------------------------------------------------

template <typename S>
Var add(Graph<S>& g, Var a, Var b) {
  check_same_shape(g.val(a), g.val(b), "add");
  Tensor<S> y = g.val(a);
  y.vec() += g.val(b).vec();
  return g.node(std::move(y), {a, b}, [a, b](Graph<S>& g2, Var self) {
    const Tensor<S>& G = g2.grad(self);
    if (g2.needs_grad(a)) g2.grad(a).vec() += G.vec();
    if (g2.needs_grad(b)) g2.grad(b).vec() += G.vec();
  });
}

template <typename S>
Var sub(Graph<S>& g, Var a, Var b) {
  check_same_shape(g.val(a), g.val(b), "sub");
  Tensor<S> y = g.val(a);
  y.vec() -= g.val(b).vec();
  return g.node(std::move(y), {a, b}, [a, b](Graph<S>& g2, Var self) {
    const Tensor<S>& G = g2.grad(self);
    if (g2.needs_grad(a)) g2.grad(a).vec() += G.vec();
    if (g2.needs_grad(b)) g2.grad(b).vec() -= G.vec();
  });
}

template <typename S>
Var mul(Graph<S>& g, Var a, Var b) {
  check_same_shape(g.val(a), g.val(b), "mul");
  Tensor<S> y = g.val(a);
  y.vec().array() *= g.val(b).vec().array();
  return g.node(std::move(y), {a, b}, [a, b](Graph<S>& g2, Var self) {
    const Tensor<S>& G = g2.grad(self);
    if (g2.needs_grad(a)) g2.grad(a).vec().array() += G.vec().array() * g2.val(b).vec().array();
    if (g2.needs_grad(b)) g2.grad(b).vec().array() += G.vec().array() * g2.val(a).vec().array();
  });
}

template <typename S>
Var div(Graph<S>& g, Var a, Var b) {
  check_same_shape(g.val(a), g.val(b), "div");
  Tensor<S> y = g.val(a);
  y.vec().array() /= g.val(b).vec().array();
  return g.node(std::move(y), {a, b}, [a, b](Graph<S>& g2, Var self) {
    const Tensor<S>& G = g2.grad(self);
    if (g2.needs_grad(a)) {
      g2.grad(a).vec().array() += G.vec().array() / g2.val(b).vec().array();
    }
    if (g2.needs_grad(b)) {
      g2.grad(b).vec().array() -= G.vec().array() * g2.val(a).vec().array() /
                                  g2.val(b).vec().array().square();
    }
  });
}

template <typename S>
Var scale(Graph<S>& g, Var x, double c) {
  Tensor<S> y = g.val(x);
  y.vec() *= static_cast<S>(c);
  return g.node(std::move(y), {x}, [x, c](Graph<S>& g2, Var self) {
    if (g2.needs_grad(x)) g2.grad(x).vec() += static_cast<S>(c) * g2.grad(self).vec();
  });
}

// x * s with s a one-element tensor, broadcast over all of x.
template <typename S>
Var mul_scalar(Graph<S>& g, Var x, Var s) {
  if (g.val(s).numel() != 1) throw ShapeError("mul_scalar: scale must have one element");
  Tensor<S> y = g.val(x);
  y.vec() *= g.val(s)[0];
  return g.node(std::move(y), {x, s}, [x, s](Graph<S>& g2, Var self) {
    const Tensor<S>& G = g2.grad(self);
    if (g2.needs_grad(x)) g2.grad(x).vec() += g2.val(s)[0] * G.vec();
    if (g2.needs_grad(s)) g2.grad(s)[0] += G.vec().dot(g2.val(x).vec());
  });
}

template <typename S>
Var add_const(Graph<S>& g, Var x, double c) {
  Tensor<S> y = g.val(x);
  y.vec().array() += static_cast<S>(c);
  return g.node(std::move(y), {x}, [x](Graph<S>& g2, Var self) {
    if (g2.needs_grad(x)) g2.grad(x).vec() += g2.grad(self).vec();
  });
}

// y = min(x, c). The subgradient at x == c is taken as zero.
template <typename S>
Var min_const(Graph<S>& g, Var x, double c) {
  Tensor<S> y = g.val(x);
  const S cs = static_cast<S>(c);
  for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = std::min(y[i], cs);
  return g.node(std::move(y), {x}, [x, cs](Graph<S>& g2, Var self) {
    if (!g2.needs_grad(x)) return;
    const Tensor<S>& G = g2.grad(self);
    Tensor<S>& dx = g2.grad(x);
    const Tensor<S>& xv = g2.val(x);
    for (std::int64_t i = 0; i < G.numel(); ++i) {
      if (xv[i] < cs) dx[i] += G[i];
    }
  });
}

template <typename S>
Var sqrt_elem(Graph<S>& g, Var x) {
  Tensor<S> y = g.val(x);
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    if (y[i] < S(0)) throw NumericError("sqrt of negative value");
    y[i] = std::sqrt(y[i]);
  }
  return g.node(std::move(y), {x}, [x](Graph<S>& g2, Var self) {
    if (!g2.needs_grad(x)) return;
    const Tensor<S>& G = g2.grad(self);
    const Tensor<S>& yv = g2.val(self);
    Tensor<S>& dx = g2.grad(x);
    for (std::int64_t i = 0; i < G.numel(); ++i) {
      if (G[i] == S(0)) continue;  // keeps 0 * (1/sqrt(0)) from turning into NaN
      dx[i] += G[i] * S(0.5) / std::max(yv[i], std::numeric_limits<S>::min());
    }
  });
}

template <typename S>
Var log10_elem(Graph<S>& g, Var x) {
  Tensor<S> y = g.val(x);
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    if (!(y[i] > S(0))) throw NumericError("log10 of non-positive value");
    y[i] = std::log10(y[i]);
  }
  constexpr double kLn10 = 2.302585092994045684;
  return g.node(std::move(y), {x}, [x](Graph<S>& g2, Var self) {
    if (!g2.needs_grad(x)) return;
    const Tensor<S>& G = g2.grad(self);
    const Tensor<S>& xv = g2.val(x);
    Tensor<S>& dx = g2.grad(x);
    for (std::int64_t i = 0; i < G.numel(); ++i) dx[i] += G[i] / (xv[i] * static_cast<S>(kLn10));
  });
}

template <typename S>
Var gelu(Graph<S>& g, Var x) {
  Tensor<S> y = g.val(x);
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    const double v = static_cast<double>(y[i]);
    y[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  return g.node(std::move(y), {x}, [x](Graph<S>& g2, Var self) {
    if (!g2.needs_grad(x)) return;
    const Tensor<S>& G = g2.grad(self);
    const Tensor<S>& xv = g2.val(x);
    Tensor<S>& dx = g2.grad(x);
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    for (std::int64_t i = 0; i < G.numel(); ++i) {
      const double v = static_cast<double>(xv[i]);
      const double cdf = 0.5 * (1.0 + std::erf(v * 0.70710678118654752440));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      dx[i] += G[i] * static_cast<S>(cdf + v * pdf);
    }
  });
}

template <typename S>
Var sigmoid(Graph<S>& g, Var x) {
  Tensor<S> y = g.val(x);
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    y[i] = static_cast<S>(1.0 / (1.0 + std::exp(-static_cast<double>(y[i]))));
  }
  return g.node(std::move(y), {x}, [x](Graph<S>& g2, Var self) {
    if (!g2.needs_grad(x)) return;
    const Tensor<S>& G = g2.grad(self);
    const Tensor<S>& yv = g2.val(self);
    Tensor<S>& dx = g2.grad(x);
    for (std::int64_t i = 0; i < G.numel(); ++i) dx[i] += G[i] * yv[i] * (S(1) - yv[i]);
  });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

template <typename S>
Var sum(Graph<S>& g, Var x) {
  Tensor<S> y({1});
  y[0] = g.val(x).vec().sum();
  return g.node(std::move(y), {x}, [x](Graph<S>& g2, Var self) {
    if (g2.needs_grad(x)) g2.grad(x).vec().array() += g2.grad(self)[0];
  });
}

template <typename S>
Var mean(Graph<S>& g, Var x) {
  const std::int64_t n = g.val(x).numel();
  detail::require(n > 0, "mean of empty tensor");
  return scale(g, sum(g, x), 1.0 / static_cast<double>(n));
}

template <typename S>
Var dot(Graph<S>& g, Var a, Var b) {
  check_same_shape(g.val(a), g.val(b), "dot");
  Tensor<S> y({1});
  y[0] = g.val(a).vec().dot(g.val(b).vec());
  return g.node(std::move(y), {a, b}, [a, b](Graph<S>& g2, Var self) {
    const S gs = g2.grad(self)[0];
    if (g2.needs_grad(a)) g2.grad(a).vec() += gs * g2.val(b).vec();
    if (g2.needs_grad(b)) g2.grad(b).vec() += gs * g2.val(a).vec();
  });
}

// ---------------------------------------------------------------------------
// Linear algebra.
// ---------------------------------------------------------------------------

// y = w x (+ bias per output channel). x is [in, T], w is [out, in], bias is
// [out] or an invalid Var for none.
template <typename S>
Var linear(Graph<S>& g, Var x, Var w, Var b = Var{}) {
  const Tensor<S>& X = g.val(x);
  const Tensor<S>& W = g.val(w);
  detail::require(X.rank() == 2 && W.rank() == 2, "linear: rank-2 operands required");
  detail::require(W.dim(1) == X.dim(0), "linear: inner dimensions differ");
  Tensor<S> y({W.dim(0), X.dim(1)});
  y.mat().noalias() = W.mat() * X.mat();
  if (b.valid()) {
    const Tensor<S>& B = g.val(b);
    detail::require(B.numel() == W.dim(0), "linear: bias length mismatch");
    y.mat().colwise() += B.vec();
  }
  return g.node(std::move(y), {x, w, b}, [x, w, b](Graph<S>& g2, Var self) {
    const Tensor<S>& G = g2.grad(self);
    if (g2.needs_grad(w)) g2.grad(w).mat().noalias() += G.mat() * g2.val(x).mat().transpose();
    if (g2.needs_grad(x)) g2.grad(x).mat().noalias() += g2.val(w).mat().transpose() * G.mat();
    if (b.valid() && g2.needs_grad(b)) g2.grad(b).vec() += G.mat().rowwise().sum();
  });
}

template <typename S>
Var matmul(Graph<S>& g, Var a, Var b) {
  const Tensor<S>& A = g.val(a);
  const Tensor<S>& B = g.val(b);
  detail::require(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(0),
                  "matmul: incompatible shapes");
  Tensor<S> y({A.dim(0), B.dim(1)});
  y.mat().noalias() = A.mat() * B.mat();
  return g.node(std::move(y), {a, b}, [a, b](Graph<S>& g2, Var self) {
    const Tensor<S>& G = g2.grad(self);
    if (g2.needs_grad(a)) g2.grad(a).mat().noalias() += G.mat() * g2.val(b).mat().transpose();
    if (g2.needs_grad(b)) g2.grad(b).mat().noalias() += g2.val(a).mat().transpose() * G.mat();
  });
}

template <typename S>
Var transpose(Graph<S>& g, Var x) {
  const Tensor<S>& X = g.val(x);
  detail::require(X.rank() == 2, "transpose: rank-2 required");
  Tensor<S> y({X.dim(1), X.dim(0)});
  y.mat() = X.mat().transpose();
  return g.node(std::move(y), {x}, [x](Graph<S>& g2, Var self) {
    if (g2.needs_grad(x)) g2.grad(x).mat() += g2.grad(self).mat().transpose();
  });
}

// Adds a per-channel bias to a [C, T] map.
template <typename S>
Var add_bias(Graph<S>& g, Var x, Var b) {
  const Tensor<S>& X = g.val(x);
  const Tensor<S>& B = g.val(b);
  detail::require(X.rank() == 2 && B.numel() == X.dim(0), "add_bias: bias length mismatch");
  Tensor<S> y = X;
  y.mat().colwise() += B.vec();
  return g.node(std::move(y), {x, b}, [x, b](Graph<S>& g2, Var self) {
    const Tensor<S>& G = g2.grad(self);
    if (g2.needs_grad(x)) g2.grad(x).vec() += G.vec();
    if (g2.needs_grad(b)) g2.grad(b).vec() += G.mat().rowwise().sum();
  });
}

// Adds a single scalar bias (shape [1]) to every element.
template <typename S>
Var add_scalar_bias(Graph<S>& g, Var x, Var b) {
  const Tensor<S>& B = g.val(b);
  detail::require(B.numel() == 1, "add_scalar_bias: bias must be scalar");
  Tensor<S> y = g.val(x);
  y.vec().array() += B[0];
  return g.node(std::move(y), {x, b}, [x, b](Graph<S>& g2, Var self) {
    const Tensor<S>& G = g2.grad(self);
    if (g2.needs_grad(x)) g2.grad(x).vec() += G.vec();
    if (g2.needs_grad(b)) g2.grad(b)[0] += G.vec().sum();
  });
}

// y[c, t] = s[c] * x[c, t]. Used for residual branch scaling.
template <typename S>
Var scale_channels(Graph<S>& g, Var x, Var s) {
  const Tensor<S>& X = g.val(x);
  const Tensor<S>& Sv = g.val(s);
  detail::require(X.rank() == 2 && Sv.numel() == X.dim(0), "scale_channels: length mismatch");
  Tensor<S> y = X;
  y.mat().array().colwise() *= Sv.vec().array();
  return g.node(std::move(y), {x, s}, [x, s](Graph<S>& g2, Var self) {
    const Tensor<S>& G = g2.grad(self);
    if (g2.needs_grad(x)) {
      g2.grad(x).mat().array() += G.mat().array().colwise() * g2.val(s).vec().array();
    }
    if (g2.needs_grad(s)) {
      g2.grad(s).vec() += (G.mat().array() * g2.val(x).mat().array()).rowwise().sum().matrix();
    }
  });
}

// Gated linear unit over channels: splits [2C, T] into content (first C
// rows) and gate (last C rows), returns content * sigmoid(gate).
template <typename S>
Var glu_channels(Graph<S>& g, Var x) {
  const Tensor<S>& X = g.val(x);
  detail::require(X.rank() == 2 && X.dim(0) % 2 == 0, "glu_channels: even channel count required");
  const std::int64_t C = X.dim(0) / 2;
  const std::int64_t T = X.dim(1);
  Tensor<S> y({C, T});
  Tensor<S> gate({C, T});
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t t = 0; t < T; ++t) {
      const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(X.at(C + c, t))));
      gate.at(c, t) = static_cast<S>(s);
      y.at(c, t) = X.at(c, t) * static_cast<S>(s);
    }
  }
  return g.node(std::move(y), {x}, [x, gate = std::move(gate), C, T](Graph<S>& g2, Var self) {
    if (!g2.needs_grad(x)) return;
    const Tensor<S>& G = g2.grad(self);
    const Tensor<S>& X2 = g2.val(x);
    Tensor<S>& dx = g2.grad(x);
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t t = 0; t < T; ++t) {
        const S sg = gate.at(c, t);
        dx.at(c, t) += G.at(c, t) * sg;
        dx.at(C + c, t) += G.at(c, t) * X2.at(c, t) * sg * (S(1) - sg);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization.
// ---------------------------------------------------------------------------

// Per-frame normalization over channels of a [C, T] map with affine terms.
template <typename S>
Var layer_norm(Graph<S>& g, Var x, Var gamma, Var beta, double eps = 1e-5) {
  const Tensor<S>& X = g.val(x);
  detail::require(X.rank() == 2, "layer_norm: rank-2 required");
  const std::int64_t C = X.dim(0);
  const std::int64_t T = X.dim(1);
  detail::require(g.val(gamma).numel() == C && g.val(beta).numel() == C,
                  "layer_norm: affine length mismatch");
  Tensor<S> xhat({C, T});
  Tensor<S> inv_std({T});
  const Tensor<S>& Gm = g.val(gamma);
  const Tensor<S>& Bt = g.val(beta);
  Tensor<S> y({C, T});
  for (std::int64_t t = 0; t < T; ++t) {
    double mu = 0;
    for (std::int64_t c = 0; c < C; ++c) mu += X.at(c, t);
    mu /= static_cast<double>(C);
    double var = 0;
    for (std::int64_t c = 0; c < C; ++c) {
      const double d = X.at(c, t) - mu;
      var += d * d;
    }
    var /= static_cast<double>(C);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[t] = static_cast<S>(is);
    for (std::int64_t c = 0; c < C; ++c) {
      const S xh = static_cast<S>((X.at(c, t) - mu) * is);
      xhat.at(c, t) = xh;
      y.at(c, t) = Gm[c] * xh + Bt[c];
    }
  }
  return g.node(std::move(y), {x, gamma, beta},
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), C,
                 T](Graph<S>& g2, Var self) {
                  const Tensor<S>& G = g2.grad(self);
                  const Tensor<S>& Gm2 = g2.val(gamma);
                  if (g2.needs_grad(gamma)) {
                    Tensor<S>& dg = g2.grad(gamma);
                    for (std::int64_t c = 0; c < C; ++c) {
                      double acc = 0;
                      for (std::int64_t t = 0; t < T; ++t) acc += G.at(c, t) * xhat.at(c, t);
                      dg[c] += static_cast<S>(acc);
                    }
                  }
                  if (g2.needs_grad(beta)) {
                    Tensor<S>& db = g2.grad(beta);
                    for (std::int64_t c = 0; c < C; ++c) {
                      double acc = 0;
                      for (std::int64_t t = 0; t < T; ++t) acc += G.at(c, t);
                      db[c] += static_cast<S>(acc);
                    }
                  }
                  if (g2.needs_grad(x)) {
                    Tensor<S>& dx = g2.grad(x);
                    for (std::int64_t t = 0; t < T; ++t) {
                      double mean_h = 0, mean_hx = 0;
                      for (std::int64_t c = 0; c < C; ++c) {
                        const double h = static_cast<double>(Gm2[c]) * G.at(c, t);
                        mean_h += h;
                        mean_hx += h * xhat.at(c, t);
                      }
                      mean_h /= static_cast<double>(C);
                      mean_hx /= static_cast<double>(C);
                      for (std::int64_t c = 0; c < C; ++c) {
                        const double h = static_cast<double>(Gm2[c]) * G.at(c, t);
                        dx.at(c, t) += static_cast<S>(
                            (h - mean_h - xhat.at(c, t) * mean_hx) * inv_std[t]);
                      }
                    }
                  }
                });
}

// Per-channel normalization over frames. In training mode the statistics
// come from the current map and an update of the running buffers is recorded
// on the graph; in inference mode the running buffers are used.
template <typename S>
Var batch_norm(Graph<S>& g, Var x, Var gamma, Var beta, Parameter<S>* running_mean,
               Parameter<S>* running_var, double momentum = 0.1, double eps = 1e-5) {
  const Tensor<S>& X = g.val(x);
  detail::require(X.rank() == 2, "batch_norm: rank-2 required");
  const std::int64_t C = X.dim(0);
  const std::int64_t T = X.dim(1);
  detail::require(g.val(gamma).numel() == C && g.val(beta).numel() == C,
                  "batch_norm: affine length mismatch");
  const Tensor<S>& Gm = g.val(gamma);
  const Tensor<S>& Bt = g.val(beta);
  Tensor<S> y({C, T});
  Tensor<S> xhat({C, T});
  Tensor<S> inv_std({C});
  if (g.training()) {
    detail::require(T > 0, "batch_norm: empty map");
    Tensor<S> mean({C});
    Tensor<S> var_unbiased({C});
    for (std::int64_t c = 0; c < C; ++c) {
      double mu = 0;
      for (std::int64_t t = 0; t < T; ++t) mu += X.at(c, t);
      mu /= static_cast<double>(T);
      double var = 0;
      for (std::int64_t t = 0; t < T; ++t) {
        const double d = X.at(c, t) - mu;
        var += d * d;
      }
      var /= static_cast<double>(T);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[c] = static_cast<S>(is);
      mean[c] = static_cast<S>(mu);
      var_unbiased[c] =
          static_cast<S>(T > 1 ? var * static_cast<double>(T) / static_cast<double>(T - 1) : var);
      for (std::int64_t t = 0; t < T; ++t) {
        const S xh = static_cast<S>((X.at(c, t) - mu) * is);
        xhat.at(c, t) = xh;
        y.at(c, t) = Gm[c] * xh + Bt[c];
      }
    }
    if (running_mean && running_var) {
      g.stat_updates().push_back({running_mean, running_var, std::move(mean),
                                  std::move(var_unbiased)});
      (void)momentum;
    }
    return g.node(std::move(y), {x, gamma, beta},
                  [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), C,
                   T](Graph<S>& g2, Var self) {
                    const Tensor<S>& G = g2.grad(self);
                    const Tensor<S>& Gm2 = g2.val(gamma);
                    for (std::int64_t c = 0; c < C; ++c) {
                      double sum_g = 0, sum_gx = 0;
                      for (std::int64_t t = 0; t < T; ++t) {
                        sum_g += G.at(c, t);
                        sum_gx += G.at(c, t) * xhat.at(c, t);
                      }
                      if (g2.needs_grad(gamma)) g2.grad(gamma)[c] += static_cast<S>(sum_gx);
                      if (g2.needs_grad(beta)) g2.grad(beta)[c] += static_cast<S>(sum_g);
                      if (g2.needs_grad(x)) {
                        Tensor<S>& dx = g2.grad(x);
                        const double mean_g = sum_g / static_cast<double>(T);
                        const double mean_gx = sum_gx / static_cast<double>(T);
                        const double gis = static_cast<double>(Gm2[c]) * inv_std[c];
                        for (std::int64_t t = 0; t < T; ++t) {
                          dx.at(c, t) += static_cast<S>(
                              gis * (G.at(c, t) - mean_g - xhat.at(c, t) * mean_gx));
                        }
                      }
                    }
                  });
  }
  // Inference: normalize with the stored running statistics.
  detail::require(running_mean != nullptr && running_var != nullptr,
                  "batch_norm: running statistics required in inference mode");
  const Tensor<S>& rm = running_mean->value;
  const Tensor<S>& rv = running_var->value;
  detail::require(rm.numel() == C && rv.numel() == C, "batch_norm: running stat length mismatch");
  for (std::int64_t c = 0; c < C; ++c) {
    const double is = 1.0 / std::sqrt(static_cast<double>(rv[c]) + eps);
    inv_std[c] = static_cast<S>(is);
    for (std::int64_t t = 0; t < T; ++t) {
      const S xh = static_cast<S>((X.at(c, t) - rm[c]) * is);
      xhat.at(c, t) = xh;
      y.at(c, t) = Gm[c] * xh + Bt[c];
    }
  }
  return g.node(std::move(y), {x, gamma, beta},
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), C,
                 T](Graph<S>& g2, Var self) {
                  const Tensor<S>& G = g2.grad(self);
                  const Tensor<S>& Gm2 = g2.val(gamma);
                  for (std::int64_t c = 0; c < C; ++c) {
                    double sum_g = 0, sum_gx = 0;
                    for (std::int64_t t = 0; t < T; ++t) {
                      sum_g += G.at(c, t);
                      sum_gx += G.at(c, t) * xhat.at(c, t);
                    }
                    if (g2.needs_grad(gamma)) g2.grad(gamma)[c] += static_cast<S>(sum_gx);
                    if (g2.needs_grad(beta)) g2.grad(beta)[c] += static_cast<S>(sum_g);
                    if (g2.needs_grad(x)) {
                      Tensor<S>& dx = g2.grad(x);
                      const S gis = Gm2[c] * inv_std[c];
                      for (std::int64_t t = 0; t < T; ++t) dx.at(c, t) += gis * G.at(c, t);
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// Convolution and framing.
// ---------------------------------------------------------------------------

// Depthwise 1-D convolution over frames. x is [C, T], w is [C, K], bias [C]
// or invalid. Frames outside [0, T) count as zero. The output length is
// floor((T + pad_l + pad_r - K) / stride) + 1.
template <typename S>
Var dw_conv1d(Graph<S>& g, Var x, Var w, Var b, std::int64_t stride, std::int64_t pad_l,
              std::int64_t pad_r) {
  const Tensor<S>& X = g.val(x);
  const Tensor<S>& W = g.val(w);
  detail::require(X.rank() == 2 && W.rank() == 2 && W.dim(0) == X.dim(0),
                  "dw_conv1d: channel mismatch");
  detail::require(stride >= 1 && pad_l >= 0 && pad_r >= 0, "dw_conv1d: bad stride or padding");
  const std::int64_t C = X.dim(0);
  const std::int64_t T = X.dim(1);
  const std::int64_t K = W.dim(1);
  const std::int64_t span = T + pad_l + pad_r;
  detail::require(span >= K, "dw_conv1d: input shorter than kernel");
  const std::int64_t To = (span - K) / stride + 1;
  Tensor<S> y({C, To});
  const bool has_b = b.valid();
  const Tensor<S>* B = has_b ? &g.val(b) : nullptr;
  if (has_b) detail::require(B->numel() == C, "dw_conv1d: bias length mismatch");
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t t = 0; t < To; ++t) {
      double acc = has_b ? static_cast<double>((*B)[c]) : 0.0;
      const std::int64_t base = t * stride - pad_l;
      const std::int64_t k0 = std::max<std::int64_t>(0, -base);
      const std::int64_t k1 = std::min<std::int64_t>(K, T - base);
      for (std::int64_t k = k0; k < k1; ++k) acc += W.at(c, k) * X.at(c, base + k);
      y.at(c, t) = static_cast<S>(acc);
    }
  }
  return g.node(std::move(y), {x, w, b},
                [x, w, b, stride, pad_l, C, T, K, To](Graph<S>& g2, Var self) {
                  const Tensor<S>& G = g2.grad(self);
                  const Tensor<S>& X2 = g2.val(x);
                  const Tensor<S>& W2 = g2.val(w);
                  const bool need_x = g2.needs_grad(x);
                  const bool need_w = g2.needs_grad(w);
                  const bool need_b = b.valid() && g2.needs_grad(b);
                  Tensor<S>* dX = need_x ? &g2.grad(x) : nullptr;
                  Tensor<S>* dW = need_w ? &g2.grad(w) : nullptr;
                  Tensor<S>* dB = need_b ? &g2.grad(b) : nullptr;
                  for (std::int64_t c = 0; c < C; ++c) {
                    double db = 0;
                    for (std::int64_t t = 0; t < To; ++t) {
                      const S gv = G.at(c, t);
                      if (gv == S(0)) continue;
                      db += gv;
                      const std::int64_t base = t * stride - pad_l;
                      const std::int64_t k0 = std::max<std::int64_t>(0, -base);
                      const std::int64_t k1 = std::min<std::int64_t>(K, T - base);
                      for (std::int64_t k = k0; k < k1; ++k) {
                        if (dW) dW->at(c, k) += gv * X2.at(c, base + k);
                        if (dX) dX->at(c, base + k) += gv * W2.at(c, k);
                      }
                    }
                    if (dB) (*dB)[c] += static_cast<S>(db);
                  }
                });
}

// Extracts overlapping windows: [N] -> [L, T] with U[l, t] = x[t * hop + l],
// T = floor((N - L) / hop) + 1.
template <typename S>
Var unfold(Graph<S>& g, Var x, std::int64_t L, std::int64_t hop) {
  const Tensor<S>& X = g.val(x);
  detail::require(X.rank() == 1, "unfold: rank-1 required");
  detail::require(L >= 1 && hop >= 1 && X.numel() >= L, "unfold: window does not fit");
  const std::int64_t T = (X.numel() - L) / hop + 1;
  Tensor<S> y({L, T});
  for (std::int64_t t = 0; t < T; ++t) {
    for (std::int64_t l = 0; l < L; ++l) y.at(l, t) = X[t * hop + l];
  }
  return g.node(std::move(y), {x}, [x, L, hop, T](Graph<S>& g2, Var self) {
    if (!g2.needs_grad(x)) return;
    const Tensor<S>& G = g2.grad(self);
    Tensor<S>& dx = g2.grad(x);
    for (std::int64_t t = 0; t < T; ++t) {
      for (std::int64_t l = 0; l < L; ++l) dx[t * hop + l] += G.at(l, t);
    }
  });
}

// Overlap-adds windows back into a waveform: [L, T] -> [N] with
// y[t * hop + l] += u[l, t]. N must cover the last window.
template <typename S>
Var fold(Graph<S>& g, Var u, std::int64_t hop, std::int64_t N) {
  const Tensor<S>& U = g.val(u);
  detail::require(U.rank() == 2, "fold: rank-2 required");
  const std::int64_t L = U.dim(0);
  const std::int64_t T = U.dim(1);
  detail::require(hop >= 1 && N >= (T - 1) * hop + L, "fold: output too short");
  Tensor<S> y({N});
  for (std::int64_t t = 0; t < T; ++t) {
    for (std::int64_t l = 0; l < L; ++l) y[t * hop + l] += U.at(l, t);
  }
  return g.node(std::move(y), {u}, [u, hop, L, T](Graph<S>& g2, Var self) {
    if (!g2.needs_grad(u)) return;
    const Tensor<S>& G = g2.grad(self);
    Tensor<S>& du = g2.grad(u);
    for (std::int64_t t = 0; t < T; ++t) {
      for (std::int64_t l = 0; l < L; ++l) du.at(l, t) += G[t * hop + l];
    }
  });
}

// ---------------------------------------------------------------------------
// Resampling along frames.
// ---------------------------------------------------------------------------

// Non-overlapping mean pooling by an integer factor; T must divide evenly.
template <typename S>
Var avg_pool(Graph<S>& g, Var x, std::int64_t factor) {
  const Tensor<S>& X = g.val(x);
  detail::require(X.rank() == 2, "avg_pool: rank-2 required");
  detail::require(factor >= 1 && X.dim(1) % factor == 0,
                  "avg_pool: frame count not divisible by factor");
  if (factor == 1) return x;
  const std::int64_t C = X.dim(0);
  const std::int64_t To = X.dim(1) / factor;
  Tensor<S> y({C, To});
  const double inv = 1.0 / static_cast<double>(factor);
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t t = 0; t < To; ++t) {
      double acc = 0;
      for (std::int64_t i = 0; i < factor; ++i) acc += X.at(c, t * factor + i);
      y.at(c, t) = static_cast<S>(acc * inv);
    }
  }
  return g.node(std::move(y), {x}, [x, factor, C, To](Graph<S>& g2, Var self) {
    if (!g2.needs_grad(x)) return;
    const Tensor<S>& G = g2.grad(self);
    Tensor<S>& dx = g2.grad(x);
    const S inv = S(1) / static_cast<S>(factor);
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t t = 0; t < To; ++t) {
        const S gv = G.at(c, t) * inv;
        for (std::int64_t i = 0; i < factor; ++i) dx.at(c, t * factor + i) += gv;
      }
    }
  });
}

// Nearest-neighbor upsampling by an integer factor along frames.
template <typename S>
Var upsample_nearest(Graph<S>& g, Var x, std::int64_t factor) {
  const Tensor<S>& X = g.val(x);
  detail::require(X.rank() == 2, "upsample_nearest: rank-2 required");
  detail::require(factor >= 1, "upsample_nearest: factor must be positive");
  if (factor == 1) return x;
  const std::int64_t C = X.dim(0);
  const std::int64_t T = X.dim(1);
  Tensor<S> y({C, T * factor});
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t t = 0; t < T; ++t) {
      for (std::int64_t i = 0; i < factor; ++i) y.at(c, t * factor + i) = X.at(c, t);
    }
  }
  return g.node(std::move(y), {x}, [x, factor, C, T](Graph<S>& g2, Var self) {
    if (!g2.needs_grad(x)) return;
    const Tensor<S>& G = g2.grad(self);
    Tensor<S>& dx = g2.grad(x);
    for (std::int64_t c = 0; c < C; ++c) {
      for (std::int64_t t = 0; t < T; ++t) {
        double acc = 0;
        for (std::int64_t i = 0; i < factor; ++i) acc += G.at(c, t * factor + i);
        dx.at(c, t) += static_cast<S>(acc);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Slicing and concatenation.
// ---------------------------------------------------------------------------

template <typename S>
Var slice_rows(Graph<S>& g, Var x, std::int64_t r0, std::int64_t r1) {
  const Tensor<S>& X = g.val(x);
  detail::require(X.rank() == 2 && 0 <= r0 && r0 < r1 && r1 <= X.dim(0),
                  "slice_rows: bad row range");
  Tensor<S> y({r1 - r0, X.dim(1)});
  y.mat() = X.mat().middleRows(r0, r1 - r0);
  return g.node(std::move(y), {x}, [x, r0, r1](Graph<S>& g2, Var self) {
    if (g2.needs_grad(x)) g2.grad(x).mat().middleRows(r0, r1 - r0) += g2.grad(self).mat();
  });
}

template <typename S>
Var slice_cols(Graph<S>& g, Var x, std::int64_t c0, std::int64_t c1) {
  const Tensor<S>& X = g.val(x);
  detail::require(X.rank() == 2 && 0 <= c0 && c0 < c1 && c1 <= X.dim(1),
                  "slice_cols: bad column range");
  Tensor<S> y({X.dim(0), c1 - c0});
  y.mat() = X.mat().middleCols(c0, c1 - c0);
  return g.node(std::move(y), {x}, [x, c0, c1](Graph<S>& g2, Var self) {
    if (g2.needs_grad(x)) g2.grad(x).mat().middleCols(c0, c1 - c0) += g2.grad(self).mat();
  });
}

// Keeps the first n elements of a rank-1 tensor.
template <typename S>
Var slice_prefix(Graph<S>& g, Var x, std::int64_t n) {
  const Tensor<S>& X = g.val(x);
  detail::require(X.rank() == 1 && 0 < n && n <= X.numel(), "slice_prefix: bad length");
  Tensor<S> y({n});
  std::copy(X.data(), X.data() + n, y.data());
  return g.node(std::move(y), {x}, [x, n](Graph<S>& g2, Var self) {
    if (!g2.needs_grad(x)) return;
    const Tensor<S>& G = g2.grad(self);
    Tensor<S>& dx = g2.grad(x);
    for (std::int64_t i = 0; i < n; ++i) dx[i] += G[i];
  });
}

// Zero-pads frames on the right: [C, T] -> [C, T + pad].
template <typename S>
Var pad_cols(Graph<S>& g, Var x, std::int64_t pad) {
  const Tensor<S>& X = g.val(x);
  detail::require(X.rank() == 2 && pad >= 0, "pad_cols: bad padding");
  if (pad == 0) return x;
  Tensor<S> y({X.dim(0), X.dim(1) + pad});
  y.mat().leftCols(X.dim(1)) = X.mat();
  const std::int64_t T = X.dim(1);
  return g.node(std::move(y), {x}, [x, T](Graph<S>& g2, Var self) {
    if (g2.needs_grad(x)) g2.grad(x).mat() += g2.grad(self).mat().leftCols(T);
  });
}

// Stacks [C_i, T] maps along the channel axis.
template <typename S>
Var concat_rows(Graph<S>& g, const std::vector<Var>& parts) {
  detail::require(!parts.empty(), "concat_rows: no inputs");
  const std::int64_t T = g.val(parts[0]).dim(1);
  std::int64_t C = 0;
  for (Var p : parts) {
    const Tensor<S>& P = g.val(p);
    detail::require(P.rank() == 2 && P.dim(1) == T, "concat_rows: frame count mismatch");
    C += P.dim(0);
  }
  Tensor<S> y({C, T});
  std::vector<std::int64_t> offsets;
  std::int64_t r = 0;
  for (Var p : parts) {
    const Tensor<S>& P = g.val(p);
    y.mat().middleRows(r, P.dim(0)) = P.mat();
    offsets.push_back(r);
    r += P.dim(0);
  }
  return g.node(std::move(y), parts,
                [parts, offsets = std::move(offsets)](Graph<S>& g2, Var self) {
                  const Tensor<S>& G = g2.grad(self);
                  for (std::size_t i = 0; i < parts.size(); ++i) {
                    if (!g2.needs_grad(parts[i])) continue;
                    Tensor<S>& dp = g2.grad(parts[i]);
                    dp.mat() += G.mat().middleRows(offsets[i], dp.dim(0));
                  }
                });
}

// ---------------------------------------------------------------------------
// Regularization.
// ---------------------------------------------------------------------------

// Inverted dropout; identity in inference mode or when p == 0.
template <typename S>
Var dropout(Graph<S>& g, Var x, double p) {
  if (!g.training() || p <= 0.0) return x;
  detail::require(p < 1.0, "dropout: rate must be below 1");
  const Tensor<S>& X = g.val(x);
  const S keep_inv = static_cast<S>(1.0 / (1.0 - p));
  Tensor<S> mask(X.shape());
  Tensor<S> y(X.shape());
  for (std::int64_t i = 0; i < X.numel(); ++i) {
    const S m = g.rng().uniform() < p ? S(0) : keep_inv;
    mask[i] = m;
    y[i] = X[i] * m;
  }
  return g.node(std::move(y), {x}, [x, mask = std::move(mask)](Graph<S>& g2, Var self) {
    if (!g2.needs_grad(x)) return;
    const Tensor<S>& G = g2.grad(self);
    Tensor<S>& dx = g2.grad(x);
    for (std::int64_t i = 0; i < G.numel(); ++i) dx[i] += G[i] * mask[i];
  });
}

}  // namespace sepkit::ops
